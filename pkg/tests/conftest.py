import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from scenefit import pose as _pose  # noqa: E402

# Every Planar4 fit run anywhere in the session records its per-iteration
# plane-local minimum Y here, so the ground guarantee can be checked globally.
PLANAR_MIN_Y: list[float] = []

_orig_fit_once = _pose._fit_once


def _recording_fit_once(model, start, obj, scene, cfg):
    res = _orig_fit_once(model, start, obj, scene, cfg)
    if model.variant is _pose.ModelVariant.PLANAR4:
        PLANAR_MIN_Y.extend(res.min_plane_y)
    return res


_pose._fit_once = _recording_fit_once


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def room():
    from scenefit import synth

    fx = synth.load_fixture()
    return fx, synth.render_fixture(fx)
