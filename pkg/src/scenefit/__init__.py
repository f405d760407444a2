"""Single-image indoor scene reconstruction by fitting generated assets to a
geometry estimate with a differentiable silhouette renderer.

The public surface is organized by module: :mod:`scenefit.geometry` (core
types), :mod:`scenefit.raster`, :mod:`scenefit.losses`, :mod:`scenefit.scene`,
:mod:`scenefit.pose`, :mod:`scenefit.metrics`, :mod:`scenefit.aq`,
:mod:`scenefit.services`, :mod:`scenefit.pipeline` and :mod:`scenefit.cli`.
"""

from .errors import NumericalError, SceneFitError, ValidationError
from .geometry import (
    Aabb,
    BinaryMask,
    Camera,
    Obb,
    OrganizedPointMap,
    PointCloud,
    RigidTransform,
    TriMesh,
)
from .pose import ModelVariant, OptimizerConfig, PoseParams4, PoseParams5, fit_pose

__version__ = "0.1.0"

__all__ = [
    "Aabb", "BinaryMask", "Camera", "ModelVariant", "NumericalError", "Obb", "OptimizerConfig",
    "OrganizedPointMap", "PointCloud", "PoseParams4", "PoseParams5", "RigidTransform",
    "SceneFitError", "TriMesh", "ValidationError", "fit_pose",
]
