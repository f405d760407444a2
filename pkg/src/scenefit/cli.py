"""Command-line entry point: ``scenefit <command> ...``.

Exit codes: 0 success, 2 validation or usage error, 3 numerical failure,
1 anything else. Logs go to stderr; results go to files only.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import io
from .aq import AqLayout, Rect, build_aq_query, parse_aq_response
from .config import deep_merge, load_scene_config, metric_config, ransac_config
from .errors import NumericalError, SceneFitError, ValidationError
from .metrics import NORMALIZATIONS, evaluate_scene
from .raster import SoftRasterConfig, render_hard_silhouette, render_soft_silhouette
from .scene import ransac_plane, stencil_pointmap

logger = logging.getLogger("scenefit")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(2)


def _overrides(args) -> dict:
    out = {}
    if args.config:
        try:
            out = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ValidationError(f"--config: cannot read {args.config}: {e}") from None
    if args.seed is not None:
        out["seed"] = args.seed
    if args.threads is not None:
        out["threads"] = args.threads
    return out


def _layout(path) -> AqLayout:
    if not path:
        return AqLayout()
    d = json.loads(Path(path).read_text())
    for k in ("panel_context", "panel_task"):
        if k in d:
            d[k] = Rect(*d[k])
    for k in ("canvas", "outline_color", "label_context", "label_task", "label_text"):
        if k in d:
            d[k] = tuple(d[k])
    try:
        return AqLayout(**d)
    except TypeError as e:
        raise ValidationError(f"bad layout file: {e}") from None


# ---------------------------------------------------------------- commands


def cmd_fit(args) -> int:
    from .pipeline import run_fit

    ov = _overrides(args)
    if args.out:
        ov["output_dir"] = str(Path(args.out).resolve())
    cfg = load_scene_config(args.scene, ov, require=("pointmap", "objects"))
    result = run_fit(cfg)
    logger.info("fit finished: %s (%d objects) -> %s", result.status, len(result.objects),
                cfg.output_dir / "scene.json")
    return 0 if result.status in ("ok", "explicit_empty") else 3


def _meshes_in(d: str, flag: str):
    p = Path(d)
    if not p.is_dir():
        raise ValidationError(f"{flag}: not a directory: {d}")
    files = sorted(p.glob("*.obj"))
    if not files:
        raise ValidationError(f"{flag}: no .obj files in {d}")
    return [io.load_obj(f) for f in files]


def cmd_evaluate(args) -> int:
    ov = _overrides(args)
    block = dict(ov.get("metric", {}))
    if args.samples:
        block["samples_per_scene"] = args.samples
    if args.tau:
        block["fscore_tau"] = args.tau
    if args.normalization:
        block["normalization"] = args.normalization
    # swapping --pred and --gt must not change chamfer or hausdorff
    block.setdefault("normalization", "joint")
    cfg = metric_config(block, ov.get("seed"))
    report = evaluate_scene(_meshes_in(args.pred, "--pred"), _meshes_in(args.gt, "--gt"), cfg)
    io.write_json(args.out, report.to_json())
    logger.info("chamfer=%.6g f=%.4f iou=%.4f hausdorff=%.6g", report.chamfer, report.fscore,
                report.bbox_iou, report.hausdorff)
    return 0


def cmd_stencil(args) -> int:
    pm = io.load_pmap(args.pointmap)
    cloud = stencil_pointmap(pm, io.load_mask(args.mask), args.min_confidence)
    io.save_ply(args.out, cloud, binary=not args.ascii)
    logger.info("stenciled %d points", len(cloud))
    return 0


def cmd_plane(args) -> int:
    if args.cloud:
        pts = io.load_ply(args.cloud)
    elif args.pointmap and args.mask:
        pts = stencil_pointmap(io.load_pmap(args.pointmap), io.load_mask(args.mask))
    else:
        raise ValidationError("--cloud or both --pointmap and --mask are required")
    ov = _overrides(args)
    plane = ransac_plane(pts, ransac_config(ov.get("ransac"), ov.get("seed")))
    io.write_json(args.out, {"normal": plane.n.tolist(), "point": plane.p0.tolist()})
    return 0


def cmd_render_sil(args) -> int:
    from .synth import camera_from_dict

    mesh = io.load_obj(args.mesh)
    cam = camera_from_dict(io.read_json(args.camera))
    if args.hard:
        io.save_mask(args.out, render_hard_silhouette(mesh, cam))
    else:
        pm = render_soft_silhouette(mesh, cam, SoftRasterConfig(sigma=args.sigma))
        io.save_probmap(args.out, pm.values)
    return 0


def cmd_aq_build(args) -> int:
    q = build_aq_query(io.load_rgb(args.image), io.load_mask(args.mask), _layout(args.layout))
    io.save_rgb(args.out, q)
    return 0


def cmd_aq_parse(args) -> int:
    r = parse_aq_response(io.load_rgb(args.response), _layout(args.layout), cleanup=args.cleanup)
    if r.empty:
        logger.warning("task panel is %.1f%% white; the completion looks empty", 100 * r.white_fraction)
    io.save_rgb(args.out, r.image)
    return 0


def cmd_pipeline_run(args) -> int:
    from .pipeline import run_pipeline
    from .services import build_suite
    from .synth import load_fixture

    ov = _overrides(args)
    if args.out:
        ov["output_dir"] = str(Path(args.out).resolve())
    if args.disable_planar:
        ov["disable_planar"] = True
    if args.disable_aq:
        ov["disable_aq"] = True
    cfg = load_scene_config(args.config_file, ov, require=("image",))
    services = dict(cfg.services)
    fixture_path = services.pop("fixture", None)
    suite = build_suite(services, load_fixture(fixture_path))
    run = run_pipeline(cfg, suite)
    logger.info("pipeline %s: %d objects, %d stages cached, %d stages run, %d service calls",
                run.result.status, len(run.result.objects), len(run.cache_hits),
                len(run.stages_run), suite.total_calls)
    for o in sorted(run.result.objects, key=lambda o: o.id):
        logger.info("  %-16s %-12s %s", o.id, o.status, o.variant or "-")
    return 0


def cmd_synth_gen(args) -> int:
    from . import synth

    fixture_src = Path(args.fixture) if args.fixture else None
    fx = synth.load_fixture(fixture_src)
    raw = json.loads(fixture_src.read_text()) if fixture_src else json.loads(
        synth.resources.files("scenefit.data").joinpath("fixture_room.json").read_text())
    out = Path(args.out)
    rs = synth.render_fixture(fx)
    io.save_rgb(out / "image.png", rs.image)
    io.save_rgb(out / "background.png", rs.background)
    io.save_pmap(out / "scene.pmap", rs.pointmap)
    io.save_pmap(out / "background.pmap", rs.background_pointmap)
    cam = synth.camera_to_dict(fx.camera)
    io.write_json(out / "camera.json", cam)
    io.write_json(out / "fixture.json", raw)
    objects = []
    for oid, mask in synth.gt_masks(fx).items():
        o = fx.object(oid)
        io.save_mask(out / "masks" / f"{oid}.png", mask)
        io.save_obj(out / "assets" / f"{oid}.obj", o.asset)
        io.save_obj(out / "gt" / f"{oid}.obj", o.gt_mesh())
        objects.append({"id": oid, "mask": f"masks/{oid}.png", "asset": f"assets/{oid}.obj"})
    io.save_mask(out / "masks" / "floor.png", synth.visible_mask(rs.ids, synth.FLOOR_ID))
    io.write_json(out / "gt_poses.json", {o.id: o.gt_pose() for o in fx.objects})
    hints = raw.get("fit", {})
    io.write_json(out / "scene.json", deep_merge({
        "image": "image.png", "objects": objects, "floor_mask": "masks/floor.png",
        "pointmap": "scene.pmap", "background_pointmap": "background.pmap", "camera": cam,
        "output_dir": "fit_out", "seed": 0,
    }, hints))
    io.write_json(out / "pipeline.json", deep_merge({
        "image": "image.png", "services": {"fixture": "fixture.json"}, "gt_dir": "gt",
        "output_dir": "pipeline_out", "seed": 0,
    }, hints))
    logger.info("wrote synthetic room with %d objects to %s", len(fx.objects), out)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scenefit", description="Single-image scene fitting toolkit.")
    p.add_argument("--seed", type=int, default=None, help="override every configured seed")
    p.add_argument("--threads", type=int, default=None, help="worker count for per-object stages")
    p.add_argument("--config", default=None, help="JSON file merged over the command's config")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("fit", help="fit assets to a point map given masks")
    s.add_argument("scene", help="scene config JSON")
    s.add_argument("--out", help="output directory (overrides the config)")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("evaluate", help="score predicted meshes against ground truth")
    s.add_argument("--pred", required=True, help="directory of predicted .obj meshes")
    s.add_argument("--gt", required=True, help="directory of ground-truth .obj meshes")
    s.add_argument("--out", default="report.json")
    s.add_argument("--samples", type=int, default=None)
    s.add_argument("--tau", type=float, default=None)
    s.add_argument("--normalization", choices=NORMALIZATIONS, default=None,
                   help="shared normalization of both scenes (default: joint, which is swap-symmetric)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("stencil", help="select point-map points inside a mask")
    s.add_argument("--pointmap", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--min-confidence", type=float, default=0.0)
    s.add_argument("--ascii", action="store_true")
    s.set_defaults(func=cmd_stencil)

    s = sub.add_parser("plane", help="RANSAC floor plane")
    s.add_argument("--cloud")
    s.add_argument("--pointmap")
    s.add_argument("--mask")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plane)

    s = sub.add_parser("render-sil", help="render a mesh silhouette")
    s.add_argument("--mesh", required=True)
    s.add_argument("--camera", required=True, help="camera JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--sigma", type=float, default=SoftRasterConfig().sigma)
    s.add_argument("--hard", action="store_true")
    s.set_defaults(func=cmd_render_sil)

    s = sub.add_parser("aq-build", help="compose an Application-Querying canvas")
    s.add_argument("--image", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--layout")
    s.set_defaults(func=cmd_aq_build)

    s = sub.add_parser("aq-parse", help="crop the task panel out of an editor response")
    s.add_argument("--response", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--layout")
    s.add_argument("--cleanup", action="store_true")
    s.set_defaults(func=cmd_aq_parse)

    s = sub.add_parser("pipeline", help="end-to-end pipeline")
    psub = s.add_subparsers(dest="action", required=True, parser_class=_Parser)
    r = psub.add_parser("run")
    r.add_argument("config_file", help="pipeline config JSON")
    r.add_argument("--out")
    r.add_argument("--disable-planar", action="store_true", help="ablation: Regular5 for every object")
    r.add_argument("--disable-aq", action="store_true", help="ablation: send the plain masked crop")
    r.set_defaults(func=cmd_pipeline_run)

    s = sub.add_parser("synth", help="synthetic fixtures")
    ssub = s.add_subparsers(dest="action", required=True, parser_class=_Parser)
    g = ssub.add_parser("gen")
    g.add_argument("--out", required=True)
    g.add_argument("--fixture", help="fixture JSON (default: bundled room)")
    g.set_defaults(func=cmd_synth_gen)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose + 1, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("PIL").setLevel(max(level, logging.INFO))
    try:
        return args.func(args)
    except ValidationError as e:
        logger.error("%s", e)
        return 2
    except NumericalError as e:
        logger.error("numerical failure: %s", e)
        return 3
    except FileNotFoundError as e:
        logger.error("file not found: %s", e.filename or e)
        return 2
    except SceneFitError as e:
        logger.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
