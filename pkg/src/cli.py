"""Command-line entry point.

Subcommands:
    gen-labels   detections JSON-lines -> Gaussian label rasters + label manifest
    extract      label/heatmap rasters -> detections JSON-lines
    evaluate     detections vs annotations -> MODA / MODP / precision / recall
    project      ground-plane detections -> pixel coordinates for one camera
    simulate     seeded synthetic scene + noisy detector
    orchestrate  run a multi-round labeling campaign

Exit codes: 0 ok, 1 usage/config, 2 parse/input data, 3 adapter, 4 internal.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

from .config import GlobalConfig, load_config
from .dataio import (
    AnnotationFormat,
    Split,
    atomic_write_json,
    atomic_write_text,
    format_frame,
    load_manifest,
    parse_annotations,
    read_detections,
    read_heatmap,
    safe_name,
    write_annotations,
    write_detections,
    write_heatmap,
)
from .errors import AdapterFailure, BehindCameraError, MvlabelError, UsageError
from .geometry import WorldPoint, in_frame, load_calibration, project_to_image
from .heatmap import extract_locations, label_pipeline
from .metrics import evaluate, pair_frames
from .orchestrator import load_campaign, render_summary, run_campaign
from .simulator import CountMode, NoiseModel, SceneParams, gen_scene, simulate_detector

logger = logging.getLogger(__name__)

LOG_FORMAT = "[%(levelname)s] %(message)s"


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit 1 through the error hierarchy instead of argparse's 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _grid_arg(value: str):
    value = value.strip()
    if value.startswith("{"):
        try:
            return json.loads(value)
        except json.JSONDecodeError as e:
            raise UsageError(f"--grid: not a JSON object: {e}") from e
    return value


def _common_options() -> argparse.ArgumentParser:
    common = ArgumentParser(add_help=False)
    g = common.add_argument_group("settings (override the config file)")
    g.add_argument("--config", type=Path, help="settings file (YAML or JSON); campaign file for orchestrate")
    g.add_argument("--grid", type=_grid_arg, help="preset name or inline JSON grid spec")
    g.add_argument("--cell-size", dest="cell_size", type=float)
    g.add_argument("--kernel-size", dest="kernel_size", type=int)
    g.add_argument("--sigma", type=float, help="kernel sigma in cells")
    g.add_argument("--min-prob", dest="min_prob", type=float)
    g.add_argument("--nms-radius", dest="nms_radius", type=float, help="metres")
    g.add_argument("--match-radius", dest="match_radius", type=float, help="metres")
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int)
    g.add_argument("--log-level", dest="log_level")
    g.add_argument("--out", type=Path, help="output file or directory")
    return common


OVERRIDE_KEYS = (
    "grid", "cell_size", "kernel_size", "sigma", "min_prob", "nms_radius",
    "match_radius", "seed", "workers", "log_level",
)


def _emit(text: str, out: Optional[Path]):
    if out is None:
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        atomic_write_text(out, text)


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_labels(args, cfg: GlobalConfig) -> int:
    out = args.out or Path("labels")
    grid = cfg.ground_grid()
    kernel = cfg.kernel()
    frames = read_detections(args.detections)
    logger.info("[LABELS] %d frames from %s", len(frames), args.detections)

    def one(dets):
        h = label_pipeline(dets, grid, kernel, cfg.policy)
        rel = f"heatmaps/{safe_name(dets.frame_id)}.mvhm"
        write_heatmap(out / rel, h)
        return {"frame_id": dets.frame_id, "detections": len(dets), "heatmap": rel}

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        entries = list(pool.map(one, frames))

    atomic_write_json(out / "label_manifest.json", {
        "grid": grid.to_dict(),
        "kernel": {"size": kernel.size, "sigma": kernel.sigma, "normalization": kernel.normalization.value},
        "frames": entries,
    })
    logger.info("[LABELS] wrote %d rasters under %s", len(entries), out)
    return 0


def _raster_paths(inputs) -> list[Path]:
    paths = []
    for p in map(Path, inputs):
        if p.is_dir():
            paths.extend(sorted(p.rglob("*.mvhm")))
        else:
            paths.append(p)
    return paths


def cmd_extract(args, cfg: GlobalConfig) -> int:
    paths = _raster_paths(args.rasters)

    def one(path: Path):
        h = read_heatmap(path)
        return extract_locations(h, cfg.min_prob, cfg.nms_radius, cfg.candidate_mode,
                                 frame_id=h.frame_id or path.stem)

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        frames = list(pool.map(one, paths))
    logger.info("[EXTRACT] %d rasters, %d detections", len(frames), sum(len(f) for f in frames))
    if args.out is not None:
        write_detections(args.out, frames)
    else:
        _emit("".join(format_frame(f) + "\n" for f in frames), None)
    return 0


def cmd_evaluate(args, cfg: GlobalConfig) -> int:
    detections = read_detections(args.detections)
    annotations = [a.gts for a in parse_annotations(args.annotations, args.annotation_format)]

    frame_ids = None
    if args.split:
        if not args.manifest:
            raise UsageError("--split needs --manifest")
        manifest = load_manifest(args.manifest, cfg.data_root)
        frame_ids = [f.frame_id for f in manifest.frames_in(Split(args.split))]

    report = evaluate(pair_frames(detections, annotations, frame_ids), cfg.match_radius, cfg.workers)
    if args.format == "json":
        doc = report.to_dict(per_frame=args.per_frame)
        doc["match_radius"] = cfg.match_radius
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    elif args.format == "csv":
        text = report.to_csv()
    else:
        text = report.render() + "\n"
    _emit(text, args.out)
    return 0


def cmd_project(args, cfg: GlobalConfig) -> int:
    calib = load_calibration(args.calibration, args.camera)
    lines = []
    for frame in read_detections(args.detections):
        points = []
        for det in frame.detections:
            rec = {"x": det.location.x, "y": det.location.y}
            try:
                uv = project_to_image(WorldPoint(det.location.x, det.location.y), calib)
                rec.update(u=uv[0], v=uv[1], in_frame=in_frame(uv, calib), behind_camera=False)
            except BehindCameraError:
                rec.update(u=None, v=None, in_frame=False, behind_camera=True)
            points.append(rec)
        lines.append(json.dumps({"frame_id": frame.frame_id, "camera": calib.camera_id, "points": points}) + "\n")
    _emit("".join(lines), args.out)
    return 0


def cmd_simulate(args, cfg: GlobalConfig) -> int:
    out = args.out or Path("sim")
    params = SceneParams(
        grid=cfg.ground_grid(),
        n_frames=args.frames,
        mean_people=args.people,
        min_separation=args.min_separation,
        seed=cfg.seed,
        count_mode=CountMode.FIXED if args.fixed_count else CountMode.POISSON,
    )
    noise = NoiseModel(args.p_miss, args.fp_per_frame, args.loc_sigma, args.score_low, args.score_high)
    detector_seed = args.detector_seed if args.detector_seed is not None else cfg.seed + 1

    frames = gen_scene(params)
    detections = simulate_detector(frames, noise, detector_seed, params.grid)
    write_annotations(out / "annotations.jsonl", frames)
    write_detections(out / "detections.jsonl", detections)
    atomic_write_json(out / "params.json", {
        "scene": params.to_dict(),
        "noise": noise.to_dict(),
        "detector_seed": detector_seed,
    })
    logger.info("[SIMULATE] %d frames, %d people, %d detections -> %s", len(frames),
                sum(len(f.gts) for f in frames), sum(len(d) for d in detections), out)
    return 0


def cmd_orchestrate(args, cfg: GlobalConfig) -> int:
    if args.config is None:
        raise UsageError("orchestrate needs --config CAMPAIGN")
    campaign = load_campaign(args.config, cfg, args.out)
    results = run_campaign(campaign, resume=args.resume)
    sys.stdout.write(render_summary(results))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> ArgumentParser:
    common = _common_options()
    parser = ArgumentParser(prog="mvlabel", description="Multi-view pedestrian label toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-labels", parents=[common], help="detections -> label rasters")
    p.add_argument("detections", type=Path)
    p.set_defaults(func=cmd_gen_labels)

    p = sub.add_parser("extract", parents=[common], help="rasters -> detections")
    p.add_argument("rasters", nargs="+", help="MVHM files or directories")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("evaluate", parents=[common], help="score detections against ground truth")
    p.add_argument("detections", type=Path)
    p.add_argument("annotations", type=Path)
    p.add_argument("--annotation-format", dest="annotation_format",
                   choices=[f.value for f in AnnotationFormat], default=AnnotationFormat.CANONICAL.value)
    p.add_argument("--manifest", type=Path, help="dataset manifest holding the split")
    p.add_argument("--split", choices=[s.value for s in Split])
    p.add_argument("--format", choices=["json", "csv", "table"], default="json")
    p.add_argument("--per-frame", dest="per_frame", action=argparse.BooleanOptionalAction, default=True,
                   help="include per-frame rows in the JSON report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("project", parents=[common], help="world -> pixel coordinates")
    p.add_argument("detections", type=Path)
    p.add_argument("calibration", type=Path)
    p.add_argument("--camera", help="camera id inside a multi-camera calibration file")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("simulate", parents=[common], help="synthetic scene + noisy detections")
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--people", type=float, default=10.0, help="mean people per frame")
    p.add_argument("--fixed-count", dest="fixed_count", action="store_true")
    p.add_argument("--min-separation", dest="min_separation", type=float, default=0.0)
    p.add_argument("--p-miss", dest="p_miss", type=float, default=0.0)
    p.add_argument("--fp-per-frame", dest="fp_per_frame", type=float, default=0.0)
    p.add_argument("--loc-sigma", dest="loc_sigma", type=float, default=0.0)
    p.add_argument("--score-low", dest="score_low", type=float, default=1.0)
    p.add_argument("--score-high", dest="score_high", type=float, default=1.0)
    p.add_argument("--detector-seed", dest="detector_seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("orchestrate", parents=[common], help="run a labeling campaign")
    p.add_argument("--resume", action="store_true", help="reuse completed steps in the campaign directory")
    p.set_defaults(func=cmd_orchestrate)

    return parser


def _setup_logging(level: str):
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT, stream=sys.stderr, force=True)


def main(argv: Optional[list[str]] = None) -> int:
    _setup_logging("INFO")
    try:
        args = build_parser().parse_args(argv)
        overrides = {k: getattr(args, k, None) for k in OVERRIDE_KEYS}
        if args.command == "orchestrate":
            cfg = load_config(args.config, overrides, section="settings")
        else:
            cfg = load_config(args.config, overrides)
        _setup_logging(cfg.log_level)
        return args.func(args, cfg)
    except SystemExit as e:
        return int(e.code or 0)
    except AdapterFailure as e:
        logger.error("%s", e)
        if e.diagnostics:
            logger.error("adapter stderr (tail):\n%s", e.diagnostics)
        return e.exit_code
    except MvlabelError as e:
        logger.error("%s", e)
        return e.exit_code
    except Exception:
        logger.exception("internal error")
        return 4
