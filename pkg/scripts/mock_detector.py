#!/usr/bin/env python3
"""Reference detector adapter.

Reads an invocation JSON and, for every requested frame, replays the frame's
labels from the model (as written by mock_trainer.py) or, failing that, echoes
the ground truth from --annotations. Optional noise comes from the simulator.

Usage:
    python scripts/mock_detector.py INVOCATION [--annotations FILE] [--emit heatmaps]
    python scripts/mock_detector.py INVOCATION --exit-code 3      # fail
    python scripts/mock_detector.py INVOCATION --sleep 60         # hang
    python scripts/mock_detector.py INVOCATION --garbage          # malformed output
"""
import argparse
import json
import sys
import time
from pathlib import Path

ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(ROOT))

from src.dataio import AnnotatedFrame, parse_annotations, safe_name, write_detections, write_heatmap
from src.geometry import GroundGrid
from src.heatmap import DetectionSet, gaussian_kernel, label_pipeline
from src.simulator import NoiseModel, simulate_detector


def load_model(path):
    if not path:
        return {}
    with open(path) as f:
        return json.load(f).get("memory", {})


def main(argv=None):
    parser = argparse.ArgumentParser(description="Echo/replay detector for tests")
    parser.add_argument("invocation")
    parser.add_argument("--annotations", help="canonical JSON-lines ground truth to echo")
    parser.add_argument("--emit", choices=["detections", "heatmaps"], default="detections")
    parser.add_argument("--p-miss", type=float, default=0.0)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--drop-frame", action="append", default=[])
    parser.add_argument("--exit-code", type=int, default=0)
    parser.add_argument("--sleep", type=float, default=0.0)
    parser.add_argument("--garbage", action="store_true")
    args = parser.parse_args(argv)

    with open(args.invocation) as f:
        inv = json.load(f)
    out = Path(inv["output_dir"])
    out.mkdir(parents=True, exist_ok=True)

    if args.sleep:
        time.sleep(args.sleep)
    if args.exit_code:
        print(f"[DETECT] failing on purpose with status {args.exit_code}", file=sys.stderr)
        return args.exit_code
    if args.garbage:
        (out / "detections.jsonl").write_text("{not json\n")
        return 0

    memory = load_model(inv.get("model"))
    truth = {}
    if args.annotations:
        truth = {a.frame_id: a.gts for a in parse_annotations(args.annotations)}

    frames = []
    for rec in inv["frames"]:
        fid = rec["frame_id"]
        if fid in args.drop_frame:
            continue
        key = f"{inv['dataset']}/{fid}"
        if key in memory:
            dets = DetectionSet.from_points(fid, memory[key])
        else:
            dets = truth.get(fid, DetectionSet(fid))
        frames.append(AnnotatedFrame(fid, dets))

    if args.p_miss > 0:
        results = simulate_detector(frames, NoiseModel(p_miss=args.p_miss), seed=args.seed)
    else:
        results = [f.gts for f in frames]

    if args.emit == "detections":
        write_detections(out / "detections.jsonl", results)
    else:
        grid = GroundGrid.from_dict(inv["grid"])
        kernel = gaussian_kernel()
        for dets in results:
            write_heatmap(out / "heatmaps" / f"{safe_name(dets.frame_id)}.mvhm",
                          label_pipeline(dets, grid, kernel))

    print(f"[DETECT] {len(results)} frames, {sum(len(d) for d in results)} detections", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
