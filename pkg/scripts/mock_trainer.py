#!/usr/bin/env python3
"""Reference trainer adapter: a model that memorizes its training labels.

The model artifact is JSON, {"memory": {"<dataset>/<frame_id>": [[x, y, score], ...]}}.
Fine-tuning starts from the init model's memory; training from scratch
starts empty. mock_detector.py replays the memory.

Usage:
    python scripts/mock_trainer.py INVOCATION [--exit-code N] [--sleep S] [--no-model]
"""
import argparse
import json
import sys
import time
from pathlib import Path

ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(ROOT))

from src.dataio import atomic_write_json, read_label_set


def main(argv=None):
    parser = argparse.ArgumentParser(description="Memorizing trainer for tests")
    parser.add_argument("invocation")
    parser.add_argument("--exit-code", type=int, default=0)
    parser.add_argument("--sleep", type=float, default=0.0)
    parser.add_argument("--no-model", action="store_true", help="exit 0 without writing a model")
    args = parser.parse_args(argv)

    with open(args.invocation) as f:
        inv = json.load(f)
    if args.sleep:
        time.sleep(args.sleep)
    if args.exit_code:
        print(f"[TRAIN] failing on purpose with status {args.exit_code}", file=sys.stderr)
        return args.exit_code
    if args.no_model:
        return 0

    memory = {}
    if inv["mode"] == "FT":
        with open(inv["init_model"]) as f:
            memory = json.load(f).get("memory", {})

    with open(inv["training_manifest"]) as f:
        manifest = json.load(f)
    label_sets = {}
    for entry in manifest["entries"]:
        ref = entry["labels"]["label_set"]
        if ref not in label_sets:
            label_sets[ref] = read_label_set(ref)
        dets = label_sets[ref].frames[entry["frame_id"]]
        memory[f"{entry['dataset']}/{entry['frame_id']}"] = [
            [d.location.x, d.location.y, d.score] for d in dets.detections
        ]

    atomic_write_json(inv["model_out"], {"memory": memory})
    print(f"[TRAIN] memorized {len(manifest['entries'])} frames ({len(memory)} total)", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
