#!/usr/bin/env python3
"""Command-line entry point.

Usage:
    python mvlabel.py gen-labels detections.jsonl --out labels/
    python mvlabel.py extract labels/heatmaps --out extracted.jsonl
    python mvlabel.py evaluate detections.jsonl annotations.jsonl --format table
    python mvlabel.py project detections.jsonl calibration.json --camera C1
    python mvlabel.py simulate --frames 400 --people 10 --fixed-count --p-miss 0.2 --fp-per-frame 1 --out sim/
    python mvlabel.py orchestrate --config config/campaigns/multi_round.yaml [--resume]
"""
import sys
from pathlib import Path

ROOT = Path(__file__).parent
sys.path.insert(0, str(ROOT))

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
