import json
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(ROOT))

from src.dataio import AnnotationRef, DatasetManifest, FrameRecord, save_manifest, split_dataset, write_annotations
from src.geometry import GroundGrid, WorldPoint
from src.heatmap import DetectionSet
from src.simulator import SceneParams, gen_scene

SCRIPTS = ROOT / "scripts"


@pytest.fixture
def small_grid():
    """8 x 6 m at 0.1 m/cell."""
    return GroundGrid(WorldPoint(0.0, 0.0), 0.1, 80, 60)


@pytest.fixture
def front_camera():
    """fx = fy = 1000, principal point (960, 540), world origin 5 m in front."""
    return {
        "intrinsics": [1000, 0, 960, 0, 1000, 540, 0, 0, 1],
        "rotation": [1, 0, 0, 0, 1, 0, 0, 0, 1],
        "translation": [0, 0, 5],
        "image_size": [1920, 1080],
    }


def centers(grid, cells):
    """World coordinates of cell centers, as (x, y) tuples."""
    rows = np.array([c[0] for c in cells])
    cols = np.array([c[1] for c in cells])
    return [tuple(p) for p in grid.centers(rows, cols).tolist()]


def dets(frame_id, points):
    return DetectionSet.from_points(frame_id, points)


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def make_dataset(directory, name, grid, seed, n_frames=20):
    """Simulated dataset split 80:10:10; returns (manifest path, annotations path)."""
    frames = gen_scene(SceneParams(grid, n_frames, 2.0, min_separation=1.5, seed=seed))
    gt = write_annotations(directory / f"{name}_gt.jsonl", frames)
    manifest = DatasetManifest(
        name, grid,
        frames=tuple(FrameRecord(f.frame_id) for f in frames),
        annotations=AnnotationRef(gt),
    )
    path = save_manifest(directory / f"{name}.json", split_dataset(manifest, (0.8, 0.1, 0.1)))
    return path, gt


def detector_command(*extra):
    return ["{python}", str(SCRIPTS / "mock_detector.py"), "{invocation}", *map(str, extra)]


def trainer_command(*extra):
    return ["{python}", str(SCRIPTS / "mock_trainer.py"), "{invocation}", *map(str, extra)]
