"""
Occupancy maps, Gaussian label synthesis and peak extraction.

Labels are built in two steps: a binary occupancy map marks every cell that
holds a pedestrian, then the map is convolved with a Gaussian kernel. Peak
extraction goes the other way: threshold, then greedy world-space NMS.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.ndimage import maximum_filter

from .errors import (
    DuplicateDetectionError,
    InvalidKernelSpecError,
    OutOfBoundsError,
    PreconditionError,
)
from .geometry import GroundGrid, WorldPoint

logger = logging.getLogger(__name__)

# distance ties at exactly the NMS radius count as "within"
_DIST_EPS = 1e-9


class KernelNorm(str, Enum):
    PEAK_ONE = "peak"
    LITERAL_PDF = "pdf"


class CandidateMode(str, Enum):
    LOCAL_MAXIMA = "local_maxima"
    ALL_CELLS = "all_cells"


class OutOfBoundsPolicy(str, Enum):
    REJECT = "reject"
    DROP = "drop"


@dataclass(frozen=True)
class Detection:
    location: WorldPoint
    score: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")

    @classmethod
    def at(cls, x: float, y: float, score: float = 1.0) -> "Detection":
        return cls(WorldPoint(float(x), float(y)), float(score))


@dataclass(frozen=True)
class DetectionSet:
    frame_id: str
    detections: tuple[Detection, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.frame_id:
            raise ValueError("frame_id must be non-empty")
        dets = tuple(self.detections)
        object.__setattr__(self, "detections", dets)
        seen = set()
        for det in dets:
            key = (det.location.x, det.location.y)
            if key in seen:
                raise DuplicateDetectionError(
                    f"frame '{self.frame_id}' has two detections at ({key[0]}, {key[1]})"
                )
            seen.add(key)

    @classmethod
    def from_points(cls, frame_id: str, points: Iterable[Sequence[float]]) -> "DetectionSet":
        """Points are (x, y) or (x, y, score)."""
        dets = []
        for p in points:
            score = float(p[2]) if len(p) > 2 else 1.0
            dets.append(Detection.at(p[0], p[1], score))
        return cls(frame_id, tuple(dets))

    def __len__(self) -> int:
        return len(self.detections)

    def xy(self) -> np.ndarray:
        if not self.detections:
            return np.zeros((0, 2), dtype=np.float64)
        return np.array([[d.location.x, d.location.y] for d in self.detections], dtype=np.float64)

    def scores(self) -> np.ndarray:
        return np.array([d.score for d in self.detections], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Heatmap:
    grid: GroundGrid
    values: np.ndarray
    frame_id: Optional[str] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(self.grid.shape)
        if not np.all(np.isfinite(values)):
            raise ValueError("heatmap values must be finite")
        if np.any(values < 0):
            raise ValueError("heatmap values must be non-negative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, grid: GroundGrid, frame_id: Optional[str] = None) -> "Heatmap":
        return cls(grid, np.zeros(grid.shape), frame_id)


@dataclass(frozen=True, eq=False)
class GaussianKernel:
    size: int
    sigma: float
    normalization: KernelNorm
    values: np.ndarray

    @property
    def radius(self) -> int:
        return self.size // 2


def gaussian_kernel(size: int = 41, sigma: float = 5.0,
                    mode: KernelNorm = KernelNorm.PEAK_ONE) -> GaussianKernel:
    """Square Gaussian kernel; `size` and `sigma` are in grid cells."""
    if not isinstance(size, (int, np.integer)) or size <= 0 or size % 2 == 0:
        raise InvalidKernelSpecError(f"kernel size must be a positive odd integer, got {size}")
    if not sigma > 0:
        raise InvalidKernelSpecError(f"sigma must be > 0, got {sigma}")
    mode = KernelNorm(mode)

    r = size // 2
    y, x = np.ogrid[-r:r + 1, -r:r + 1]
    shape = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    if mode == KernelNorm.LITERAL_PDF:
        values = shape / (2.0 * math.pi * sigma * sigma)
    else:
        values = shape  # exp(0) == 1.0 at the center
    values.setflags(write=False)
    return GaussianKernel(int(size), float(sigma), mode, values)


def rasterize(dets: DetectionSet, grid: GroundGrid,
              policy: OutOfBoundsPolicy = OutOfBoundsPolicy.REJECT) -> Heatmap:
    """Binary occupancy map: 1 in every cell holding at least one detection."""
    occ = np.zeros(grid.shape, dtype=np.float64)
    if len(dets) == 0:
        return Heatmap(grid, occ, dets.frame_id)

    rows, cols, inside = grid.cells_of(dets.xy())
    if not np.all(inside):
        offending = [dets.detections[i] for i in np.flatnonzero(~inside)]
        if OutOfBoundsPolicy(policy) == OutOfBoundsPolicy.REJECT:
            raise OutOfBoundsError(
                f"frame '{dets.frame_id}': {len(offending)} detection(s) outside the area of interest",
                offending,
            )
        logger.debug("frame %s: dropped %d out-of-bounds detection(s)", dets.frame_id, len(offending))
    occ[rows[inside], cols[inside]] = 1.0
    return Heatmap(grid, occ, dets.frame_id)


def make_labels(occupancy: Heatmap, kernel: GaussianKernel) -> Heatmap:
    """Zero-padded, same-size convolution of the occupancy map with the kernel.

    The kernel is pasted (scaled by the cell value) at every non-zero cell and
    clipped at the borders, which equals the dense convolution exactly.
    """
    grid = occupancy.grid
    height, width = grid.shape
    r = kernel.radius
    out = np.zeros(grid.shape, dtype=np.float64)

    rows, cols = np.nonzero(occupancy.values)
    for row, col in zip(rows.tolist(), cols.tolist()):
        weight = occupancy.values[row, col]
        top, bottom = max(row - r, 0), min(row + r + 1, height)
        left, right = max(col - r, 0), min(col + r + 1, width)
        patch = kernel.values[top - (row - r):bottom - (row - r), left - (col - r):right - (col - r)]
        out[top:bottom, left:right] += weight * patch

    return Heatmap(grid, out, occupancy.frame_id)


def extract_locations(
    h: Heatmap,
    min_prob: float = 0.4,
    nms_radius: float = 0.5,
    candidates: CandidateMode = CandidateMode.LOCAL_MAXIMA,
    frame_id: Optional[str] = None,
) -> DetectionSet:
    """Threshold the heatmap and run greedy NMS in world coordinates.

    Candidates are visited by descending value, ties in row-major order; a
    candidate is kept only if it is farther than `nms_radius` metres from
    every candidate kept before it.
    """
    if not (0.0 < min_prob <= 1.0):
        raise PreconditionError(f"min_prob must be in (0, 1], got {min_prob}")
    if not nms_radius > 0:
        raise PreconditionError(f"nms_radius must be > 0, got {nms_radius}")
    frame_id = frame_id or h.frame_id or "frame"

    values = h.values
    mask = values >= min_prob
    if CandidateMode(candidates) == CandidateMode.LOCAL_MAXIMA:
        peaks = maximum_filter(values, size=3, mode="constant", cval=0.0)
        mask &= values >= peaks

    rows, cols = np.nonzero(mask)  # row-major
    if rows.size == 0:
        return DetectionSet(frame_id)
    scores = values[rows, cols]
    order = np.argsort(-scores, kind="stable")
    rows, cols, scores = rows[order], cols[order], scores[order]
    xy = h.grid.centers(rows, cols)

    alive = np.ones(len(scores), dtype=bool)
    keep = []
    for i in range(len(scores)):
        if not alive[i]:
            continue
        keep.append(i)
        dist = np.hypot(xy[i + 1:, 0] - xy[i, 0], xy[i + 1:, 1] - xy[i, 1])
        alive[i + 1:] &= dist > nms_radius + _DIST_EPS

    return DetectionSet(
        frame_id,
        tuple(Detection.at(xy[i, 0], xy[i, 1], min(float(scores[i]), 1.0)) for i in keep),
    )


def label_pipeline(dets: DetectionSet, grid: GroundGrid, kernel: GaussianKernel,
                   policy: OutOfBoundsPolicy = OutOfBoundsPolicy.REJECT) -> Heatmap:
    return make_labels(rasterize(dets, grid, policy), kernel)
