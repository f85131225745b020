"""
Synthetic ground-plane scenes and noisy detectors for oracle-checked tests.

Everything is driven by the portable stream in `rng`, so a (params, seed)
pair always yields the same frames. Stream order per frame: person count,
then positions. For detections: per ground truth a miss coin, then (if kept)
x jitter, y jitter and score; then the false-positive count, then per false
positive x, y and score.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Optional, Sequence

from .errors import ConfigError, InfeasibleSceneError
from .geometry import GroundGrid
from .heatmap import Detection, DetectionSet
from .dataio import AnnotatedFrame
from .rng import Xoshiro256

logger = logging.getLogger(__name__)

HEX_PACKING_DENSITY = 0.9069
MAX_DRAWS_PER_PERSON = 1000


class CountMode(str, Enum):
    POISSON = "poisson"
    FIXED = "fixed"


@dataclass(frozen=True)
class SceneParams:
    grid: GroundGrid
    n_frames: int
    mean_people: float
    min_separation: float = 0.0
    seed: int = 0
    count_mode: CountMode = CountMode.POISSON

    def __post_init__(self):
        if self.n_frames <= 0:
            raise ConfigError(f"n_frames must be positive, got {self.n_frames}")
        if self.mean_people < 0:
            raise ConfigError(f"mean_people must be >= 0, got {self.mean_people}")
        if self.min_separation < 0:
            raise ConfigError(f"min_separation must be >= 0, got {self.min_separation}")
        object.__setattr__(self, "count_mode", CountMode(self.count_mode))
        cap = self.capacity
        if cap is not None and self.mean_people > cap / 2:
            raise InfeasibleSceneError(
                f"{self.mean_people} people per frame cannot keep {self.min_separation} m apart "
                f"in {self.grid.area:g} m^2 (packing bound {cap:.0f})"
            )

    @property
    def capacity(self) -> Optional[float]:
        """Hexagonal packing bound on people per frame, None without a separation."""
        if self.min_separation <= 0:
            return None
        disc = math.pi * (self.min_separation / 2.0) ** 2
        return self.grid.area * HEX_PACKING_DENSITY / disc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        d["count_mode"] = self.count_mode.value
        return d


@dataclass(frozen=True)
class NoiseModel:
    p_miss: float = 0.0
    fp_per_frame: float = 0.0
    loc_sigma: float = 0.0
    score_low: float = 1.0
    score_high: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.p_miss <= 1.0:
            raise ConfigError(f"p_miss must be in [0, 1], got {self.p_miss}")
        if self.fp_per_frame < 0:
            raise ConfigError(f"fp_per_frame must be >= 0, got {self.fp_per_frame}")
        if self.loc_sigma < 0:
            raise ConfigError(f"loc_sigma must be >= 0, got {self.loc_sigma}")
        if not 0.0 <= self.score_low <= self.score_high <= 1.0:
            raise ConfigError(f"score range must satisfy 0 <= low <= high <= 1, got "
                              f"[{self.score_low}, {self.score_high}]")

    @property
    def fixed_score(self) -> bool:
        return self.score_low == self.score_high

    def to_dict(self) -> dict:
        return asdict(self)


def _inside(low: float, cell: float, n: int, u: float) -> float:
    # rounding can land on either edge or past the last cell; keep the open interval
    high = low + n * cell
    v = min(max(low + n * cell * u, math.nextafter(low, high)), math.nextafter(high, low))
    while math.floor((v - low) / cell) >= n:
        v = math.nextafter(v, low)
    return v


def _uniform_point(rng: Xoshiro256, grid: GroundGrid) -> tuple[float, float]:
    return (_inside(grid.origin.x, grid.cell_size, grid.n_rows, rng.uniform()),
            _inside(grid.origin.y, grid.cell_size, grid.n_cols, rng.uniform()))


def _frame_id(index: int) -> str:
    return f"{index:08d}"


def gen_scene(params: SceneParams) -> list[AnnotatedFrame]:
    rng = Xoshiro256(params.seed)
    cap = params.capacity
    max_people = int(cap / 2) if cap is not None else None
    sep2 = params.min_separation ** 2
    frames = []

    for t in range(params.n_frames):
        if params.count_mode == CountMode.FIXED:
            count = int(round(params.mean_people))
        else:
            count = rng.poisson(params.mean_people)
        if max_people is not None and count > max_people:
            count = max_people

        points: list[tuple[float, float]] = []
        for _ in range(count):
            for _attempt in range(MAX_DRAWS_PER_PERSON):
                x, y = _uniform_point(rng, params.grid)
                if all((x - px) ** 2 + (y - py) ** 2 >= sep2 for px, py in points):
                    points.append((x, y))
                    break
            else:
                raise InfeasibleSceneError(
                    f"frame {t}: could not place person {len(points) + 1} of {count} "
                    f"after {MAX_DRAWS_PER_PERSON} draws"
                )
        fid = _frame_id(t)
        frames.append(AnnotatedFrame(fid, DetectionSet.from_points(fid, points)))

    logger.debug("generated %d frames, %d people", len(frames), sum(len(f.gts) for f in frames))
    return frames


def simulate_detector(frames: Sequence[AnnotatedFrame], noise: NoiseModel, seed: int = 0,
                      grid: Optional[GroundGrid] = None) -> list[DetectionSet]:
    """Drops, jitters and pads ground truth with false positives.

    False positives are drawn uniformly over `grid`; without a grid, frames
    must not ask for any.
    """
    if noise.fp_per_frame > 0 and grid is None:
        raise ConfigError("a grid is needed to place false positives")
    rng = Xoshiro256(seed)

    def score() -> float:
        if noise.fixed_score:
            return noise.score_low
        return rng.uniform_range(noise.score_low, noise.score_high)

    out = []
    for frame in frames:
        dets = []
        for gt in frame.gts.detections:
            if rng.bernoulli(noise.p_miss):
                continue
            x, y = gt.location.x, gt.location.y
            if noise.loc_sigma > 0:
                x += rng.normal(noise.loc_sigma)
                y += rng.normal(noise.loc_sigma)
            dets.append(Detection.at(x, y, score()))
        for _ in range(rng.poisson(noise.fp_per_frame)):
            x, y = _uniform_point(rng, grid)
            dets.append(Detection.at(x, y, score()))
        out.append(DetectionSet(frame.frame_id, tuple(dets)))
    return out
