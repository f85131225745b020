"""
MODA / MODP evaluation of ground-plane detections.

Detections are matched to ground truth per frame with Hungarian assignment,
only within the match radius. Counts are summed over all frames before the
metrics are computed (micro-average).
"""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import EvaluationError, FrameMismatchError, PreconditionError
from .heatmap import DetectionSet

logger = logging.getLogger(__name__)

EMPTY_EVALUATION = "empty_evaluation"
MODA_UNDEFINED = "moda_undefined"


@dataclass(frozen=True)
class FrameMatching:
    pairs: tuple[tuple[int, int, float], ...]
    fp_indices: tuple[int, ...]
    fn_indices: tuple[int, ...]

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def total_distance(self) -> float:
        return float(sum(d for _, _, d in self.pairs))


def match_frame(dets: DetectionSet, gts: DetectionSet, radius: float = 0.5) -> FrameMatching:
    """Maximum-cardinality, then minimum-distance, matching within `radius`.

    Pairs farther than the radius get a cost larger than any sum of allowed
    distances, so the solver only uses one when no allowed pair is left.
    """
    if not radius > 0:
        raise PreconditionError(f"match radius must be > 0, got {radius}")
    n, m = len(dets), len(gts)
    if n == 0 or m == 0:
        return FrameMatching((), tuple(range(n)), tuple(range(m)))

    D, G = dets.xy(), gts.xy()
    dist = np.hypot(D[:, None, 0] - G[None, :, 0], D[:, None, 1] - G[None, :, 1])
    allowed = dist <= radius
    prohibitive = radius * (min(n, m) + 1)
    cost = np.where(allowed, dist, prohibitive)

    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(
        (int(i), int(j), float(dist[i, j])) for i, j in zip(rows, cols) if allowed[i, j]
    )
    matched_d = {i for i, _, _ in pairs}
    matched_g = {j for _, j, _ in pairs}
    return FrameMatching(
        tuple(pairs),
        tuple(i for i in range(n) if i not in matched_d),
        tuple(j for j in range(m) if j not in matched_g),
    )


@dataclass
class FrameReport:
    frame_id: str
    tp: int
    fp: int
    fn: int
    n_gt: int
    moda: float
    modp: float
    precision: float
    recall: float
    moda_defined: bool = True
    loc_sum: float = 0.0


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    n_gt: int
    moda: float
    modp: float
    precision: float
    recall: float
    moda_defined: bool = True
    warnings: list[str] = field(default_factory=list)
    per_frame: list[FrameReport] = field(default_factory=list)

    def to_dict(self, per_frame: bool = True) -> dict:
        d = {
            "moda": self.moda,
            "modp": self.modp,
            "precision": self.precision,
            "recall": self.recall,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "n_gt": self.n_gt,
            "moda_defined": self.moda_defined,
            "warnings": list(self.warnings),
        }
        if per_frame:
            d["per_frame"] = [
                {k: v for k, v in asdict(f).items() if k != "loc_sum"} for f in self.per_frame
            ]
        return d

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["frame_id", "tp", "fp", "fn", "n_gt", "moda", "modp", "precision", "recall"]
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for f in self.per_frame:
            writer.writerow([getattr(f, c) for c in cols])
        return buf.getvalue()

    def render(self) -> str:
        moda = f"{self.moda:.3f}" if self.moda_defined else "undefined"
        lines = [
            f"MODA      {moda}",
            f"MODP      {self.modp:.3f}",
            f"Precision {self.precision:.3f}",
            f"Recall    {self.recall:.3f}",
            f"TP {self.tp}  FP {self.fp}  FN {self.fn}  GT {self.n_gt}",
        ]
        for w in self.warnings:
            lines.append(f"warning: {w}")
        return "\n".join(lines)


def _summarize(tp: int, fp: int, fn: int, n_gt: int, loc_sum: float):
    """Returns (moda, modp, precision, recall, moda_defined, warnings)."""
    if n_gt == 0 and tp + fp == 0:
        return 1.0, 1.0, 1.0, 1.0, True, [EMPTY_EVALUATION]
    warnings = []
    if n_gt > 0:
        moda = 1.0 - (fn + fp) / n_gt
        recall = tp / n_gt
        defined = True
    else:
        moda = -math.inf
        recall = 0.0
        defined = False
        warnings.append(MODA_UNDEFINED)
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    modp = loc_sum / tp if tp > 0 else 0.0
    return moda, modp, precision, recall, defined, warnings


def _frame_report(frame_id: str, dets: DetectionSet, gts: DetectionSet, radius: float) -> FrameReport:
    matching = match_frame(dets, gts, radius)
    tp, fp, fn = matching.tp, len(matching.fp_indices), len(matching.fn_indices)
    loc_sum = float(sum(1.0 - d / radius for _, _, d in matching.pairs))
    moda, modp, precision, recall, defined, _ = _summarize(tp, fp, fn, len(gts), loc_sum)
    return FrameReport(frame_id, tp, fp, fn, len(gts), moda, modp, precision, recall, defined, loc_sum)


def evaluate(
    frames: Sequence[tuple[DetectionSet, DetectionSet]],
    radius: float = 0.5,
    workers: int = 1,
) -> EvalReport:
    """Aggregate MODA, MODP, precision and recall over (detections, ground truth) pairs."""
    if not radius > 0:
        raise PreconditionError(f"match radius must be > 0, got {radius}")
    if not frames:
        raise EvaluationError("nothing to evaluate: no frames given")

    def one(pair):
        dets, gts = pair
        return _frame_report(gts.frame_id, dets, gts, radius)

    if workers > 1 and len(frames) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_frame = list(pool.map(one, frames))
    else:
        per_frame = [one(p) for p in frames]

    tp = sum(f.tp for f in per_frame)
    fp = sum(f.fp for f in per_frame)
    fn = sum(f.fn for f in per_frame)
    n_gt = sum(f.n_gt for f in per_frame)
    loc_sum = math.fsum(f.loc_sum for f in per_frame)
    moda, modp, precision, recall, defined, warnings = _summarize(tp, fp, fn, n_gt, loc_sum)
    for w in warnings:
        logger.warning("evaluation: %s", w)
    return EvalReport(tp, fp, fn, n_gt, moda, modp, precision, recall, defined, warnings, per_frame)


def pair_frames(
    detections: Sequence[DetectionSet],
    annotations: Sequence[DetectionSet],
    frame_ids: Optional[Sequence[str]] = None,
) -> list[tuple[DetectionSet, DetectionSet]]:
    """Joins detection and ground-truth records on frame_id, in annotation order.

    With `frame_ids`, only those frames are paired and extra detection records
    are ignored.
    """
    det_by_id = {d.frame_id: d for d in detections}
    gt_by_id = {g.frame_id: g for g in annotations}
    wanted = list(frame_ids) if frame_ids is not None else [g.frame_id for g in annotations]

    missing_dets = [f for f in wanted if f not in det_by_id]
    missing_gts = [f for f in wanted if f not in gt_by_id]
    if frame_ids is None:
        missing_gts += [f for f in det_by_id if f not in gt_by_id]
    if missing_dets or missing_gts:
        raise FrameMismatchError(missing_dets, missing_gts)
    return [(det_by_id[f], gt_by_id[f]) for f in wanted]
