"""
Multi-round automatic labeling campaigns.

Each round runs four steps:
  labels   - the labeler (a detector adapter) labels the target train split
  compose  - the selected components are joined into one training manifest
  train    - the trainer adapter fits a model, from scratch or fine-tuning
  validate - the detector adapter runs the new model on the target val split

Every step writes into round_XX/<step>-<digest12>/. The directory is built
under a ".partial" name and renamed when complete, so a directory under its
final name is always whole and is reused as a cache hit.
"""
from __future__ import annotations

import csv
import fcntl
import hashlib
import io
import json
import logging
import math
import os
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

from .adapters import AdapterRole, AdapterSpec, run_adapter
from .config import GlobalConfig, read_config_file
from .dataio import (
    DatasetManifest,
    LabelKind,
    LabelSet,
    Provenance,
    Split,
    atomic_write_json,
    atomic_write_text,
    load_manifest,
    read_detections,
    read_heatmap,
    read_label_set,
    resolve_path,
    safe_name,
    write_detections,
    write_heatmap,
    write_label_set,
)
from .errors import (
    AdapterFailure,
    ConfigError,
    CoverageError,
    DuplicateFrameError,
    FailureReason,
    MissingComponentError,
    ParseError,
    PreconditionError,
    UsageError,
)
from .heatmap import DetectionSet, extract_locations, label_pipeline
from .metrics import EvalReport, evaluate, pair_frames

logger = logging.getLogger(__name__)

PREVIOUS = "previous"
DETECTIONS_FILE = "detections.jsonl"
HEATMAP_DIR = "heatmaps"
INVOCATION_FILE = "invocation.json"
TRAINING_MANIFEST = "training_manifest.json"
MODEL_NAME = "model"
REPORT_FILE = "report.json"
LOCK_FILE = ".lock"

COMPONENT_ORDER = (LabelKind.LS, LabelKind.LT, LabelKind.PLT, LabelKind.ALT)
TARGET_COMPONENTS = frozenset({LabelKind.LT, LabelKind.PLT, LabelKind.ALT})


# ---------------------------------------------------------------------------
# plans

class TrainMode(str, Enum):
    FS = "FS"
    FT = "FT"


@dataclass(frozen=True)
class TrainingMode:
    """FS trains from random weights; FT starts from `init_model`, a model
    path or PREVIOUS (the last round's model, the source model in round 0)."""
    mode: TrainMode = TrainMode.FS
    init_model: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", TrainMode(self.mode))
        if self.mode == TrainMode.FT and not self.init_model:
            raise PreconditionError("fine-tuning needs an init_model")


@dataclass(frozen=True)
class TrainingSetSpec:
    components: frozenset
    source_manifest: Optional[DatasetManifest] = None
    target_manifest: Optional[DatasetManifest] = None

    def __post_init__(self):
        comps = frozenset(LabelKind(c) for c in self.components)
        object.__setattr__(self, "components", comps)
        if not comps:
            raise PreconditionError("a training set needs at least one component")
        if LabelKind.LS in comps and self.source_manifest is None:
            raise PreconditionError("LS needs a source dataset")
        if comps & TARGET_COMPONENTS and self.target_manifest is None:
            raise PreconditionError("target components need a target dataset")
        if LabelKind.LT in comps and self.target_manifest.annotations is None:
            raise PreconditionError(f"LT needs ground truth for '{self.target_manifest.name}'")
        if {LabelKind.PLT, LabelKind.ALT} <= comps:
            raise PreconditionError("a round generates either PLT or ALT labels, not both")

    @property
    def ordered(self) -> list[LabelKind]:
        return [k for k in COMPONENT_ORDER if k in self.components]

    @property
    def generated(self) -> Optional[LabelKind]:
        for k in self.ordered:
            if k.is_generated:
                return k
        return None

    def describe(self) -> str:
        names = [k.value for k in self.ordered]
        return f"{names[0]} only" if len(names) == 1 else " + ".join(names)


@dataclass(frozen=True)
class RoundPlan:
    round_index: int
    training_set: TrainingSetSpec
    training_mode: TrainingMode = field(default_factory=TrainingMode)
    labeler: Optional[str] = None
    label_kind: Optional[LabelKind] = None
    labeler_model: Optional[str] = None
    eval_split: Split = Split.VAL

    def __post_init__(self):
        r = self.round_index
        if r < 0:
            raise PreconditionError(f"round index must be >= 0, got {r}")
        object.__setattr__(self, "eval_split", Split(self.eval_split))
        generated = self.training_set.generated
        kind = LabelKind(self.label_kind) if self.label_kind is not None else generated
        if kind != generated:
            raise PreconditionError(
                f"round {r}: label_kind {kind.value if kind else None} does not match the training set "
                f"({self.training_set.describe()})"
            )
        object.__setattr__(self, "label_kind", kind)
        if kind is not None and not self.labeler:
            raise PreconditionError(f"round {r}: {kind.value} labels need a labeler adapter")
        if kind == LabelKind.PLT:
            if self.labeler_model is None:
                object.__setattr__(self, "labeler_model", PREVIOUS)
            elif r >= 1 and self.labeler_model != PREVIOUS:
                raise PreconditionError(
                    f"round {r}: PLT labels must come from the detector trained in the last round"
                )


# ---------------------------------------------------------------------------
# results

@dataclass
class StepMetrics:
    name: str
    status: str = "pending"
    start_time: Optional[float] = None
    end_time: Optional[float] = None
    cached: bool = False
    directory: Optional[str] = None
    error: Optional[str] = None

    @property
    def duration(self) -> float:
        if self.start_time and self.end_time:
            return self.end_time - self.start_time
        return 0


@dataclass
class RoundResult:
    round_index: int  # -1 for the baseline row
    training_data: str
    model: Optional[Path]
    label_set: Optional[Path] = None
    validation: Optional[EvalReport] = None
    wall_time: float = 0.0
    steps: list = field(default_factory=list)

    @property
    def al_rounds(self) -> int:
        return self.round_index + 1

    def row(self) -> dict:
        v = self.validation
        return {
            "al_rounds": self.al_rounds,
            "training_data": self.training_data,
            "moda": v.moda if v else None,
            "modp": v.modp if v else None,
            "precision": v.precision if v else None,
            "recall": v.recall if v else None,
        }


# ---------------------------------------------------------------------------
# campaigns

@dataclass(frozen=True)
class Baseline:
    detector: str
    model: str = PREVIOUS
    label: str = "LS only"


@dataclass
class Campaign:
    name: str
    config: GlobalConfig
    directory: Path
    target: DatasetManifest
    adapters: dict = field(default_factory=dict)
    rounds: list = field(default_factory=list)
    source: Optional[DatasetManifest] = None
    detector: Optional[str] = None
    trainer: Optional[str] = None
    source_model: Optional[Path] = None
    baseline: Optional[Baseline] = None

    def adapter(self, adapter_id: Optional[str], role: AdapterRole) -> AdapterSpec:
        if not adapter_id:
            raise ConfigError(f"campaign '{self.name}': no {role.value} adapter configured")
        spec = self.adapters.get(adapter_id)
        if spec is None:
            raise ConfigError(f"campaign '{self.name}': unknown adapter '{adapter_id}'")
        if spec.role != role:
            raise ConfigError(f"adapter '{adapter_id}' is a {spec.role.value}, expected a {role.value}")
        return spec

    def validate(self):
        """Checks every round before anything is launched."""
        for i, plan in enumerate(self.rounds):
            if plan.round_index != i:
                raise PreconditionError(f"rounds must be numbered 0..{len(self.rounds) - 1} in order")
            self.adapter(self.trainer, AdapterRole.TRAINER)
            if plan.label_kind is not None:
                self.adapter(plan.labeler, AdapterRole.DETECTOR)
            refs = [plan.labeler_model]
            if plan.training_mode.mode == TrainMode.FT:
                refs.append(plan.training_mode.init_model)
            for ref in refs:
                self._check_model_ref(ref, i)
        if self.baseline is not None:
            self.adapter(self.baseline.detector, AdapterRole.DETECTOR)
            self._check_model_ref(self.baseline.model, 0)
        if self.source_model is not None and not Path(self.source_model).exists():
            raise PreconditionError(f"source model {self.source_model} does not exist")

    def _check_model_ref(self, ref: Optional[str], round_index: int):
        if ref is None:
            return
        if ref == PREVIOUS:
            if round_index == 0 and self.source_model is None:
                raise PreconditionError("round 0 refers to the previous model but no source_model is set")
        elif not Path(ref).exists():
            raise PreconditionError(f"model artifact {ref} does not exist")


@dataclass
class CampaignState:
    campaign: Campaign
    models: dict = field(default_factory=dict)  # round index -> model path
    results: list = field(default_factory=list)

    def resolve_model(self, ref: Optional[str], round_index: int) -> Optional[Path]:
        """Rounds only see models from earlier rounds."""
        if ref is None:
            return None
        if ref != PREVIOUS:
            path = Path(ref)
        elif round_index == 0:
            path = self.campaign.source_model
            if path is None:
                raise PreconditionError("round 0 refers to the previous model but no source_model is set")
        else:
            path = self.models.get(round_index - 1)
            if path is None:
                raise PreconditionError(f"round {round_index}: round {round_index - 1} produced no model")
        if not Path(path).exists():
            raise PreconditionError(f"model artifact {path} does not exist")
        return Path(path)


# ---------------------------------------------------------------------------
# digests and steps

def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def digest_path(path: Optional[Path]) -> Optional[str]:
    """Content digest of a file or a directory tree."""
    if path is None:
        return None
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(p.relative_to(path).as_posix().encode("utf-8") + b"\0")
                h.update(p.read_bytes())
    elif path.is_file():
        h.update(path.read_bytes())
    else:
        raise PreconditionError(f"{path} does not exist")
    return h.hexdigest()


def _frame_list(frames) -> list:
    return [{"frame_id": f.frame_id, "images": dict(f.images)} for f in frames]


def _run_step(parent: Path, name: str, inputs: dict, build: Callable[[Path], None],
              steps: list) -> Path:
    inputs = json.loads(json.dumps(inputs, default=str))
    digest = _digest(inputs)
    final = parent / f"{name}-{digest[:12]}"
    metrics = StepMetrics(name=name, start_time=time.time(), directory=str(final))
    steps.append(metrics)

    if final.is_dir():
        metrics.cached = True
        metrics.status = "cached"
        metrics.end_time = time.time()
        logger.info("[%s] cached: %s", name.upper(), final.name)
        return final

    partial = parent / f".{final.name}.partial"
    if partial.exists():
        shutil.rmtree(partial)
    partial.mkdir(parents=True)
    atomic_write_json(partial / "inputs.json", inputs)

    metrics.status = "running"
    try:
        build(partial)
    except Exception as e:
        metrics.status = "failed"
        metrics.error = str(e)
        metrics.end_time = time.time()
        raise
    os.rename(partial, final)
    metrics.status = "complete"
    metrics.end_time = time.time()
    logger.info("[%s] complete (%.1fs)", name.upper(), metrics.duration)
    return final


# ---------------------------------------------------------------------------
# detector runs

def _extract_rasters(paths: Sequence[Path], grid, cfg: GlobalConfig) -> dict:
    def one(path: Path) -> DetectionSet:
        h = read_heatmap(path)
        if h.grid != grid:
            raise ParseError(f"raster grid {h.grid.to_dict()} differs from {grid.to_dict()}", path=str(path))
        return extract_locations(h, cfg.min_prob, cfg.nms_radius, cfg.candidate_mode,
                                 frame_id=h.frame_id or path.stem)

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        sets = list(pool.map(one, paths))
    found = {}
    for path, dets in zip(paths, sets):
        if dets.frame_id in found:
            raise DuplicateFrameError(f"frame '{dets.frame_id}' has more than one raster", path=str(path))
        found[dets.frame_id] = dets
    return found


def collect_detections(adapter_id: str, output_dir: Path, frame_ids: Sequence[str],
                       grid, cfg: GlobalConfig) -> dict:
    """Reads a detector's output: detections.jsonl, else heatmaps/*.mvhm
    reduced to locations. Every requested frame must be present."""
    det_path = output_dir / DETECTIONS_FILE
    heat_dir = output_dir / HEATMAP_DIR
    try:
        if det_path.exists():
            found = {d.frame_id: d for d in read_detections(det_path)}
        elif heat_dir.is_dir():
            found = _extract_rasters(sorted(heat_dir.glob("*.mvhm")), grid, cfg)
        else:
            raise AdapterFailure(
                adapter_id, FailureReason.MALFORMED_OUTPUT,
                f"neither {DETECTIONS_FILE} nor {HEATMAP_DIR}/ in {output_dir}",
            )
    except ParseError as e:
        raise AdapterFailure(adapter_id, FailureReason.MALFORMED_OUTPUT, str(e), diagnostics=e.detail) from e

    wanted = set(frame_ids)
    extra = sorted(f for f in found if f not in wanted)
    if extra:
        raise AdapterFailure(adapter_id, FailureReason.MALFORMED_OUTPUT,
                             f"output holds frames that were not requested: {extra[:10]}")
    missing = [f for f in frame_ids if f not in found]
    if missing:
        raise CoverageError(adapter_id, missing)
    return {f: found[f] for f in frame_ids}


def run_detector(adapter: AdapterSpec, manifest: DatasetManifest, frames, work_dir: Path,
                 cfg: GlobalConfig, model: Optional[Path] = None) -> dict:
    output_dir = work_dir / "output"
    output_dir.mkdir(parents=True, exist_ok=True)
    invocation = {
        "role": AdapterRole.DETECTOR.value,
        "dataset": manifest.name,
        "frames": _frame_list(frames),
        "cameras": {cid: cam.to_dict() for cid, cam in manifest.cameras.items()},
        "grid": manifest.grid.to_dict(),
        "output_dir": str(output_dir),
        "options": cfg.options(),
        "model": str(model) if model is not None else None,
    }
    invocation_path = atomic_write_json(work_dir / INVOCATION_FILE, invocation)
    run_adapter(adapter, invocation_path, output_dir, work_dir / "logs")
    return collect_detections(adapter.adapter_id, output_dir, [f.frame_id for f in frames], manifest.grid, cfg)


def _split_frames(manifest: DatasetManifest, split: Split) -> list:
    """A manifest without split assignments contributes all frames to train."""
    if not manifest.split:
        return list(manifest.frames) if split == Split.TRAIN else []
    return manifest.frames_in(split)


def generate_labels(adapter: AdapterSpec, manifest: DatasetManifest, split: Optional[Split],
                    work_dir: Path, cfg: GlobalConfig, kind: LabelKind = LabelKind.ALT,
                    model: Optional[Path] = None, round_index: int = 0,
                    input_digest: str = "") -> LabelSet:
    """Runs a detector over one split and turns its output into a label set
    (detections plus Gaussian label rasters) written into `work_dir`."""
    kind = LabelKind(kind)
    if not kind.is_generated:
        raise PreconditionError(f"{kind.value} labels come from annotations, not from a detector")
    if adapter.role != AdapterRole.DETECTOR:
        raise PreconditionError(f"adapter '{adapter.adapter_id}' is not a detector")
    frames = manifest.frames_in(None) if split is None else _split_frames(manifest, Split(split))
    if not frames:
        raise PreconditionError(f"no frames to label in '{manifest.name}' (split: {Split(split).value if split else 'all'})")

    logger.info("[LABELS] %s for %d frames of %s via %s", kind.value, len(frames), manifest.name,
                adapter.adapter_id)
    detections = run_detector(adapter, manifest, frames, work_dir, cfg, model)

    kernel = cfg.kernel()
    heat_dir = work_dir / HEATMAP_DIR
    heat_dir.mkdir(parents=True, exist_ok=True)

    def rasterize_one(dets: DetectionSet) -> Path:
        h = label_pipeline(dets, manifest.grid, kernel, cfg.policy)
        return write_heatmap(heat_dir / f"{safe_name(dets.frame_id)}.mvhm", h)

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        paths = list(pool.map(rasterize_one, detections.values()))

    labels = LabelSet(
        kind,
        manifest.name,
        detections,
        dict(zip(detections, paths)),
        Provenance(adapter.adapter_id, adapter.digest(), input_digest, round_index),
        work_dir,
    )
    write_label_set(work_dir, labels)
    logger.info("[LABELS] %d detections in %d frames", sum(len(d) for d in detections.values()),
                len(detections))
    return labels


# ---------------------------------------------------------------------------
# training sets

@dataclass(frozen=True)
class TrainingEntry:
    origin: LabelKind
    dataset: str
    frame_id: str
    images: dict
    label_set: Optional[str]

    def to_dict(self) -> dict:
        return {
            "origin": self.origin.value,
            "dataset": self.dataset,
            "frame_id": self.frame_id,
            "images": dict(self.images),
            "labels": {"label_set": self.label_set, "frame_id": self.frame_id},
        }


@dataclass
class TrainingManifest:
    components: list
    entries: list

    def counts(self) -> dict:
        out = {k.value: 0 for k in self.components}
        for e in self.entries:
            out[e.origin.value] += 1
        return out

    def to_dict(self) -> dict:
        return {
            "components": [k.value for k in self.components],
            "counts": self.counts(),
            "entries": [e.to_dict() for e in self.entries],
        }


def compose_training_set(spec: TrainingSetSpec, label_sets: dict) -> TrainingManifest:
    entries = []
    for kind in spec.ordered:
        labels = label_sets.get(kind)
        if labels is None:
            raise MissingComponentError(f"no {kind.value} label set available for the training set")
        if labels.kind != kind:
            raise PreconditionError(f"label set of kind {labels.kind.value} given for {kind.value}")
        manifest = spec.source_manifest if kind == LabelKind.LS else spec.target_manifest
        labels.check_frames(manifest)
        images = {f.frame_id: f.images for f in manifest.frames}
        ref = str(labels.directory) if labels.directory is not None else None
        for fid in labels.frames:
            entries.append(TrainingEntry(kind, manifest.name, fid, images.get(fid, {}), ref))
    return TrainingManifest(spec.ordered, entries)


def train_model(adapter: AdapterSpec, training_manifest: Path, mode: TrainingMode,
                init_model: Optional[Path], work_dir: Path, cfg: GlobalConfig, grid) -> Path:
    if mode.mode == TrainMode.FT and init_model is None:
        raise PreconditionError("fine-tuning needs an init_model")
    model_out = work_dir / MODEL_NAME
    output_dir = work_dir / "output"
    output_dir.mkdir(parents=True, exist_ok=True)
    invocation = {
        "role": AdapterRole.TRAINER.value,
        "training_manifest": str(training_manifest),
        "mode": mode.mode.value,
        "init_model": str(init_model) if init_model is not None else None,
        "model_out": str(model_out),
        "output_dir": str(output_dir),
        "grid": grid.to_dict(),
        "passthrough": cfg.trainer_passthrough,
    }
    invocation_path = atomic_write_json(work_dir / INVOCATION_FILE, invocation)
    logger.info("[TRAIN] %s with %s", mode.mode.value, adapter.adapter_id)
    run_adapter(adapter, invocation_path, output_dir, work_dir / "logs")
    if not model_out.exists():
        raise AdapterFailure(adapter.adapter_id, FailureReason.MALFORMED_OUTPUT,
                             f"trainer exited cleanly but wrote no model at {model_out}")
    return model_out


# ---------------------------------------------------------------------------
# rounds

def _ground_truth_labels(parent: Path, kind: LabelKind, manifest: DatasetManifest, steps: list) -> LabelSet:
    frame_ids = [f.frame_id for f in _split_frames(manifest, Split.TRAIN)]
    if not frame_ids:
        raise PreconditionError(f"no train frames in '{manifest.name}' for {kind.value}")
    if manifest.annotations is None:
        raise PreconditionError(f"{kind.value} needs ground truth for '{manifest.name}'")
    inputs = {
        "step": kind.value.lower(),
        "dataset": manifest.name,
        "annotations": digest_path(manifest.annotations.path),
        "frames": frame_ids,
    }

    def build(tmp: Path):
        write_label_set(tmp, LabelSet.from_annotations(kind, manifest, frame_ids))

    return read_label_set(_run_step(parent, kind.value.lower(), inputs, build, steps))


def _validation(state: CampaignState, parent: Path, model: Path, detector: AdapterSpec,
                split: Split, steps: list) -> Optional[EvalReport]:
    camp = state.campaign
    cfg = camp.config
    target = camp.target
    frames = _split_frames(target, split)
    if target.annotations is None or not frames:
        logger.warning("[VALIDATE] no %s ground truth in '%s'; metrics omitted", split.value, target.name)
        return None

    frame_ids = [f.frame_id for f in frames]
    inputs = {
        "step": "validate",
        "adapter": detector.digest(),
        "model": digest_path(model),
        "dataset": target.name,
        "frames": _frame_list(frames),
        "grid": target.grid.to_dict(),
        "options": cfg.options(),
        "match_radius": cfg.match_radius,
    }
    annotations = target.load_annotations()
    gts = [annotations[f].gts for f in frame_ids if f in annotations]

    def report_for(dets) -> EvalReport:
        return evaluate(pair_frames(dets, gts, frame_ids), cfg.match_radius, cfg.workers)

    def build(tmp: Path):
        found = run_detector(detector, target, frames, tmp, cfg, model)
        write_detections(tmp / DETECTIONS_FILE, list(found.values()))
        atomic_write_json(tmp / REPORT_FILE, report_for(list(found.values())).to_dict())

    logger.info("[VALIDATE] %d %s frames of %s", len(frames), split.value, target.name)
    final = _run_step(parent, "validate", inputs, build, steps)
    report = report_for(read_detections(final / DETECTIONS_FILE))
    logger.info("[VALIDATE] MODA %s  MODP %.3f  precision %.3f  recall %.3f",
                f"{report.moda:.3f}" if report.moda_defined else "undefined",
                report.modp, report.precision, report.recall)
    return report


def run_round(plan: RoundPlan, state: CampaignState) -> RoundResult:
    camp = state.campaign
    cfg = camp.config
    r = plan.round_index
    t0 = time.time()

    trainer = camp.adapter(camp.trainer, AdapterRole.TRAINER)
    init_model = None
    if plan.training_mode.mode == TrainMode.FT:
        init_model = state.resolve_model(plan.training_mode.init_model, r)
    labeler = camp.adapter(plan.labeler, AdapterRole.DETECTOR) if plan.label_kind else None
    labeler_model = state.resolve_model(plan.labeler_model, r)
    detector = camp.adapter(camp.detector, AdapterRole.DETECTOR) if camp.detector else None

    round_dir = camp.directory / f"round_{r:02d}"
    round_dir.mkdir(parents=True, exist_ok=True)
    spec = plan.training_set
    steps: list[StepMetrics] = []
    label_sets = {}
    logger.info("[ROUND %d] %s, %s", r, spec.describe(), plan.training_mode.mode.value)

    if LabelKind.LS in spec.components:
        label_sets[LabelKind.LS] = _ground_truth_labels(round_dir, LabelKind.LS, spec.source_manifest, steps)
    if LabelKind.LT in spec.components:
        label_sets[LabelKind.LT] = _ground_truth_labels(round_dir, LabelKind.LT, spec.target_manifest, steps)

    label_dir = None
    if plan.label_kind is not None:
        target = spec.target_manifest
        frames = _split_frames(target, Split.TRAIN)
        inputs = {
            "step": "labels",
            "kind": plan.label_kind.value,
            "round": r,
            "adapter": labeler.digest(),
            "model": digest_path(labeler_model),
            "dataset": target.name,
            "frames": _frame_list(frames),
            "grid": target.grid.to_dict(),
            "options": cfg.options(),
            "kernel": [cfg.kernel_size, cfg.sigma, cfg.kernel_norm],
            "out_of_bounds": cfg.out_of_bounds,
        }
        input_digest = _digest(json.loads(json.dumps(inputs, default=str)))

        def build_labels(tmp: Path):
            generate_labels(labeler, target, Split.TRAIN, tmp, cfg, plan.label_kind,
                            labeler_model, r, input_digest)

        label_dir = _run_step(round_dir, "labels", inputs, build_labels, steps)
        label_sets[plan.label_kind] = read_label_set(label_dir)

    training = compose_training_set(spec, label_sets)
    compose_inputs = {"step": "compose", "training": training.to_dict()}

    def build_compose(tmp: Path):
        atomic_write_json(tmp / TRAINING_MANIFEST, training.to_dict())

    manifest_path = _run_step(round_dir, "compose", compose_inputs, build_compose, steps) / TRAINING_MANIFEST
    logger.info("[ROUND %d] training set %s", r, training.counts())

    grid = (spec.target_manifest or spec.source_manifest).grid
    train_inputs = {
        "step": "train",
        "adapter": trainer.digest(),
        "training_manifest": digest_path(manifest_path),
        "mode": plan.training_mode.mode.value,
        "init_model": digest_path(init_model),
        "grid": grid.to_dict(),
        "passthrough": cfg.trainer_passthrough,
    }
    train_digest = _digest(json.loads(json.dumps(train_inputs, default=str)))

    def build_train(tmp: Path):
        train_model(trainer, manifest_path, plan.training_mode, init_model, tmp, cfg, grid)
        atomic_write_json(tmp / "provenance.json",
                          Provenance(trainer.adapter_id, trainer.digest(), train_digest, r).to_dict())

    model = _run_step(round_dir, "train", train_inputs, build_train, steps) / MODEL_NAME
    state.models[r] = model

    report = None
    if detector is not None:
        report = _validation(state, round_dir, model, detector, plan.eval_split, steps)
    else:
        logger.warning("[ROUND %d] no detector adapter configured; validation skipped", r)

    result = RoundResult(r, spec.describe(), model, label_dir, report, time.time() - t0, steps)
    logger.info("[ROUND %d] done in %.1fs", r, result.wall_time)
    return result


def run_baseline(state: CampaignState) -> RoundResult:
    """Evaluates a model before any labeling round (summary row 0)."""
    camp = state.campaign
    baseline = camp.baseline
    t0 = time.time()
    detector = camp.adapter(baseline.detector, AdapterRole.DETECTOR)
    model = state.resolve_model(baseline.model, 0)
    parent = camp.directory / "baseline"
    parent.mkdir(parents=True, exist_ok=True)
    steps: list[StepMetrics] = []
    logger.info("[ROUND 0] baseline: %s", baseline.label)
    report = _validation(state, parent, model, detector, Split.VAL, steps)
    return RoundResult(-1, baseline.label, model, None, report, time.time() - t0, steps)


# ---------------------------------------------------------------------------
# summaries

SUMMARY_FIELDS = ("al_rounds", "training_data", "moda", "modp", "precision", "recall")


def _fmt(value) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float) and math.isinf(value):
        return "undefined"
    return f"{value:.3f}"


def render_summary(results: Sequence[RoundResult]) -> str:
    lines = [f"{'AL rounds':>9}  {'Training data':<16}{'MODA':>10}{'MODP':>10}{'Prec.':>10}{'Recall':>10}{'Time':>9}"]
    for res in results:
        row = res.row()
        lines.append(
            f"{row['al_rounds']:>9}  {row['training_data']:<16}"
            f"{_fmt(row['moda']):>10}{_fmt(row['modp']):>10}{_fmt(row['precision']):>10}"
            f"{_fmt(row['recall']):>10}{res.wall_time:>8.1f}s"
        )
    return "\n".join(lines) + "\n"


def write_summary(directory: Path, name: str, results: Sequence[RoundResult],
                  error: Optional[dict] = None) -> dict:
    """summary.json and summary.csv hold no timing so reruns compare equal."""
    rows = [res.row() for res in results]
    doc = {"campaign": name, "rows": rows}
    if error is not None:
        doc["error"] = error
    atomic_write_json(directory / "summary.json", doc)

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    atomic_write_text(directory / "summary.csv", buf.getvalue())

    text = render_summary(results)
    if error is not None:
        text += f"\nround {error['round']} failed: {error['message']}\n"
    atomic_write_text(directory / "summary.txt", text)
    return doc


@contextmanager
def campaign_lock(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / LOCK_FILE, "w") as fh:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError as e:
            raise UsageError(f"another process is running a campaign in {directory}") from e
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _existing_outputs(directory: Path) -> list[str]:
    if not directory.is_dir():
        return []
    return sorted(p.name for p in directory.iterdir()
                  if p.is_dir() and (p.name.startswith("round_") or p.name == "baseline"))


def run_campaign(campaign: Campaign, resume: bool = False) -> list[RoundResult]:
    """Runs the baseline and every round in order, stopping at the first
    failure. The summary files always list the rows completed so far."""
    campaign.validate()
    with campaign_lock(campaign.directory):
        existing = _existing_outputs(campaign.directory)
        if existing and not resume:
            raise UsageError(
                f"{campaign.directory} already holds {', '.join(existing)}; pass --resume to reuse it"
            )
        state = CampaignState(campaign)
        current = 0
        error = None
        try:
            if campaign.baseline is not None:
                state.results.append(run_baseline(state))
            for plan in campaign.rounds:
                current = plan.round_index + 1
                state.results.append(run_round(plan, state))
        except Exception as e:
            error = {"round": current, "type": type(e).__name__, "message": str(e)}
            logger.error("[ROUND %d] failed: %s", current, e)
            raise
        finally:
            write_summary(campaign.directory, campaign.name, state.results, error)
    return state.results


# ---------------------------------------------------------------------------
# scenarios and campaign files

def _scenario_single(components, mode: Optional[TrainingMode] = None):
    def build(source, target, detector, untrained, n_rounds):
        comps = frozenset(components)
        labeler = detector if LabelKind.PLT in comps else untrained if LabelKind.ALT in comps else None
        spec = TrainingSetSpec(comps, source, target)
        return [RoundPlan(0, spec, mode or TrainingMode(), labeler)]
    return build


def _scenario_multi_round(source, target, detector, untrained, n_rounds):
    if n_rounds < 1:
        return []
    ft = TrainingMode(TrainMode.FT, PREVIOUS)
    rounds = [RoundPlan(0, TrainingSetSpec(frozenset({LabelKind.ALT}), source, target), ft, untrained)]
    for r in range(1, n_rounds):
        spec = TrainingSetSpec(frozenset({LabelKind.PLT}), source, target)
        rounds.append(RoundPlan(r, spec, ft, detector, labeler_model=PREVIOUS))
    return rounds


SCENARIOS = {
    "ls_only": _scenario_single([LabelKind.LS]),
    "plt_only": _scenario_single([LabelKind.PLT]),
    "alt_only": _scenario_single([LabelKind.ALT]),
    "ls_plt": _scenario_single([LabelKind.LS, LabelKind.PLT]),
    "ls_alt": _scenario_single([LabelKind.LS, LabelKind.ALT]),
    "ls_lt": _scenario_single([LabelKind.LS, LabelKind.LT]),
    "alt_fs": _scenario_single([LabelKind.ALT]),
    "alt_ft": _scenario_single([LabelKind.ALT], TrainingMode(TrainMode.FT, PREVIOUS)),
    "multi_round": _scenario_multi_round,
}

CAMPAIGN_KEYS = {
    "name", "settings", "source", "target", "adapters", "detector", "untrained_detector",
    "trainer", "source_model", "baseline", "scenario", "n_rounds", "rounds", "output_dir",
}


def _model_ref(value, base: Path, data_root) -> Optional[str]:
    if value is None or value == PREVIOUS:
        return value
    return str(resolve_path(value, base, data_root))


def _round_from_dict(index: int, d: dict, source, target, base: Path, data_root) -> RoundPlan:
    if not isinstance(d, dict):
        raise ConfigError(f"round {index} must be a mapping")
    components = d.get("components") or ([d["label_kind"]] if d.get("label_kind") else None)
    if not components:
        raise ConfigError(f"round {index}: no training components given")
    mode = TrainMode(d.get("mode", TrainMode.FT.value if index >= 1 else TrainMode.FS.value))
    init_model = _model_ref(d.get("init_model", PREVIOUS), base, data_root) if mode == TrainMode.FT else None
    return RoundPlan(
        round_index=index,
        training_set=TrainingSetSpec(frozenset(LabelKind(c) for c in components), source, target),
        training_mode=TrainingMode(mode, init_model),
        labeler=d.get("labeler"),
        label_kind=d.get("label_kind"),
        labeler_model=_model_ref(d.get("labeler_model"), base, data_root),
        eval_split=Split(d.get("eval_split", Split.VAL.value)),
    )


def load_campaign(path: Path, cfg: GlobalConfig, out_dir: Optional[Path] = None) -> Campaign:
    path = Path(path)
    doc = read_config_file(path)
    unknown = sorted(set(doc) - CAMPAIGN_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown campaign keys {unknown}")
    if "target" not in doc:
        raise ConfigError(f"{path}: a campaign needs a target dataset")
    if "rounds" in doc and "scenario" in doc:
        raise ConfigError(f"{path}: give either 'scenario' or 'rounds', not both")
    base = path.parent
    root = cfg.data_root
    name = str(doc.get("name", path.stem))

    try:
        adapters = {str(aid): AdapterSpec.from_dict(str(aid), spec)
                    for aid, spec in (doc.get("adapters") or {}).items()}
        target = load_manifest(resolve_path(doc["target"], base, root), root)
        source = load_manifest(resolve_path(doc["source"], base, root), root) if doc.get("source") else None
        detector = doc.get("detector")
        untrained = doc.get("untrained_detector")

        if "scenario" in doc:
            builder = SCENARIOS.get(doc["scenario"])
            if builder is None:
                raise ConfigError(f"unknown scenario '{doc['scenario']}' (known: {', '.join(SCENARIOS)})")
            rounds = builder(source, target, detector, untrained, int(doc.get("n_rounds", 3)))
        else:
            rounds = [_round_from_dict(i, r, source, target, base, root)
                      for i, r in enumerate(doc.get("rounds") or [])]

        baseline = None
        block = doc.get("baseline")
        if block:
            block = {} if block is True else dict(block)
            baseline = Baseline(
                detector=block.get("detector", detector),
                model=_model_ref(block.get("model", PREVIOUS), base, root),
                label=str(block.get("label", "LS only")),
            )
    except (KeyError, ValueError, TypeError) as e:
        raise ConfigError(f"{path}: {e}") from e

    source_model = doc.get("source_model")
    directory = Path(out_dir) if out_dir else resolve_path(doc.get("output_dir", f"runs/{name}"), base)
    return Campaign(
        name=name,
        config=cfg,
        directory=directory,
        target=target,
        adapters=adapters,
        rounds=rounds,
        source=source,
        detector=detector,
        trainer=doc.get("trainer"),
        source_model=resolve_path(source_model, base, root) if source_model else None,
        baseline=baseline,
    )
