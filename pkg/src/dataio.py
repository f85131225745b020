"""
File formats: detections/annotations (JSON-lines), MVHM heatmap rasters,
dataset manifests and their splits, and label sets.

All coordinates in files are world metres. Every writer goes through a
temporary file plus atomic rename.
"""
from __future__ import annotations

import json
import logging
import math
import os
import re
import struct
import tempfile
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import yaml

from .errors import (
    ConfigError,
    DuplicateDetectionError,
    DuplicateFrameError,
    InvalidRatiosError,
    ParseError,
    RasterFormatError,
    UnitError,
)
from .geometry import CameraCalibration, GroundGrid, load_calibration, resolve_grid
from .heatmap import Detection, DetectionSet, Heatmap

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# atomic writes

def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: PathLike, obj) -> Path:
    return atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def safe_name(frame_id: str) -> str:
    """File-system safe stem for a frame id."""
    return re.sub(r"[^A-Za-z0-9._-]", "_", frame_id)


def resolve_path(p: PathLike, base: Optional[Path] = None, data_root: Optional[PathLike] = None) -> Path:
    p = Path(p)
    if p.is_absolute():
        return p
    if data_root:
        return Path(data_root) / p
    return (base or Path.cwd()) / p


# ---------------------------------------------------------------------------
# canonical detections / annotations (JSON-lines)

@dataclass(frozen=True)
class AnnotatedFrame:
    frame_id: str
    gts: DetectionSet
    timestamp: Optional[float] = None


def format_frame(frame: DetectionSet, timestamp: Optional[float] = None) -> str:
    record = {
        "frame_id": frame.frame_id,
        "detections": [
            {"x": d.location.x, "y": d.location.y, "score": d.score} for d in frame.detections
        ],
    }
    if timestamp is not None:
        record["timestamp"] = timestamp
    return json.dumps(record)


def write_detections(path: PathLike, frames: Sequence[DetectionSet]) -> Path:
    seen = set()
    lines = []
    for frame in frames:
        if frame.frame_id in seen:
            raise DuplicateFrameError(f"frame '{frame.frame_id}' written twice", path=str(path))
        seen.add(frame.frame_id)
        lines.append(format_frame(frame) + "\n")
    return atomic_write_text(path, "".join(lines))


def write_annotations(path: PathLike, frames: Sequence[AnnotatedFrame]) -> Path:
    lines = [format_frame(f.gts, f.timestamp) + "\n" for f in frames]
    return atomic_write_text(path, "".join(lines))


def _as_float(value, what: str, path: str, line: int) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"{what} must be a number, got {value!r}", path=path, line=line)
    try:
        value = float(value)
    except OverflowError:
        raise ParseError(f"{what} is too large for a float", path=path, line=line) from None
    if not math.isfinite(value):
        raise ParseError(f"{what} must be finite, got {value}", path=path, line=line)
    return value


def _parse_record(raw: str, path: str, line: int, fixed_score: Optional[float]) -> tuple[DetectionSet, Optional[float]]:
    try:
        record = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg} (column {e.colno})", path=path, line=line) from e
    except ValueError as e:
        raise ParseError(f"invalid JSON: {e}", path=path, line=line) from e
    if not isinstance(record, dict):
        raise ParseError("record must be a JSON object", path=path, line=line)
    frame_id = record.get("frame_id")
    if isinstance(frame_id, int) and not isinstance(frame_id, bool):
        frame_id = str(frame_id)
    if not isinstance(frame_id, str) or not frame_id:
        raise ParseError("missing or empty 'frame_id'", path=path, line=line)
    items = record.get("detections")
    if not isinstance(items, list):
        raise ParseError("'detections' must be a list", path=path, line=line)

    dets = []
    for k, item in enumerate(items):
        if not isinstance(item, dict) or "x" not in item or "y" not in item:
            raise ParseError(f"detection {k} needs 'x' and 'y'", path=path, line=line)
        x = _as_float(item["x"], f"detection {k} x", path, line)
        y = _as_float(item["y"], f"detection {k} y", path, line)
        if fixed_score is not None:
            score = fixed_score
        else:
            score = _as_float(item.get("score", 1.0), f"detection {k} score", path, line)
            if not 0.0 <= score <= 1.0:
                raise ParseError(f"detection {k} score {score} outside [0, 1]", path=path, line=line)
        dets.append(Detection.at(x, y, score))

    timestamp = record.get("timestamp")
    if timestamp is not None:
        timestamp = _as_float(timestamp, "timestamp", path, line)
    try:
        return DetectionSet(frame_id, tuple(dets)), timestamp
    except DuplicateDetectionError as e:
        raise DuplicateDetectionError(e.detail, path=path, line=line) from e


def _iter_records(path: PathLike, fixed_score: Optional[float]):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise ParseError(str(e), path=str(path)) from e
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        frame, ts = _parse_record(raw, str(path), lineno, fixed_score)
        if frame.frame_id in seen:
            raise DuplicateFrameError(
                f"frame '{frame.frame_id}' already defined on line {seen[frame.frame_id]}",
                path=str(path), line=lineno,
            )
        seen[frame.frame_id] = lineno
        yield frame, ts, lineno


def read_detections(path: PathLike) -> list[DetectionSet]:
    return [frame for frame, _, _ in _iter_records(path, fixed_score=None)]


# ---------------------------------------------------------------------------
# annotation formats

class AnnotationFormat(str, Enum):
    CANONICAL = "canonical"
    WILDTRACK = "wildtrack-json"
    MULTIVIEWX = "multiviewx-json"


# positionID decoding on the datasets' 2.5 cm ground grids (columns per row)
_POSITION_GRIDS = {
    AnnotationFormat.WILDTRACK: (480, 0.025),
    AnnotationFormat.MULTIVIEWX: (640, 0.025),
}

# share of out-of-grid records that means the file uses other units
UNIT_ERROR_FRACTION = 0.10


def _parse_position_files(path: Path, fmt: AnnotationFormat) -> list[AnnotatedFrame]:
    n_cols, step = _POSITION_GRIDS[fmt]
    files = sorted(path.glob("*.json")) if path.is_dir() else [path]
    frames = []
    for file in files:
        try:
            records = json.loads(file.read_text(encoding="utf-8"))
        except (OSError, UnicodeDecodeError) as e:
            raise ParseError(str(e), path=str(file)) from e
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e.msg}", path=str(file), line=e.lineno) from e
        except ValueError as e:
            raise ParseError(f"invalid JSON: {e}", path=str(file)) from e
        if not isinstance(records, list):
            raise ParseError("expected a JSON array of person records", path=str(file))
        points = []
        for k, rec in enumerate(records):
            pos = rec.get("positionID") if isinstance(rec, dict) else None
            if isinstance(pos, bool) or not isinstance(pos, int) or pos < 0:
                raise ParseError(f"record {k}: 'positionID' must be a non-negative integer", path=str(file))
            points.append((step * (pos % n_cols), step * (pos // n_cols)))
        try:
            gts = DetectionSet.from_points(file.stem, points)
        except DuplicateDetectionError as e:
            raise DuplicateDetectionError(e.detail, path=str(file)) from e
        frames.append(AnnotatedFrame(file.stem, gts))
    return frames


def parse_annotations(path: PathLike, fmt: Union[str, AnnotationFormat] = AnnotationFormat.CANONICAL,
                      grid: Optional[GroundGrid] = None) -> list[AnnotatedFrame]:
    """Ground-truth frames in world metres; scores are fixed at 1.0.

    With a grid, out-of-bounds records are tolerated up to 10% of the file;
    beyond that the file is assumed to be in other units and rejected.
    """
    path = Path(path)
    try:
        fmt = AnnotationFormat(fmt)
    except ValueError as e:
        raise ConfigError(f"unknown annotation format '{fmt}'") from e
    if not path.exists():
        raise ParseError("file not found", path=str(path))

    if fmt == AnnotationFormat.CANONICAL:
        frames = [AnnotatedFrame(f.frame_id, f, ts) for f, ts, _ in _iter_records(path, fixed_score=1.0)]
    else:
        frames = _parse_position_files(path, fmt)
        ids = [f.frame_id for f in frames]
        if len(set(ids)) != len(ids):
            raise DuplicateFrameError("duplicate frame ids across annotation files", path=str(path))

    if grid is not None:
        total = sum(len(f.gts) for f in frames)
        outside = 0
        for f in frames:
            if len(f.gts):
                _, _, inside = grid.cells_of(f.gts.xy())
                outside += int((~inside).sum())
        if total and outside / total > UNIT_ERROR_FRACTION:
            raise UnitError(
                f"{outside} of {total} annotations fall outside the "
                f"{grid.extent[0]:g}x{grid.extent[1]:g} m area; wrong units or grid?",
                path=str(path),
            )
        if outside:
            logger.warning("%s: %d annotation(s) outside the area of interest", path, outside)
    return frames


# ---------------------------------------------------------------------------
# MVHM heatmap rasters

MVHM_MAGIC = b"MVHM"
MVHM_VERSION = 1
_PAYLOAD_DTYPE = np.dtype("<f4")


def encode_heatmap(h: Heatmap) -> bytes:
    header = json.dumps(
        {"grid": h.grid.to_dict(), "frame_id": h.frame_id, "dtype": "f32le"}, sort_keys=True
    ).encode("utf-8")
    payload = np.ascontiguousarray(h.values, dtype=_PAYLOAD_DTYPE).tobytes()
    return MVHM_MAGIC + bytes([MVHM_VERSION]) + struct.pack("<I", len(header)) + header + payload


def decode_heatmap(blob: bytes, source: str = "<bytes>") -> Heatmap:
    if len(blob) < 9:
        raise RasterFormatError("truncated raster: missing preamble", path=source)
    if blob[:4] != MVHM_MAGIC:
        raise RasterFormatError(f"bad magic {blob[:4]!r}", path=source)
    if blob[4] != MVHM_VERSION:
        raise RasterFormatError(f"unsupported version {blob[4]}", path=source)
    (header_len,) = struct.unpack("<I", blob[5:9])
    if 9 + header_len > len(blob):
        raise RasterFormatError("truncated raster: header extends past end of file", path=source)
    try:
        header = json.loads(blob[9:9 + header_len].decode("utf-8"))
    except ValueError as e:
        raise RasterFormatError(f"unreadable header: {e}", path=source) from e
    if not isinstance(header, dict) or header.get("dtype") != "f32le" or "grid" not in header:
        raise RasterFormatError("header must hold 'grid' and dtype 'f32le'", path=source)
    try:
        grid = GroundGrid.from_dict(header["grid"])
    except ConfigError as e:
        raise RasterFormatError(str(e), path=source) from e

    payload = blob[9 + header_len:]
    expected = grid.n_rows * grid.n_cols * _PAYLOAD_DTYPE.itemsize
    if len(payload) != expected:
        raise RasterFormatError(
            f"payload is {len(payload)} bytes, expected {expected} for a {grid.n_rows}x{grid.n_cols} grid",
            path=source,
        )
    values = np.frombuffer(payload, dtype=_PAYLOAD_DTYPE).reshape(grid.shape)
    frame_id = header.get("frame_id")
    try:
        return Heatmap(grid, values.astype(np.float64), frame_id if frame_id else None)
    except ValueError as e:
        raise RasterFormatError(str(e), path=source) from e


def write_heatmap(path: PathLike, h: Heatmap) -> Path:
    return atomic_write_bytes(path, encode_heatmap(h))


def read_heatmap(path: PathLike) -> Heatmap:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise RasterFormatError(str(e), path=str(path)) from e
    return decode_heatmap(blob, str(path))


# ---------------------------------------------------------------------------
# dataset manifests and splits

class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class Ordering(str, Enum):
    SEQUENTIAL = "sequential"
    SEEDED = "seeded"


@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    images: dict = field(default_factory=dict)


@dataclass(frozen=True)
class AnnotationRef:
    path: Path
    format: AnnotationFormat = AnnotationFormat.CANONICAL


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    name: str
    grid: GroundGrid
    cameras: dict = field(default_factory=dict)
    frames: tuple[FrameRecord, ...] = ()
    split: dict = field(default_factory=dict)
    annotations: Optional[AnnotationRef] = None

    def __post_init__(self):
        ids = [f.frame_id for f in self.frames]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"manifest '{self.name}' lists a frame more than once")
        if self.split:
            missing = [i for i in ids if i not in self.split]
            extra = [k for k in self.split if k not in set(ids)]
            if missing or extra:
                raise ConfigError(
                    f"manifest '{self.name}': split must cover every frame exactly once "
                    f"(unassigned {missing[:5]}, unknown {extra[:5]})"
                )

    @property
    def frame_ids(self) -> list[str]:
        return [f.frame_id for f in self.frames]

    def frames_in(self, split: Optional[Split]) -> list[FrameRecord]:
        if split is None:
            return list(self.frames)
        if not self.split:
            raise ConfigError(f"manifest '{self.name}' has no split assigned")
        return [f for f in self.frames if self.split[f.frame_id] == Split(split)]

    def load_annotations(self) -> dict[str, AnnotatedFrame]:
        if self.annotations is None:
            return {}
        frames = parse_annotations(self.annotations.path, self.annotations.format, self.grid)
        return {f.frame_id: f for f in frames}

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "grid": self.grid.to_dict(),
            "cameras": {cid: cam.to_dict() for cid, cam in self.cameras.items()},
            "frames": [{"frame_id": f.frame_id, "images": dict(f.images)} for f in self.frames],
            "split": {k: Split(v).value for k, v in self.split.items()},
            "annotations": (
                {"path": str(self.annotations.path), "format": self.annotations.format.value}
                if self.annotations else None
            ),
        }


def load_manifest(path: PathLike, data_root: Optional[PathLike] = None) -> DatasetManifest:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as e:
        raise ParseError(f"cannot read manifest: {e}", path=str(path)) from e
    if not isinstance(doc, dict):
        raise ParseError("manifest must be a mapping", path=str(path))
    try:
        return manifest_from_dict(doc, path.parent, data_root)
    except (KeyError, ValueError, TypeError, AttributeError) as e:
        raise ParseError(f"malformed manifest: {type(e).__name__}: {e}", path=str(path)) from e


def manifest_from_dict(doc: dict, base: Path, data_root: Optional[PathLike] = None) -> DatasetManifest:
    name = str(doc.get("name", "dataset"))
    grid = resolve_grid(doc.get("grid", "wildtrack"))

    cameras = {}
    for cam_id, spec in (doc.get("cameras") or {}).items():
        if isinstance(spec, dict):
            cameras[str(cam_id)] = CameraCalibration.from_dict(spec, str(cam_id))
        else:
            cameras[str(cam_id)] = load_calibration(resolve_path(spec, base, data_root), str(cam_id))

    annotations = None
    ann = doc.get("annotations")
    if ann:
        if isinstance(ann, str):
            ann = {"path": ann}
        annotations = AnnotationRef(
            resolve_path(ann["path"], base, data_root),
            AnnotationFormat(ann.get("format", AnnotationFormat.CANONICAL.value)),
        )

    if "frames" in doc and doc["frames"] is not None:
        frames = []
        for rec in doc["frames"]:
            if isinstance(rec, (str, int)):
                rec = {"frame_id": str(rec)}
            images = {
                str(cam): str(resolve_path(p, base, data_root)) for cam, p in (rec.get("images") or {}).items()
            }
            frames.append(FrameRecord(str(rec["frame_id"]), images))
    elif annotations is not None:
        frames = [FrameRecord(f.frame_id) for f in parse_annotations(annotations.path, annotations.format, grid)]
    else:
        raise ConfigError(f"manifest '{name}' lists no frames and no annotations")

    split = {str(k): Split(v) for k, v in (doc.get("split") or {}).items()}
    return DatasetManifest(name, grid, cameras, tuple(frames), split, annotations)


def save_manifest(path: PathLike, manifest: DatasetManifest) -> Path:
    return atomic_write_json(path, manifest.to_dict())


def split_dataset(
    manifest: DatasetManifest,
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    ordering: Union[str, Ordering] = Ordering.SEQUENTIAL,
    seed: int = 0,
) -> DatasetManifest:
    """Assigns train/val[/test] by floor allocation, remainder to train.

    Sequential keeps capture order (the test split is the final frames).
    """
    ratios = [float(r) for r in ratios]
    if len(ratios) not in (2, 3) or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidRatiosError(f"ratios must be 2 or 3 non-negative values summing to 1, got {ratios}")
    n = len(manifest.frames)
    counts = [int(math.floor(n * r + 1e-9)) for r in ratios]
    counts[0] += n - sum(counts)
    labels = [Split.TRAIN, Split.VAL, Split.TEST][:len(ratios)]
    for label, r, c in zip(labels, ratios, counts):
        if r > 0 and c == 0:
            raise InvalidRatiosError(f"split '{label.value}' would be empty with {n} frames")

    if Ordering(ordering) == Ordering.SEEDED:
        order = np.random.default_rng(seed).permutation(n).tolist()
    else:
        order = list(range(n))

    split = {}
    pos = 0
    for label, c in zip(labels, counts):
        for idx in order[pos:pos + c]:
            split[manifest.frames[idx].frame_id] = label
        pos += c
    return replace(manifest, split=split)


# ---------------------------------------------------------------------------
# label sets

class LabelKind(str, Enum):
    LS = "LS"
    LT = "LT"
    PLT = "PLT"
    ALT = "ALT"

    @property
    def is_generated(self) -> bool:
        return self in (LabelKind.PLT, LabelKind.ALT)


@dataclass(frozen=True)
class Provenance:
    adapter_id: str
    command_digest: str
    input_digest: str
    round_index: int

    def to_dict(self) -> dict:
        return {
            "adapter_id": self.adapter_id,
            "command_digest": self.command_digest,
            "input_digest": self.input_digest,
            "round": self.round_index,
        }


@dataclass(eq=False)
class LabelSet:
    kind: LabelKind
    dataset: str
    frames: dict  # frame_id -> DetectionSet, in frame order
    heatmaps: dict = field(default_factory=dict)  # frame_id -> raster path
    provenance: Optional[Provenance] = None
    directory: Optional[Path] = None

    def __post_init__(self):
        self.kind = LabelKind(self.kind)
        if self.kind.is_generated and self.provenance is None:
            raise ConfigError(f"{self.kind.value} labels must carry provenance")

    def check_frames(self, manifest: DatasetManifest):
        known = set(manifest.frame_ids)
        unknown = [f for f in self.frames if f not in known]
        if unknown:
            raise ConfigError(
                f"{self.kind.value} labels reference frames missing from '{manifest.name}': {unknown[:5]}"
            )

    @classmethod
    def from_annotations(cls, kind: LabelKind, manifest: DatasetManifest,
                         frame_ids: Iterable[str]) -> "LabelSet":
        annotations = manifest.load_annotations()
        frames = {}
        for fid in frame_ids:
            if fid not in annotations:
                raise ConfigError(f"no ground truth for frame '{fid}' in '{manifest.name}'")
            frames[fid] = annotations[fid].gts
        return cls(kind, manifest.name, frames)


LABEL_MANIFEST = "label_manifest.json"
LABEL_DETECTIONS = "detections.jsonl"
LABEL_PROVENANCE = "provenance.json"


def write_label_set(directory: PathLike, labels: LabelSet) -> Path:
    """Writes detections, the per-frame label manifest and provenance.

    The label manifest holds only what the labels are (no provenance), so two
    rounds producing the same labels produce the same manifest bytes.
    """
    directory = Path(directory)
    write_detections(directory / LABEL_DETECTIONS, list(labels.frames.values()))
    entries = []
    for fid, dets in labels.frames.items():
        entry = {"frame_id": fid, "detections": len(dets)}
        if fid in labels.heatmaps:
            entry["heatmap"] = Path(labels.heatmaps[fid]).relative_to(directory).as_posix()
        entries.append(entry)
    atomic_write_json(directory / LABEL_MANIFEST, {"dataset": labels.dataset, "frames": entries})
    prov = {"kind": labels.kind.value}
    if labels.provenance is not None:
        prov.update(labels.provenance.to_dict())
    atomic_write_json(directory / LABEL_PROVENANCE, prov)
    return directory


def read_label_set(directory: PathLike) -> LabelSet:
    directory = Path(directory)
    manifest_path = directory / LABEL_MANIFEST
    try:
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
        prov = json.loads((directory / LABEL_PROVENANCE).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ParseError(f"unreadable label set: {e}", path=str(directory)) from e
    dets = {d.frame_id: d for d in read_detections(directory / LABEL_DETECTIONS)}
    frames, heatmaps = {}, {}
    for entry in doc["frames"]:
        fid = entry["frame_id"]
        frames[fid] = dets[fid]
        if "heatmap" in entry:
            heatmaps[fid] = directory / entry["heatmap"]
    provenance = None
    if "adapter_id" in prov:
        provenance = Provenance(prov["adapter_id"], prov["command_digest"], prov["input_digest"], prov["round"])
    return LabelSet(LabelKind(prov["kind"]), doc["dataset"], frames, heatmaps, provenance, directory)
