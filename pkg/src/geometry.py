"""Ground-plane grid discretization and pinhole projection.

Rows index the world x axis and columns the world y axis; cells are
half-open (lower edge inclusive, upper edge exclusive).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import BehindCameraError, ConfigError, OutOfBoundsError, ParseError


@dataclass(frozen=True)
class WorldPoint:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite world point ({self.x}, {self.y})")


@dataclass(frozen=True)
class CellIndex:
    row: int
    col: int


@dataclass(frozen=True)
class GroundGrid:
    origin: WorldPoint
    cell_size: float
    n_rows: int
    n_cols: int

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ConfigError(f"cell_size must be > 0, got {self.cell_size}")
        if self.n_rows <= 0 or self.n_cols <= 0:
            raise ConfigError(f"grid dimensions must be positive, got {self.n_rows}x{self.n_cols}")

    @classmethod
    def from_extent(cls, width_x: float, length_y: float, cell_size: float = 0.1,
                    origin: WorldPoint = WorldPoint(0.0, 0.0)) -> "GroundGrid":
        return cls(
            origin=origin,
            cell_size=cell_size,
            n_rows=int(round(width_x / cell_size)),
            n_cols=int(round(length_y / cell_size)),
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def extent(self) -> tuple[float, float]:
        return (self.n_rows * self.cell_size, self.n_cols * self.cell_size)

    @property
    def area(self) -> float:
        ex, ey = self.extent
        return ex * ey

    def contains(self, p: WorldPoint) -> bool:
        try:
            world_to_cell(p, self)
        except OutOfBoundsError:
            return False
        return True

    def cells_of(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized world_to_cell over an (N, 2) array.

        Returns (rows, cols, inside_mask); indices are only meaningful where
        the mask is set.
        """
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        rows = np.floor((xy[:, 0] - self.origin.x) / self.cell_size).astype(np.int64)
        cols = np.floor((xy[:, 1] - self.origin.y) / self.cell_size).astype(np.int64)
        inside = (rows >= 0) & (rows < self.n_rows) & (cols >= 0) & (cols < self.n_cols)
        return rows, cols, inside

    def centers(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        xs = self.origin.x + (np.asarray(rows, dtype=np.float64) + 0.5) * self.cell_size
        ys = self.origin.y + (np.asarray(cols, dtype=np.float64) + 0.5) * self.cell_size
        return np.stack([xs, ys], axis=-1)

    def to_dict(self) -> dict:
        return {
            "origin": [self.origin.x, self.origin.y],
            "cell_size": self.cell_size,
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundGrid":
        if not isinstance(d, dict):
            raise ConfigError(f"invalid grid spec {d!r}: expected a mapping")
        try:
            origin = d.get("origin", [0.0, 0.0])
            if isinstance(origin, dict):
                origin = [origin["x"], origin["y"]]
            cell_size = float(d.get("cell_size", 0.1))
            if "n_rows" in d and "n_cols" in d:
                return cls(WorldPoint(float(origin[0]), float(origin[1])), cell_size,
                           int(d["n_rows"]), int(d["n_cols"]))
            width, length = d["extent"]
            return cls.from_extent(float(width), float(length), cell_size,
                                   WorldPoint(float(origin[0]), float(origin[1])))
        except (KeyError, TypeError, ValueError, IndexError, AttributeError, OverflowError) as e:
            raise ConfigError(f"invalid grid spec {d!r}: {e}") from e


# Area-of-interest extents from the dataset descriptions; origins are a convention.
GRID_PRESETS = {
    "wildtrack": (12.0, 36.0),
    "multiviewx": (16.0, 25.0),
}


def preset_grid(name: str, cell_size: float = 0.1) -> GroundGrid:
    key = name.lower()
    if key not in GRID_PRESETS:
        raise ConfigError(f"unknown grid preset '{name}' (choose from {sorted(GRID_PRESETS)})")
    width, length = GRID_PRESETS[key]
    return GroundGrid.from_extent(width, length, cell_size)


def resolve_grid(spec: Union[str, dict, GroundGrid], cell_size: Optional[float] = None) -> GroundGrid:
    """Accepts a preset name, an inline dict or a grid."""
    if isinstance(spec, GroundGrid):
        return spec
    if isinstance(spec, str):
        return preset_grid(spec, cell_size if cell_size is not None else 0.1)
    if isinstance(spec, dict):
        if "preset" in spec:
            return preset_grid(spec["preset"], float(spec.get("cell_size", cell_size or 0.1)))
        return GroundGrid.from_dict(spec)
    raise ConfigError(f"cannot interpret grid spec {spec!r}")


def world_to_cell(p: WorldPoint, grid: GroundGrid) -> CellIndex:
    row = math.floor((p.x - grid.origin.x) / grid.cell_size)
    col = math.floor((p.y - grid.origin.y) / grid.cell_size)
    if not (0 <= row < grid.n_rows and 0 <= col < grid.n_cols):
        raise OutOfBoundsError(f"point ({p.x}, {p.y}) lies outside the area of interest", [p])
    return CellIndex(row, col)


def cell_to_world(c: CellIndex, grid: GroundGrid) -> WorldPoint:
    if not (0 <= c.row < grid.n_rows and 0 <= c.col < grid.n_cols):
        raise OutOfBoundsError(f"cell ({c.row}, {c.col}) outside {grid.n_rows}x{grid.n_cols} grid", [c])
    return WorldPoint(
        grid.origin.x + (c.row + 0.5) * grid.cell_size,
        grid.origin.y + (c.col + 0.5) * grid.cell_size,
    )


@dataclass(frozen=True, eq=False)
class CameraCalibration:
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_width: int
    image_height: int
    camera_id: str = field(default="")

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6, rtol=0.0):
            raise ConfigError(f"camera '{self.camera_id}': rotation is not orthonormal")
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise ConfigError(f"camera '{self.camera_id}': focal lengths must be positive")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ConfigError(f"camera '{self.camera_id}': image dimensions must be positive")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_dict(cls, d: dict, camera_id: str = "") -> "CameraCalibration":
        try:
            w, h = d["image_size"]
            return cls(
                intrinsics=np.array(d["intrinsics"], dtype=np.float64),
                rotation=np.array(d["rotation"], dtype=np.float64),
                translation=np.array(d["translation"], dtype=np.float64),
                image_width=int(w),
                image_height=int(h),
                camera_id=str(d.get("camera_id", camera_id)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"invalid calibration record: {e}") from e

    def to_dict(self) -> dict:
        return {
            "camera_id": self.camera_id,
            "intrinsics": self.intrinsics.reshape(-1).tolist(),
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
            "image_size": [self.image_width, self.image_height],
        }


def load_calibration(path: Union[str, Path], camera_id: Optional[str] = None) -> CameraCalibration:
    """Reads a single-camera document, or picks `camera_id` out of
    a {"cameras": {id: {...}}} document."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ParseError(str(e), path=str(path)) from e
    if not isinstance(doc, dict):
        raise ParseError("calibration document must be a JSON object", path=str(path))
    if "cameras" in doc:
        cams = doc["cameras"]
        if camera_id is None:
            if len(cams) != 1:
                raise ParseError(f"file holds {len(cams)} cameras; pass a camera id", path=str(path))
            camera_id = next(iter(cams))
        if camera_id not in cams:
            raise ParseError(f"camera '{camera_id}' not found (have {sorted(cams)})", path=str(path))
        try:
            return CameraCalibration.from_dict(cams[camera_id], camera_id)
        except ParseError as e:
            raise ParseError(e.detail, path=str(path)) from e
    try:
        return CameraCalibration.from_dict(doc, camera_id or "")
    except ParseError as e:
        raise ParseError(e.detail, path=str(path)) from e


def project_to_image(p: WorldPoint, calib: CameraCalibration) -> tuple[float, float]:
    X = np.array([p.x, p.y, 0.0])
    cam = calib.rotation @ X + calib.translation
    depth = cam[2]
    if depth <= 0:
        raise BehindCameraError(f"point ({p.x}, {p.y}) has depth {depth:.3f} m in camera '{calib.camera_id}'")
    uvw = calib.intrinsics @ cam
    return float(uvw[0] / uvw[2]), float(uvw[1] / uvw[2])


def in_frame(uv: tuple[float, float], calib: CameraCalibration) -> bool:
    u, v = uv
    return 0.0 <= u < calib.image_width and 0.0 <= v < calib.image_height
