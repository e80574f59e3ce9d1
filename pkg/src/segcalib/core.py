"""Geometry types, the semantic class table and pinhole projection.

World frame: x east, y north, z up.  Camera frame: x right, y down,
z along the optical axis.  A pose is the camera position in the world plus
yaw (about world z, counter-clockwise from +x) and pitch (positive looks
up).  Roll is always zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# --- class taxonomy -------------------------------------------------------

INVALID = 0
ROAD = 1
SIDEWALK = 2
BUILDING = 3
FENCE = 4
POLE = 5
TRAFFIC_SIGN = 6
VEGETATION = 7
TERRAIN = 8
SKY = 9
CAR = 10
PEDESTRIAN = 11
CYCLIST = 12
OTHER_DYNAMIC = 13

CLASS_NAMES = (
    "invalid",
    "road",
    "sidewalk",
    "building",
    "fence",
    "pole",
    "traffic_sign",
    "vegetation",
    "terrain",
    "sky",
    "car",
    "pedestrian",
    "cyclist",
    "other_dynamic",
)
NUM_CLASSES = len(CLASS_NAMES)
STATIC_IDS = frozenset(range(ROAD, TERRAIN + 1))
DYNAMIC_IDS = frozenset(range(CAR, NUM_CLASSES))

# Cityscapes colors; invalid is black.
_CITYSCAPES_RGB = (
    (0, 0, 0),
    (128, 64, 128),
    (244, 35, 232),
    (70, 70, 70),
    (190, 153, 153),
    (153, 153, 153),
    (220, 220, 0),
    (107, 142, 35),
    (152, 251, 152),
    (70, 130, 180),
    (0, 0, 142),
    (220, 20, 60),
    (255, 0, 0),
    (0, 0, 70),
)


def class_id(name: str) -> int:
    return CLASS_NAMES.index(name)


def is_dynamic(cid: int) -> bool:
    return cid in DYNAMIC_IDS


@dataclass(frozen=True, eq=False)
class Palette:
    """Class id -> RGB color in [0, 1]^3."""

    colors: np.ndarray

    def __post_init__(self):
        colors = np.array(self.colors, dtype=np.float64)
        if colors.shape != (NUM_CLASSES, 3):
            raise ValueError(f"palette needs {NUM_CLASSES} rgb rows, got {colors.shape}")
        if np.any(colors < 0) or np.any(colors > 1):
            raise ValueError("palette colors must lie in [0, 1]")
        rows = {tuple(c) for c in colors[1:]}
        if len(rows) != NUM_CLASSES - 1:
            raise ValueError("palette must be injective over valid classes")
        colors.setflags(write=False)
        object.__setattr__(self, "colors", colors)

    @classmethod
    def default(cls) -> "Palette":
        return cls(np.array(_CITYSCAPES_RGB, dtype=np.float64) / 255.0)

    def __getitem__(self, cid):
        return self.colors[cid]

    def to_rgb8(self, grid: np.ndarray) -> np.ndarray:
        return np.round(self.colors[grid] * 255).astype(np.uint8)


DEFAULT_PALETTE = Palette.default()


# --- camera -------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> "CameraIntrinsics":
        f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(f, f, width / 2.0, height / 2.0, width, height)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def _wrap_yaw(yaw: float) -> float:
    yaw = math.fmod(yaw, 360.0)
    if yaw <= -180.0:
        yaw += 360.0
    elif yaw > 180.0:
        yaw -= 360.0
    return yaw


@dataclass(frozen=True)
class PoseParams:
    """Camera position (m) in the world plus yaw and pitch in degrees."""

    tx: float
    ty: float
    tz: float
    yaw: float
    pitch: float

    def __post_init__(self):
        values = (self.tx, self.ty, self.tz, self.yaw, self.pitch)
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"pose has non-finite values: {values}")
        if not -180.0 < self.yaw <= 180.0:
            raise ValueError(f"yaw {self.yaw} outside (-180, 180]")
        if not -90.0 < self.pitch < 90.0:
            raise ValueError(f"pitch {self.pitch} outside (-90, 90)")

    @classmethod
    def from_vector(cls, v) -> "PoseParams":
        """Build from (tx, ty, tz, yaw, pitch), wrapping yaw into range."""
        tx, ty, tz, yaw, pitch = (float(x) for x in v)
        return cls(tx, ty, tz, _wrap_yaw(yaw), pitch)

    def as_vector(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz, self.yaw, self.pitch], dtype=np.float64)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz], dtype=np.float64)

    def offset(self, delta) -> "PoseParams":
        return PoseParams.from_vector(self.as_vector() + np.asarray(delta, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class ExtrinsicMatrix:
    """World -> camera transform: X_cam = R @ X_world + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("R is not a proper rotation")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def projection(self, K: CameraIntrinsics) -> np.ndarray:
        """The 3x4 matrix K [R | t]."""
        return K.matrix @ self.matrix[:3]


# Rows are the camera axes expressed in the body frame (x forward, y left, z up).
AXIS_CHANGE = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
AXIS_CHANGE.setflags(write=False)


def rotation_world_to_camera(yaw_deg: float, pitch_deg: float) -> np.ndarray:
    psi = math.radians(yaw_deg)
    theta = math.radians(pitch_deg)
    cy, sy = math.cos(psi), math.sin(psi)
    cp, sp = math.cos(theta), math.sin(theta)
    rz_inv = np.array([[cy, sy, 0.0], [-sy, cy, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    return AXIS_CHANGE @ ry @ rz_inv


def pose_to_extrinsic(p: PoseParams) -> ExtrinsicMatrix:
    R = rotation_world_to_camera(p.yaw, p.pitch)
    return ExtrinsicMatrix(R, -R @ p.position)


def pose_from_extrinsic(E: ExtrinsicMatrix) -> PoseParams:
    center = -E.R.T @ E.t
    fwd = E.R[2]  # optical axis in world coordinates
    yaw = math.degrees(math.atan2(fwd[1], fwd[0]))
    pitch = math.degrees(math.atan2(fwd[2], math.hypot(fwd[0], fwd[1])))
    return PoseParams(float(center[0]), float(center[1]), float(center[2]), _wrap_yaw(yaw), pitch)


Z_NEAR = 0.1


def project(K: CameraIntrinsics, E: ExtrinsicMatrix, X) -> Optional[tuple]:
    """Project one world point to ``(u, v, depth)``.

    Returns ``None`` when the point is at or behind the near plane.
    """
    X = np.asarray(X, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError("point must be finite")
    xc = E.R @ X + E.t
    if xc[2] <= Z_NEAR:
        return None
    return (K.fx * xc[0] / xc[2] + K.cx, K.fy * xc[1] / xc[2] + K.cy, float(xc[2]))


def project_points(K: CameraIntrinsics, E: ExtrinsicMatrix, points: np.ndarray):
    """Vectorised :func:`project`: returns ``(u, v, depth, in_front)``.

    Entries of u, v for points behind the near plane are meaningless.
    """
    xc = points @ E.R.T + E.t
    depth = xc[:, 2]
    in_front = depth > Z_NEAR
    safe = np.where(in_front, depth, 1.0)
    u = K.fx * xc[:, 0] / safe + K.cx
    v = K.fy * xc[:, 1] / safe + K.cy
    return u, v, depth, in_front


# --- data containers -----------------------------------------------------

def _readonly(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabeledPointCloud:
    points: np.ndarray
    labels: np.ndarray
    scan_index: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        labels = np.array(self.labels, dtype=np.uint8).reshape(-1)
        if len(pts) != len(labels):
            raise ValueError(f"{len(pts)} points but {len(labels)} labels")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        if labels.size and labels.max() >= NUM_CLASSES:
            raise ValueError(f"unknown class id {int(labels.max())}")
        object.__setattr__(self, "points", _readonly(pts))
        object.__setattr__(self, "labels", _readonly(labels))
        if self.scan_index is not None:
            idx = np.array(self.scan_index, dtype=np.int64).reshape(-1)
            if len(idx) != len(pts):
                raise ValueError("scan_index length mismatch")
            object.__setattr__(self, "scan_index", _readonly(idx))

    def __len__(self):
        return len(self.labels)

    @classmethod
    def empty(cls) -> "LabeledPointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.uint8))

    def select(self, mask) -> "LabeledPointCloud":
        idx = None if self.scan_index is None else self.scan_index[mask]
        return LabeledPointCloud(self.points[mask], self.labels[mask], idx)

    def transformed(self, T: np.ndarray) -> "LabeledPointCloud":
        T = np.asarray(T, dtype=np.float64)
        return LabeledPointCloud(self.points @ T[:3, :3].T + T[:3, 3], self.labels, self.scan_index)

    @classmethod
    def concatenate(cls, clouds) -> "LabeledPointCloud":
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        idx = None
        if all(c.scan_index is not None for c in clouds):
            idx = np.concatenate([c.scan_index for c in clouds])
        return cls(
            np.concatenate([c.points for c in clouds]),
            np.concatenate([c.labels for c in clouds]),
            idx,
        )

    def class_counts(self) -> dict:
        ids, counts = np.unique(self.labels, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}


@dataclass(frozen=True, eq=False)
class SemanticImage:
    """Row-major grid of class ids, shape (height, width)."""

    grid: np.ndarray
    palette: Palette = field(default=DEFAULT_PALETTE)

    def __post_init__(self):
        grid = np.array(self.grid, dtype=np.uint8)
        if grid.ndim != 2:
            raise ValueError("class grid must be 2-D")
        if grid.size and grid.max() >= NUM_CLASSES:
            raise ValueError(f"unknown class id {int(grid.max())}")
        object.__setattr__(self, "grid", _readonly(grid))

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def shape(self):
        return self.grid.shape

    def colors(self) -> np.ndarray:
        return self.palette.colors[self.grid]

    def with_grid(self, grid) -> "SemanticImage":
        return SemanticImage(grid, self.palette)

    def __eq__(self, other):
        if not isinstance(other, SemanticImage):
            return NotImplemented
        return self.grid.shape == other.grid.shape and bool(np.array_equal(self.grid, other.grid))

    __hash__ = None
