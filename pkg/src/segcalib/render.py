"""Point-splat rasterizer for labeled point clouds.

Each visible point is drawn as a filled disc of radius ``lam / depth``
(clamped) around its rounded pixel position.  A pixel at integer offset
(dx, dy) from the disc centre is covered when ``dx**2 + dy**2 < r**2``, so
a radius of 1 covers exactly one pixel.
A depth buffer keeps the nearest splat; exact depth ties go to the lower
point index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .core import (
    INVALID,
    SKY,
    DYNAMIC_IDS,
    CameraIntrinsics,
    LabeledPointCloud,
    PoseParams,
    SemanticImage,
    DEFAULT_PALETTE,
    ExtrinsicMatrix,
    Z_NEAR,
    pose_to_extrinsic,
    rotation_world_to_camera,
)
from .errors import DimensionMismatchError


@dataclass(frozen=True)
class RenderConfig:
    lam: float = 40.0
    min_radius: float = 1.0
    max_radius: float = 50.0
    background_class: int = SKY

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if not 1 <= self.min_radius <= self.max_radius:
            raise ValueError("need 1 <= min_radius <= max_radius")
        if self.background_class not in (SKY, INVALID):
            raise ValueError("background must be sky or invalid")


@njit(cache=True, nogil=True, inline="always")
def _to_pixel(R, t, fx, fy, cx, cy, x, y, z):
    zc = R[2, 0] * x + R[2, 1] * y + R[2, 2] * z + t[2]
    xc = R[0, 0] * x + R[0, 1] * y + R[0, 2] * z + t[0]
    yc = R[1, 0] * x + R[1, 1] * y + R[1, 2] * z + t[1]
    return fx * xc / zc + cx, fy * yc / zc + cy, zc


@njit(cache=True, nogil=True)
def _project_kernel(points, R, t, fx, fy, cx, cy):
    n = points.shape[0]
    u = np.empty(n)
    v = np.empty(n)
    depth = np.empty(n)
    for i in range(n):
        u[i], v[i], depth[i] = _to_pixel(R, t, fx, fy, cx, cy,
                                         points[i, 0], points[i, 1], points[i, 2])
    return u, v, depth


@njit(cache=True, nogil=True, inline="always")
def _splat_radius(lam, z, rmin, rmax):
    r = lam / z
    if r < rmin:
        r = rmin
    if r > rmax:
        r = rmax
    return r


@njit(cache=True, nogil=True)
def _render_kernel(points, labels, R, t, fx, fy, cx, cy, width, height,
                   lam, rmin, rmax, background, znear):
    grid = np.full((height, width), background, dtype=np.uint8)
    zbuf = np.full((height, width), np.inf)
    for i in range(points.shape[0]):
        u, v, z = _to_pixel(R, t, fx, fy, cx, cy, points[i, 0], points[i, 1], points[i, 2])
        if not z > znear:
            continue
        r = _splat_radius(lam, z, rmin, rmax)
        # cull before any int conversion; far-off centres may be huge
        if not (u > -r - 1.0 and u < width + r + 1.0):
            continue
        if not (v > -r - 1.0 and v < height + r + 1.0):
            continue
        ci = int(math.floor(u + 0.5))
        cj = int(math.floor(v + 0.5))
        reach = int(math.floor(r))
        r2 = r * r
        lab = labels[i]
        for dy in range(-reach, reach + 1):
            row = cj + dy
            if row < 0 or row >= height:
                continue
            rem = r2 - dy * dy
            if rem <= 0.0:
                continue
            # largest hw with hw**2 < rem
            hw = int(math.sqrt(rem))
            while (hw + 1) * (hw + 1) < rem:
                hw += 1
            while hw * hw >= rem:
                hw -= 1
            lo = ci - hw
            if lo < 0:
                lo = 0
            hi = ci + hw
            if hi > width - 1:
                hi = width - 1
            for col in range(lo, hi + 1):
                if z < zbuf[row, col]:
                    zbuf[row, col] = z
                    grid[row, col] = lab
    return grid


def splat_geometry(points, K: CameraIntrinsics, E: ExtrinsicMatrix, cfg: RenderConfig):
    """Pixel centres, depths and disc radii of every point, plus an in-front flag.

    Shares its arithmetic with the rasterizer, so results agree bit for bit.
    """
    u, v, depth = _project_kernel(np.ascontiguousarray(points, dtype=np.float64),
                                  E.R, E.t, K.fx, K.fy, K.cx, K.cy)
    radius = np.array([_splat_radius(cfg.lam, z, cfg.min_radius, cfg.max_radius)
                       for z in depth]) if len(depth) else np.zeros(0)
    return u, v, depth, radius, depth > Z_NEAR


def render_grid(points, labels, K: CameraIntrinsics, E: ExtrinsicMatrix, cfg: RenderConfig):
    return _render_kernel(points, labels, E.R, E.t, float(K.fx), float(K.fy),
                          float(K.cx), float(K.cy), int(K.width), int(K.height),
                          float(cfg.lam), float(cfg.min_radius), float(cfg.max_radius),
                          np.uint8(cfg.background_class), Z_NEAR)


def render(cloud: LabeledPointCloud, pose: PoseParams, K: CameraIntrinsics,
           cfg: RenderConfig = RenderConfig(), palette=DEFAULT_PALETTE) -> SemanticImage:
    """Rasterize ``cloud`` as seen from ``pose``."""
    assert_static(cloud)
    grid = render_grid(cloud.points, cloud.labels, K, pose_to_extrinsic(pose), cfg)
    return SemanticImage(grid, palette)


class VectorRenderer:
    """Renders from raw (tx, ty, tz, yaw, pitch) vectors without pose validation.

    Used inside the optimizer, where simplex vertices may leave the nominal
    yaw range.
    """

    def __init__(self, cloud: LabeledPointCloud, K: CameraIntrinsics, cfg: RenderConfig):
        self.points = np.ascontiguousarray(cloud.points)
        self.labels = np.ascontiguousarray(cloud.labels)
        self.K = K
        self.cfg = cfg

    def extrinsic(self, x) -> ExtrinsicMatrix:
        R = rotation_world_to_camera(float(x[3]), float(x[4]))
        return ExtrinsicMatrix(R, -R @ np.asarray(x[:3], dtype=np.float64))

    def __call__(self, x) -> np.ndarray:
        return render_grid(self.points, self.labels, self.K, self.extrinsic(x), self.cfg)


def mask_spurious_sky(rendered: SemanticImage, target: SemanticImage) -> SemanticImage:
    """Invalidate rendered sky pixels that are not sky in the target."""
    if rendered.shape != target.shape:
        raise DimensionMismatchError(f"{rendered.shape} vs {target.shape}")
    return rendered.with_grid(mask_spurious_sky_grid(rendered.grid, target.grid))


def mask_spurious_sky_grid(rendered: np.ndarray, target: np.ndarray) -> np.ndarray:
    return np.where((rendered == SKY) & (target != SKY), np.uint8(INVALID), rendered)


def crop_lower_half(img: SemanticImage) -> SemanticImage:
    if img.height < 2:
        raise ValueError("image needs at least two rows")
    return img.with_grid(img.grid[img.height // 2:])


def tune_lambda(cloud: LabeledPointCloud, pose: PoseParams, K: CameraIntrinsics,
                target: SemanticImage, cfg: RenderConfig = RenderConfig(),
                start: float = 1.0, factor: float = 1.25, max_lam: float = 1e4) -> float:
    """Grow the splat scale until the rendered view is no sparser than the target.

    Sparseness is the fraction of background/invalid pixels.  Returns the
    first scale on the geometric ladder that meets it (or ``max_lam``).
    """
    bg = (SKY, INVALID)
    target_empty = np.isin(target.grid, bg).mean()
    lam = start
    while lam < max_lam:
        trial = RenderConfig(lam, cfg.min_radius, cfg.max_radius, cfg.background_class)
        grid = render(cloud, pose, K, trial).grid
        if np.isin(grid, bg).mean() <= target_empty:
            return lam
        lam *= factor
    return max_lam


def assert_static(cloud: LabeledPointCloud):
    if np.isin(cloud.labels, list(DYNAMIC_IDS)).any():
        raise ValueError("cloud still holds dynamic classes; run remove_dynamic first")
