"""Build a merged, labeled environment cloud from ego-located lidar scans."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import NUM_CLASSES, LabeledPointCloud
from .errors import InsufficientOverlapError

log = logging.getLogger(__name__)

MIN_CORRESPONDENCES = 10


@dataclass(frozen=True, eq=False)
class Scan:
    """A sensor-frame cloud plus the 4x4 sensor-to-world pose at capture."""

    cloud: LabeledPointCloud
    vehicle_pose: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        T = np.array(self.vehicle_pose, dtype=np.float64)
        if T.shape != (4, 4):
            raise ValueError("vehicle_pose must be 4x4")
        R = T[:3, :3]
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6 or not np.allclose(T[3], [0, 0, 0, 1]):
            raise ValueError("vehicle_pose is not a rigid transform")
        T.setflags(write=False)
        object.__setattr__(self, "vehicle_pose", T)


@dataclass(frozen=True)
class IcpParams:
    max_correspondence_dist: float = 1.0
    max_iterations: int = 50
    convergence_delta: float = 1e-6
    voxel_size: float = 0.1

    def __post_init__(self):
        if not (self.max_correspondence_dist > 0 and self.max_iterations > 0
                and self.convergence_delta > 0 and self.voxel_size > 0):
            raise ValueError("ICP parameters must be strictly positive")


def rigid_transform(R=None, t=None) -> np.ndarray:
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if t is not None:
        T[:3, 3] = t
    return T


def filter_by_range(s: Scan, d_max: float) -> Scan:
    """Drop points farther than ``d_max`` from the sensor."""
    if not d_max > 0:
        raise ValueError("d_max must be positive")
    keep = np.linalg.norm(s.cloud.points, axis=1) <= d_max
    return Scan(s.cloud.select(keep), s.vehicle_pose, s.timestamp)


def to_world(s: Scan) -> LabeledPointCloud:
    return s.cloud.transformed(s.vehicle_pose)


def best_fit_transform(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares rigid transform mapping ``src`` onto ``dst`` (Kabsch)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return rigid_transform(R, cd - R @ cs)


@dataclass
class IcpResult:
    transform: np.ndarray
    rms_history: List[float] = field(default_factory=list)
    converged: bool = False


def icp(source: LabeledPointCloud, target: LabeledPointCloud, init=None,
        params: IcpParams = IcpParams(), tree: Optional[cKDTree] = None) -> IcpResult:
    """Point-to-point ICP.

    The recorded residual is the truncated RMS ``sqrt(mean(min(d, tau)**2))``
    with ``tau`` the correspondence radius; it never increases between
    iterations.
    """
    if len(source) == 0 or len(target) == 0:
        raise InsufficientOverlapError("empty cloud")
    tau = params.max_correspondence_dist
    tree = tree if tree is not None else cKDTree(target.points)
    T = np.eye(4) if init is None else np.array(init, dtype=np.float64)
    src = source.points
    history = []
    converged = False

    def residual(T):
        moved = src @ T[:3, :3].T + T[:3, 3]
        d, idx = tree.query(moved, distance_upper_bound=tau)
        inl = np.isfinite(d)
        rms = float(np.sqrt(np.mean(np.minimum(d, tau) ** 2)))
        return moved, idx, inl, rms

    for it in range(params.max_iterations):
        moved, idx, inl, rms = residual(T)
        if np.count_nonzero(inl) < MIN_CORRESPONDENCES:
            raise InsufficientOverlapError(
                f"only {np.count_nonzero(inl)} correspondences within {tau} m")
        history.append(rms)
        if rms == 0.0 or (it > 0 and history[-2] - rms < params.convergence_delta):
            converged = True
            break
        T = best_fit_transform(moved[inl], target.points[idx[inl]]) @ T
    else:
        history.append(residual(T)[3])
    return IcpResult(T, history, converged)


def icp_align(source: LabeledPointCloud, target: LabeledPointCloud, init=None,
              params: IcpParams = IcpParams()) -> np.ndarray:
    """4x4 transform that moves ``source`` onto ``target``."""
    return icp(source, target, init, params).transform


def voxel_downsample(cloud: LabeledPointCloud, voxel: float) -> LabeledPointCloud:
    """One point per occupied voxel, at the voxel centre.

    The voxel's label is the majority label of its points, ties going to the
    lowest class id.  Output is ordered by voxel index.
    """
    if len(cloud) == 0:
        return LabeledPointCloud.empty()
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    counts = np.bincount(inv * NUM_CLASSES + cloud.labels,
                         minlength=len(uniq) * NUM_CLASSES).reshape(len(uniq), NUM_CLASSES)
    labels = np.argmax(counts, axis=1).astype(np.uint8)
    return LabeledPointCloud((uniq + 0.5) * voxel, labels)


def merge_recursive(scans: Sequence[Scan], params: IcpParams = IcpParams()) -> LabeledPointCloud:
    """Register and merge time-ordered scans in groups of three until one cloud remains."""
    if not scans:
        raise ValueError("need at least one scan")
    stamps = [s.timestamp for s in scans]
    if any(b <= a for a, b in zip(stamps, stamps[1:])):
        raise ValueError("scans must be sorted by strictly increasing timestamp")
    clouds = [to_world(s) for s in scans]
    level = 0
    while True:
        merged = []
        for gi in range(0, len(clouds), 3):
            group = clouds[gi:gi + 3]
            anchor = group[len(group) // 2]
            tree = cKDTree(anchor.points) if len(group) > 1 else None
            parts = []
            for member in group:
                if member is anchor:
                    parts.append(anchor)
                    continue
                try:
                    T = icp(member, anchor, None, params, tree=tree).transform
                except InsufficientOverlapError as exc:
                    raise InsufficientOverlapError(str(exc), group=gi // 3) from exc
                parts.append(member.transformed(T))
            merged.append(voxel_downsample(LabeledPointCloud.concatenate(parts), params.voxel_size))
        log.debug("level %d: %d clouds -> %d", level, len(clouds), len(merged))
        clouds = merged
        level += 1
        if len(clouds) == 1:
            return clouds[0]


def point_in_polygon(xy: np.ndarray, polygon) -> np.ndarray:
    """Even-odd ray casting test for each 2-D point."""
    poly = np.asarray(polygon, dtype=np.float64)
    x, y = xy[:, 0], xy[:, 1]
    inside = np.zeros(len(xy), dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < xint)
    return inside


def remove_dynamic(cloud: LabeledPointCloud, dynamic_ids, region=None) -> LabeledPointCloud:
    """Drop points of the given classes, optionally only inside a ground polygon."""
    dynamic_ids = sorted(int(c) for c in dynamic_ids)
    if not dynamic_ids:
        return cloud
    drop = np.isin(cloud.labels, dynamic_ids)
    if region is not None:
        drop &= point_in_polygon(cloud.points[:, :2], region)
    return cloud.select(~drop)


def crop_radius(cloud: LabeledPointCloud, center, radius: float) -> LabeledPointCloud:
    """Keep points within ``radius`` of ``center`` in the ground plane."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    c = np.asarray(center, dtype=np.float64)
    d = np.hypot(cloud.points[:, 0] - c[0], cloud.points[:, 1] - c[1])
    return cloud.select(d <= radius)
