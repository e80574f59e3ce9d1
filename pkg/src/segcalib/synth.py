"""Synthetic labeled scenes and the randomized-start evaluation protocol."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import List, Optional

import numpy as np

from . import core
from .core import (
    CameraIntrinsics,
    LabeledPointCloud,
    PoseParams,
    SemanticImage,
    STATIC_IDS,
)
from .loss import L2, LossTermKind
from .optimize import (
    CalibrationOptions,
    CalibrationResult,
    SearchBounds,
    calibrate,
)
from .render import RenderConfig, render

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; its side faces (and top) are sampled."""

    x0: float
    y0: float
    x1: float
    y1: float
    z0: float
    z1: float
    label: int

    def quads(self):
        x0, y0, x1, y1, z0, z1 = self.x0, self.y0, self.x1, self.y1, self.z0, self.z1
        dz = (0.0, 0.0, z1 - z0)
        faces = [
            ((x0, y0, z0), (x1 - x0, 0.0, 0.0), dz),
            ((x0, y1, z0), (x1 - x0, 0.0, 0.0), dz),
            ((x0, y0, z0), (0.0, y1 - y0, 0.0), dz),
            ((x1, y0, z0), (0.0, y1 - y0, 0.0), dz),
            ((x0, y0, z1), (x1 - x0, 0.0, 0.0), (0.0, y1 - y0, 0.0)),
        ]
        if z0 > 0:
            faces.append(((x0, y0, z0), (x1 - x0, 0.0, 0.0), (0.0, y1 - y0, 0.0)))
        return [tuple(np.array(v, dtype=np.float64) for v in f) for f in faces]


@dataclass(frozen=True)
class GroundPatch:
    x0: float
    y0: float
    x1: float
    y1: float
    label: int

    def contains(self, x, y):
        return (x >= self.x0) & (x <= self.x1) & (y >= self.y0) & (y <= self.y1)


@dataclass
class SceneSpec:
    """Procedural scene: a labeled ground plane plus boxes.

    Ground points take the label of the last patch containing them (default
    ``ground_label``).  Ground under boxes that stand on it is not sampled.
    """

    extent: tuple = (-40.0, -40.0, 40.0, 40.0)
    ground_label: int = core.TERRAIN
    patches: List[GroundPatch] = field(default_factory=list)
    boxes: List[Box] = field(default_factory=list)
    density: float = 40.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.density > 0:
            raise ValueError("density must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        self.patches = [p if isinstance(p, GroundPatch) else GroundPatch(*p) for p in self.patches]
        self.boxes = [b if isinstance(b, Box) else Box(*b) for b in self.boxes]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extent"] = list(self.extent)
        d["patches"] = [list(asdict(p).values()) for p in self.patches]
        d["boxes"] = [list(asdict(b).values()) for b in self.boxes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        if "extent" in d:
            d["extent"] = tuple(float(v) for v in d["extent"])
        return cls(**d)

    def quads(self):
        """All sampled surfaces as (origin, edge1, edge2) with orthogonal edges."""
        xmin, ymin, xmax, ymax = self.extent
        ground = (np.array([xmin, ymin, 0.0]), np.array([xmax - xmin, 0.0, 0.0]),
                  np.array([0.0, ymax - ymin, 0.0]))
        out = [ground]
        for b in self.boxes:
            out.extend(b.quads())
        return out


def urban_intersection(density: float = 25.0, noise_sigma: float = 0.0, seed: int = 0,
                       with_dynamic: bool = False) -> SceneSpec:
    """A four-way junction with buildings, fences, poles, signs and hedges."""
    C = core
    patches = [
        GroundPatch(-40, -7, 40, 7, C.SIDEWALK),
        GroundPatch(-7, -40, 7, 40, C.SIDEWALK),
        GroundPatch(-40, -4, 40, 4, C.ROAD),
        GroundPatch(-4, -40, 4, 40, C.ROAD),
    ]
    boxes = [
        Box(10, 10, 26, 22, 0, 14, C.BUILDING),
        Box(-30, 9, -11, 20, 0, 9, C.BUILDING),
        Box(12, -28, 30, -10, 0, 18, C.BUILDING),
        Box(-24, -26, -12, -12, 0, 7, C.BUILDING),
        Box(28, 8, 36, 30, 0, 10, C.BUILDING),
        Box(7.5, 24, 20, 24.3, 0, 1.6, C.FENCE),
        Box(-32, -9, -9, -8.7, 0, 1.4, C.FENCE),
        Box(8, -9, 11, -7.5, 0, 1.2, C.VEGETATION),
        Box(-16, 8, -12, 11, 0, 2.5, C.VEGETATION),
        Box(18, 7.6, 24, 9, 0, 1.0, C.VEGETATION),
    ]
    for x, y in ((7.5, 7.5), (-7.5, 7.5), (7.5, -7.5), (-7.5, -7.5), (16, 7.5), (7.5, 16)):
        boxes.append(Box(x - 0.12, y - 0.12, x + 0.12, y + 0.12, 0, 5.0, C.POLE))
    for x, y in ((7.5, 7.5), (-7.5, -7.5), (7.5, 16)):
        boxes.append(Box(x - 0.4, y - 0.05, x + 0.4, y + 0.05, 3.0, 3.8, C.TRAFFIC_SIGN))
    if with_dynamic:
        boxes.append(Box(1, -12, 3, -7.5, 0, 1.5, C.CAR))
        boxes.append(Box(-3, 9, -1, 13.5, 0, 1.5, C.CAR))
        boxes.append(Box(5, 10, 5.6, 10.6, 0, 1.8, C.PEDESTRIAN))
    return SceneSpec((-40.0, -40.0, 40.0, 40.0), C.TERRAIN, patches, boxes,
                     density, noise_sigma, seed)


def _sample_quad(rng, origin, e1, e2, density):
    area = np.linalg.norm(np.cross(e1, e2))
    n = rng.poisson(density * area)
    ab = rng.random((n, 2))
    return origin + ab[:, :1] * e1 + ab[:, 1:] * e2


def generate_scene(spec: SceneSpec) -> LabeledPointCloud:
    """Sample labeled surface points; deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    pts, labels = [], []

    xmin, ymin, xmax, ymax = spec.extent
    g = _sample_quad(rng, np.array([xmin, ymin, 0.0]), np.array([xmax - xmin, 0.0, 0.0]),
                     np.array([0.0, ymax - ymin, 0.0]), spec.density)
    covered = np.zeros(len(g), dtype=bool)
    for b in spec.boxes:
        if b.z0 <= 0:
            covered |= (g[:, 0] > b.x0) & (g[:, 0] < b.x1) & (g[:, 1] > b.y0) & (g[:, 1] < b.y1)
    g = g[~covered]
    glab = np.full(len(g), spec.ground_label, dtype=np.uint8)
    for p in spec.patches:
        glab[p.contains(g[:, 0], g[:, 1])] = p.label
    pts.append(g)
    labels.append(glab)

    for b in spec.boxes:
        for origin, e1, e2 in b.quads():
            q = _sample_quad(rng, origin, e1, e2, spec.density)
            pts.append(q)
            labels.append(np.full(len(q), b.label, dtype=np.uint8))

    points = np.concatenate(pts)
    if spec.noise_sigma > 0:
        points = points + rng.normal(0.0, spec.noise_sigma, points.shape)
    return LabeledPointCloud(points, np.concatenate(labels))


def surface_distance(points: np.ndarray, spec: SceneSpec) -> np.ndarray:
    """Distance from each point to the nearest generator surface."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    best = np.full(len(points), np.inf)
    for origin, e1, e2 in spec.quads():
        d = points - origin
        a = np.clip(d @ e1 / (e1 @ e1), 0.0, 1.0)
        b = np.clip(d @ e2 / (e2 @ e2), 0.0, 1.0)
        closest = origin + a[:, None] * e1 + b[:, None] * e2
        best = np.minimum(best, np.linalg.norm(points - closest, axis=1))
    return best


def default_camera() -> CameraIntrinsics:
    return CameraIntrinsics.from_fov(320, 200, 90.0)


DEFAULT_GROUND_TRUTH = PoseParams(-11.0, -6.0, 6.0, 35.0, -15.0)


def flip_labels(img: SemanticImage, rate: float, seed: int = 0) -> SemanticImage:
    """Replace a ``rate`` fraction of static-class pixels by another present static class.

    When no other static class is present the flipped pixel becomes invalid.
    """
    if not 0 <= rate <= 1:
        raise ValueError("rate must be in [0, 1]")
    rng = np.random.default_rng(seed)
    grid = img.grid.copy()
    static = np.isin(grid, sorted(STATIC_IDS))
    present = np.array(sorted(set(np.unique(grid[static]).tolist())), dtype=np.uint8)
    flip = static & (rng.random(grid.shape) < rate)
    idx = np.flatnonzero(flip)
    if len(idx) == 0:
        return img
    old = grid.flat[idx]
    if len(present) < 2:
        grid.flat[idx] = core.INVALID
    else:
        # uniform over the other present classes
        pos = np.searchsorted(present, old)
        k = rng.integers(0, len(present) - 1, size=len(idx))
        k = np.where(k >= pos, k + 1, k)
        grid.flat[idx] = present[k]
    return img.with_grid(grid)


def render_ground_truth(cloud: LabeledPointCloud, g: PoseParams, K: CameraIntrinsics,
                        cfg: RenderConfig = RenderConfig(), label_noise: float = 0.0,
                        seed: int = 0) -> SemanticImage:
    img = render(cloud, g, K, cfg)
    if label_noise > 0:
        img = flip_labels(img, label_noise, seed)
    return img


def angle_error(a: float, b: float) -> float:
    return abs((a - b + 180.0) % 360.0 - 180.0)


@dataclass
class TrialRecord:
    trial: int
    offset: np.ndarray
    start: PoseParams
    pose: PoseParams
    dt_cm: float
    dyaw: float
    dpitch: float
    loss: float
    evals: int
    stage_losses: tuple
    accepted: bool = False


@dataclass
class TrialReport:
    records: List[TrialRecord]
    keep: int
    mean_dt_cm: float
    mean_dyaw: float
    mean_dpitch: float
    mean_loss_accepted: float
    mean_loss_all: float
    mean_offset_cm: float

    @property
    def mean_dangle(self) -> float:
        return 0.5 * (self.mean_dyaw + self.mean_dpitch)

    @property
    def accepted(self) -> List[TrialRecord]:
        return [r for r in self.records if r.accepted]


def run_protocol(cloud: LabeledPointCloud, target: SemanticImage, K: CameraIntrinsics,
                 g: PoseParams, cfg: RenderConfig = RenderConfig(), kind: LossTermKind = L2,
                 trials: int = 30, keep: int = 10, seed: int = 0,
                 offsets: Optional[SearchBounds] = SearchBounds(),
                 bounds: SearchBounds = SearchBounds(),
                 options: CalibrationOptions = CalibrationOptions(),
                 workers: int = 1) -> TrialReport:
    """Calibrate from ``trials`` random starts around ``g`` and score the best ``keep``.

    Start offsets are uniform within ``offsets`` (``None`` means no offset).
    Trial ``k`` draws from ``default_rng([seed, k])``.
    """
    if not 1 <= keep <= trials:
        raise ValueError("need trials >= keep >= 1")
    half = np.zeros(5) if offsets is None else offsets.half_ranges()

    def one(k):
        rng = np.random.default_rng([seed, k])
        off = rng.uniform(-half, half)
        start = g.offset(off)
        res: CalibrationResult = calibrate(cloud, target, K, start, bounds, kind, cfg, options)
        p = res.pose
        rec = TrialRecord(
            k, off, start, p,
            float(np.linalg.norm(p.position - g.position) * 100.0),
            angle_error(p.yaw, g.yaw), angle_error(p.pitch, g.pitch),
            res.final_loss, res.eval_count, tuple(l for _, l in res.stage_history),
        )
        log.info("trial %d: loss %.5g dt %.2f cm dyaw %.3f dpitch %.3f (%d evals)",
                 k, rec.loss, rec.dt_cm, rec.dyaw, rec.dpitch, rec.evals)
        return rec

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(one, range(trials)))
    else:
        records = [one(k) for k in range(trials)]

    order = sorted(range(trials), key=lambda i: (records[i].loss, i))
    for i in order[:keep]:
        records[i].accepted = True
    acc = [records[i] for i in order[:keep]]
    return TrialReport(
        records, keep,
        float(np.mean([r.dt_cm for r in acc])),
        float(np.mean([r.dyaw for r in acc])),
        float(np.mean([r.dpitch for r in acc])),
        float(np.mean([r.loss for r in acc])),
        float(np.mean([r.loss for r in records])),
        float(np.mean([np.linalg.norm(r.offset[:3]) * 100.0 for r in records])),
    )


def yaw_transform(yaw_deg: float, t) -> np.ndarray:
    c, s = np.cos(np.radians(yaw_deg)), np.sin(np.radians(yaw_deg))
    T = np.eye(4)
    T[:3, :3] = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
    T[:3, 3] = t
    return T


def simulate_scans(spec: SceneSpec, sensor_xy, height: float = 1.8, yaw_deg: float = 0.0,
                   d_max: float = 40.0, drift: float = 0.05, seed: int = 0):
    """Lidar-like scans along a path, each re-sampled from ``spec``.

    Returns ``(scans, true_poses)``.  The scan's recorded pose is the true
    pose plus a random-walk translation error whose norm never exceeds
    ``drift`` metres.  Occlusion is not modelled.
    """
    from .reconstruction import Scan

    rng = np.random.default_rng(seed)
    scans, truth = [], []
    err = np.zeros(3)
    for i, (x, y) in enumerate(sensor_xy):
        T = yaw_transform(yaw_deg, (x, y, height))
        sub = SceneSpec(spec.extent, spec.ground_label, spec.patches, spec.boxes,
                        spec.density, spec.noise_sigma, spec.seed + 1000 + i)
        world = generate_scene(sub)
        near = np.linalg.norm(world.points - T[:3, 3], axis=1) <= d_max
        local = world.select(near).transformed(np.linalg.inv(T))
        if i > 0:
            err = err + rng.normal(0.0, drift / 2.0, 3)
            norm = np.linalg.norm(err)
            if norm > drift:
                err *= drift / norm
        odom = T.copy()
        odom[:3, 3] += err
        scans.append(Scan(local, odom, float(i)))
        truth.append(T)
    return scans, truth
