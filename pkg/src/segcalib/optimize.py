"""Nelder-Mead pose search over (tx, ty, tz, yaw, pitch).

The calibration schedule runs three simplex searches, each restarted from
the best pose of the previous one, with the convergence threshold tightened
for the last.  :func:`verify` re-runs the schedule from jittered guesses to
escape local minima.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .core import CameraIntrinsics, LabeledPointCloud, PoseParams, SemanticImage
from .errors import DegenerateSceneError, NoValidPixelsError
from .loss import L2, LossTable, LossTermKind
from .render import RenderConfig, VectorRenderer, assert_static, mask_spurious_sky_grid

log = logging.getLogger(__name__)

N_PARAMS = 5


@dataclass(frozen=True)
class SearchBounds:
    pos_half_range: float = 2.5
    ang_half_range: float = 5.0

    def __post_init__(self):
        if not (self.pos_half_range > 0 and self.ang_half_range > 0):
            raise ValueError("search half ranges must be positive")

    def half_ranges(self) -> np.ndarray:
        p, a = self.pos_half_range, self.ang_half_range
        return np.array([p, p, p, a, a])

    def scaled(self, factor: float) -> "SearchBounds":
        return SearchBounds(self.pos_half_range * factor, self.ang_half_range * factor)


@dataclass(frozen=True)
class NmParams:
    alpha: float = 1.0
    gamma: float = 2.0
    rho: float = 0.5
    sigma: float = 0.5
    convergence_threshold: float = 1e-4
    max_evals: int = 2000

    def __post_init__(self):
        if not (self.alpha > 0 and self.gamma > 1 and 0 < self.rho < 1 and 0 < self.sigma < 1):
            raise ValueError("Nelder-Mead coefficients out of range")
        if self.max_evals < 1:
            raise ValueError("max_evals must be positive")


@dataclass
class Simplex:
    vertices: np.ndarray
    values: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.array(self.vertices, dtype=np.float64)
        n = self.vertices.shape[1]
        if self.vertices.shape[0] != n + 1:
            raise ValueError(f"a simplex in {n} dimensions needs {n + 1} vertices")

    def volume(self) -> float:
        edges = self.vertices[1:] - self.vertices[0]
        n = edges.shape[0]
        return abs(np.linalg.det(edges)) / float(np.prod(np.arange(1, n + 1)))


def initial_simplex(x0, bounds: SearchBounds = SearchBounds()) -> Simplex:
    """Guess plus one vertex per parameter, offset alternately by +/- its half range."""
    if isinstance(x0, PoseParams):
        x0 = x0.as_vector()
    x0 = np.asarray(x0, dtype=np.float64)
    half = bounds.half_ranges()
    verts = np.tile(x0, (N_PARAMS + 1, 1))
    for i in range(1, N_PARAMS + 1):
        sign = 1.0 if i % 2 == 1 else -1.0
        verts[i, i - 1] += sign * half[i - 1]
    return Simplex(verts)


@dataclass
class NmResult:
    x: np.ndarray
    f: float
    evals: int
    iterations: int
    budget_exhausted: bool


def nelder_mead(objective: Callable[[np.ndarray], float], s0: Simplex,
                p: NmParams = NmParams(), callback=None) -> NmResult:
    """Minimize ``objective`` starting from simplex ``s0``.

    Stops once the loss spread across the simplex drops below
    ``p.convergence_threshold`` or ``p.max_evals`` evaluations are spent.
    ``callback(iteration, x_best, f_best)`` runs once per iteration.
    """
    x = s0.vertices.copy()
    n = x.shape[1]
    evals = 0
    if s0.values is None:
        f = np.empty(n + 1)
        for i in range(n + 1):
            f[i] = objective(x[i])
        evals = n + 1
    else:
        f = np.array(s0.values, dtype=np.float64)

    def ev(pt):
        nonlocal evals
        evals += 1
        return float(objective(pt))

    it = 0
    exhausted = False
    while True:
        order = np.argsort(f, kind="stable")
        x, f = x[order], f[order]
        if callback is not None:
            callback(it, x[0], f[0])
        if f[-1] - f[0] < p.convergence_threshold:
            break
        if evals >= p.max_evals:
            exhausted = True
            break
        it += 1

        centroid = x[:-1].mean(axis=0)
        xr = centroid + p.alpha * (centroid - x[-1])
        fr = ev(xr)
        if f[0] <= fr < f[-2]:
            x[-1], f[-1] = xr, fr
            continue
        if fr < f[0]:
            xe = centroid + p.gamma * (xr - centroid)
            fe = ev(xe)
            if fe < fr:
                x[-1], f[-1] = xe, fe
            else:
                x[-1], f[-1] = xr, fr
            continue
        if fr < f[-1]:
            xc = centroid + p.rho * (xr - centroid)
            fc = ev(xc)
            if fc <= fr:
                x[-1], f[-1] = xc, fc
                continue
        else:
            xc = centroid + p.rho * (x[-1] - centroid)
            fc = ev(xc)
            if fc < f[-1]:
                x[-1], f[-1] = xc, fc
                continue
        for i in range(1, n + 1):
            x[i] = x[0] + p.sigma * (x[i] - x[0])
            f[i] = ev(x[i])

    return NmResult(x[0].copy(), float(f[0]), evals, it, exhausted)


@dataclass
class CalibrationResult:
    pose: PoseParams
    final_loss: float
    eval_count: int
    stage_history: list = field(default_factory=list)
    verified: bool = False
    budget_exhausted: bool = False
    trace: list = field(default_factory=list)


STAGE_THRESHOLDS = (1e-4, 1e-4, 1e-6)


def optimize_pose(objective: Callable[[np.ndarray], float], guess: PoseParams,
                  bounds: SearchBounds = SearchBounds(), nm: NmParams = NmParams(),
                  thresholds: Sequence[float] = STAGE_THRESHOLDS,
                  keep_trace: bool = False) -> CalibrationResult:
    """Run the restart schedule on an arbitrary objective over pose vectors.

    Raises :class:`DegenerateSceneError` when the objective is constant over
    the first simplex.
    """
    s = initial_simplex(guess, bounds)
    s.values = np.array([objective(v) for v in s.vertices], dtype=np.float64)
    if np.all(s.values == s.values[0]):
        raise DegenerateSceneError(
            f"objective is constant ({s.values[0]:g}) over the initial simplex")
    evals = len(s.values)
    history = []
    trace = []
    best_x, best_f = s.vertices[0], float(s.values[0])
    exhausted = False
    for stage, thr in enumerate(thresholds, start=1):
        if stage > 1:
            s = initial_simplex(best_x, bounds)

        def record(it, xb, fb, stage=stage):
            if keep_trace:
                trace.append((stage, it, float(fb), tuple(float(c) for c in xb)))

        res = nelder_mead(objective, s, replace(nm, convergence_threshold=thr), callback=record)
        evals += res.evals
        exhausted |= res.budget_exhausted
        history.append((stage, res.f))
        log.debug("stage %d: loss %.6g after %d evals", stage, res.f, res.evals)
        if res.f <= best_f:
            best_x, best_f = res.x, res.f

    pose = PoseParams.from_vector(best_x)
    if not np.array_equal(pose.as_vector(), best_x):
        best_f = float(objective(pose.as_vector()))
        evals += 1
    return CalibrationResult(pose, best_f, evals, history, False, exhausted, trace)


@dataclass(frozen=True)
class CalibrationOptions:
    """Objective preprocessing and optimizer settings."""

    mask_sky: bool = True
    lower_half: bool = True
    sky_valid: bool = False
    nm: NmParams = NmParams()
    thresholds: tuple = STAGE_THRESHOLDS


class RenderObjective:
    """Loss of the rendered view at a pose vector against a fixed target."""

    def __init__(self, cloud: LabeledPointCloud, target: SemanticImage, K: CameraIntrinsics,
                 cfg: RenderConfig = RenderConfig(), kind: LossTermKind = L2,
                 options: CalibrationOptions = CalibrationOptions()):
        if target.shape != (K.height, K.width):
            raise ValueError(f"target is {target.shape}, intrinsics say {(K.height, K.width)}")
        assert_static(cloud)
        self.renderer = VectorRenderer(cloud, K, cfg)
        self.options = options
        self.table = LossTable(kind, target.palette, options.sky_valid)
        self.target_full = target.grid
        self.row0 = K.height // 2 if options.lower_half else 0
        self.target = target.grid[self.row0:]
        # any achievable loss is at most numel * max_term
        self.penalty = self.target.size * self.table.max_term + 1.0

    def view(self, x) -> np.ndarray:
        """The rendered grid the loss actually sees (masked, cropped)."""
        grid = self.renderer(x)
        if self.options.mask_sky:
            grid = mask_spurious_sky_grid(grid, self.target_full)
        return grid[self.row0:]

    def __call__(self, x) -> float:
        try:
            return self.table(self.view(x), self.target)
        except NoValidPixelsError:
            return self.penalty


def calibrate(cloud: LabeledPointCloud, target: SemanticImage, K: CameraIntrinsics,
              guess: PoseParams, bounds: SearchBounds = SearchBounds(), kind: LossTermKind = L2,
              cfg: RenderConfig = RenderConfig(), options: CalibrationOptions = CalibrationOptions(),
              keep_trace: bool = False) -> CalibrationResult:
    """Estimate the camera pose that makes the rendered cloud match ``target``."""
    objective = RenderObjective(cloud, target, K, cfg, kind, options)
    return optimize_pose(objective, guess, bounds, options.nm, options.thresholds, keep_trace)


def verify(result: CalibrationResult, guess: PoseParams,
           run: Callable[[PoseParams], CalibrationResult], noise: SearchBounds,
           trials: int = 5, seed: int = 0, zero_noise: bool = False,
           workers: int = 1) -> CalibrationResult:
    """Re-run ``run`` from jittered copies of ``guess`` and keep the best result.

    Noise is uniform within ``noise`` per axis (or none with ``zero_noise``).
    Trial ``k`` draws from ``default_rng([seed, k])`` so results do not depend
    on scheduling.  ``verified`` is set when the best loss lies within 5% of
    the median of the lower half of all runs.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    half = np.zeros(N_PARAMS) if zero_noise else noise.half_ranges()

    def one(k):
        rng = np.random.default_rng([seed, k])
        return run(guess.offset(rng.uniform(-half, half)))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            reruns = list(pool.map(one, range(trials)))
    else:
        reruns = [one(k) for k in range(trials)]

    runs = [result] + reruns
    best = result
    for r in reruns:
        if r.final_loss < best.final_loss:
            best = r
    losses = np.sort([r.final_loss for r in runs])
    accepted = losses[: (len(losses) + 1) // 2]
    med = float(np.median(accepted))
    ok = med - best.final_loss <= 0.05 * abs(med) + 1e-12
    return replace(best, verified=bool(ok))
