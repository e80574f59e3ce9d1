import numpy as np
import pytest

from segcalib.core import SKY, PoseParams, SemanticImage
from segcalib.errors import DegenerateSceneError
from segcalib.loss import L2, Huber, masked_loss
from segcalib.optimize import (
    CalibrationOptions, NmParams, RenderObjective, SearchBounds, Simplex, calibrate,
    initial_simplex, nelder_mead, optimize_pose, verify,
)
from segcalib.render import crop_lower_half, mask_spurious_sky, render
from segcalib.synth import render_ground_truth


def test_initial_simplex_layout():
    s = initial_simplex(np.zeros(5), SearchBounds(2.5, 5.0))
    expected = np.zeros((6, 5))
    for i, v in enumerate([2.5, -2.5, 2.5, -5.0, 5.0], start=1):
        expected[i, i - 1] = v
    assert np.array_equal(s.vertices, expected)
    assert s.volume() > 0
    small = initial_simplex(np.zeros(5), SearchBounds(0.25, 0.5))
    assert np.allclose(small.vertices, s.vertices / 10)


def test_simplex_needs_n_plus_one_vertices():
    with pytest.raises(ValueError):
        Simplex(np.zeros((5, 5)))


def test_nm_params_validated():
    for bad in (dict(alpha=0), dict(gamma=1), dict(rho=1), dict(sigma=0), dict(max_evals=0)):
        with pytest.raises(ValueError):
            NmParams(**bad)


@pytest.mark.parametrize("seed", range(10))
def test_quadratic_minimum(seed):
    rng = np.random.default_rng(seed)
    half = SearchBounds().half_ranges()
    x0 = rng.uniform(-10, 10, 5)
    c = x0 + rng.uniform(-half, half)
    best = []
    res = nelder_mead(lambda x: float(np.sum((x - c) ** 2)), initial_simplex(x0),
                      NmParams(convergence_threshold=1e-8), lambda it, x, f: best.append(f))
    assert np.all(np.abs(res.x - c) < 1e-3)
    assert np.all(np.diff(best) <= 0)
    assert not res.budget_exhausted


def test_constant_objective_stops_immediately():
    s = initial_simplex(np.arange(5.0))
    res = nelder_mead(lambda x: 3.0, s)
    assert res.iterations == 0 and res.evals == 6
    assert np.array_equal(res.x, s.vertices[0])


def test_rosenbrock_improves():
    def rosen(x):
        return float(np.sum(100 * (x[1:] - x[:-1] ** 2) ** 2 + (1 - x[:-1]) ** 2))
    x0 = np.array([1.2, 0.9, 1.1, 1.3, 0.8])
    res = nelder_mead(rosen, initial_simplex(x0, SearchBounds(0.1, 0.1)), NmParams(max_evals=3000))
    assert res.f < rosen(x0)


def test_budget_exhaustion_flagged():
    res = nelder_mead(lambda x: float(np.sum(x ** 2)), initial_simplex(np.full(5, 9.0)),
                      NmParams(convergence_threshold=1e-30, max_evals=50))
    assert res.budget_exhausted and res.evals >= 50


def test_parameter_order_invariance():
    rng = np.random.default_rng(4)
    c = rng.normal(size=5)
    w = rng.uniform(0.5, 3, 5)
    perm = np.array([3, 0, 4, 1, 2])

    def f(x):
        return float(np.sum(w * (x - c) ** 2) + 0.3 * np.sin(x).sum())

    s = initial_simplex(np.zeros(5))
    a = nelder_mead(f, s)
    b = nelder_mead(lambda y: f(y[np.argsort(perm)]), Simplex(s.vertices[:, perm]))
    assert np.allclose(b.x[np.argsort(perm)], a.x, rtol=0, atol=1e-9)


def test_schedule_is_monotone_and_restarts():
    def f(x):
        return float(np.sum((x - [0.3, -0.2, 0.1, 1.0, -2.0]) ** 2))
    res = optimize_pose(f, PoseParams(0, 0, 0, 0, 0), keep_trace=True)
    losses = [l for _, l in res.stage_history]
    assert [s for s, _ in res.stage_history] == [1, 2, 3]
    assert losses[2] <= losses[1] <= losses[0]
    assert res.final_loss == f(res.pose.as_vector()) <= f(np.zeros(5))
    for stage in (1, 2, 3):
        best = [r[2] for r in res.trace if r[0] == stage]
        assert np.all(np.diff(best) <= 0)


def test_constant_objective_is_degenerate():
    with pytest.raises(DegenerateSceneError):
        optimize_pose(lambda x: 1.0, PoseParams(0, 0, 0, 0, 0))


def two_basin(x):
    # shallow basin (loss 1) at the origin, deep basin (loss 0) at x = 3
    x = np.asarray(x)
    return float(min(np.sum(x ** 2) + 1.0, np.sum((x - [3, 0, 0, 0, 0]) ** 2)))


def run_two_basin(guess):
    return optimize_pose(two_basin, guess, SearchBounds(0.3, 0.3))


def test_verify_escapes_shallow_basin():
    guess = PoseParams(0, 0, 0, 0, 0)
    first = run_two_basin(guess)
    assert first.final_loss == pytest.approx(1.0, abs=1e-3)
    out = verify(first, guess, run_two_basin, SearchBounds(2.5, 5.0), trials=8, seed=3)
    assert out.final_loss < 1e-3
    assert out.pose.tx == pytest.approx(3.0, abs=0.05)


def test_verify_zero_noise_keeps_result():
    guess = PoseParams(0.5, 0, 0, 0, 0)
    first = run_two_basin(guess)
    out = verify(first, guess, run_two_basin, SearchBounds(), trials=1, zero_noise=True)
    assert out.pose == first.pose and out.final_loss == first.final_loss
    assert out.verified


def test_verify_deterministic():
    guess = PoseParams(0, 0, 0, 0, 0)
    first = run_two_basin(guess)
    a = verify(first, guess, run_two_basin, SearchBounds(1.0, 1.0), trials=4, seed=11)
    b = verify(first, guess, run_two_basin, SearchBounds(1.0, 1.0), trials=4, seed=11, workers=3)
    assert a == b


def test_calibrate_fixed_point(small_scene):
    cloud, K, g, cfg = small_scene
    target = render_ground_truth(cloud, g, K, cfg)
    res = calibrate(cloud, target, K, g, cfg=cfg)
    assert res.pose == g and res.final_loss == 0.0


def test_calibrate_recovers_offset_pose(small_scene):
    cloud, K, g, cfg = small_scene
    target = render_ground_truth(cloud, g, K, cfg)
    guess = g.offset([1.0, -1.0, 0.5, 3.0, -2.0])
    res = calibrate(cloud, target, K, guess, cfg=cfg)
    assert np.linalg.norm(res.pose.position - g.position) <= 0.10
    assert abs(res.pose.yaw - g.yaw) <= 0.2 and abs(res.pose.pitch - g.pitch) <= 0.2
    losses = [l for _, l in res.stage_history]
    assert losses[2] <= losses[1] <= losses[0]
    objective = RenderObjective(cloud, target, K, cfg)
    assert res.final_loss <= objective(guess.as_vector())
    # the reported loss is the masked, cropped loss at the reported pose
    view = crop_lower_half(mask_spurious_sky(render(cloud, res.pose, K, cfg), target))
    assert res.final_loss == masked_loss(view, crop_lower_half(target))
    assert calibrate(cloud, target, K, guess, cfg=cfg) == res


def test_calibrate_huber_with_full_image(small_scene):
    cloud, K, g, cfg = small_scene
    target = render_ground_truth(cloud, g, K, cfg)
    opts = CalibrationOptions(lower_half=False, mask_sky=False, sky_valid=True)
    res = calibrate(cloud, target, K, g.offset([0.3, 0.2, -0.2, 1.0, 1.0]), kind=Huber(0.3),
                    cfg=cfg, options=opts)
    assert np.linalg.norm(res.pose.position - g.position) <= 0.10


def test_calibrate_all_sky_target_is_degenerate(small_scene):
    cloud, K, g, cfg = small_scene
    target = SemanticImage(np.full((K.height, K.width), SKY, np.uint8))
    with pytest.raises(DegenerateSceneError):
        calibrate(cloud, target, K, g, cfg=cfg)
