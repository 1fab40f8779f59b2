import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq
from scipy.signal import find_peaks

from pnlcausal import flows
from pnlcausal.dataio import noise_density, sample_noise
from pnlcausal.flows import SplineFlow
from pnlcausal.optim import FitConfig

from conftest import random_flow

seeds = st.integers(0, 2 ** 32 - 1)


def test_identity_configuration():
    ident = SplineFlow.identity()
    x, ld = flows.forward(ident, 0.37)
    assert x == pytest.approx(0.37, abs=1e-12) and ld == pytest.approx(0.0, abs=1e-12)
    u, ld = flows.inverse(ident, -1.2)
    assert u == pytest.approx(-1.2, abs=1e-12) and ld == pytest.approx(0.0, abs=1e-12)
    assert flows.log_density(ident, 0.0) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)


def test_identity_tails(rng):
    flow = random_flow(rng, 7, 2.0)
    for u in (3.0, -3.0, 2.0 + 1e-9):
        x, ld = flows.forward(flow, u)
        assert x == u and ld == 0.0
        v, ld = flows.inverse(flow, u)
        assert v == u and ld == 0.0


def test_box_endpoints_fixed(rng):
    flow = random_flow(rng, 9, 4.0)
    x, _ = flows.forward(flow, np.array([-4.0, 4.0]))
    np.testing.assert_allclose(x, [-4.0, 4.0], atol=1e-12)


def test_bins_positive_and_sum_to_box(rng):
    flow = random_flow(rng, 11, 5.0, spread=3.0)
    kn = flow.knots()
    for edges in (kn["x"], kn["y"]):
        sizes = np.diff(edges)
        assert np.all(sizes > 0)
        assert sizes.sum() == pytest.approx(10.0, abs=1e-9)
    assert np.all(kn["derivs"] > 0)
    assert np.all((kn["lambdas"] > 0) & (kn["lambdas"] < 1))


def test_forward_matches_bisection_oracle(rng):
    flow = random_flow(rng, 5, 3.0)
    x, _ = flows.forward(flow, 0.5)
    # invert the forward map numerically and compare with the closed-form inverse
    u_bisect = brentq(lambda u: flows.forward(flow, u)[0] - x, -3.0, 3.0, xtol=1e-14)
    assert u_bisect == pytest.approx(0.5, abs=1e-8)
    assert flows.inverse(flow, x)[0] == pytest.approx(u_bisect, abs=1e-8)


def test_round_trip_1000_points(rng):
    flow = random_flow(rng, 21, 10.0, spread=1.5)
    u = rng.uniform(-10, 10, 1000)
    x, ld = flows.forward(flow, u)
    back, ld_inv = flows.inverse(flow, x)
    assert np.max(np.abs(back - u)) < 1e-8
    np.testing.assert_allclose(ld_inv, -ld, atol=1e-10)


def _fd_log_slope(fn, u, kinks):
    """Five-point central difference of log fn' at points ``u``.

    Steps run over powers of ten, capped at a third of the distance to the
    nearest kink. Steps whose roundoff error eps * |fn| / (h * slope)
    exceeds 1e-6 are excluded; of the rest, the step whose estimate agrees
    best with the next finer admissible one is used.
    """
    dist = np.min(np.abs(u[:, None] - kinks[None, :]), axis=1)
    steps = 10.0 ** -np.arange(1, 13)
    with np.errstate(invalid="ignore", divide="ignore"):
        return _select_step(fn, u, dist, steps)


def _select_step(fn, u, dist, steps):
    n = u.size
    ests = np.array([(fn(u - 2 * h) - 8 * fn(u - h) + 8 * fn(u + h) - fn(u + 2 * h)) / (12 * h)
                     for h in steps])
    fits = steps[:, None] <= dist[None, :] / 3
    coarse = ests[np.argmax(fits, axis=0), np.arange(n)]
    roundoff = (np.finfo(float).eps * np.maximum(np.abs(fn(u)), 1.0)
                / (steps[:, None] * np.abs(coarse)[None, :]))
    ok = fits & (roundoff < 1e-6)
    logs = np.log(np.abs(ests))
    gap = np.abs(np.diff(logs, axis=0))
    gap[~(ok[:-1] & ok[1:])] = np.inf
    best = np.argmin(gap, axis=0) + 1
    fallback = np.argmax(fits, axis=0)
    pick = np.where(np.isfinite(gap.min(axis=0)), best, fallback)
    return logs[pick, np.arange(n)]


def _kinks(flow, output_space=False):
    kn = flow.knots()
    pts = np.concatenate([kn["x"], kn["x"][:-1] + kn["lambdas"] * np.diff(kn["x"])])
    return flows.forward(flow, pts)[0] if output_space else pts


def _away_from_knots(flow, pts, margin, output_space=False):
    knots = _kinks(flow, output_space)
    return pts[np.min(np.abs(pts[:, None] - knots[None, :]), axis=1) > margin]


def test_inverse_log_det_matches_fd(rng):
    flow = random_flow(rng, 8, 3.0)
    x = _away_from_knots(flow, rng.uniform(-2.9, 2.9, 300), 1e-6, output_space=True)
    _, ld = flows.inverse(flow, x)
    fd = _fd_log_slope(lambda v: flows.inverse(flow, v)[0], x, _kinks(flow, True))
    assert np.max(np.abs(ld - fd) / np.maximum(np.abs(fd), 1.0)) < 1e-5


def test_one_sided_derivative_at_knots(rng):
    flow = random_flow(rng, 6, 3.0)
    kn = flow.knots()
    h = 1e-7
    for i in range(1, 6):
        xk = kn["x"][i]
        right = (flows.forward(flow, xk + h)[0] - flows.forward(flow, xk)[0]) / h
        left = (flows.forward(flow, xk)[0] - flows.forward(flow, xk - h)[0]) / h
        assert right == pytest.approx(kn["derivs"][i], rel=1e-5)
        assert left == pytest.approx(kn["derivs"][i], rel=1e-5)


def _mass(flow, pieces=64, nodes=32):
    """Total probability by composite Gauss-Legendre between the knot images.

    The density is smooth between knots but can spike sharply, hence the
    subdivision; the tails run 40 base standard deviations past the box.
    """
    sd = math.exp(0.5 * flow.base_log_var)
    edges = np.unique(np.concatenate([[-flow.bound - 40 * sd], _kinks(flow, True),
                                      [flow.bound + 40 * sd]]))
    sub = np.concatenate([np.linspace(a, b, pieces + 1)[:-1]
                          for a, b in zip(edges[:-1], edges[1:])] + [edges[-1:]])
    t, w = np.polynomial.legendre.leggauss(nodes)
    a, b = sub[:-1, None], sub[1:, None]
    pts = 0.5 * (b - a) * t + 0.5 * (a + b)
    dens = np.exp(flows.log_density(flow, pts.ravel())).reshape(pts.shape)
    return float(np.sum(0.5 * (b - a) * w * dens))


def test_density_normalises(rng):
    for _ in range(5):
        assert _mass(random_flow(rng, 21, 10.0, spread=1.5)) == pytest.approx(1.0, abs=1e-3)


@settings(max_examples=40, deadline=None)
@given(seed=seeds)
def test_properties_random_flows(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 25))
    bound = float(rng.uniform(0.5, 10.0))
    flow = random_flow(rng, k, bound, spread=float(rng.uniform(0.1, 1.5)))
    u = np.sort(rng.uniform(-1.2 * bound, 1.2 * bound, 1000))
    x, ld = flows.forward(flow, u)
    assert np.all(np.diff(x) > 0)
    back, _ = flows.inverse(flow, x)
    assert np.max(np.abs(back - u)) < 1e-8
    inner = _away_from_knots(flow, u[np.abs(u) < bound], 1e-6)
    if inner.size:
        fd = _fd_log_slope(lambda v: flows.forward(flow, v)[0], inner, _kinks(flow))
        _, ld_in = flows.forward(flow, inner)
        assert np.max(np.abs(ld_in - fd) / np.maximum(np.abs(fd), 1.0)) < 1e-5


def test_non_finite_input_rejected():
    with pytest.raises(ValueError):
        flows.forward(SplineFlow.identity(), np.nan)
    with pytest.raises(ValueError):
        flows.log_density(SplineFlow.identity(), np.array([0.0, np.inf]))


def test_sampling():
    ident = SplineFlow.identity()
    s = flows.sample(ident, 100_000, 3)
    assert abs(s.mean()) < 0.02 and abs(s.var() - 1) < 0.03
    np.testing.assert_array_equal(flows.sample(ident, 50, 9), flows.sample(ident, 50, 9))
    assert flows.sample(ident, 0, 1).size == 0


def test_json_round_trip(rng):
    flow = random_flow(rng, 5, 3.0)
    data = json.loads(json.dumps(flow.to_dict()))
    assert set(data) == {"num_bins", "bound", "raw_widths", "raw_heights", "raw_derivs",
                         "raw_lambdas", "base_log_var"}
    again = SplineFlow.from_dict(data)
    u = np.linspace(-4, 4, 33)
    np.testing.assert_array_equal(flows.forward(again, u)[0], flows.forward(flow, u)[0])


def test_from_knots_constructs_requested_spline():
    widths = np.array([1.0, 2.0, 3.0])
    heights = np.array([3.0, 2.0, 1.0])
    flow = SplineFlow.from_knots(widths, heights, [0.5, 1.0, 2.0, 1.5], [0.3, 0.5, 0.7], bound=3.0)
    kn = flow.knots()
    np.testing.assert_allclose(np.diff(kn["x"]), widths, atol=1e-9)
    np.testing.assert_allclose(np.diff(kn["y"]), heights, atol=1e-9)
    np.testing.assert_allclose(kn["derivs"], [0.5, 1.0, 2.0, 1.5], rtol=1e-9)
    np.testing.assert_allclose(kn["lambdas"], [0.3, 0.5, 0.7], rtol=1e-9)


# ---------------------------------------------------------------------------
# maximum-likelihood fitting
# ---------------------------------------------------------------------------

MIX_MEAN, MIX_SD = 1.0, math.sqrt(22.0)   # analytic moments of the two-exponential mixture


def _true_normalised_log_density(z):
    return np.log(MIX_SD * noise_density(MIX_MEAN + MIX_SD * z))


@pytest.fixture(scope="module")
def mixture_fit():
    rng = np.random.default_rng(2024)
    z = (sample_noise(10_000, rng) - MIX_MEAN) / MIX_SD
    flow, losses = flows.fit_mle(z, FitConfig(steps=4000, learning_rate=0.005), 0)
    return flow, losses


def test_fit_mle_gaussian_oracle():
    x = np.random.default_rng(5).standard_normal(2000)
    flow, _ = flows.fit_mle(x, FitConfig(), 1)
    best_gauss = -0.5 * math.log(2 * math.pi * x.var()) - 0.5
    assert np.mean(flows.log_density(flow, x)) >= best_gauss - 0.02


@pytest.mark.slow
def test_fit_mle_mixture_kl(mixture_fit):
    flow, _ = mixture_fit
    fresh = (sample_noise(200_000, np.random.default_rng(77)) - MIX_MEAN) / MIX_SD
    kl = np.mean(_true_normalised_log_density(fresh) - flows.log_density(flow, fresh))
    assert kl < 0.05


def count_modes(flow, lo=-3.0, hi=3.0, rel_prominence=0.05):
    """Local maxima whose prominence exceeds a fraction of the peak density."""
    grid = np.linspace(lo, hi, 6001)
    dens = np.exp(flows.log_density(flow, grid))
    peaks, _ = find_peaks(dens, prominence=rel_prominence * dens.max())
    return grid[peaks]


@pytest.mark.slow
def test_fit_mle_mixture_bimodal(mixture_fit):
    flow, _ = mixture_fit
    modes = count_modes(flow)
    true_modes = (np.array([-3.0, 7.0]) - MIX_MEAN) / MIX_SD
    assert modes.size == 2
    np.testing.assert_allclose(np.sort(modes), true_modes, atol=0.3)


@pytest.mark.parametrize("kind", ["gaussian", "smooth_bimodal"])
def test_fit_mle_trace_decreases_when_smoothed(kind):
    from pnlcausal.optim import smoothed
    rng = np.random.default_rng(8)
    x = rng.standard_normal(1000)
    if kind == "smooth_bimodal":
        x = np.where(rng.random(1000) < 0.6, -1.2 + 0.4 * x, 1.5 + 0.5 * x)
    _, losses = flows.fit_mle(x, FitConfig(), 0)
    s = smoothed(losses, 50)
    assert s[-1] < s[0]
    assert np.all(np.diff(s) < 5e-3)


@pytest.mark.slow
def test_histogram_matches_density(mixture_fit):
    flow, _ = mixture_fit
    n = 100_000
    draws = flows.sample(flow, n, 11)
    edges = np.linspace(-2.0, 3.0, 51)
    counts, _ = np.histogram(draws, edges)
    fine = np.linspace(-2.0, 3.0, 50 * 200 + 1)
    dens = np.exp(flows.log_density(flow, fine))
    mass = np.array([np.trapezoid(dens[i * 200:(i + 1) * 200 + 1], fine[i * 200:(i + 1) * 200 + 1])
                     for i in range(50)])
    expected = n * mass
    assert np.all(np.abs(counts - expected) <= 3 * np.sqrt(expected) + 1)


def test_fit_mle_tiny_sample():
    flow, losses = flows.fit_mle(np.array([0.1, -0.4, 0.3, 1.2, -0.9]), FitConfig(steps=300), 0)
    assert np.all(np.isfinite(losses))
    assert _mass(flow) == pytest.approx(1.0, abs=1e-3)


def test_fit_mle_degenerate():
    with pytest.raises(ValueError, match="degenerate sample"):
        flows.fit_mle(np.full(10, 2.0))
