import math

import numpy as np
import pytest
from scipy.stats import norm

from mvsde.duhamel import remainder_R, remainder_drift_only, solve_density
from mvsde.errors import DomainError, QuadratureError
from mvsde.measures import Flow, Measure
from mvsde.sde_engine import SimConfig, simulate_frozen
from mvsde.coefficients import Model


def _flow(x=0.0):
    return Flow.constant(Measure.dirac([x]), [0.0])


@pytest.fixture(scope="module")
def const_drift_grid(const_drift_model):
    f = _flow()
    return solve_density(const_drift_model, f, f, 0.0, 0.0, 0.25, tol=1e-6, cells=1024)


@pytest.fixture(scope="module")
def space_sigma_grid(space_sigma_model):
    f = _flow()
    return solve_density(space_sigma_model, f, f, 0.0, 0.0, 0.25, tol=1e-6,
                         cells=512, time_nodes=24)


def test_zero_remainder_p_equals_q(brownian_model):
    f = _flow()
    grid = solve_density(brownian_model, f, f, 0.0, 0.0, 0.25, tol=1e-6, cells=1024)
    assert grid.iterations == 1
    xs = grid.centers()
    exact = norm.pdf(xs, scale=math.sqrt(0.25))
    assert np.abs(grid.final_density() - exact).max() <= 1e-10


def test_constant_drift_closed_form(const_drift_grid):
    xs = const_drift_grid.centers()
    exact = norm.pdf(xs, loc=0.25, scale=math.sqrt(0.25))
    assert np.abs(const_drift_grid.final_density() - exact).max() <= 1e-3
    # intermediate slices track N(b0 r, r) as well
    for ti, row in zip(const_drift_grid.times[::6], const_drift_grid.p[::6]):
        ex = norm.pdf(xs, loc=ti, scale=math.sqrt(ti))
        assert np.abs(row - ex).max() <= 2e-3


def test_mass_conservation_and_negativity(const_drift_grid, space_sigma_grid):
    assert const_drift_grid.mass_errors.max() <= 1e-4
    assert space_sigma_grid.mass_errors.max() <= 1e-4
    assert const_drift_grid.max_negative <= 1e-8
    # clamped mass is logged
    assert const_drift_grid.clamped_mass >= 0.0


def test_geometric_residual_decay(const_drift_grid):
    res = [r for r in const_drift_grid.residuals if r > 0]
    assert len(res) >= 4
    tail = res[-3:]
    heads = res[-4:-1]
    assert all(b / a < 1.0 for a, b in zip(heads, tail))


def test_horizon_refusal(const_drift_model):
    # The kernel width sqrt((t-s)/K) must span at least two cells; with the
    # auto-fitted window this caps the cell width, so a coarse grid refuses.
    f = _flow()
    with pytest.raises(DomainError):
        solve_density(const_drift_model, f, f, 0.0, 0.0, 1e-4, cells=16)
    with pytest.raises(DomainError):
        solve_density(const_drift_model, f, f, 0.0, 0.5, 0.5)


def test_dimension_guard():
    model2d = Model.from_json({
        "name": "m2", "dim": 2,
        "drift": [{"op": "const", "value": 0.0}, {"op": "const", "value": 0.0}],
        "diffusion": {"kind": "scalar", "exprs": [{"op": "const", "value": 1.0}]},
        "constants": {"K": 1.5, "k": 1.0, "eta": 1.0, "beta": 1.0,
                      "b_sup": 0.0, "grad_sigma_bound": 0.0},
    })
    f = Flow.constant(Measure.dirac([0.0, 0.0]), [0.0])
    with pytest.raises(DomainError):
        solve_density(model2d, f, f, [0.0, 0.0], 0.0, 0.25)


def test_remainder_zero_without_drift_or_trace(brownian_model):
    f = _flow()
    grid = solve_density(brownian_model, f, f, 0.0, 0.0, 0.25, cells=512)
    assert remainder_R(brownian_model, f, f, grid, lambda z: z, 0.0, 0.25) == 0.0
    assert remainder_R(brownian_model, f, f, grid, lambda z: np.ones_like(z), 0.0, 0.25) == 0.0
    assert remainder_drift_only(brownian_model, f, f, grid, lambda z: z, 0.0, 0.25) == 0.0


def test_remainder_constant_drift_mean_shift(const_drift_model, const_drift_grid):
    # Against f(z) = z the remainder carries exactly the mean displacement.
    f = _flow()
    val = remainder_R(const_drift_model, f, f, const_drift_grid, lambda z: z, 0.0, 0.25)
    assert val == pytest.approx(0.25, abs=1e-5)
    val_half = remainder_R(const_drift_model, f, f, const_drift_grid,
                           lambda z: z, 0.0, 0.125)
    assert val_half == pytest.approx(0.125, abs=1e-5)


def test_remainder_drift_only_agreement(const_drift_model, const_drift_grid):
    f = _flow()
    full = remainder_R(const_drift_model, f, f, const_drift_grid, lambda z: z, 0.0, 0.25)
    drift = remainder_drift_only(const_drift_model, f, f, const_drift_grid,
                                 lambda z: z, 0.0, 0.25)
    assert abs(full - drift) <= 1e-8


def test_remainder_drift_only_requires_space_free(space_sigma_model, space_sigma_grid):
    f = _flow()
    with pytest.raises(DomainError):
        remainder_drift_only(space_sigma_model, f, f, space_sigma_grid,
                             lambda z: z, 0.0, 0.25)


def test_remainder_trace_term_small_against_one(space_sigma_model, space_sigma_grid):
    # With b = 0 only the trace term remains; against f = 1 it nearly cancels
    # by the differentiated normalization (small residue from the
    # cell-frozen covariances).
    f = _flow()
    val = remainder_R(space_sigma_model, f, f, space_sigma_grid,
                      lambda z: np.ones_like(z), 0.0, 0.25, atol=1e-5)
    assert abs(val) <= 5e-3


def test_remainder_quadrature_guard(const_drift_model, const_drift_grid):
    f = _flow()
    with pytest.raises(QuadratureError):
        remainder_R(const_drift_model, f, f, const_drift_grid,
                    lambda z: np.sin(3 * z), 0.0, 0.25, u_nodes=3, rtol=1e-12, atol=1e-15)
    with pytest.raises(DomainError):
        remainder_R(const_drift_model, f, f, const_drift_grid, lambda z: z, 0.0, 0.5)


def test_remainder_response_linear_in_flow_perturbation(arctan_model):
    # One flow is perturbed at a time; the remainder difference responds
    # linearly (structure of the distance-driver decomposition).  The
    # diffusion-flow response runs through the kernel perturbation, which
    # needs a drift to integrate against; the drift-flow response runs
    # through the drift difference itself.
    drift_mean_sigma = Model.from_json({
        "name": "drift_mean_sigma", "dim": 1,
        "drift": [{"op": "const", "value": 1.0}],
        "diffusion": {"kind": "scalar",
                      "exprs": [{"op": "integral", "arg": {"op": "coord", "index": 0}}]},
        "constants": {"K": 2.0, "k": 1.0, "eta": 1.0, "beta": 1.0,
                      "b_sup": 1.0, "grad_sigma_bound": 0.0},
    })
    base = _flow(1.0)
    grid = solve_density(drift_mean_sigma, base, base, 1.0, 0.0, 0.25, cells=512,
                         time_nodes=20)
    f_test = lambda z: np.tanh(z)
    r0 = remainder_R(drift_mean_sigma, base, base, grid, f_test, 0.0, 0.25, check=False)
    deltas = [1e-2, 3.16e-2, 1e-1]
    resp = []
    for d in deltas:
        nu2 = _flow(1.0 + d)
        r = remainder_R(drift_mean_sigma, base, nu2, grid, f_test, 0.0, 0.25, check=False)
        resp.append(abs(r - r0))
    slope = np.polyfit(np.log(deltas), np.log(resp), 1)[0]
    assert abs(slope - 1.0) <= 0.2

    base0 = _flow(1.0)
    grid_a = solve_density(arctan_model, base0, base0, 1.0, 0.0, 0.25, cells=512,
                           time_nodes=20)
    r0 = remainder_R(arctan_model, base0, base0, grid_a, f_test, 0.0, 0.25, check=False)
    resp = []
    for d in deltas:
        mu2 = _flow(1.0 + d)
        r = remainder_R(arctan_model, mu2, base0, grid_a, f_test, 0.0, 0.25, check=False)
        resp.append(abs(r - r0))
    slope = np.polyfit(np.log(deltas), np.log(resp), 1)[0]
    assert abs(slope - 1.0) <= 0.2


def test_space_sigma_solver_matches_monte_carlo(space_sigma_model, space_sigma_grid):
    f = _flow()
    n = 50_000
    cfg = SimConfig(n, 1e-3, 0.0, 0.25, seed=21)
    mc = simulate_frozen(space_sigma_model, f, f, Measure.dirac([0.0]), cfg,
                         record_times=[0.0, 0.25])
    sample = mc.measures[-1].points[:, 0]
    edges = space_sigma_grid.edges()
    hist, _ = np.histogram(sample, bins=edges)
    mass_mc = hist / n
    mass_solver = space_sigma_grid.final_density() * space_sigma_grid.h
    tv = np.abs(mass_solver.reshape(64, -1).sum(axis=1)
                - mass_mc.reshape(64, -1).sum(axis=1)).sum() + (1 - mass_mc.sum())
    assert tv <= 0.05


def test_density_and_residual_csv(tmp_path, const_drift_grid):
    p1 = tmp_path / "density.csv"
    p2 = tmp_path / "residuals.csv"
    const_drift_grid.density_csv(p1)
    const_drift_grid.residuals_csv(p2)
    assert p1.read_text().splitlines()[0] == "t,x,p"
    assert p2.read_text().splitlines()[0] == "iter,residual"
    assert len(p2.read_text().splitlines()) == len(const_drift_grid.residuals) + 1
