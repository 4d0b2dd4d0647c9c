import csv

import numpy as np
import pytest

from oracles import lp_relaxation_min, random_relu_net, unit
from splitverify import (
    Affine,
    Box,
    ConvSpec,
    LpBall,
    Network,
    ReLU,
    SolverConfig,
    decompose_conv,
    dual_certificate,
    interval_propagate,
    linear_bound_propagate,
    solve,
)
from splitverify.solver import (
    MissingProxError,
    Residuals,
    SolverDivergedError,
    balance_rho,
    build_caches,
    init_state,
    write_trace_csv,
    x_update,
)

TIGHT = SolverConfig(eps_abs=1e-6, eps_rel=1e-5)


def _instance(seed, dims=(3, 5, 4, 2)):
    rng = np.random.default_rng(seed)
    net = random_relu_net(rng, list(dims))
    X = LpBall(rng.standard_normal(dims[0]), 0.2)
    return rng, net, X, linear_bound_propagate(net, X)


# configuration ---------------------------------------------------------------


@pytest.mark.parametrize("kw", [
    dict(rho0=0.0), dict(eps_abs=-1.0), dict(max_iter=0), dict(tau=1.0),
    dict(mu_rb=0.5), dict(bound_source="exact"), dict(balance_interval=15),
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SolverConfig(**kw)


def test_config_balancing_off_skips_factor_checks():
    assert SolverConfig(balancing=False, tau=1.0).tau == 1.0
    assert SolverConfig().replace(rho0=2.0).rho0 == 2.0


# single steps ----------------------------------------------------------------


def test_init_state_is_consistent(rng):
    _, net, X, bounds = _instance(1)
    state = init_state(net, X, bounds, SolverConfig(), batch=3)
    acts = net.propagate(X.center())
    for k, a in enumerate(acts):
        np.testing.assert_allclose(state.x[k][:, 0], a)
    for k in range(len(net.layers)):
        np.testing.assert_array_equal(state.y[k], state.x[k])
        np.testing.assert_array_equal(state.z[k], state.x[k + 1])
    assert not state.LAM.any() and not state.MU.any()


def test_x_update_closed_form(rng):
    _, net, X, bounds = _instance(2)
    state = init_state(net, X, bounds, SolverConfig(rho0=2.0), batch=1)
    for arr in (state.Y, state.Z, state.LAM, state.MU):
        arr[:] = rng.standard_normal(arr.shape)
    C = rng.standard_normal((2, 1))
    x_update(state, X, C)
    np.testing.assert_allclose(state.x[0], X.project(state.y[0] - state.lam[0]))
    k = 2
    np.testing.assert_allclose(state.x[k], 0.5 * (state.y[k] - state.lam[k] + state.z[k - 1] - state.mu[k - 1]))
    np.testing.assert_allclose(state.x[-1], state.z[-1] - state.mu[-1] - C / 2.0)
    with pytest.raises(MissingProxError):
        x_update(state, X, None)


def test_balance_rho_preserves_unscaled_multipliers(rng):
    _, net, X, bounds = _instance(3)
    cfg = SolverConfig()
    state = init_state(net, X, bounds, cfg, batch=3)
    state.LAM[:] = rng.standard_normal(state.LAM.shape)
    state.MU[:] = rng.standard_normal(state.MU.shape)
    before_l, before_m = state.rho * state.LAM, state.rho * state.MU
    res = Residuals(np.array([100.0, 1.0, 1.0]), np.array([1.0, 100.0, 1.0]), np.ones(3), np.ones(3))
    direction = balance_rho(state, res, cfg)
    np.testing.assert_array_equal(direction, [1, -1, 0])
    np.testing.assert_allclose(state.rho, [2.0, 0.5, 1.0])
    np.testing.assert_allclose(state.rho * state.LAM, before_l)
    np.testing.assert_allclose(state.rho * state.MU, before_m)


# certificates ----------------------------------------------------------------


def test_zero_duals_zero_objective_certificate_is_zero():
    _, net, X, bounds = _instance(4)
    state = init_state(net, X, bounds, SolverConfig(), batch=1)
    val = dual_certificate(state, net, X, bounds, np.zeros(2), SolverConfig())
    assert val[0] == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_lower_bound_matches_lp_oracle(seed):
    rng, net, X, bounds = _instance(10 + seed)
    c = unit(rng, 2)
    cert = solve(net, X, bounds, c, TIGHT)
    lo, hi = X.box()
    # an l-inf ball is its own box, so the box LP is the exact reference
    ref = lp_relaxation_min(net, lo, hi, bounds, c)
    assert cert.status == ["converged"]
    assert cert.lower_bound[0] <= cert.primal[0]
    assert cert.lower_bound[0] <= ref + 1e-7
    assert abs(cert.lower_bound[0] - ref) <= 1e-4


@pytest.mark.parametrize("seed", range(4))
def test_box_input_matches_lp_oracle(seed):
    rng = np.random.default_rng(20 + seed)
    net = random_relu_net(rng, [3, 5, 4, 2])
    X = Box(-0.3 * np.ones(3), 0.3 * np.ones(3))
    bounds = linear_bound_propagate(net, X)
    c = unit(rng, 2)
    cert = solve(net, X, bounds, c, TIGHT)
    ref = lp_relaxation_min(net, *X.box(), bounds, c)
    assert cert.lower_bound[0] <= ref + 1e-7
    assert abs(cert.primal[0] - ref) <= 1e-3
    assert cert.dual_bound[0] >= ref - 1e-4


def test_early_stop_certificate_is_sound():
    rng = np.random.default_rng(30)
    net = random_relu_net(rng, [3, 6, 6, 2], scale=2.0)
    X = Box(-np.ones(3), np.ones(3))
    bounds = linear_bound_propagate(net, X)
    c = unit(rng, 2)
    ref = lp_relaxation_min(net, *X.box(), bounds, c)
    cert = solve(net, X, bounds, c, SolverConfig(max_iter=30, balancing=False))
    assert cert.status == ["certified_early_stop"]
    assert cert.lower_bound[0] <= ref + 1e-9
    plain = solve(net, X, bounds, c, SolverConfig(max_iter=30, early_stop_certificate=False))
    assert plain.status == ["max_iter"] and plain.lower_bound[0] == -np.inf
    assert not plain.certified[0]


def test_batch_equals_sequential():
    rng, net, X, bounds = _instance(40)
    C = np.column_stack([unit(rng, 2) for _ in range(3)])
    cfg = SolverConfig()
    batched = solve(net, X, bounds, C, cfg)
    for j in range(3):
        single = solve(net, X, bounds, C[:, j], cfg)
        assert single.iters[0] == batched.iters[j]
        np.testing.assert_allclose(single.lower_bound[0], batched.lower_bound[j], rtol=1e-9, atol=1e-12)
        assert single.rho_trace[0] == batched.rho_trace[j]


def test_point_input_set_gives_exact_value():
    rng = np.random.default_rng(50)
    net = random_relu_net(rng, [3, 4, 2])
    x = rng.standard_normal(3)
    X = Box.point(x)
    c = unit(rng, 2)
    cert = solve(net, X, interval_propagate(net, X), c, TIGHT)
    assert cert.lower_bound[0] == pytest.approx(c @ net.propagate(x)[-1], abs=1e-5)


def test_convolutional_network_matches_lp_oracle():
    rng = np.random.default_rng(60)
    spec = ConvSpec(rng.standard_normal((2, 1, 2, 2)) / 2, (1, 4, 4), (2, 2), (1, 1), 0.1 * rng.standard_normal(2))
    conv = decompose_conv(spec)
    shp = conv[-1].shape_out
    net = Network(conv + [ReLU(shp), Affine(rng.standard_normal((2, 18)) / 4, shape_in=shp)])
    X = Box(-0.5 * np.ones(16), 0.5 * np.ones(16))
    bounds = linear_bound_propagate(net, X)
    c = unit(rng, 2)
    cert = solve(net, X, bounds, c, TIGHT)
    ref = lp_relaxation_min(net, *X.box(), bounds, c)
    assert cert.status == ["converged"]
    assert cert.lower_bound[0] <= ref + 1e-7
    assert abs(cert.lower_bound[0] - ref) <= 1e-3


def test_build_caches_shares_repeated_layers(rng):
    layer = Affine(np.eye(2) * 0.5)
    caches = build_caches(Network([layer, ReLU((2,)), layer]))
    assert caches[0] is caches[2] and caches[1] is None


def test_divergence_reports_layer():
    class Broken(Box):
        def project(self, v):
            return np.full_like(np.asarray(v, dtype=float), np.nan)

    rng = np.random.default_rng(70)
    net = random_relu_net(rng, [2, 3, 1])
    X = Box(-np.ones(2), np.ones(2))
    bounds = interval_propagate(net, X)
    with pytest.raises(SolverDivergedError) as info:
        solve(net, Broken(-np.ones(2), np.ones(2)), bounds, [1.0])
    assert info.value.layer == 0 and info.value.iteration == 1


def test_objective_validation():
    _, net, X, bounds = _instance(5)
    with pytest.raises(ValueError):
        solve(net, X, bounds, np.ones(3))
    with pytest.raises(ValueError):
        solve(net, X, bounds, np.array([np.inf, 0.0]))


def test_time_limit_stops_early():
    _, net, X, bounds = _instance(6)
    cert = solve(net, X, bounds, [1.0, 0.0], SolverConfig(eps_abs=0, eps_rel=0, time_limit=0.0))
    assert cert.iters[0] == 1


def test_trace_csv(tmp_path):
    _, net, X, bounds = _instance(7)
    single = solve(net, X, bounds, [1.0, -1.0])
    write_trace_csv(single, tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["iter", "r_p", "r_d", "eps_p", "eps_d", "rho", "objective"]
    assert len(rows) - 1 == len(single.trace[0]) and int(rows[-1][0]) == single.iters[0]
    batched = solve(net, X, bounds, np.eye(2))
    write_trace_csv(batched, tmp_path / "b.csv")
    rows = list(csv.reader(open(tmp_path / "b.csv")))
    assert rows[0][-1] == "entry" and {r[-1] for r in rows[1:]} == {"0", "1"}


def test_squared_residual_mode_converges():
    _, net, X, bounds = _instance(8)
    cert = solve(net, X, bounds, [1.0, 0.0], SolverConfig(squared_residuals=True))
    assert cert.status == ["converged"]
    r = cert.final_residuals
    assert r.r_p[0] <= r.eps_p[0] and r.r_d[0] <= r.eps_d[0]


# listed cases ----------------------------------------------------------------


def _small_problem(dims=(3, 4, 2)):
    from splitverify.solver import _Problem

    rng, net, X, bounds = _instance(90, dims)
    return rng, net, X, bounds, _Problem(net, X, bounds)


def test_initial_state_cases():
    from splitverify.solver import compute_residuals

    _, net, X, bounds = _instance(91)
    cfg = SolverConfig()
    state = init_state(net, X, bounds, cfg, batch=4)
    assert all(a.shape[-1] == 4 for a in (state.X, state.Y, state.Z, state.LAM, state.MU)) and state.rho.shape == (4,)
    res = compute_residuals(state, state.Y.copy(), state.Z.copy(), cfg)
    np.testing.assert_array_equal(res.r_p, 0.0)
    np.testing.assert_array_equal(res.r_d, 0.0)
    before = state.X.copy()
    x_update(state, X, np.zeros((2, 4)))
    L = state.layout
    np.testing.assert_allclose(state.X[L.n0: L.ny], before[L.n0: L.ny])


def test_x_update_listed_cases(rng):
    _, net, X, bounds = _instance(92)
    state = init_state(net, X, bounds, SolverConfig(rho0=2.0))
    for arr in (state.Z, state.MU):
        arr[:] = rng.standard_normal(arr.shape)
    x_update(state, X, np.zeros((2, 1)))
    np.testing.assert_allclose(state.x[-1], state.z[-1] - state.mu[-1])
    x_update(state, X, np.array([[1.0], [-1.0]]))
    np.testing.assert_allclose(state.x[-1], state.z[-1] - state.mu[-1] - np.array([[0.5], [-0.5]]))
    # y_k = z_{k-1} with zero duals averages identical values
    state.LAM[:] = 0.0
    state.MU[:] = 0.0
    state.y[1][:] = state.z[0]
    x_update(state, X, np.zeros((2, 1)))
    np.testing.assert_allclose(state.x[1], state.y[1])


def test_yz_update_listed_cases(rng):
    from splitverify.solver import _Problem, yz_update

    # a feasible state with zero duals is a fixed point
    _, net, X, bounds, problem = _small_problem()
    state = init_state(net, X, bounds, SolverConfig())
    Y, Z = state.Y.copy(), state.Z.copy()
    yz_update(state, problem)
    np.testing.assert_allclose(state.Y, Y, atol=1e-12)
    np.testing.assert_allclose(state.Z, Z, atol=1e-12)

    ident = Network([Affine(np.eye(3))])
    Xb = Box(-np.ones(3), np.ones(3))
    b = interval_propagate(ident, Xb)
    state = init_state(ident, Xb, b, SolverConfig())
    state.X[:] = rng.standard_normal(state.X.shape)
    yz_update(state, _Problem(ident, Xb, b))
    np.testing.assert_allclose(state.Y, 0.5 * (state.X[:3] + state.X[3:]), atol=1e-14)
    np.testing.assert_allclose(state.Z, state.Y, atol=1e-14)

    relu = Network([ReLU((2,))])
    Xr = Box(-np.ones(2), np.ones(2))
    b = interval_propagate(relu, Xr)
    state = init_state(relu, Xr, b, SolverConfig())
    state.X[:2, 0], state.X[2:, 0] = 0.0, 1.0
    yz_update(state, _Problem(relu, Xr, b))
    np.testing.assert_allclose(state.Y[:, 0], [0.2, 0.2], atol=1e-15)
    np.testing.assert_allclose(state.Z[:, 0], [0.6, 0.6], atol=1e-15)


def test_dual_update_cases(rng):
    from splitverify.solver import dual_update

    _, net, X, bounds = _instance(93)
    state = init_state(net, X, bounds, SolverConfig())
    dual_update(state)
    assert not state.LAM.any() and not state.MU.any()
    v = rng.standard_normal(state.Y.shape)
    state.Y -= v
    dual_update(state)
    np.testing.assert_allclose(state.LAM, v)
    dual_update(state)
    np.testing.assert_allclose(state.LAM, 2 * v)


def test_residuals_match_direct_transcription(rng):
    from splitverify.solver import compute_residuals

    net = Network([Affine(rng.standard_normal((3, 2))), ReLU((3,))])
    X = Box(-np.ones(2), np.ones(2))
    cfg = SolverConfig(rho0=1.7, eps_abs=1e-3, eps_rel=1e-2)
    state = init_state(net, X, interval_propagate(net, X), cfg)
    for arr in (state.X, state.Y, state.Z, state.LAM, state.MU):
        arr[:] = rng.standard_normal(arr.shape)
    pY, pZ = rng.standard_normal(state.Y.shape), rng.standard_normal(state.Z.shape)
    x, y, z, lam, mu = state.x, state.y, state.z, state.lam, state.mu
    dy = [y[0] - pY[:2], y[1] - pY[2:]]
    dz = [z[0] - pZ[:3], z[1] - pZ[3:]]
    r_p = np.sqrt(sum(np.sum((y[k] - x[k]) ** 2) + np.sum((x[k + 1] - z[k]) ** 2) for k in range(2)))
    r_d = 1.7 * np.sqrt(np.sum(dy[0] ** 2) + np.sum((dy[1] + dz[0]) ** 2) + np.sum(dz[1] ** 2))
    p, n = 2 + 2 * 3 + 3, 2 + 3 + 3
    xn = np.sqrt(np.sum(x[0] ** 2) + 2 * np.sum(x[1] ** 2) + np.sum(x[2] ** 2))
    yzn = np.sqrt(sum(np.sum(a**2) for a in y + z))
    eps_p = np.sqrt(p) * 1e-3 + 1e-2 * max(xn, yzn)
    eps_d = np.sqrt(n) * 1e-3 + 1e-2 * np.sqrt(np.sum(lam[0] ** 2) + np.sum((lam[1] + mu[0]) ** 2) + np.sum(mu[1] ** 2))
    res = compute_residuals(state, pY, pZ, cfg)
    np.testing.assert_allclose([res.r_p[0], res.r_d[0], res.eps_p[0], res.eps_d[0]], [r_p, r_d, eps_p, eps_d], rtol=1e-13)
    sq = compute_residuals(state, pY, pZ, cfg.replace(squared_residuals=True))
    np.testing.assert_allclose([sq.r_p[0], sq.r_d[0]], [r_p**2, 1.7 * (r_d / 1.7) ** 2], rtol=1e-13)


def test_converged_fixed_point_has_zero_residuals():
    from splitverify.solver import compute_residuals

    _, net, X, bounds = _instance(94)
    cert = solve(net, X, bounds, [1.0, 0.0], TIGHT, keep_state=True)
    st = cert.state
    res = compute_residuals(st, st.Y.copy(), st.Z.copy(), TIGHT)
    assert res.r_d[0] == 0.0 and res.r_p[0] <= res.eps_p[0]


def test_balance_rho_listed_cases():
    _, net, X, bounds = _instance(95)
    cfg = SolverConfig()
    state = init_state(net, X, bounds, cfg)
    state.LAM[:] = 1.0
    balance_rho(state, Residuals(np.ones(1), np.ones(1), np.ones(1), np.ones(1)), cfg)
    assert state.rho[0] == 1.0
    balance_rho(state, Residuals(np.array([100.0]), np.ones(1), np.ones(1), np.ones(1)), cfg)
    assert state.rho[0] == 2.0 and np.all(state.LAM == 0.5)


def test_zero_objective_converges_immediately():
    _, net, X, bounds = _instance(96)
    cert = solve(net, X, bounds, np.zeros(2))
    assert cert.status == ["converged"] and cert.iters[0] == 1
    assert cert.lower_bound[0] == pytest.approx(0.0, abs=1e-12)


def test_gap_and_sampled_soundness_on_small_net():
    rng = np.random.default_rng(97)
    net = random_relu_net(rng, [3, 4, 4, 2])
    X = LpBall(rng.standard_normal(3), 0.1)
    c = unit(rng, 2)
    cert = solve(net, X, linear_bound_propagate(net, X), c, TIGHT)
    assert cert.status == ["converged"]
    assert cert.primal[0] - cert.dual_bound[0] <= 1e-4
    assert abs(cert.primal[0] - cert.dual_bound[0]) <= 1e-4 * (1 + abs(cert.primal[0]))
    vals = c @ net.propagate(X.sample(rng, 10_000))[-1]
    assert cert.lower_bound[0] <= vals.min() + 1e-9


def test_rho_scaling_leaves_the_optimum_unchanged():
    rng, net, X, bounds = _instance(98)
    c = unit(rng, 2)
    cfg = SolverConfig(eps_abs=1e-8, eps_rel=1e-7, balancing=False, max_iter=50_000)
    a = solve(net, X, bounds, c, cfg)
    b = solve(net, X, bounds, c, cfg.replace(rho0=2.0))
    assert a.status == b.status == ["converged"]
    assert abs(a.primal[0] - b.primal[0]) <= 1e-6
