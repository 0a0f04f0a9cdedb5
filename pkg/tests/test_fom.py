import numpy as np
import pytest
import scipy.integrate
from hypothesis import given
from hypothesis import strategies as st

from romopt.fom import (XI_TEST, XI_TRAIN, ControlVector, Grid2D, Physics, ProtectionZone, SimulationError,
                        StateTrajectory, WindParams, assemble_fom, control_eval, fom_objective, gaussian_bump,
                        simulate_fom, velocity_field)

finite = st.floats(-20, 20, allow_nan=False)


def test_velocity_at_left_edge():
    assert np.allclose(velocity_field((0.0, 0.5), WindParams(XI_TRAIN), 1.2), (4.0, 0.0))
    assert np.allclose(velocity_field((0.0, 0.5), WindParams(XI_TEST), 1.2), (6.0, 0.0))


def test_velocity_matches_scalar_formula():
    x1, L = 0.6, 1.2
    a, b, c, d = XI_TRAIN
    ref = (4 * a * np.cos(d * x1 / L) - 2 * b * np.sin(c * np.pi * x1) * np.sin(d * x1 / L),
           4 * a * np.sin(d * x1 / L) - 2 * b * np.sin(c * np.pi * x1) * np.cos(d * x1 / L))
    assert np.allclose(velocity_field((0.6, 0.3), WindParams(XI_TRAIN), L), ref, rtol=1e-14)


@given(st.tuples(finite, finite, finite, finite), st.floats(0, 1.2), st.integers(0, 3))
def test_velocity_xi_derivative(xi, x1, i):
    x = np.array([x1, 0.4])
    a, b, c, d = xi
    s, L = np.sin(c * np.pi * x1), 1.2
    co, si = np.cos(d * x1 / L), np.sin(d * x1 / L)
    dc = -2 * b * np.pi * x1 * np.cos(c * np.pi * x1)
    exact = [
        np.array([4 * co, 4 * si]),
        np.array([-2 * s * si, -2 * s * co]),
        np.array([dc * si, dc * co]),
        np.array([-4 * a * si * x1 / L - 2 * b * s * co * x1 / L, 4 * a * co * x1 / L + 2 * b * s * si * x1 / L]),
    ][i]
    h = 1e-6
    xp, xm = list(xi), list(xi)
    xp[i] += h
    xm[i] -= h
    fd = (velocity_field(x, WindParams(xp), L) - velocity_field(x, WindParams(xm), L)) / (2 * h)
    assert np.allclose(fd, exact, atol=1e-6 * (1 + np.abs(exact).max()))


def test_wind_params_reject_nonfinite():
    with pytest.raises(ValueError):
        WindParams((1.0, np.nan, 1.0, 1.0))


def test_grid_rejects_tiny():
    with pytest.raises(ValueError):
        Grid2D(2, 10)


def test_zero_wind_operator_is_neumann_diffusion():
    ops = assemble_fom(Grid2D(12, 9), WindParams((0, 0, 0, 0)), Physics(0.1, 0.1, 2.0))
    A = ops.lin1.toarray()
    assert np.allclose(A, A.T, atol=1e-13)
    assert np.max(np.linalg.eigvalsh(A)) < 1e-12
    assert np.allclose(A.sum(axis=1), 0.0, atol=1e-12)


@given(st.tuples(st.floats(-2, 2), st.floats(-2, 2), st.floats(0, 10), st.floats(0, 75)))
def test_constants_in_transport_kernel(xi):
    ops = assemble_fom(Grid2D(10, 10), WindParams(xi))
    for A in (ops.lin1, ops.lin2):
        assert np.allclose(A @ np.ones(ops.n), 0.0, atol=1e-10)


def test_source_peak_at_injection_point():
    g = Grid2D(13, 13)
    node = g.node_coords[40]
    ops = assemble_fom(g, WindParams(XI_TRAIN), injection_points=node[None, :])
    assert ops.source_basis[40, 0] == pytest.approx(50.0, abs=1e-12)


def test_cfl_violation_rejected():
    with pytest.raises(ValueError, match="CFL"):
        assemble_fom(Grid2D(40, 40), WindParams((100.0, 100.0, 10.0, 75.0)))


def test_mass_is_positive():
    ops = assemble_fom(Grid2D(40, 40), WindParams(XI_TRAIN))
    assert np.all(ops.mass > 0)
    assert ops.mass.sum() == pytest.approx(1.2**2)


def test_control_eval_interpolation():
    rng = np.random.default_rng(0)
    z = ControlVector(rng.random((3, 5)), np.linspace(0, 0.4, 5))
    for j, t in enumerate(z.time_nodes):
        assert np.array_equal(control_eval(z, t), z.q_nodes[:, j])
    mid = 0.5 * (z.time_nodes[1] + z.time_nodes[2])
    assert np.allclose(control_eval(z, mid), 0.5 * (z.q_nodes[:, 1] + z.q_nodes[:, 2]))
    c = ControlVector.constant(2.5, n_q=3, n_s=7)
    assert np.allclose(control_eval(c, np.linspace(0, 0.4, 13)), 2.5)
    with pytest.raises(ValueError):
        control_eval(z, 0.41)


@given(st.lists(st.floats(-10, 10), min_size=14 * 4, max_size=14 * 4))
def test_source_term_nonnegative(vals):
    ops = _ops10()
    z = ControlVector(np.reshape(vals, (14, 4)), np.linspace(0, 0.4, 4))
    q = control_eval(z, np.linspace(0, 0.4, 9))
    assert np.all(ops.source_basis @ (q * q) >= 0)


_cache = {}


def _ops10(xi=XI_TRAIN, **kw):
    key = (tuple(xi), tuple(sorted(kw.items())))
    if key not in _cache:
        _cache[key] = assemble_fom(Grid2D(10, 10), WindParams(xi), **kw)
    return _cache[key]


def test_zero_is_fixed_point():
    ops = _ops10()
    tr = simulate_fom(ops, ControlVector.constant(0.0), initial_u1=np.zeros(ops.n))
    assert not tr.u1.any() and not tr.u2.any()


def test_mass_conservation_without_reaction():
    g = Grid2D(20, 20)
    ops = assemble_fom(g, WindParams((0, 0, 0, 0)), Physics(0.1, 0.1, 0.0))
    tr = simulate_fom(ops, ControlVector.constant(0.0))
    m = ops.mass @ tr.u1
    assert np.max(np.abs(m - m[0])) <= 1e-10 * abs(m[0])


def _explicit_euler(ops, z, n):
    import scipy.sparse as sp

    dt = ops.final_time / n
    D = sp.diags(1.0 / ops.mass)
    L1, L2 = (D @ ops.lin1).tocsr(), (D @ ops.lin2).tocsr()
    Q = control_eval(z, np.arange(n) * dt)
    S = ops.source_basis @ (Q * Q)
    u1, u2 = ops.initial_u1.copy(), np.zeros(ops.n)
    rho = ops.physics.rho
    for k in range(n):
        r = rho * u1 * u2
        u1, u2 = u1 + dt * (L1 @ u1 - r), u2 + dt * (L2 @ u2 - r + S[:, k])
    return u1, u2


def test_against_fine_explicit_euler():
    # the scheme is first order in time; check the error against a reference
    # at one hundredth of the step and its halving under refinement
    ops = _ops10()
    rng = np.random.default_rng(0)
    z = ControlVector(rng.uniform(0, 3, (14, 100)), np.linspace(0, 0.4, 100))
    r1, r2 = _explicit_euler(ops, z, 200000)
    errs = []
    for n_t in (1001, 2001):
        tr = simulate_fom(ops, z, n_t=n_t)
        errs.append((np.linalg.norm(tr.u1[:, -1] - r1) / np.linalg.norm(r1),
                     np.linalg.norm(tr.u2[:, -1] - r2) / np.linalg.norm(r2)))
    assert errs[1][0] <= 1e-3
    assert 1.7 < errs[0][1] / errs[1][1] < 2.3
    assert errs[1][1] <= 1e-2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_state_reports_step():
    ops = _ops10()
    u0 = np.zeros(ops.n)
    u0[5] = np.inf
    with pytest.raises(SimulationError, match="step 1"):
        simulate_fom(ops, ControlVector.constant(0.0), initial_u1=u0)


def test_objective_trivial_values():
    g = Grid2D(10, 10)
    zone = ProtectionZone.build(g)
    m = g.lumped_mass()
    t = np.linspace(0, 0.4, 201)
    zero = StateTrajectory(t, np.zeros((g.n, t.size)), np.zeros((g.n, t.size)))
    assert fom_objective(zero, ControlVector.constant(0.0), zone, m) == 0.0
    q = np.zeros((14, 100))
    q[3] = 1.0
    val = fom_objective(zero, ControlVector(q, np.linspace(0, 0.4, 100)), zone, m, gamma=1e-5)
    assert val == pytest.approx(0.5 * 1e-5 * 0.4, rel=1e-12)


def test_objective_matches_simpson():
    g = Grid2D(10, 10)
    zone = ProtectionZone.build(g)
    m = g.lumped_mass()
    rng = np.random.default_rng(1)
    a, b = rng.random(g.n), rng.random(g.n)
    t = np.linspace(0, 0.4, 4001)
    u1 = a[:, None] * np.sin(7 * t) + b[:, None] * np.cos(3 * t)
    tr = StateTrajectory(t, u1, np.zeros_like(u1))
    z = ControlVector(rng.random((14, 100)), np.linspace(0, 0.4, 100))
    tf = np.linspace(0, 0.4, 40001)
    uf = a[:, None] * np.sin(7 * tf) + b[:, None] * np.cos(3 * tf)
    zone_f = np.einsum("it,i->t", (uf * zone.psi[:, None]) ** 2, m)
    reg_f = np.sum(control_eval(z, tf) ** 4, axis=0)
    ref = 0.5 * scipy.integrate.simpson(zone_f + 1e-5 * reg_f, x=tf)
    # the control is only piecewise linear, so compare at the coarse grid's resolution
    assert fom_objective(tr, z, zone, m) == pytest.approx(ref, rel=1e-6)


def test_protection_zone_peak():
    g = Grid2D(40, 40)
    zone = ProtectionZone.build(g)
    assert np.all((zone.psi > 0) & (zone.psi <= 1))
    nearest = np.argmin(np.sum((g.node_coords - np.array(zone.center)) ** 2, axis=1))
    assert np.argmax(zone.psi) == nearest


@pytest.mark.xfail(strict=True, reason="grid refinement changes the objective by more than 10% (see notes)")
def test_grid_refinement_consistency():
    vals = []
    for n in (40, 79):
        g = Grid2D(n, n)
        ops = assemble_fom(g, WindParams(XI_TRAIN), initial_u1=gaussian_bump(g))
        zc = ControlVector.constant(2.0)
        vals.append(fom_objective(simulate_fom(ops, zc), zc, ProtectionZone.build(g), ops.mass))
    assert abs(vals[1] - vals[0]) < 0.1 * abs(vals[0])
