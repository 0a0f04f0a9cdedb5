import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import rel
from romopt.fire import FireScenario, IgnitionPoint, ObservationSet, fire_grid, observe
from romopt.flowmap import (DomainExit, FlowmapDataset, IgnitionRomProblem, MlpParams, TrainingDivergence,
                            TrainSchedule, calibrate_ignition_discrepancy, fd_hessian, gelu, gelu_prime,
                            ignition_romco, init_mlp, level_set_pod, mlp_forward, mlp_vjp, multistart_romco,
                            one_step_error, project_ignition, recurrent_loss, recurrent_loss_and_grad, rollout,
                            rollout_vjp, train_flowmap)
from romopt.hdsa import DiscrepancyLayout

GRID = fire_grid()


def _random_mlp(widths=(4, 7, 7, 4), seed=0, scale=1.0):
    p = init_mlp(list(widths), seed)
    rng = np.random.default_rng(seed + 100)
    return p.with_flat(scale * rng.standard_normal(p.n_params) / np.sqrt(widths[1]))


def _basis(r=4, seed=0):
    rng = np.random.default_rng(seed)
    V, _ = np.linalg.qr(rng.standard_normal((GRID.n, r)))
    return V


# -- network ------------------------------------------------------------------------


def test_gelu_derivative():
    x = np.linspace(-5, 5, 41)
    fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6
    assert np.allclose(gelu_prime(x), fd, atol=1e-8)


def test_zero_network_outputs_zero():
    p = init_mlp([3, 5, 5, 3], 0)
    p = p.with_flat(np.zeros(p.n_params))
    assert not mlp_forward(p, np.array([1.0, -2.0, 3.0])).any()


def test_single_linear_layer():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((3, 4))
    p = MlpParams((W,), (np.zeros(3),), "identity")
    u = rng.standard_normal(4)
    assert np.allclose(mlp_forward(p, u), W @ u, rtol=1e-15)
    U = rng.standard_normal((6, 4))
    assert np.allclose(mlp_forward(p, U), U @ W.T)


def test_params_validation():
    with pytest.raises(ValueError, match="inputs"):
        MlpParams((np.ones((3, 2)), np.ones((2, 4))), (np.zeros(3), np.zeros(2)))
    with pytest.raises(ValueError, match="non-finite"):
        MlpParams((np.full((2, 2), np.nan),), (np.zeros(2),))
    with pytest.raises(ValueError, match="width"):
        mlp_forward(init_mlp([3, 2], 0), np.ones(4))


def test_vjp_against_finite_differences():
    p = _random_mlp()
    rng = np.random.default_rng(1)
    u, g = rng.standard_normal(4), rng.standard_normal(4)
    gp, gu = mlp_vjp(p, u, g)
    x = p.flat()
    head = lambda v: g @ mlp_forward(p.with_flat(v), u)  # noqa: E731
    for i in rng.choice(p.n_params, 20, replace=False):
        e = np.zeros_like(x)
        e[i] = 1e-6
        fd = (head(x + e) - head(x - e)) / 2e-6
        assert abs(fd - gp[i]) <= 1e-5 * max(abs(gp[i]), 1e-3)
    fdu = [(g @ mlp_forward(p, u + e) - g @ mlp_forward(p, u - e)) / 2e-6 for e in 1e-6 * np.eye(4)]
    assert rel(gu, fdu) <= 1e-5


def test_serialization_roundtrip():
    p = _random_mlp()
    q = MlpParams.from_blocks(*p.to_blocks())
    assert np.array_equal(p.flat(), q.flat()) and q.widths == p.widths


# -- rollout ------------------------------------------------------------------------


def test_zero_network_rollout_is_constant():
    p = init_mlp([4, 6, 4], 0)
    p = p.with_flat(np.zeros(p.n_params))
    V = _basis()
    traj = rollout(p, V, (1500.0, 1700.0), 5, GRID)
    assert traj.shape == (6, 4)
    assert np.array_equal(traj, np.tile(traj[0], (6, 1)))


def test_zero_steps_is_projected_initial_state():
    V = _basis()
    z = IgnitionPoint((1500.0, 1700.0))
    assert np.array_equal(rollout(_random_mlp(), V, z, 0, GRID)[0], project_ignition(V, z, GRID))


def test_rollout_gradients_against_finite_differences():
    V = _basis()
    p = _random_mlp(scale=0.3)
    # the input scale keeps the network in its nonlinear range for these coordinates
    p = MlpParams(p.weights, p.biases, in_scale=np.full(4, 1e3), out_scale=np.full(4, 50.0))
    rng = np.random.default_rng(2)
    G = rng.standard_normal((6, 4))
    z = np.array([1512.3, 1687.9])
    loss = lambda q, zz: float(np.sum(G * rollout(q, V, zz, 5, GRID)))  # noqa: E731
    dz, dp = rollout_vjp(p, V, z, 5, G, GRID)
    fd = [(loss(p, z + e) - loss(p, z - e)) / 2e-3 for e in 1e-3 * np.eye(2)]
    assert rel(dz, fd) <= 1e-4
    x = p.flat()
    for _ in range(3):
        d = rng.standard_normal(x.size)
        fd = (loss(p.with_flat(x + 1e-6 * d), z) - loss(p.with_flat(x - 1e-6 * d), z)) / 2e-6
        assert abs(fd - dp @ d) <= 1e-4 * abs(dp @ d)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_rollout_nonfinite_aborts():
    p = init_mlp([4, 4], 0, activation="identity")
    p = p.with_flat(np.full(p.n_params, 1e200))
    with pytest.raises(FloatingPointError):
        rollout(p, _basis(), (1500.0, 1500.0), 5, GRID)


# -- recurrent loss -----------------------------------------------------------------


def _linear_data(A, M=6, n_tau=9, seed=0):
    rng = np.random.default_rng(seed)
    D = np.empty((M, n_tau + 1, A.shape[0]))
    D[:, 0] = rng.standard_normal((M, A.shape[0]))
    for k in range(n_tau):
        D[:, k + 1] = D[:, k] + D[:, k] @ A.T
    return D


def _loop_loss(p, D, P):
    total = 0.0
    M, n1, _ = D.shape
    for m in range(M):
        for k in range(n1 - 1):
            u = D[m, k].copy()
            for q in range(1, P + 1):
                u = u + mlp_forward(p, u)
                if k + q <= n1 - 1:
                    total += float(np.sum((u - D[m, k + q]) ** 2))
    return total


def test_planted_linear_flow_has_zero_loss():
    rng = np.random.default_rng(0)
    A = 0.1 * rng.standard_normal((3, 3))
    D = _linear_data(A)
    p = MlpParams((A,), (np.zeros(3),), "identity")
    assert recurrent_loss(p, D, 3, split=None) <= 1e-26 * np.sum(D**2)


def test_single_step_loss_is_one_step_regression():
    p = _random_mlp((3, 5, 3))
    D = np.random.default_rng(1).standard_normal((4, 8, 3))
    U = D[:, :-1].reshape(-1, 3)
    ref = np.sum((U + mlp_forward(p, U) - D[:, 1:].reshape(-1, 3)) ** 2)
    assert recurrent_loss(p, D, 1, split=None) == pytest.approx(ref, rel=1e-13)


@pytest.mark.parametrize("P", [2, 3, 5])
def test_loss_matches_loop_oracle(P):
    p = _random_mlp((3, 5, 5, 3), seed=3, scale=0.5)
    D = np.random.default_rng(4).standard_normal((3, 7, 3))
    assert recurrent_loss(p, D, P, split=None) == pytest.approx(_loop_loss(p, D, P), rel=1e-12)


def test_loss_gradient_against_finite_differences():
    p = _random_mlp((3, 5, 3), seed=5, scale=0.5)
    D = np.random.default_rng(6).standard_normal((3, 6, 3))
    loss, g = recurrent_loss_and_grad(p, D, 3, split=None)
    assert loss == recurrent_loss(p, D, 3, split=None)
    x = p.flat()
    d = np.random.default_rng(7).standard_normal(x.size)
    fd = (recurrent_loss(p.with_flat(x + 1e-6 * d), D, 3, None)
          - recurrent_loss(p.with_flat(x - 1e-6 * d), D, 3, None)) / 2e-6
    assert fd == pytest.approx(g @ d, rel=1e-6)


@given(st.integers(0, 10**6), st.integers(1, 4))
def test_loss_nonnegative(seed, P):
    p = _random_mlp((2, 4, 2), seed=seed % 50, scale=0.3)
    D = np.random.default_rng(seed).standard_normal((2, 5, 2))
    assert recurrent_loss(p, D, P, split=None) >= 0.0


def test_dataset_and_split():
    D = np.zeros((3, 4, 2))
    ds = FlowmapDataset(D, ("train", "validation", "train"))
    assert ds.n_tau == 3 and ds.r == 2 and ds.subset("train").shape == (2, 4, 2)
    with pytest.raises(ValueError):
        FlowmapDataset(D, ("train", "test", "train"))
    with pytest.raises(ValueError, match="at least 1"):
        recurrent_loss(init_mlp([2, 2], 0), D, 0, split=None)


# -- training -----------------------------------------------------------------------


def _planted_dataset():
    rng = np.random.default_rng(8)
    A = 0.05 * rng.standard_normal((3, 3)) - 0.05 * np.eye(3)
    D = _linear_data(A, M=20, seed=9)
    return FlowmapDataset(D, ("train",) * 16 + ("validation",) * 4)


SMALL = dict(epochs=1000, P=3, hidden_width=32, hidden_layers=2)


def test_training_recovers_planted_linear_flow():
    params = train_flowmap(_planted_dataset(), TrainSchedule(**SMALL))
    assert one_step_error(params, _planted_dataset(), "validation") <= 1e-2


def test_training_is_deterministic():
    ds = _planted_dataset()
    sched = TrainSchedule(**dict(SMALL, epochs=30, batch_size=5))
    h1, h2 = [], []
    a = train_flowmap(ds, sched, h1)
    b = train_flowmap(ds, sched, h2)
    assert np.array_equal(a.flat(), b.flat())
    assert h1 == h2 and len(h1) == 30


def test_training_returns_best_validation_iterate():
    ds = _planted_dataset()
    hist = []
    best = train_flowmap(ds, TrainSchedule(**dict(SMALL, epochs=50)), hist)
    assert recurrent_loss(best, ds, 3, "validation") == pytest.approx(min(h["validation_loss"] for h in hist))


def test_schedule_invariants():
    s = TrainSchedule(epochs=11, lr_start=4e-3, lr_end=1e-3)
    lr = [s.learning_rate(e) for e in range(11)]
    assert lr[0] == pytest.approx(4e-3) and lr[-1] == pytest.approx(1e-3)
    assert np.all(np.diff(lr) < 0)
    for P in (1, 9):
        with pytest.raises(ValueError, match="1 < P"):
            TrainSchedule(P=P).check_horizon(9)
    with pytest.raises(ValueError):
        TrainSchedule(lr_start=1e-3, lr_end=4e-3)
    with pytest.raises(ValueError):
        TrainSchedule(epochs=0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_keeps_last_good_parameters():
    ds = _planted_dataset()
    with pytest.raises(TrainingDivergence) as info:
        train_flowmap(ds, TrainSchedule(**dict(SMALL, epochs=200, lr_start=1e30, lr_end=1e30)))
    assert isinstance(info.value.params, MlpParams)
    assert np.all(np.isfinite(info.value.params.flat()))


def test_empty_training_split_rejected():
    ds = FlowmapDataset(np.ones((2, 5, 2)), ("validation", "validation"))
    with pytest.raises(ValueError, match="empty"):
        train_flowmap(ds, TrainSchedule(P=2))


# -- POD ----------------------------------------------------------------------------


@pytest.mark.parametrize("tol", [0.3, 0.05, 0.01])
def test_pod_one_percent_rule(tol):
    rng = np.random.default_rng(10)
    modes = np.linalg.qr(rng.standard_normal((200, 12)))[0] * (0.5 ** np.arange(12))
    make = lambda: [modes @ rng.standard_normal((12, 9)) for _ in range(4)]  # noqa: E731
    tr, va = make(), make()
    pod = level_set_pod(tr, va, tol)
    Y = np.hstack(va)

    def err(r):
        V = pod.V[:, :r] if r <= pod.r else None
        return np.linalg.norm(Y - V @ (V.T @ Y)) / np.linalg.norm(Y)

    assert err(pod.r) <= tol
    assert pod.r == 1 or err(pod.r - 1) > tol
    assert np.allclose(pod.V.T @ pod.V, np.eye(pod.r), atol=1e-12)


def test_pod_warns_when_tolerance_unreachable():
    rng = np.random.default_rng(11)
    tr = [rng.standard_normal((50, 3))]
    va = [rng.standard_normal((50, 3))]
    with pytest.warns(UserWarning, match="exceeds"):
        level_set_pod(tr, va, 0.01)


# -- ignition inversion -------------------------------------------------------------


def test_flowmap_is_stationary_at_its_own_data(flowmap_model):
    params, V, scen = flowmap_model
    z_star = np.array([1650.0, 2050.0])
    prob = IgnitionRomProblem(params, V, ObservationSet(np.zeros((V.shape[0], 7)), scen.obs_times), GRID)
    Y = prob.predictions(z_star)
    # the misfit is zero to round-off; the gradient tolerance is set on the scale of the fields
    res = ignition_romco(params, V, ObservationSet(Y, scen.obs_times), z_star, GRID, gtol=1e-6)
    assert res.converged and res.n_iter == 0
    assert np.array_equal(res.z, z_star)


def test_ignition_gradient_against_finite_differences(flowmap_model):
    params, V, scen = flowmap_model
    obs = observe(IgnitionPoint((1400.0, 2300.0)), scen)
    prob = IgnitionRomProblem(params, V, obs, GRID)
    z = np.array([1533.3, 2210.7])
    fd = [(prob.objective(z + e) - prob.objective(z - e)) / 2e-2 for e in 1e-2 * np.eye(2)]
    assert rel(prob.gradient(z), fd) <= 1e-4


@pytest.mark.parametrize("truth,offset", [((1600.0, 2200.0), (300.0, -300.0)), ((2300.0, 1300.0), (-400.0, 200.0))])
def test_in_distribution_recovery(flowmap_model, truth, offset):
    params, V, scen = flowmap_model
    obs = observe(IgnitionPoint(truth), scen)
    res = ignition_romco(params, V, obs, np.add(truth, offset), GRID)
    assert np.linalg.norm(res.z - truth) <= 60.0


def test_multistart_from_corners(flowmap_model):
    params, V, scen = flowmap_model
    obs = observe(IgnitionPoint((1800.0, 2000.0)), scen)
    corners = [(1000.0, 1000.0), (2600.0, 1000.0), (1000.0, 2600.0), (2600.0, 2600.0)]
    best, results, consistent = multistart_romco(params, V, obs, corners, GRID)
    assert consistent
    assert all(r.objective <= 1.1 * best.objective for r in results)


def test_domain_exit_and_time_checks(flowmap_model):
    params, V, scen = flowmap_model
    obs = ObservationSet(np.zeros((V.shape[0], 7)), scen.obs_times)
    prob = IgnitionRomProblem(params, V, obs, GRID)
    with pytest.raises(DomainExit):
        prob.objective(np.array([-50.0, 100.0]))
    with pytest.raises(ValueError, match="whole hours"):
        IgnitionRomProblem(params, V, ObservationSet(obs.Y, scen.obs_times + 0.5), GRID)


# -- discrepancy update pieces --------------------------------------------------------


def test_fd_hessian_exact_on_quadratics():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    assert np.allclose(fd_hessian(lambda z: A @ z + 1.0, np.array([5.0, -2.0]), 7.0), A, rtol=1e-13)


def test_ignition_discrepancy_derivatives(flowmap_model):
    from romopt.flowmap import IgnitionDiscrepancyProblem

    params, V, scen = flowmap_model
    fom = observe(IgnitionPoint((1300.0, 1250.0)), FireScenario(wind=(4.33, 2.5)))
    prob = IgnitionRomProblem(params, V, fom, GRID)
    z = np.array([1320.0, 1270.0])
    cal = calibrate_ignition_discrepancy(prob, z, fom)
    dp = IgnitionDiscrepancyProblem(prob, cal.basis, np.ones(2), cal.origin)
    layout = DiscrepancyLayout(cal.basis.r, 2, 7)
    theta = np.random.default_rng(12).standard_normal(layout.n_theta)
    fd = [(dp.objective(z + e, theta) - dp.objective(z - e, theta)) / 2e-2 for e in 1e-2 * np.eye(2)]
    assert rel(dp.gradient(z, theta), fd) <= 1e-4
    # B theta is the theta-derivative of the gradient at theta = 0, which is linear in theta
    fd = (dp.gradient(z, 1e-3 * theta) - dp.gradient(z, -1e-3 * theta)) / 2e-3
    assert rel(dp.mixed_hessian_apply(z, theta), fd) <= 1e-6


def test_discrepancy_calibration_times_must_match(flowmap_model):
    params, V, scen = flowmap_model
    fom = observe(IgnitionPoint((1300.0, 1250.0)), scen)
    prob = IgnitionRomProblem(params, V, fom, GRID)
    wrong = ObservationSet(fom.Y, fom.times - 1.0)
    with pytest.raises(ValueError, match="observation hours"):
        calibrate_ignition_discrepancy(prob, np.array([1300.0, 1250.0]), wrong)
