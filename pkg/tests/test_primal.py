import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stcnn.dataio import PatchMatrix, fig1_toy
from stcnn.primal import (
    InitConfig,
    OptimizerConfig,
    PrimalParams,
    TrainingDivergedError,
    forward,
    init_params,
    load_params,
    primal_gradient,
    primal_objective,
    rescale_unit,
    save_params,
    soft_threshold,
    train_primal,
    write_trajectory_csv,
)

# objective of the fig1 toy at init seed 7, K=6, lam=beta=0.1 (pure-python oracle)
FIG1_SEED7_OBJECTIVE = 8.13032987923853


def _scalar_forward(Y, U, v, lam):
    out = []
    for i in range(Y.shape[0]):
        s = 0.0
        for k in range(U.shape[1]):
            a = sum(Y[i, j] * U[j, k] for j in range(Y.shape[1]))
            t = max(abs(a) - lam, 0.0) * (1.0 if a > 0 else -1.0)
            s += t * v[k]
        out.append(s)
    return np.array(out)


def _smooth_point(rng, I=6, d=3, K=3, lam=0.1, margin=0.05):
    # rejection-sample a point whose activations stay away from the kinks
    while True:
        Y = rng.normal(size=(I, d))
        U = rng.normal(size=(d, K))
        A = np.abs(Y @ U)
        if np.all(np.abs(A - lam) >= margin):
            return Y, U, rng.normal(size=K), rng.normal(size=I)


def test_soft_threshold_examples():
    assert soft_threshold(0.5, 1.0) == 0.0
    assert soft_threshold(2.0, 1.0) == 1.0
    assert soft_threshold(-2.0, 1.0) == -1.0
    assert soft_threshold(1.0, 1.0) == 0.0 and soft_threshold(-1.0, 1.0) == 0.0
    with pytest.raises(ValueError):
        soft_threshold(1.0, -0.1)


@settings(max_examples=100, deadline=None)
@given(a=st.floats(-1e6, 1e6), lam=st.floats(0, 1e3))
def test_soft_threshold_properties(a, lam):
    t = soft_threshold(a, lam)
    assert abs(t) <= abs(a)
    assert t == -soft_threshold(-a, lam)
    assert abs(t - a) <= lam + 1e-9 * abs(a)


def test_forward_examples():
    Y = PatchMatrix(np.arange(10.0).reshape(5, 2))
    zero_v = PrimalParams(np.ones((2, 3)), np.zeros(3), 0.1, 0.1)
    assert np.array_equal(forward(Y, zero_v), np.zeros(5))
    ident = PrimalParams(np.array([[1.0], [0.0]]), np.array([1.0]), 0.0, 0.1)
    assert np.array_equal(forward(Y, ident), Y.data[:, 0])


def test_forward_matches_scalar_loop():
    rng = np.random.default_rng(0)
    Y = rng.normal(size=(5, 2))
    p = PrimalParams(rng.normal(size=(2, 2)), rng.normal(size=2), 0.3, 0.1)
    assert np.max(np.abs(forward(PatchMatrix(Y), p) - _scalar_forward(Y, p.U, p.v, 0.3))) <= 1e-12


def test_dimension_mismatch():
    Y = PatchMatrix(np.zeros((4, 3)))
    with pytest.raises(ValueError):
        forward(Y, PrimalParams(np.zeros((2, 1)), np.zeros(1), 0.1, 0.1))
    with pytest.raises(ValueError):
        primal_objective(Y, np.zeros(5), PrimalParams(np.zeros((3, 1)), np.zeros(1), 0.1, 0.1))


def test_objective_examples():
    Y, x = fig1_toy()
    zero = PrimalParams(np.zeros((2, 6)), np.zeros(6), 0.1, 0.1)
    assert primal_objective(Y, x, zero) == float(x @ x)
    p = init_params(2, 6, InitConfig(seed=7), 0.1, 0.1)
    assert primal_objective(Y, forward(Y, p), p) == pytest.approx(0.1 * p.energy(), abs=1e-14)
    assert primal_objective(Y, x, p) == pytest.approx(FIG1_SEED7_OBJECTIVE, abs=1e-12)


def test_gradient_at_zero():
    Y, x = fig1_toy()
    g = primal_gradient(Y, x, PrimalParams(np.zeros((2, 6)), np.zeros(6), 0.1, 0.1))
    assert np.all(g.U == 0) and np.all(g.v == 0)


def test_gradient_finite_differences():
    rng = np.random.default_rng(1)
    for _ in range(20):
        Yd, U, v, x = _smooth_point(rng)
        Y = PatchMatrix(Yd)
        p = PrimalParams(U, v, 0.1, 0.1)
        g = primal_gradient(Y, x, p)
        flat = np.concatenate([U.ravel(), v])
        num = np.zeros_like(flat)
        h = 1e-5
        for j in range(flat.size):
            e = np.zeros_like(flat)
            e[j] = h
            a, b = flat + e, flat - e
            fa = primal_objective(Y, x, p.with_arrays(a[: U.size].reshape(U.shape), a[U.size :]))
            fb = primal_objective(Y, x, p.with_arrays(b[: U.size].reshape(U.shape), b[U.size :]))
            num[j] = (fa - fb) / (2 * h)
        ana = np.concatenate([g.U.ravel(), g.v])
        assert np.linalg.norm(ana - num) / max(np.linalg.norm(num), 1e-12) <= 1e-5


def test_gradient_beta_component_doubles():
    rng = np.random.default_rng(2)
    Yd, U, v, x = _smooth_point(rng)
    Y = PatchMatrix(Yd)
    g1 = primal_gradient(Y, x, PrimalParams(U, v, 0.1, 0.2))
    g0 = primal_gradient(Y, x, PrimalParams(U, v, 0.1, 0.1))
    # the data part is beta-free, so the difference is the beta part
    assert np.allclose(g1.U - g0.U, 2 * 0.1 * U, atol=1e-13)
    assert np.allclose(g1.v - g0.v, 2 * 0.1 * v, atol=1e-13)


def test_steps_zero_returns_initial():
    Y, x = fig1_toy()
    res = train_primal(Y, x, InitConfig(seed=7), OptimizerConfig(steps=0), K=6)
    assert res.trajectory.shape == (1,)
    assert res.trajectory[0] == pytest.approx(FIG1_SEED7_OBJECTIVE, abs=1e-12)
    p0 = init_params(2, 6, InitConfig(seed=7), 0.1, 0.1)
    assert np.array_equal(res.params.U, p0.U)


def test_fig1_three_seeds_distinct_finals():
    Y, x = fig1_toy()
    finals = [
        train_primal(Y, x, InitConfig(seed=s), OptimizerConfig("adam", steps=2000)).final_objective
        for s in (0, 1, 2)
    ]
    assert len({round(f, 6) for f in finals}) == 3


def test_training_deterministic_and_trajectory_length():
    Y, x = fig1_toy()
    a = train_primal(Y, x, InitConfig(seed=3), OptimizerConfig("asgd", steps=50))
    b = train_primal(Y, x, InitConfig(seed=3), OptimizerConfig("asgd", steps=50))
    assert a.trajectory.shape == (50,)
    assert np.array_equal(a.trajectory, b.trajectory) and a.final_objective == b.final_objective


def test_ridge_oracle():
    # lam = 0, K = 1, v frozen at 1: min ||Y u - x||^2 + beta ||u||^2 (+ beta)
    rng = np.random.default_rng(4)
    Yd = rng.normal(size=(8, 3))
    x = rng.normal(size=8)
    beta = 0.5
    u_star = np.linalg.solve(Yd.T @ Yd + beta * np.eye(3), Yd.T @ x)
    best = float(np.sum((Yd @ u_star - x) ** 2) + beta * (u_star @ u_star + 1.0))
    p0 = PrimalParams(np.zeros((3, 1)), np.ones(1), 0.0, beta)
    res = train_primal(PatchMatrix(Yd), x, InitConfig(), OptimizerConfig("sgd", 0.01, steps=5000),
                       params0=p0, freeze_v=True)
    assert res.params.v[0] == 1.0
    assert abs(res.final_objective - best) <= 1e-6


@pytest.mark.parametrize("kind", ["sgd", "asgd"])
def test_descent_first_order(kind):
    rng = np.random.default_rng(5)
    Yd, U, v, x = _smooth_point(rng)
    Y = PatchMatrix(Yd)
    p = PrimalParams(U, v, 0.1, 0.1)
    g = primal_gradient(Y, x, p)
    gg = float(np.sum(g.U**2) + np.sum(g.v**2))
    lr = 1e-7
    res = train_primal(Y, x, InitConfig(), OptimizerConfig(kind, lr, steps=1), params0=p)
    change = res.final_objective - primal_objective(Y, x, p)
    assert change == pytest.approx(-lr * gg, rel=1e-3)


def test_descent_adam_first_step():
    # adam's first bias-corrected step is lr * g / (|g| + eps), so the change is -lr * sum g^2 / (|g| + eps)
    rng = np.random.default_rng(6)
    Yd, U, v, x = _smooth_point(rng)
    Y = PatchMatrix(Yd)
    p = PrimalParams(U, v, 0.1, 0.1)
    g = primal_gradient(Y, x, p)
    flat = np.concatenate([g.U.ravel(), g.v])
    lr = 1e-7
    predicted = -lr * float(np.sum(flat**2 / (np.abs(flat) + 1e-8)))
    res = train_primal(Y, x, InitConfig(), OptimizerConfig("adam", lr, steps=1), params0=p)
    assert res.final_objective - primal_objective(Y, x, p) == pytest.approx(predicted, rel=1e-3)


def test_divergence_reported():
    Y, x = fig1_toy()
    with pytest.raises(TrainingDivergedError) as err:
        train_primal(Y, x, InitConfig(seed=0), OptimizerConfig("sgd", 50.0, steps=200))
    assert err.value.step <= 200


def test_init_kinds():
    p = init_params(9, 65, InitConfig("kaiming_uniform", seed=1), 0.1, 0.1)
    assert np.max(np.abs(p.U)) <= np.sqrt(6 / 9) and np.max(np.abs(p.v)) <= np.sqrt(6 / 65)
    q = init_params(9, 2000, InitConfig("normal", 0.005, seed=1), 0.1, 0.1)
    assert q.U.std() == pytest.approx(0.005, rel=0.05)


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig("rmsprop")
    with pytest.raises(ValueError):
        OptimizerConfig(steps=-1)
    with pytest.raises(ValueError):
        OptimizerConfig("asgd", steps=10, asgd_average_start=10)
    assert OptimizerConfig("adam").lr == 1e-3 and OptimizerConfig("sgd").lr == 1e-2
    with pytest.raises(ValueError):
        PrimalParams(np.zeros((2, 1)), np.zeros(2), 0.1, 0.1)
    with pytest.raises(ValueError):
        PrimalParams(np.zeros((2, 1)), np.zeros(1), -0.1, 0.1)


def test_rescale_examples():
    u, v, lam = rescale_unit(np.array([2.0, 0.0]), 3.0, 0.1)
    eps = np.sqrt(1.5)
    assert np.allclose(u, [2 * eps, 0]) and v == pytest.approx(3 / eps) and lam == pytest.approx(0.1 * eps)
    assert float(u @ u + v * v) == pytest.approx(12.0, abs=1e-12)
    u2, v2, lam2 = rescale_unit(np.array([0.6, 0.8]), -1.0, 0.2)
    assert np.allclose(u2, [0.6, 0.8]) and v2 == -1.0 and lam2 == pytest.approx(0.2)
    with pytest.raises(ValueError):
        rescale_unit(np.zeros(2), 1.0, 0.1)


def test_rescale_output_invariance():
    rng = np.random.default_rng(7)
    for _ in range(200):
        Y = rng.normal(size=(6, 3))
        u = rng.normal(size=3)
        v = rng.normal() * 3
        lam = rng.uniform(0, 1)
        us, vs, ls = rescale_unit(u, v, lam)
        before = soft_threshold(Y @ u, lam) * v
        after = soft_threshold(Y @ us, ls) * vs
        assert np.max(np.abs(before - after)) <= 1e-12 * max(1.0, np.max(np.abs(before)))


def test_param_snapshot_roundtrip(tmp_path):
    p = init_params(9, 5, InitConfig(seed=2), 0.3, 0.7)
    path = tmp_path / "p.bin"
    save_params(path, p)
    q = load_params(path)
    assert np.array_equal(p.U, q.U) and np.array_equal(p.v, q.v) and (q.lam, q.beta) == (0.3, 0.7)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(ValueError):
        load_params(path)


def test_trajectory_csv(tmp_path):
    path = tmp_path / "t.csv"
    write_trajectory_csv(path, [3.0, 2.5])
    assert path.read_text().splitlines() == ["step,objective", "0,3", "1,2.5"]
