import math

import numpy as np
import pytest
from conftest import rel_err
from hypothesis import given, settings
from hypothesis import strategies as st

import sharpmin.tensor as T
from sharpmin.data import Batch, make_synthetic
from sharpmin.errors import ConfigError, DivergenceError
from sharpmin.models import landscape_splits, make_double_well, make_mlp, \
    make_quadratic
from sharpmin.optim import (
    OptimizerState,
    SamConfig,
    TrainConfig,
    epsilon_hat,
    inner_maximize,
    lr_at,
    msharpness_gradient,
    random_perturbation,
    random_perturbation_gradient,
    sam_gradient,
    sam_gradient_second_order,
    step,
    train,
)
from sharpmin.tensor import ParamVector, grad


def pv(*values):
    return ParamVector.from_arrays([("g", np.array(values, dtype=np.float64))])


def dual_q(p):
    if math.isinf(p):
        return 1.0
    return p / (p - 1.0)


def qnorm(x, q):
    if q == 1.0:
        return float(np.sum(np.abs(x)))
    return float(np.sum(np.abs(x) ** q) ** (1.0 / q))


# ---------------------------------------------------------------------------
# epsilon_hat


def test_epsilon_hat_p2_example():
    eps = epsilon_hat(pv(3.0, 4.0), rho=0.05, p=2.0).flatten()
    assert np.allclose(eps, [0.03, 0.04], atol=1e-15, rtol=0)


def test_epsilon_hat_pinf_example():
    eps = epsilon_hat(pv(3.0, -4.0), rho=0.1, p=float("inf")).flatten()
    assert np.array_equal(eps, [0.1, -0.1])


def test_epsilon_hat_zero_gradient_and_zero_rho():
    assert np.array_equal(epsilon_hat(pv(0.0, 0.0), 0.3, 2.0).flatten(), [0.0, 0.0])
    assert np.array_equal(epsilon_hat(pv(1.0, 2.0), 0.0, 2.0).flatten(), [0.0, 0.0])
    assert np.array_equal(
        epsilon_hat(pv(0.0, 0.0), 0.3, float("inf")).flatten(), [0.0, 0.0]
    )


def test_epsilon_hat_rejects_negative_rho_and_bad_p():
    with pytest.raises(ConfigError):
        epsilon_hat(pv(1.0), -0.1, 2.0)
    with pytest.raises(ConfigError):
        epsilon_hat(pv(1.0), 0.1, 1.0)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.floats(-100.0, 100.0).filter(lambda v: abs(v) > 1e-3),
        min_size=2,
        max_size=50,
    ),
    st.sampled_from([2.0, float("inf"), 3.0, 1.5]),
    st.floats(0.01, 2.0),
)
def test_epsilon_hat_dual_norm_identities(values, p, rho):
    g = pv(*values)
    flat = g.flatten()
    eps = epsilon_hat(g, rho, p).flatten()
    q = dual_q(p)
    # norm constraint ||eps||_p == rho
    if math.isinf(p):
        pnorm = np.max(np.abs(eps))
    else:
        pnorm = np.sum(np.abs(eps) ** p) ** (1.0 / p)
    assert pnorm == pytest.approx(rho, abs=1e-12, rel=1e-12)
    # dual-norm optimal value <eps, g> == rho * ||g||_q
    assert float(eps @ flat) == pytest.approx(rho * qnorm(flat, q), rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(
    st.lists(
        st.floats(-10.0, 10.0).filter(lambda v: abs(v) > 1e-3),
        min_size=2,
        max_size=20,
    ),
    st.sampled_from([2.0, float("inf")]),
)
def test_epsilon_hat_dominates_random_same_norm_perturbations(values, p):
    rho = 0.5
    g = pv(*values)
    flat = g.flatten()
    best = float(epsilon_hat(g, rho, p).flatten() @ flat)
    rng = np.random.default_rng(0)
    cand = rng.standard_normal((200, len(flat)))
    if math.isinf(p):
        cand = cand / np.max(np.abs(cand), axis=1, keepdims=True) * rho
    else:
        cand = cand / np.linalg.norm(cand, axis=1, keepdims=True) * rho
    assert best >= np.max(cand @ flat) - 1e-12


def test_epsilon_hat_direction_is_scale_invariant():
    g = pv(0.3, -1.2, 4.0)
    for p in (2.0, float("inf"), 3.0):
        base = epsilon_hat(g, 0.1, p).flatten()
        for c in (0.25, 7.0, 1e6):
            scaled = epsilon_hat(g.scaled(c), 0.1, p).flatten()
            assert np.allclose(scaled, base, atol=1e-12, rtol=1e-12)


# ---------------------------------------------------------------------------
# sam_gradient


def quad_setup():
    land = make_quadratic(np.diag([2.0, 4.0]))
    return land, land.params_from([1.0, 1.0])


def test_sam_gradient_rho_zero_is_bitwise_plain_gradient():
    model = make_mlp([2, 8, 2], seed=3)
    params = model.init_params()
    rng = np.random.default_rng(5)
    batch = Batch(rng.normal(size=(16, 2)), rng.integers(0, 2, 16))
    plain = grad(model, params, batch)
    sam = sam_gradient(model, params, batch, SamConfig(rho=0.0))
    assert np.array_equal(plain.flatten(), sam.flatten())


def test_sam_gradient_quadratic_closed_form():
    land, w = quad_setup()
    got = sam_gradient(land, w, None, SamConfig(rho=0.05, p_norm=2.0)).flatten()
    a = np.diag([2.0, 4.0])
    g = a @ np.array([1.0, 1.0])
    expected = a @ (np.array([1.0, 1.0]) + 0.05 * g / np.linalg.norm(g))
    assert np.allclose(got, expected, rtol=1e-12)
    assert np.allclose(got, [2.04472136, 4.17888544], atol=1e-8)


def test_sam_gradient_double_well_points_out_of_sharp_basin():
    dw = make_double_well(100.0, 1.0, 4.0)
    # slightly off the sharp minimum; rho big enough to cross the basin wall
    w = dw.params_from([dw.x_sharp + 0.05])
    g = sam_gradient(dw, w, None, SamConfig(rho=0.5)).flatten()[0]
    assert g < 0  # descent step -lr*g moves toward the flat minimum
    # analytic check: the perturbed point sits on the flat branch
    assert dw.gradient(dw.x_sharp + 0.05 + 0.5)[0] == pytest.approx(g, rel=1e-10)


# ---------------------------------------------------------------------------
# second-order variant


def test_second_order_rho_zero_equals_plain_gradient():
    model = make_mlp([2, 5, 2], seed=4)
    params = model.init_params()
    rng = np.random.default_rng(6)
    batch = Batch(rng.normal(size=(8, 2)), rng.integers(0, 2, 8))
    a = grad(model, params, batch).flatten()
    b = sam_gradient_second_order(model, params, batch, SamConfig(rho=0.0)).flatten()
    assert np.array_equal(a, b)


def composite_value(model, params, flat, rho):
    """L(w + eps_hat(w)) evaluated numerically, for finite differencing."""
    p = params.unflatten(flat)
    g = grad(model, p, None)
    eps = epsilon_hat(g, rho, 2.0)
    return T.loss_value(model, p.add(eps), None)


def test_second_order_matches_composite_finite_differences():
    rng = np.random.default_rng(2)
    spd = rng.normal(size=(4, 4))
    land = make_quadratic(spd @ spd.T + np.eye(4))
    params = land.params_from(rng.normal(size=4))
    rho = 0.05
    got = sam_gradient_second_order(land, params, None, SamConfig(rho=rho)).flatten()
    h = 1e-5
    flat = params.flatten()
    fd = np.zeros_like(flat)
    for i in range(len(flat)):
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        fd[i] = (
            composite_value(land, params, up, rho)
            - composite_value(land, params, dn, rho)
        ) / (2 * h)
    assert rel_err(got, fd) < 1e-5


def test_second_order_matches_analytic_on_quadratic():
    land, w = quad_setup()
    rho = 0.05
    got = sam_gradient_second_order(land, w, None, SamConfig(rho=rho)).flatten()
    a = np.diag([2.0, 4.0])
    wv = np.array([1.0, 1.0])
    g = a @ wv
    ng = np.linalg.norm(g)
    eps = rho * g / ng
    jac = rho * (a / ng - np.outer(g, g) @ a / ng**3)
    expected = a @ (wv + eps) + jac.T @ (a @ (wv + eps))
    assert np.max(np.abs(got - expected)) < 1e-8


def test_second_order_pinf_reduces_to_first_order():
    model = make_mlp([2, 4, 2], seed=8)
    params = model.init_params()
    rng = np.random.default_rng(7)
    batch = Batch(rng.normal(size=(8, 2)), rng.integers(0, 2, 8))
    cfg = SamConfig(rho=0.05, p_norm=float("inf"))
    a = sam_gradient(model, params, batch, cfg).flatten()
    b = sam_gradient_second_order(model, params, batch, cfg).flatten()
    assert np.allclose(a, b, atol=1e-15)


def test_second_order_rejects_general_p():
    land, w = quad_setup()
    with pytest.raises(ConfigError):
        sam_gradient_second_order(land, w, None, SamConfig(rho=0.1, p_norm=3.0))


# ---------------------------------------------------------------------------
# inner maximization


def test_inner_maximize_one_full_step_matches_epsilon_hat():
    land, w = quad_setup()
    g = grad(land, w, None)
    rho = 0.1
    big_step = rho / np.linalg.norm(g.flatten()) * 3.0
    eps = inner_maximize(land, w, None, rho, 2.0, steps=1, step_size=big_step)
    want = epsilon_hat(g, rho, 2.0)
    assert np.allclose(eps.flatten(), want.flatten(), atol=1e-12)


def test_inner_maximize_monotone_on_quadratic():
    rng = np.random.default_rng(3)
    spd = rng.normal(size=(5, 5))
    land = make_quadratic(spd @ spd.T + np.eye(5))
    params = land.params_from(rng.normal(size=5))
    traj = inner_maximize(
        land, params, None, rho=0.5, p=2.0, steps=8, return_trajectory=True
    )
    vals = [land.value(params.add(e).flatten()) for e in traj]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))


def test_inner_maximize_more_steps_reach_higher_loss_on_mlp():
    model = make_mlp([2, 6, 2], seed=5)
    params = model.init_params()
    rng = np.random.default_rng(4)
    batch = Batch(rng.normal(size=(16, 2)), rng.integers(0, 2, 16))
    rho = 0.3
    e1 = inner_maximize(model, params, batch, rho, 2.0, steps=1)
    e5 = inner_maximize(model, params, batch, rho, 2.0, steps=5)
    l1 = T.loss_value(model, params.add(e1), batch)
    l5 = T.loss_value(model, params.add(e5), batch)
    assert l5 >= l1 - 1e-12


def test_inner_maximize_pinf_projection_clamps():
    land, w = quad_setup()
    eps = inner_maximize(land, w, None, rho=0.05, p=float("inf"), steps=3)
    assert np.max(np.abs(eps.flatten())) <= 0.05 + 1e-15


def test_inner_maximize_rejects_bad_steps():
    land, w = quad_setup()
    with pytest.raises(ConfigError):
        inner_maximize(land, w, None, 0.1, 2.0, steps=0)


# ---------------------------------------------------------------------------
# m-sharpness


def msharp_fixture():
    model = make_mlp([2, 6, 2], seed=6)
    params = model.init_params()
    rng = np.random.default_rng(9)
    batch = Batch(rng.normal(size=(4, 2)), rng.integers(0, 2, 4))
    return model, params, batch


def test_msharpness_whole_batch_equals_sam_bitwise():
    model, params, batch = msharp_fixture()
    cfg = SamConfig(rho=0.1, m=4)
    a = msharpness_gradient(model, params, batch, cfg)
    b = sam_gradient(model, params, batch, SamConfig(rho=0.1))
    assert np.array_equal(a.flatten(), b.flatten())


def test_msharpness_rho_zero_equals_plain_batch_gradient():
    model, params, batch = msharp_fixture()
    plain = grad(model, params, batch).flatten()
    for m in (1, 2, 4):
        got = msharpness_gradient(
            model, params, batch, SamConfig(rho=0.0, m=m)
        ).flatten()
        assert np.max(np.abs(got - plain)) < 1e-12


def test_msharpness_halves_average_explicitly():
    model, params, batch = msharp_fixture()
    cfg = SamConfig(rho=0.2, m=2)
    got = msharpness_gradient(model, params, batch, cfg)
    half1 = sam_gradient(model, params, Batch(batch.x[:2], batch.y[:2]), cfg)
    half2 = sam_gradient(model, params, Batch(batch.x[2:], batch.y[2:]), cfg)
    want = half1.add(half2).scaled(0.5)
    assert np.array_equal(got.flatten(), want.flatten())


def test_msharpness_rejects_nondivisible_m():
    model, params, batch = msharp_fixture()
    with pytest.raises(ConfigError):
        msharpness_gradient(model, params, batch, SamConfig(rho=0.1, m=3))


def test_msharpness_parallel_matches_serial_bitwise():
    from concurrent.futures import ThreadPoolExecutor

    model, params, batch = msharp_fixture()
    cfg = SamConfig(rho=0.15, m=1)
    serial = msharpness_gradient(model, params, batch, cfg)
    with ThreadPoolExecutor(max_workers=4) as pool:
        parallel = msharpness_gradient(model, params, batch, cfg, executor=pool)
    assert np.array_equal(serial.flatten(), parallel.flatten())


# ---------------------------------------------------------------------------
# random-perturbation baseline


def test_random_perturbation_norm_and_determinism():
    like = ParamVector.from_arrays([("w", np.zeros(20))])
    eps1 = random_perturbation(like, 0.3, seed=42).flatten()
    eps2 = random_perturbation(like, 0.3, seed=42).flatten()
    eps3 = random_perturbation(like, 0.3, seed=43).flatten()
    assert np.linalg.norm(eps1) == pytest.approx(0.3, abs=1e-12)
    assert np.array_equal(eps1, eps2)
    assert not np.array_equal(eps1, eps3)


def test_random_perturbation_gradient_rho_zero_is_plain():
    model, params, batch = msharp_fixture()
    a = grad(model, params, batch).flatten()
    b = random_perturbation_gradient(model, params, batch, 0.0, seed=1).flatten()
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# optimizer step


def test_step_plain_sgd():
    params = ParamVector.from_arrays([("w", np.array([1.0, 2.0]))])
    state = OptimizerState(params, params.zeros_like(), 0)
    g = ParamVector.from_arrays([("w", np.array([0.5, -1.0]))])
    tcfg = TrainConfig(lr=0.1, epochs=1, batch_size=1)
    nxt = step(state, g, tcfg, total_steps=10)
    assert np.allclose(nxt.params.flatten(), [1.0 - 0.05, 2.0 + 0.1], rtol=1e-15)
    assert nxt.t == 1


def test_cosine_schedule_hits_zero_at_final_step():
    tcfg = TrainConfig(lr=0.2, schedule="cosine", epochs=1, batch_size=1)
    assert lr_at(tcfg, 0, 100) == pytest.approx(0.2)
    assert lr_at(tcfg, 99, 100) == 0.0
    assert lr_at(tcfg, 50, 100) < 0.2


def test_step_pure_weight_decay_shrinks():
    params = ParamVector.from_arrays([("w", np.array([2.0, -4.0]))])
    state = OptimizerState(params, params.zeros_like(), 0)
    zero_g = params.zeros_like()
    tcfg = TrainConfig(lr=0.1, weight_decay=0.01, epochs=1, batch_size=1)
    nxt = step(state, zero_g, tcfg, total_steps=5)
    assert np.allclose(nxt.params.flatten(), (1 - 0.1 * 0.01) * params.flatten(),
                       rtol=1e-14)


def test_optimizer_state_dimension_check():
    params = ParamVector.from_arrays([("w", np.zeros(3))])
    bad = ParamVector.from_arrays([("w", np.zeros(2))])
    with pytest.raises(ConfigError):
        OptimizerState(params, bad, 0)


# ---------------------------------------------------------------------------
# training loop


def moons_splits():
    return make_synthetic("moons", 200, 0.2, seed=1)


def test_train_sam_rho_zero_bitwise_equals_sgd():
    splits = moons_splits()
    tcfg = TrainConfig(lr=0.1, epochs=20, batch_size=32, seed=3)
    model = make_mlp([2, 8, 2], seed=3)
    p_sgd, _ = train(model, splits, tcfg, None)
    p_sam, _ = train(model, splits, tcfg, SamConfig(rho=0.0))
    assert np.array_equal(p_sgd.flatten(), p_sam.flatten())


def test_train_gradient_budget_doubles_under_sam():
    splits = moons_splits()
    tcfg = TrainConfig(lr=0.1, epochs=3, batch_size=32, seed=0)
    model = make_mlp([2, 8, 2], seed=0)
    _, log_sgd = train(model, splits, tcfg, None)
    _, log_sam = train(model, splits, tcfg, SamConfig(rho=0.05))
    assert log_sam.final.grad_evals == 2 * log_sgd.final.grad_evals
    evs = [r.grad_evals for r in log_sam.rows]
    assert all(b > a for a, b in zip(evs, evs[1:]))


def test_train_double_well_sam_escapes_sharp_basin():
    # 1-D SAM has a spurious fixed point at x_sharp + rho (the backward
    # perturbation lands exactly on the sharp minimum); momentum carries
    # the iterate through its capture region
    dw = make_double_well(100.0, 1.0, 1.2)
    splits = landscape_splits()
    tcfg = TrainConfig(lr=0.009, momentum=0.9, epochs=1200, batch_size=1, seed=0)
    init = dw.params_from([dw.x_sharp + 0.05])
    w_sgd, _ = train(dw, splits, tcfg, None, init_params=init)
    w_sam, _ = train(dw, splits, tcfg, SamConfig(rho=0.5), init_params=init)
    assert abs(w_sgd.flatten()[0] - dw.x_sharp) < 0.05
    assert abs(w_sam.flatten()[0] - dw.x_flat) < 0.05
    assert dw.hessian(w_sgd.flatten()[0])[0, 0] > 50.0
    assert dw.hessian(w_sam.flatten()[0])[0, 0] < 2.0


def test_train_divergence_raises_with_step_index():
    splits = moons_splits()
    tcfg = TrainConfig(lr=1000.0, epochs=40, batch_size=32, seed=0)
    model = make_mlp([2, 8, 2], seed=0, loss_kind="mse")
    with pytest.raises(DivergenceError) as err:
        train(model, splits, tcfg, None)
    assert err.value.step > 0
    assert err.value.metrics is not None


def test_train_metrics_rows_shape():
    splits = moons_splits()
    tcfg = TrainConfig(lr=0.1, epochs=4, batch_size=32, seed=1)
    model = make_mlp([2, 8, 2], seed=1)
    _, log = train(model, splits, tcfg, SamConfig(rho=0.05))
    assert len(log.rows) == 4
    last = log.final
    assert last.step == 4 * (160 // 32)
    assert 0.0 <= last.test_err <= 1.0
    assert math.isfinite(last.train_loss)
