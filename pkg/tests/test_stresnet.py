import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cityflow import stresnet as S
from cityflow import tensor as T
from cityflow.stresnet import Inputs, ModelConfig

from test_tensor import naive_conv


def tiny_config(**kw):
    base = dict(rows=4, cols=4, len_closeness=2, len_period=1, len_trend=1, period=3, trend=5,
                n_units=1, filters=4, ext_dim=6, ext_hidden=3)
    base.update(kw)
    return ModelConfig(**base)


def tiny_inputs(cfg, n=2, seed=0):
    r = np.random.default_rng(seed)
    pick = lambda l: None if l == 0 else r.uniform(-1, 1, (n, 2 * l, cfg.rows, cfg.cols))
    ext = r.uniform(0, 1, (n, cfg.ext_dim)) if cfg.ext_dim else None
    return Inputs(pick(cfg.len_closeness), pick(cfg.len_period), pick(cfg.len_trend), ext)


def zero_residuals(params):
    return {k: (np.zeros_like(v) if ".res" in k else v) for k, v in params.items()}


def test_config_invariants():
    with pytest.raises(ValueError):
        tiny_config(len_closeness=0, len_period=0, len_trend=0)
    with pytest.raises(ValueError):
        tiny_config(period=0)
    with pytest.raises(ValueError):
        tiny_config(fusion="mean")
    assert tiny_config().lookback == 5
    assert tiny_config().offsets("c") == [2, 1]


def test_init_is_deterministic_and_finite():
    cfg = tiny_config()
    a, b = S.init_params(cfg, 3), S.init_params(cfg, 3)
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert all(np.all(np.isfinite(v)) for v in a.values())
    assert not np.array_equal(a["c.conv1.w"], S.init_params(cfg, 4)["c.conv1.w"])


def test_init_glorot_bound_and_zero_bias():
    cfg = tiny_config(filters=8)
    p = S.init_params(cfg, 0)
    w = p["c.conv1.w"]  # (8, 4, 3, 3)
    s = math.sqrt(6.0 / (4 * 9 + 8 * 9))
    assert np.abs(w).max() <= s and np.abs(w).max() > 0.8 * s
    assert not p["c.conv1.b"].any()
    fc = p["ext.fc2.w"]  # (32, 3)
    assert np.abs(fc).max() <= math.sqrt(6.0 / (3 + 32))


def test_fusion_init_is_one_over_active():
    p = S.init_params(tiny_config(), 0)
    assert np.all(p["fusion.c"] == 1 / 3) and p["fusion.c"].shape == (2, 4, 4)
    p = S.init_params(tiny_config(len_trend=0), 0)
    assert np.all(p["fusion.p"] == 0.5) and "fusion.q" not in p


@pytest.mark.parametrize("n_units", [1, 4, 8])
def test_zeroed_residuals_are_identity(n_units):
    cfg = tiny_config(n_units=n_units)
    p = zero_residuals(S.init_params(cfg, 1))
    x = tiny_inputs(cfg).closeness
    h = T.relu(T.conv2d_same(x, p["c.conv1.w"], p["c.conv1.b"]))
    expect = T.conv2d_same(h, p["c.conv2.w"], p["c.conv2.b"]).data
    assert np.array_equal(S.branch_forward(p, cfg, "c", x).data, expect)


def test_zero_units_is_plain_two_conv():
    cfg = tiny_config(n_units=0)
    p = S.init_params(cfg, 1)
    x = tiny_inputs(cfg).period
    h = T.relu(T.conv2d_same(x, p["p.conv1.w"], p["p.conv1.b"]))
    assert np.array_equal(S.branch_forward(p, cfg, "p", x).data,
                          T.conv2d_same(h, p["p.conv2.w"], p["p.conv2.b"]).data)


def test_one_unit_matches_loop_composition():
    cfg = tiny_config(filters=3, len_closeness=1)
    p = S.init_params(cfg, 2)
    p = {k: v + 0.01 for k, v in p.items()}  # nonzero biases too
    x = np.random.default_rng(5).uniform(-1, 1, (2, 4, 4))
    relu = lambda a: np.maximum(a, 0)
    h = relu(naive_conv(x, p["c.conv1.w"], p["c.conv1.b"]))
    f = naive_conv(relu(h), p["c.res0.conv0.w"], p["c.res0.conv0.b"])
    f = naive_conv(relu(f), p["c.res0.conv1.w"], p["c.res0.conv1.b"])
    expect = naive_conv(h + f, p["c.conv2.w"], p["c.conv2.b"])
    assert np.max(np.abs(S.branch_forward(p, cfg, "c", x[None]).data[0] - expect)) < 1e-12


def test_branch_rejects_wrong_channels():
    cfg = tiny_config()
    with pytest.raises(ValueError):
        S.branch_forward(S.init_params(cfg, 0), cfg, "c", np.zeros((1, 3, 4, 4)))


def test_external_branch_cases():
    cfg = tiny_config()
    p = S.init_params(cfg, 0)
    zero = {k: np.zeros_like(v) for k, v in p.items()}
    e = np.random.default_rng(1).uniform(0, 1, (1, 6))
    assert not S.external_forward(zero, cfg, e).data.any()
    q = dict(p, **{"ext.fc1.b": np.array([0.5, -0.2, 1.0]), "ext.fc2.b": np.arange(32.0)})
    expect = (q["ext.fc2.w"] @ np.maximum(q["ext.fc1.b"], 0) + q["ext.fc2.b"]).reshape(2, 4, 4)
    assert np.allclose(S.external_forward(q, cfg, np.zeros((1, 6))).data[0], expect, atol=1e-14)
    h = [max(sum(p["ext.fc1.w"][i, j] * e[0, j] for j in range(6)), 0.0) for i in range(3)]
    out = [sum(p["ext.fc2.w"][i, j] * h[j] for j in range(3)) for i in range(32)]
    assert np.max(np.abs(S.external_forward(p, cfg, e).data.ravel() - out)) < 1e-12


def test_fuse_cases():
    r = np.random.default_rng(2)
    xs = {b: T.Tensor(r.normal(size=(2, 4, 4))) for b in "cpq"}
    ws = {b: T.Tensor(r.normal(size=(2, 4, 4))) for b in "cpq"}
    only_c = dict(ws, p=T.Tensor(np.zeros((2, 4, 4))), q=T.Tensor(np.zeros((2, 4, 4))))
    assert np.array_equal(S.fuse(xs, only_c).data, ws["c"].data * xs["c"].data)
    ones = {b: T.Tensor(np.ones((2, 4, 4))) for b in "cpq"}
    assert np.allclose(S.fuse(xs, ones).data, S.fuse(xs, None).data, atol=0)
    out = S.fuse(xs, ws).data
    for idx in np.ndindex(2, 4, 4):
        ref = sum(ws[b].data[idx] * xs[b].data[idx] for b in "cpq")
        assert abs(out[idx] - ref) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_fuse_is_linear_per_branch(a, b, seed):
    r = np.random.default_rng(seed)
    X, Y, P = (r.normal(size=(2, 3, 3)) for _ in range(3))
    ws = {k: T.Tensor(r.normal(size=(2, 3, 3))) for k in "cp"}
    f = lambda x: S.fuse({"c": T.Tensor(x), "p": T.Tensor(P)}, ws).data
    # the fixed p term appears once on the left and a+b times on the right
    fixed = ws["p"].data * P
    lhs = f(a * X + b * Y) - fixed
    rhs = a * (f(X) - fixed) + b * (f(Y) - fixed)
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_forward_bounded_and_deterministic():
    cfg = tiny_config()
    p = S.init_params(cfg, 0)
    x = tiny_inputs(cfg, n=3)
    a, b = S.forward(p, cfg, x), S.forward(p, cfg, x)
    assert np.array_equal(a, b) and a.shape == (3, 2, 4, 4)
    assert np.all(np.abs(a) < 1)


def test_forward_with_zeroed_external_is_tanh_of_fusion():
    cfg = tiny_config()
    p = S.init_params(cfg, 0)
    p.update({k: np.zeros_like(v) for k, v in p.items() if k.startswith("ext.")})
    x = tiny_inputs(cfg)
    res = sum(p[f"fusion.{b}"] * S.branch_forward(p, cfg, b, x.branch(b)).data for b in "cpq")
    assert np.allclose(S.forward(p, cfg, x), np.tanh(res), atol=1e-15)


def test_forward_shape_errors():
    cfg = tiny_config()
    p = S.init_params(cfg, 0)
    x = tiny_inputs(cfg)
    with pytest.raises(ValueError):
        S.forward(p, cfg, Inputs(x.closeness, x.period, None, x.external))
    with pytest.raises(ValueError):
        S.forward(p, cfg, Inputs(x.closeness, x.period, x.trend, np.zeros((2, 5))))


def test_loss_properties():
    cfg = tiny_config()
    p = S.init_params(cfg, 0)
    x = tiny_inputs(cfg)
    assert S.loss(p, cfg, x, S.forward(p, cfg, x)) == 0.0
    assert S.loss(p, cfg, x, np.ones((2, 2, 4, 4))) > 0


def finite_difference_check(cfg, seed=0, h=1e-5):
    p = S.init_params(cfg, seed)
    r = np.random.default_rng(seed + 1)
    p = {k: v + r.uniform(-0.1, 0.1, v.shape) for k, v in p.items()}  # move biases off zero
    x = tiny_inputs(cfg, n=2, seed=seed)
    y = r.uniform(-1, 1, (2, 2, cfg.rows, cfg.cols))
    _, grads, _ = S.loss_and_grads(p, cfg, x, y)
    worst = 0.0
    for name, g in grads.items():
        arr = p[name]
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = S.loss(p, cfg, x, y)
            arr[idx] = old - h
            down = S.loss(p, cfg, x, y)
            arr[idx] = old
            num = (up - down) / (2 * h)
            worst = max(worst, abs(g[idx] - num) / (abs(g[idx]) + abs(num) + 1e-8))
    return worst


def test_small_model_gradient_check():
    cfg = tiny_config(rows=3, cols=3, filters=2, len_closeness=1, ext_dim=2, ext_hidden=2)
    assert finite_difference_check(cfg) < 1e-4


def test_batch_norm_model_gradient_check():
    cfg = tiny_config(rows=3, cols=3, filters=2, len_closeness=1, ext_dim=0, use_bn=True)
    p = S.init_params(cfg, 0)
    # inference-mode check: batch statistics are fixed buffers
    x = tiny_inputs(cfg, n=2)
    y = np.random.default_rng(9).uniform(-1, 1, (2, 2, 3, 3))
    _, grads, _ = S.loss_and_grads(p, cfg, x, y, training=False)
    name = "c.res0.bn0.gamma"
    arr, h = p[name], 1e-5
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        up = S.loss(p, cfg, x, y)
        arr[idx] = old - h
        down = S.loss(p, cfg, x, y)
        arr[idx] = old
        num = (up - down) / (2 * h)
        assert abs(grads[name][idx] - num) <= 1e-4 * (abs(num) + 1e-8) + 1e-10


def test_fusion_matrices_receive_gradient():
    cfg = tiny_config()
    p = S.init_params(cfg, 0)
    _, grads, _ = S.loss_and_grads(p, cfg, tiny_inputs(cfg), np.full((2, 2, 4, 4), 0.3))
    for b in "cpq":
        assert np.abs(grads[f"fusion.{b}"]).sum() > 0


def test_sum_fusion_has_no_weights():
    p = S.init_params(tiny_config(fusion="sum"), 0)
    assert not any(k.startswith("fusion.") for k in p)


def test_shared_fusion_shape():
    assert S.init_params(tiny_config(fusion_shared=True), 0)["fusion.c"].shape == (1, 4, 4)
