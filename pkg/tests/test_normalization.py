from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import central_difference, relative_error
from predbn import tensor as T
from predbn.model import ModelSpec, Network, predict_logits
from predbn.normalization import (
    FrozenStatsError,
    Mode,
    NormKind,
    NormState,
    alt_norm_forward,
    batch_stats,
    bn_forward,
    freeze_stats,
    prediction_eps,
    set_prediction_mode,
    weight_standardize,
)
from predbn.tensor import GradTape, Tensor


def naive_channel_moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two-pass per-channel mean and biased variance with explicit loops."""
    x4 = x if x.ndim == 4 else x[:, :, None, None]
    N, C, H, W = x4.shape
    mean, var = np.zeros(C), np.zeros(C)
    for c in range(C):
        vals = [float(x4[n, c, i, j]) for n in range(N) for i in range(H) for j in range(W)]
        m = sum(vals) / len(vals)
        mean[c] = m
        var[c] = sum((v - m) ** 2 for v in vals) / len(vals)
    return mean, var


def state(channels, eps=1e-3, momentum=0.99, mode=Mode.EVAL_BATCH):
    s = NormState.create(channels, eps, momentum)
    s.mode = mode
    return s


# -- batch_stats ------------------------------------------------------------

def test_batch_stats_examples():
    mu, var = batch_stats(np.full((3, 2, 2, 2), 4.5))
    assert np.array_equal(mu, [4.5, 4.5]) and np.array_equal(var, [0.0, 0.0])
    mu, var = batch_stats(np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1, 1))
    assert mu[0] == 2.5 and var[0] == 1.25


@given(st.integers(0, 10**6), st.sampled_from([2, 4]))
def test_batch_stats_match_naive_loops(seed, rank):
    r = np.random.Generator(np.random.PCG64(seed))
    x = r.normal(loc=3, scale=2, size=(5, 3, 3, 2) if rank == 4 else (7, 3))
    mu, var = batch_stats(x)
    ref_mu, ref_var = naive_channel_moments(x)
    assert np.abs(mu - ref_mu).max() < 1e-6 and np.abs(var - ref_var).max() < 1e-6


def test_batch_stats_empty_batch():
    with pytest.raises(ValueError):
        batch_stats(np.zeros((0, 3)))


# -- bn_forward -------------------------------------------------------------

def test_constant_batch_gives_zero_output():
    out = bn_forward(Tensor(np.full((4, 3), 2.0)), state(3, eps=1e-3))
    assert not out.data.any()


def test_two_point_batch_gives_minus_one_plus_one():
    out = bn_forward(Tensor([[0.0], [2.0]]), state(1, eps=1e-12))
    assert np.allclose(out.data.ravel(), [-1, 1], atol=1e-4)


@given(st.integers(0, 10**6), st.floats(1e-5, 1.0), st.sampled_from([2, 4]))
def test_eval_batch_output_moments(seed, eps, rank):
    r = np.random.Generator(np.random.PCG64(seed))
    shape = (6, 4, 3, 3) if rank == 4 else (20, 4)
    x = r.normal(loc=r.normal(size=4).reshape((1, 4) + (1,) * (rank - 2)),
                 scale=r.uniform(0.05, 3, size=4).reshape((1, 4) + (1,) * (rank - 2)),
                 size=shape)
    sigma2 = batch_stats(x)[1]
    out_mu, out_var = batch_stats(bn_forward(Tensor(x), state(4, eps=eps)).data)
    assert np.abs(out_mu).max() < 1e-5
    assert np.abs(out_var - sigma2 / (sigma2 + eps)).max() < 1e-4


@given(st.integers(0, 10**6), st.floats(0.1, 10), st.floats(-5, 5))
def test_eval_batch_affine_equivariance(seed, a, b):
    x = np.random.Generator(np.random.PCG64(seed)).normal(size=(8, 3))
    s = state(3, eps=1e-12)
    y1 = bn_forward(Tensor(x), s).data
    y2 = bn_forward(Tensor(a * x + b), s).data
    assert np.abs(y1 - y2).max() < 1e-3


def test_ema_closed_form_convergence():
    x = np.random.Generator(np.random.PCG64(3)).normal(loc=2.0, scale=1.5, size=(16, 3))
    mu_b, var_b = batch_stats(x)
    m = 0.9
    s = state(3, momentum=m, mode=Mode.TRAIN)
    mu0, var0 = s.ema_mean.copy(), s.ema_var.copy()
    for k in range(1, 41):
        bn_forward(Tensor(x), s)
        assert np.abs(s.ema_mean - (m ** k * mu0 + (1 - m ** k) * mu_b)).max() < 1e-6
        assert np.abs(s.ema_var - (m ** k * var0 + (1 - m ** k) * var_b)).max() < 1e-6


def test_train_mode_updates_ema_only_in_train():
    x = Tensor(np.random.default_rng(0).normal(size=(8, 2)))
    for mode in (Mode.EVAL_EMA, Mode.EVAL_BATCH):
        s = state(2, mode=mode)
        bn_forward(x, s)
        assert np.array_equal(s.ema_mean, [0, 0]) and np.array_equal(s.ema_var, [1, 1])


def test_channel_mismatch():
    with pytest.raises(ValueError):
        bn_forward(Tensor(np.zeros((2, 3))), state(4))


def test_eval_batch_single_example_gives_beta():
    s = state(3)
    s.beta.data = np.array([0.5, -1.0, 2.0])
    out = bn_forward(Tensor([[1.0, 2.0, 3.0]]), s)
    assert np.array_equal(out.data, [[0.5, -1.0, 2.0]])


def test_state_validation():
    with pytest.raises(ValueError):
        NormState.create(3, eps=0.0)
    with pytest.raises(ValueError):
        NormState.create(3, momentum=1.0)


@given(st.integers(0, 10**6), st.sampled_from([2, 4]))
def test_train_mode_bn_gradient_matches_finite_differences(seed, rank):
    r = np.random.Generator(np.random.PCG64(seed))
    shape = (4, 3, 2, 2) if rank == 4 else (5, 3)
    x = r.normal(size=shape)
    g0, b0 = r.normal(size=3), r.normal(size=3)
    R = r.normal(size=shape)

    def scalar(xa, ga, ba):
        s = state(3, mode=Mode.TRAIN)
        s.gamma.data, s.beta.data = ga.copy(), ba.copy()
        return float((bn_forward(Tensor(xa), s).data * R).sum())

    s = state(3, mode=Mode.TRAIN)
    s.gamma.data, s.beta.data = g0.copy(), b0.copy()
    xt = Tensor(x, requires_grad=True)
    with GradTape() as tape:
        loss = T.sum(T.mul(bn_forward(xt, s), Tensor(R)))
    analytic = tape.backward(loss, [xt, s.gamma, s.beta])
    numeric = central_difference(scalar, [x.copy(), g0.copy(), b0.copy()])
    for a, n in zip(analytic, numeric):
        assert relative_error(a, n) < 1e-4


@given(st.integers(0, 10**6), st.sampled_from(["instance", "layer", "group"]))
def test_alt_norm_gradients_match_finite_differences(seed, kind):
    r = np.random.Generator(np.random.PCG64(seed))
    x, g0, b0 = r.normal(size=(2, 4, 2, 2)), r.normal(size=4), r.normal(size=4)
    R = r.normal(size=x.shape)

    def build(xa, ga, ba):
        return alt_norm_forward(xa, kind, ga, ba, 1e-3, groups=2)

    def scalar(*arrs):
        return float((build(*[Tensor(a) for a in arrs]).data * R).sum())

    leaves = [Tensor(a, requires_grad=True) for a in (x, g0, b0)]
    with GradTape() as tape:
        loss = T.sum(T.mul(build(*leaves), Tensor(R)))
    analytic = tape.backward(loss, leaves)
    numeric = central_difference(scalar, [x.copy(), g0.copy(), b0.copy()])
    for a, n in zip(analytic, numeric):
        assert relative_error(a, n) < 1e-4


@given(st.integers(0, 10**6))
def test_weight_standardization_gradient_matches_finite_differences(seed):
    r = np.random.Generator(np.random.PCG64(seed))
    w, R = r.normal(size=(3, 2, 2, 2)), r.normal(size=(3, 2, 2, 2))

    def scalar(wa):
        return float((weight_standardize(Tensor(wa)).data * R).sum())

    wt = Tensor(w, requires_grad=True)
    with GradTape() as tape:
        loss = T.sum(T.mul(weight_standardize(wt), Tensor(R)))
    (analytic,) = tape.backward(loss, [wt])
    (numeric,) = central_difference(scalar, [w.copy()])
    assert relative_error(analytic, numeric) < 1e-4


# -- alternative norms ------------------------------------------------------

def test_layer_norm_fixed_point():
    row = np.array([[-1.5, -0.5, 0.5, 1.5]])
    row = (row - row.mean()) / row.std()
    out = alt_norm_forward(Tensor(row), "layer", None, None, eps=1e-12)
    assert np.abs(out.data - row).max() < 1e-6


def test_instance_norm_of_constant_images_is_zero():
    x = np.ones((2, 3, 4, 4)) * np.arange(6).reshape(2, 3, 1, 1)
    assert not alt_norm_forward(Tensor(x), "instance", None, None, 1e-5).data.any()


@given(st.integers(0, 10**6), st.sampled_from([1, 2, 3, 6]))
def test_group_norm_equivalences(seed, C):
    x = Tensor(np.random.Generator(np.random.PCG64(seed)).normal(size=(3, C, 3, 4)))
    inst = alt_norm_forward(x, "instance", None, None, 1e-5).data
    layer = alt_norm_forward(x, "layer", None, None, 1e-5).data
    assert np.abs(alt_norm_forward(x, "group", None, None, 1e-5, groups=C).data - inst).max() < 1e-6
    assert np.abs(alt_norm_forward(x, "group", None, None, 1e-5, groups=1).data - layer).max() < 1e-6


def test_group_norm_divisibility():
    with pytest.raises(ValueError):
        alt_norm_forward(Tensor(np.zeros((1, 6, 2, 2))), "group", None, None, 1e-5, groups=4)
    with pytest.raises(ValueError):
        alt_norm_forward(Tensor(np.zeros((1, 6))), NormKind.BATCH, None, None, 1e-5)


def test_alt_norms_have_no_batch_coupling():
    x = np.random.default_rng(1).normal(size=(5, 4, 3, 3))
    for kind in ("instance", "layer", "group"):
        full = alt_norm_forward(Tensor(x), kind, None, None, 1e-5).data
        single = alt_norm_forward(Tensor(x[2:3]), kind, None, None, 1e-5).data
        assert np.array_equal(full[2:3], single)


# -- weight standardization -------------------------------------------------

def test_weight_standardize_examples():
    w = np.random.default_rng(2).normal(size=(4, 3, 3, 3))
    w = (w - w.mean(axis=(1, 2, 3), keepdims=True)) / w.std(axis=(1, 2, 3), keepdims=True)
    assert np.abs(weight_standardize(Tensor(w)).data - w).max() < 1e-5
    # residual is mean-subtraction rounding divided by sqrt(WS_EPS)
    assert np.abs(weight_standardize(Tensor(np.full((2, 3, 3, 3), 0.7))).data).max() < 1e-9
    with pytest.raises(ValueError):
        weight_standardize(Tensor(np.ones((4, 1, 1, 1))))


@given(st.integers(0, 10**6))
def test_weight_standardize_filter_moments(seed):
    w = np.random.Generator(np.random.PCG64(seed)).normal(loc=0.3, scale=2, size=(5, 3, 3, 3))
    out = weight_standardize(Tensor(w)).data
    assert np.abs(out.mean(axis=(1, 2, 3))).max() < 1e-6
    assert np.abs(out.var(axis=(1, 2, 3)) - 1).max() < 1e-4


# -- modes on a model -------------------------------------------------------

@pytest.fixture
def cnn():
    net = Network(ModelSpec(architecture="tiny_cnn", hidden=(4, 6), strides=(1, 2),
                            input_shape=(3, 6, 6), num_classes=3, seed=5))
    # non-trivial EMA statistics so EMA and batch predictions differ
    r = np.random.default_rng(0)
    for s in net.batch_norms():
        s.ema_mean = r.normal(size=s.channels)
        s.ema_var = r.uniform(0.5, 2, size=s.channels)
    return net


def batch(seed, n=6):
    return np.random.Generator(np.random.PCG64(seed)).uniform(-1, 1, size=(n, 3, 6, 6))


def test_mode_round_trip_is_bit_identical(cnn):
    X = batch(0)
    first = predict_logits(cnn, X, Mode.EVAL_EMA)
    predict_logits(cnn, X, Mode.EVAL_BATCH)
    assert np.array_equal(predict_logits(cnn, X, Mode.EVAL_EMA), first)


def test_mode_switch_is_idempotent_and_keeps_affine(cnn):
    gammas = [s.gamma.data.copy() for s in cnn.batch_norms()]
    set_prediction_mode(cnn, "eval_batch")
    set_prediction_mode(cnn, "eval_batch")
    assert all(s.mode is Mode.EVAL_BATCH for s in cnn.batch_norms())
    assert all(np.array_equal(g, s.gamma.data) for g, s in zip(gammas, cnn.batch_norms()))


def test_eval_ema_rows_are_independent(cnn):
    X = batch(1)
    full = predict_logits(cnn, X, Mode.EVAL_EMA)
    for i in range(len(X)):
        assert np.array_equal(predict_logits(cnn, X[i:i + 1], Mode.EVAL_EMA)[0], full[i])


def test_eval_batch_repeated_example_gives_identical_rows(cnn):
    X = np.repeat(batch(2, 1), 5, axis=0)
    out = predict_logits(cnn, X, Mode.EVAL_BATCH)
    assert np.array_equal(out, np.repeat(out[:1], 5, axis=0))


def test_frozen_requires_stats_and_leaves_model_unchanged(cnn):
    with pytest.raises(FrozenStatsError):
        set_prediction_mode(cnn, Mode.EVAL_FROZEN)
    assert all(s.mode is Mode.TRAIN for s in cnn.batch_norms())


def test_freeze_then_predict_same_batch_equals_eval_batch(cnn):
    B1, B2 = batch(3), batch(4)
    freeze_stats(cnn, B1)
    frozen = predict_logits(cnn, B1, Mode.EVAL_FROZEN)
    assert np.array_equal(frozen, predict_logits(cnn, B1, Mode.EVAL_BATCH))
    assert not np.allclose(predict_logits(cnn, B2, Mode.EVAL_FROZEN),
                           predict_logits(cnn, B2, Mode.EVAL_BATCH))


def test_freeze_uses_upstream_batch_statistics(cnn):
    B = batch(5)
    freeze_stats(cnn, B, upstream="batch")
    batch_up = [s.frozen_mean.copy() for s in cnn.batch_norms()]
    freeze_stats(cnn, B, upstream="ema")
    ema_up = [s.frozen_mean.copy() for s in cnn.batch_norms()]
    # first layer sees the raw conv output either way; later layers differ
    assert np.array_equal(batch_up[0], ema_up[0])
    assert not np.allclose(batch_up[1], ema_up[1])


def test_freeze_rejects_empty_reference(cnn):
    with pytest.raises(ValueError):
        freeze_stats(cnn, np.zeros((0, 3, 6, 6)))


def test_prediction_eps_override_is_temporary(cnn):
    X = batch(6)
    base = predict_logits(cnn, X, Mode.EVAL_BATCH)
    with prediction_eps(cnn, 10.0):
        assert not np.allclose(predict_logits(cnn, X), base)
    assert np.array_equal(predict_logits(cnn, X), base)
    assert all(s.eps == 1e-3 and s.eps_override is None for s in cnn.batch_norms())


def test_prediction_eps_not_used_in_train_mode():
    s = state(2, eps=1e-3, mode=Mode.TRAIN)
    s.eps_override = 100.0
    out = bn_forward(Tensor([[0.0, 1.0], [2.0, 3.0]]), s)
    assert np.allclose(np.abs(out.data), 1.0, atol=1e-3)


def test_per_layer_mode_selection(cnn):
    set_prediction_mode(cnn, Mode.EVAL_EMA)
    set_prediction_mode(cnn, Mode.EVAL_BATCH, layers=[-1])
    assert [s.mode for s in cnn.batch_norms()] == [Mode.EVAL_EMA, Mode.EVAL_BATCH]
