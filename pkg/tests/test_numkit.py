import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from powermech import numkit as nk


def cofactor_det(a):
    if a.shape == (2, 2):
        return a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    return (a[0, 0] * (a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1])
            - a[0, 1] * (a[1, 0] * a[2, 2] - a[1, 2] * a[2, 0])
            + a[0, 2] * (a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0]))


@pytest.mark.parametrize("m, sign, logabs", [
    (np.eye(2), 1.0, 0.0),
    (np.diag([2.0, 3.0]), 1.0, math.log(6.0)),
    (np.array([[0.0, 1.0], [1.0, 0.0]]), -1.0, 0.0),
])
def test_slogdet_examples(m, sign, logabs):
    s, la = nk.slogdet(m)
    assert s == sign
    assert la == pytest.approx(logabs, abs=1e-15)


def test_slogdet_singular_sentinel():
    s, la = nk.slogdet(np.array([[1.0, 2.0], [2.0, 4.0]]))
    assert s == 0 and la == -math.inf
    s, la = nk.slogdet(np.zeros((3, 3)))
    assert s == 0 and la == -math.inf


def test_slogdet_rejects_non_square():
    with pytest.raises(nk.ShapeError):
        nk.slogdet(np.zeros((2, 3)))


def test_slogdet_matches_cofactor_on_1000_seeds():
    worst = 0.0
    for seed in range(1000):
        rng = nk.make_rng(seed)
        for d in (2, 3):
            a = rng.standard_normal((d, d))
            det = cofactor_det(a)
            s, la = nk.slogdet(a)
            worst = max(worst, abs(s * math.exp(la) - det) / abs(det))
    assert worst < 1e-10


def test_slogdet_batched_matches_loop():
    a = nk.make_rng(3).standard_normal((7, 4, 4))
    s, la = nk.slogdet(a)
    for i in range(7):
        si, li = nk.slogdet(a[i])
        assert s[i] == si and la[i] == li


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_slogdet_product_rule(seed):
    rng = nk.make_rng(seed)
    # well conditioned: identity plus a small perturbation
    a = np.eye(5) + 0.3 * rng.standard_normal((5, 5))
    b = np.eye(5) + 0.3 * rng.standard_normal((5, 5))
    sa, la = nk.slogdet(a)
    sb, lb = nk.slogdet(b)
    sab, lab = nk.slogdet(a @ b)
    assert sab == sa * sb
    assert abs(lab - (la + lb)) < 1e-9


def test_mlp_forward_zero_net():
    p = nk.MlpParams([np.zeros((3, 2)), np.zeros((2, 3))], [np.zeros(3), np.zeros(2)],
                     ["identity", "identity"])
    assert np.array_equal(nk.mlp_forward(p, np.array([4.0, -7.0])), np.zeros(2))


def test_mlp_forward_tanh_identity_at_origin():
    p = nk.MlpParams([np.eye(2)], [np.zeros(2)], ["tanh"])
    assert np.array_equal(nk.mlp_forward(p, np.zeros(2)), np.zeros(2))


def test_mlp_forward_seed1_matches_straight_line_arithmetic():
    # weights printed once from init_mlp([2, 3, 2], seed 1); output computed by hand below
    W1 = [[0.016718301980387817, 0.6370518687008531],
          [-0.5032343017319885, 0.6344861328926812],
          [-0.266110512578824, -0.10843277573828902]]
    W2 = [[0.3783983615127413, -0.10484780611983047, 0.05726585785629423],
          [-0.5455277462906001, 0.2927317230729969, 0.04404410430986894]]
    h0 = math.tanh(W1[0][0] * 1.0 + W1[0][1] * -1.0)
    h1 = math.tanh(W1[1][0] * 1.0 + W1[1][1] * -1.0)
    h2 = math.tanh(W1[2][0] * 1.0 + W1[2][1] * -1.0)
    o0 = W2[0][0] * h0 + W2[0][1] * h1 + W2[0][2] * h2
    o1 = W2[1][0] * h0 + W2[1][1] * h1 + W2[1][2] * h2
    assert o0 == pytest.approx(-0.13228036464551962, abs=1e-15)
    p = nk.init_mlp([2, 3, 2], ["tanh", "identity"], nk.make_rng(1))
    assert np.array_equal(p.weights[0], np.array(W1))
    assert np.array_equal(p.weights[1], np.array(W2))
    out = nk.mlp_forward(p, np.array([1.0, -1.0]))
    assert out == pytest.approx([o0, o1], abs=1e-14)


def test_softmax_output_sums_to_one():
    p = nk.init_mlp([3, 5, 4], ["relu", "softmax"], nk.make_rng(2))
    y = nk.mlp_forward(p, nk.make_rng(9).standard_normal((10, 3)))
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-15)


def test_mlp_shape_errors():
    p = nk.init_mlp([3, 2], ["identity"], nk.make_rng(0))
    with pytest.raises(nk.ShapeError):
        nk.mlp_forward(p, np.zeros(4))
    with pytest.raises(nk.ShapeError):
        nk.MlpParams([np.zeros((2, 3)), np.zeros((2, 4))], [np.zeros(2), np.zeros(2)], ["tanh", "tanh"])
    with pytest.raises(ValueError):
        nk.MlpParams([np.zeros((2, 3)), np.zeros((2, 2))], [np.zeros(2), np.zeros(2)], ["softmax", "tanh"])


def test_grad_oracle_examples():
    g = nk.grad_oracle(lambda t: float(np.sum(t * t)), np.array([1.0, 2.0]), 1e-5)
    assert np.max(np.abs(g - [2.0, 4.0])) < 1e-7
    g = nk.grad_oracle(lambda t: float(t[0] * t[1]), np.array([3.0, 5.0]))
    assert g == pytest.approx([5.0, 3.0], abs=1e-7)


def test_grad_oracle_rejects_bad_inputs():
    with pytest.raises(ValueError):
        nk.grad_oracle(lambda t: 0.0, np.zeros(2), 0.0)
    with pytest.raises(FloatingPointError):
        nk.grad_oracle(lambda t: math.inf, np.zeros(2))


def _loss_closure(p, x, target, kind):
    like = p.arrays()

    def f(theta):
        q = nk.MlpParams(*_split(nk.unflatten(theta, like)), list(p.activations))
        if kind == "ce":
            return nk.softmax_cross_entropy(q, x, target)[0]
        return nk.mse_loss(q, x, target)[0]
    return f


def _split(arrays):
    return arrays[0::2], arrays[1::2]


@pytest.mark.parametrize("seed", range(100))
def test_mlp_gradients_match_oracle(seed):
    rng = nk.make_rng(seed)
    acts = [["tanh", "softmax"], ["relu", "tanh", "softmax"], ["tanh", "identity"]][seed % 3]
    sizes = [3] + [int(rng.integers(2, 6)) for _ in acts[:-1]] + [3]
    p = nk.init_mlp(sizes, acts, rng)
    for b in p.biases:
        b[...] = 0.1 * rng.standard_normal(b.shape)
    x = rng.standard_normal((6, 3))
    if acts[-1] == "softmax":
        target, kind = rng.integers(0, 3, size=6), "ce"
        _, grads, _ = nk.softmax_cross_entropy(p, x, target)
    else:
        target, kind = rng.standard_normal((6, 3)), "mse"
        _, grads, _ = nk.mse_loss(p, x, target)
    num = nk.grad_oracle(_loss_closure(p, x, target, kind), nk.flatten(p.arrays()), 1e-5)
    assert nk.relative_error(nk.flatten(grads), num) < 1e-4


def test_input_gradient_matches_oracle():
    rng = nk.make_rng(5)
    p = nk.init_mlp([3, 4, 2], ["tanh", "softmax"], rng)
    x = rng.standard_normal((4, 3))
    y = np.array([0, 1, 1, 0])
    _, _, gx = nk.softmax_cross_entropy(p, x, y)
    num = nk.grad_oracle(lambda v: nk.softmax_cross_entropy(p, v.reshape(4, 3), y)[0], x.ravel())
    assert nk.relative_error(gx.ravel(), num) < 1e-6


def test_rng_determinism_and_derive_seed():
    a = nk.make_rng(123).standard_normal(50)
    b = nk.make_rng(123).standard_normal(50)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, nk.make_rng(124).standard_normal(50))
    assert nk.derive_seed(1, 2) == nk.derive_seed(1, 2)
    assert nk.derive_seed(1, 2) != nk.derive_seed(1, 3)
    # PCG64 stream is pinned: guards against a silent generator change
    assert nk.make_rng(0).integers(0, 2**32) == np.random.Generator(np.random.PCG64(0)).integers(0, 2**32)


def test_optimizers():
    p = [np.array([1.0, -2.0])]
    nk.Sgd(0.1).step(p, [2 * p[0]])
    assert p[0] == pytest.approx([0.8, -1.6])
    q = [np.array([1.0, -2.0])]
    opt = nk.Adam(0.01)
    for _ in range(3):
        opt.step(q, [np.zeros(2)])
    assert np.array_equal(q[0], [1.0, -2.0])
    with pytest.raises(ValueError):
        nk.make_optimizer("rmsprop", 0.1)


def test_flatten_roundtrip():
    arrays = [np.arange(6.0).reshape(2, 3), np.arange(2.0)]
    back = nk.unflatten(nk.flatten(arrays), arrays)
    assert all(np.array_equal(a, b) for a, b in zip(arrays, back))
    with pytest.raises(nk.ShapeError):
        nk.unflatten(np.zeros(9), arrays)
