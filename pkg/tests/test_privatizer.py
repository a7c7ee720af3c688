import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from powermech import dataio, density as dens, privatizer as P
from powermech.numkit import flatten, grad_oracle, make_rng, relative_error, slogdet, unflatten
from powermech.trainer import TrainConfig, train_client


def random_linear_power(seed, d=None, p=None):
    rng = make_rng(seed)
    d = d or int(rng.integers(1, 5))
    p = p or int(rng.integers(1, 4))
    priv = P.linear_power(d, rng, p=p, out_scale=0.5)
    for b in priv.net.biases:
        b[...] = 0.1 * rng.standard_normal(b.shape)
    return priv, rng


def test_identity_privatizer():
    s = P.privatize(P.identity(3), [0.5, -1.0, 2.0])
    assert np.array_equal(s.z, [0.5, -1.0, 2.0])
    assert s.logdet_sum == 0.0
    assert np.array_equal(s.logdet_grad_x, np.zeros(3))


def test_constant_2i_cubed():
    s = P.privatize(P.constant(2 * np.eye(2), p=3), [1.0, -0.5])
    assert np.array_equal(s.z, [8.0, -4.0])
    assert s.logdet_sum == pytest.approx(3 * math.log(4), abs=1e-12)
    assert s.logdet_sum == pytest.approx(4.158883, abs=1e-6)


def test_two_layer_seed1_straight_line():
    priv = P.two_layer_tanh(2, 2, make_rng(1))
    W1, W2, b2 = priv.W1, priv.W2, priv.b2
    x0, x1 = 0.5, -0.5
    u0 = W1[0, 0] * x0 + W1[0, 1] * x1
    u1 = W1[1, 0] * x0 + W1[1, 1] * x1
    z0 = math.tanh(W2[0, 0] * u0 + W2[0, 1] * u1 + b2[0])
    z1 = math.tanh(W2[1, 0] * u0 + W2[1, 1] * u1 + b2[1])
    s = P.privatize(priv, [x0, x1])
    assert s.z == pytest.approx([z0, z1], abs=1e-15)


def test_logdet_grad_zero_cases():
    assert np.array_equal(P.logdet_grad_x(P.constant(np.diag([2.0, 0.5, 3.0])), [1.0, 2.0, 3.0]), np.zeros(3))
    priv = P.two_layer_tanh(3, 4, make_rng(2))
    x = np.array([0.3, -0.2, 0.9])
    priv.b2[...] = -(priv.W2 @ priv.W1 @ x)
    assert np.allclose(P.logdet_grad_x(priv, x), 0.0, atol=1e-15)


@pytest.mark.parametrize("seed", range(40))
def test_logdet_grad_matches_finite_differences(seed):
    if seed % 2:
        priv, rng = random_linear_power(seed)
    else:
        rng = make_rng(seed)
        d = int(rng.integers(1, 5))
        priv = P.two_layer_tanh(d, int(rng.integers(d, 6)), rng)
        priv.b2[...] = 0.3 * rng.standard_normal(d)
    x = rng.standard_normal(priv.d)
    num = grad_oracle(lambda v: float(P.privatize(priv, v).logdet_sum), x, 1e-5)
    assert relative_error(P.logdet_grad_x(priv, x), num) < 1e-4


def test_frozen_jacobian_matches_slogdet():
    H = np.array([[1.5, 0.2, 0.0], [0.1, 0.8, -0.3], [0.0, 0.4, 1.1]])
    s = P.privatize(P.constant(H), [0.1, 0.2, 0.3])
    assert s.logdet_sum == float(slogdet(H)[1])


def test_linear_power_logdet_is_p_times_logdet_h():
    priv, rng = random_linear_power(7, d=3, p=3)
    x = rng.standard_normal(3)
    fw = P.forward(priv, x)
    H = fw.cache["H"][0]
    assert fw.logdet_sum[0] == pytest.approx(3 * slogdet(H)[1], rel=1e-14)
    assert fw.z[0] == pytest.approx(np.linalg.matrix_power(H, 3) @ x, rel=1e-12)


def test_privacy_loss_examples():
    m = dens.fit(make_rng(0).standard_normal((100, 2)))
    x = np.array([0.4, -0.2])
    base = np.linalg.norm(dens.kde_score(m, x))
    assert P.privacy_loss(P.identity(2), m, x) == pytest.approx(base, rel=1e-14)
    assert P.privacy_loss(P.constant(3.0 * np.eye(2)), m, x) == pytest.approx(base, rel=1e-14)
    one = dens.DensityModel(np.array([[1.2]]), 1.0)
    assert P.privacy_loss(P.identity(1), one, [1.5]) == pytest.approx(0.3, abs=1e-12)


def test_jitter_policy():
    rank_deficient = P.constant(np.diag([1.0, 0.0]))
    fw = P.forward(rank_deficient, np.array([[1.0, 1.0]]))
    assert fw.ok[0] and fw.jittered[0]
    assert fw.logdet_sum[0] == pytest.approx(math.log(1e-4 * (1 + 1e-4)), rel=1e-9)
    hopeless = P.constant(np.zeros((3, 3)))
    fw = P.forward(hopeless, np.ones((2, 3)))
    assert not fw.ok.any()
    assert np.all(np.isnan(fw.z))
    with pytest.raises(P.Unprivatizable):
        P.logdet_grad_x(hopeless, np.ones(3))
    with pytest.raises(P.Unprivatizable):
        P.privacy_loss(hopeless, dens.fit(np.eye(3)), np.ones(3))


@pytest.mark.parametrize("seed", range(20))
def test_parameter_gradients_of_privacy_loss(seed):
    if seed % 2:
        priv, rng = random_linear_power(seed)
    else:
        rng = make_rng(seed)
        d = int(rng.integers(1, 5))
        priv = P.two_layer_tanh(d, d + 1, rng)
        priv.b2[...] = 0.3 * rng.standard_normal(d)
    x = rng.standard_normal((5, priv.d))
    scores = rng.standard_normal((5, priv.d))
    zw = rng.standard_normal((5, priv.d))
    like = priv.arrays()

    def f(theta):
        q = priv.with_arrays(unflatten(theta, like))
        fw = P.forward(q, x)
        lp = np.linalg.norm(scores - fw.logdet_grad_x, axis=1)
        return float(lp.mean() + np.sum(zw * fw.z))

    fw = P.forward(priv, x)
    r = scores - fw.logdet_grad_x
    q_bar = -r / np.linalg.norm(r, axis=1, keepdims=True) / 5
    analytic = flatten(P.backward(priv, fw, q_bar, zw))
    assert relative_error(analytic, grad_oracle(f, flatten(like), 1e-5)) < 1e-4


def test_two_layer_bound_1000_probes():
    rng = make_rng(2024)
    worst = 0.0
    for _ in range(1000):
        d = int(rng.integers(1, 5))
        h_w = int(rng.integers(d, 9))
        priv = P.two_layer_tanh(d, h_w, rng)
        priv.W1 *= rng.uniform(0.5, 4.0)
        priv.W2 *= rng.uniform(0.5, 4.0)
        priv.b2[...] = rng.standard_normal(d)
        P.project_weights(priv)
        assert np.linalg.norm(priv.W1, 2) <= math.sqrt(h_w) * (1 + 1e-12)
        assert np.linalg.norm(priv.W2) <= math.sqrt(d) * (1 + 1e-12)
        x = 3 * rng.standard_normal(d)
        ratio = np.linalg.norm(P.logdet_grad_x(priv, x)) / (2 * d * math.sqrt(h_w))
        worst = max(worst, ratio)
    assert worst <= 1.0


def _tv_linear_map(A, seed, n=100_000):
    # histogram of z = A x versus the change-of-variables density f_X(A^{-1} z)/|det A|
    d = A.shape[0]
    z = make_rng(seed).standard_normal((n, d)) @ A.T
    Ainv = np.linalg.inv(A)
    det = abs(np.linalg.det(A))
    bins = 60 if d == 1 else 30
    lim = np.quantile(np.abs(z), 0.999, axis=0) * 1.1
    edges = [np.linspace(-l, l, bins + 1) for l in lim]
    counts, _ = np.histogramdd(z, bins=edges)
    centers = np.meshgrid(*[(e[1:] + e[:-1]) / 2 for e in edges], indexing="ij")
    pts = np.stack([c.ravel() for c in centers], axis=1)
    w = pts @ Ainv.T
    fx = np.exp(-0.5 * np.sum(w * w, axis=1)) / (2 * math.pi) ** (d / 2)
    cell = np.prod([e[1] - e[0] for e in edges])
    model = fx / det * cell
    emp = counts.ravel() / n
    return 0.5 * np.sum(np.abs(emp - model)) + 0.5 * max(0.0, 1 - model.sum())


@pytest.mark.parametrize("A", [np.array([[2.5]]), np.array([[1.5, 0.7], [-0.4, 0.9]])])
def test_change_of_variables(A):
    assert _tv_linear_map(A, seed=3) < 0.05


def test_power_mechanism_density_matches_change_of_variables():
    priv = P.constant(np.array([[1.2, 0.3], [-0.2, 0.8]]), p=2)
    x = make_rng(5).standard_normal((100_000, 2))
    Z, ok = P.embed(priv, x)
    assert ok.all()
    H2 = np.linalg.matrix_power(np.array([[1.2, 0.3], [-0.2, 0.8]]), 2)
    assert np.allclose(Z, x @ H2.T, rtol=1e-12, atol=1e-12)
    assert _tv_linear_map(H2, seed=5) < 0.05


def test_mean_privacy_loss_non_increasing_in_power():
    votes = 0
    for seed in range(3):
        ds = dataio.ring_benchmark(1000, seed=seed)
        m = dens.fit(ds.X_train)
        lp = []
        for p in (1, 2, 3):
            priv, _, _ = train_client(ds, TrainConfig(p=p, steps=300, seed=seed), m)
            lp.append(float(np.nanmean(P.privacy_loss(priv, m, ds.X_val))))
        votes += lp[0] >= lp[1] >= lp[2]
    assert votes >= 2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_embed_matches_forward_and_serializes(seed):
    priv, rng = random_linear_power(seed)
    X = rng.standard_normal((13, priv.d))
    Z, ok = P.embed(priv, X, chunk=4)
    fw = P.forward(priv, X)
    # BLAS may round differently per batch shape, so chunked output is compared to 1e-12
    assert np.allclose(Z[ok], fw.z[ok], rtol=1e-12, atol=1e-12)
    back, _ = P.from_bytes(P.to_bytes(priv))
    assert np.array_equal(P.forward(back, X).z, fw.z, equal_nan=True)


def test_two_layer_serialization_and_validation():
    priv = P.two_layer_tanh(3, 5, make_rng(1))
    back, meta = P.from_bytes(P.to_bytes(priv, {"note": "x"}))
    assert meta["note"] == "x"
    assert np.array_equal(back.W1, priv.W1) and np.array_equal(back.b2, priv.b2)
    with pytest.raises(ValueError):
        P.PrivatizerParams("bogus", 2)
    with pytest.raises(ValueError):
        P.linear_power(2, make_rng(0), p=0)
    with pytest.raises(ValueError):
        P.privatize(priv, np.zeros(4))


def test_full_composition_debug_mode_constant_h():
    # with H constant the exact composed Jacobian is H^p, whose log-det has zero x-gradient
    priv = P.constant(np.array([[1.1, 0.2], [0.0, 0.9]]), p=2)
    assert np.allclose(P.composed_logdet_grad_fd(priv, np.array([0.3, -0.4])), 0.0, atol=1e-6)


def test_two_layer_logdet_stays_finite_when_saturated():
    priv = P.two_layer_tanh(2, 3, make_rng(6))
    x = np.array([[0.2, -0.1], [400.0, -300.0]])
    fw = P.forward(priv, x)
    assert np.all(np.isfinite(fw.logdet_sum))
    a = x[:1] @ priv.W1.T @ priv.W2.T + priv.b2
    direct = np.sum(np.log1p(-np.tanh(a) ** 2)) + slogdet(priv.W2 @ priv.W1)[1]
    assert fw.logdet_sum[0] == pytest.approx(direct, rel=1e-13)
