from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate

from girilab.diff import (
    LEAKY_SLOPE,
    Adam,
    Categorical,
    CheckpointFormatError,
    DiagGaussian,
    DimensionError,
    DomainError,
    Mlp,
    ParamTensor,
    StateError,
    assign_params,
    decode_params,
    encode_params,
    kl_diag_gaussians,
    kl_gaussian_std_normal,
    reparameterize,
    softmax,
    softmax_array,
)
from girilab.gradcheck import check_gradients

finite = st.floats(-50, 50, allow_nan=False)


def _set_layer(net: Mlp, i: int, w, b) -> None:
    net.layers[i].weight.values[...] = np.asarray(w, dtype=np.float64)
    net.layers[i].bias.values[...] = np.asarray(b, dtype=np.float64)


# ------------------------------------------------------------------ tensors


def test_param_tensor_grad_zero_after_construction_and_zero_grad():
    p = ParamTensor(np.arange(6.0).reshape(2, 3))
    assert p.shape == (2, 3) and p.grad.shape == (2, 3)
    assert not p.grad.any()
    p.grad += 5.0
    p.zero_grad()
    assert not p.grad.any()


def test_param_tensor_rejects_empty_shape():
    with pytest.raises(DimensionError):
        ParamTensor(np.zeros((0, 3)))


# ------------------------------------------------------------------ forward


def test_identity_layer_passes_input_through():
    net = Mlp([2, 2], ["identity"], np.random.default_rng(0))
    _set_layer(net, 0, np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(net.forward([[1.0, 2.0]]), [[1.0, 2.0]])


def test_tanh_layer_with_zero_weights_outputs_zero():
    net = Mlp([3, 4], ["tanh"], np.random.default_rng(0))
    _set_layer(net, 0, np.zeros((3, 4)), np.zeros(4))
    x = np.random.default_rng(1).normal(size=(5, 3)) * 10
    np.testing.assert_array_equal(net.forward(x), np.zeros((5, 4)))


def test_two_layer_forward_matches_hand_arithmetic():
    net = Mlp([2, 3, 2], ["tanh", "identity"], np.random.default_rng(7))
    x = [0.3, -0.7]
    w1, b1 = net.layers[0].weight.values, net.layers[0].bias.values
    w2, b2 = net.layers[1].weight.values, net.layers[1].bias.values
    # scalar loops, no matrix products
    hidden = []
    for j in range(3):
        acc = b1[j]
        for i in range(2):
            acc += x[i] * w1[i, j]
        hidden.append(np.tanh(acc))
    expected = []
    for j in range(2):
        acc = b2[j]
        for i in range(3):
            acc += hidden[i] * w2[i, j]
        expected.append(acc)
    np.testing.assert_allclose(net.forward([x])[0], expected, rtol=0, atol=1e-12)


def test_leaky_relu_slope():
    assert LEAKY_SLOPE == 0.01
    net = Mlp([1, 1], ["leaky_relu"], np.random.default_rng(0))
    _set_layer(net, 0, [[1.0]], [0.0])
    np.testing.assert_allclose(net.forward([[-3.0], [2.0]]).ravel(), [-0.03, 2.0], rtol=0, atol=1e-15)


def test_forward_dimension_mismatch():
    net = Mlp([3, 2], "tanh", np.random.default_rng(0))
    with pytest.raises(DimensionError):
        net.forward(np.zeros((1, 4)))


def test_layer_dims_chain_and_init_bounds():
    sizes = [5, 7, 3, 2]
    net = Mlp(sizes, "tanh", np.random.default_rng(3))
    for layer, (fi, fo) in zip(net.layers, zip(sizes[:-1], sizes[1:])):
        assert (layer.in_dim, layer.out_dim) == (fi, fo)
        assert np.all(np.abs(layer.weight.values) <= np.sqrt(6.0 / (fi + fo)))
        assert not layer.bias.values.any()
    for a, b in zip(net.layers[:-1], net.layers[1:]):
        assert a.out_dim == b.in_dim


# ------------------------------------------------------------------ backward


def test_backward_without_forward_is_state_error():
    net = Mlp([2, 2], "tanh", np.random.default_rng(0))
    with pytest.raises(StateError):
        net.backward(np.ones((1, 2)))


def test_linear_scalar_gradient_equals_input():
    net = Mlp([1, 1], ["identity"], np.random.default_rng(0))
    _set_layer(net, 0, [[0.7]], [0.0])
    x = np.array([[1.9]])
    net.forward(x)
    dx = net.backward(np.ones((1, 1)))
    assert net.layers[0].weight.grad[0, 0] == pytest.approx(1.9, abs=1e-15)
    assert dx[0, 0] == pytest.approx(0.7, abs=1e-15)


def test_zero_upstream_leaves_grads_zero():
    net = Mlp([3, 4, 2], "tanh", np.random.default_rng(0))
    net.forward(np.ones((2, 3)))
    net.backward(np.zeros((2, 2)))
    assert all(not p.grad.any() for p in net.parameters())


@pytest.mark.parametrize("activation", ["tanh", "leaky_relu", "identity"])
def test_mlp_gradients_match_finite_differences(activation):
    rng = np.random.default_rng(11)
    net = Mlp([3, 5, 2], [activation, "identity"], rng)
    x = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 2))

    def loss():
        return float(np.sum((net.predict(x) - target) ** 2))

    def backward():
        out = net.forward(x)
        net.backward(2.0 * (out - target))

    res = check_gradients(activation, net.parameters(), loss, backward)
    assert res.rel_error < 1e-4


def test_backward_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    net = Mlp([3, 4, 1], "tanh", rng)
    x = rng.normal(size=(1, 3))
    net.forward(x)
    dx = net.backward(np.ones((1, 1)))[0]
    num = np.zeros(3)
    for i in range(3):
        e = np.zeros((1, 3))
        e[0, i] = 1e-6
        num[i] = (net.predict(x + e)[0, 0] - net.predict(x - e)[0, 0]) / 2e-6
    np.testing.assert_allclose(dx, num, rtol=1e-7, atol=1e-9)


# ------------------------------------------------------------------ KL


def test_kl_standard_case_is_zero():
    for dim in (1, 3, 8):
        assert kl_gaussian_std_normal(DiagGaussian(np.zeros(dim), np.ones(dim))) == 0.0


def test_kl_unit_mean():
    assert kl_gaussian_std_normal(DiagGaussian([1.0], [1.0])) == pytest.approx(0.5, abs=1e-15)


def test_kl_matches_quadrature():
    mu = np.array([0.3, -0.2])
    sigma = np.array([0.5, 1.5])

    def integrand(x, m, s):
        logq = -0.5 * ((x - m) / s) ** 2 - np.log(s) - 0.5 * np.log(2 * np.pi)
        logp = -0.5 * x * x - 0.5 * np.log(2 * np.pi)
        return np.exp(logq) * (logq - logp)

    # independent dimensions: the KL is a sum of one-dimensional integrals
    quad = sum(integrate.quad(integrand, -np.inf, np.inf, args=(m, s), epsabs=1e-13, epsrel=1e-13)[0]
               for m, s in zip(mu, sigma))
    assert abs(kl_gaussian_std_normal(DiagGaussian(mu, sigma)) - quad) < 1e-6


def test_kl_nonpositive_sigma_is_domain_error():
    with pytest.raises(DomainError):
        DiagGaussian([0.0], [0.0])
    with pytest.raises(DomainError):
        DiagGaussian([0.0, 1.0], [1.0, -0.5])


@given(arrays(np.float64, 3, elements=st.floats(-5, 5)), arrays(np.float64, 3, elements=st.floats(-3, 3)))
def test_kl_nonnegative(mu, log_sigma):
    q = DiagGaussian(mu, np.exp(log_sigma))
    assert kl_gaussian_std_normal(q) >= -1e-12


@given(arrays(np.float64, 2, elements=st.floats(-2, 2)), arrays(np.float64, 2, elements=st.floats(-2, 2)))
def test_kl_zero_only_at_standard_normal(mu, log_sigma):
    kl = kl_gaussian_std_normal(DiagGaussian(mu, np.exp(log_sigma)))
    at_origin = np.allclose(mu, 0, atol=1e-7) and np.allclose(log_sigma, 0, atol=1e-7)
    if not at_origin:
        assert kl > 1e-14
    else:
        assert kl < 1e-12


def test_general_kl_reduces_to_standard_normal_case():
    rng = np.random.default_rng(2)
    mu, ls = rng.normal(size=5), rng.normal(size=5) * 0.5
    a = kl_diag_gaussians(mu, ls, np.zeros(5), np.zeros(5))
    b = kl_gaussian_std_normal(DiagGaussian(mu, np.exp(ls)))
    assert a == pytest.approx(b, abs=1e-12)


# ------------------------------------------------------------------ softmax


def test_softmax_symmetric():
    np.testing.assert_allclose(softmax([2.5, 2.5, 2.5]).probs, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_stable_for_large_logits():
    with np.errstate(over="raise"):
        p = softmax([1000.0, 0.0]).probs
    np.testing.assert_allclose(p, [1.0, 0.0], rtol=0, atol=1e-12)


def test_softmax_matches_direct_evaluation():
    z = np.array([1.0, 2.0, 3.0])
    direct = [np.exp(v) / (np.exp(1.0) + np.exp(2.0) + np.exp(3.0)) for v in z]
    np.testing.assert_allclose(softmax(z).probs, direct, rtol=0, atol=1e-12)


def test_softmax_nan_is_domain_error():
    with pytest.raises(DomainError):
        softmax([0.0, float("nan")])


@given(arrays(np.float64, st.integers(1, 8), elements=finite))
def test_softmax_is_valid_categorical(z):
    cat = softmax(z)
    assert isinstance(cat, Categorical)
    assert np.all(cat.probs >= 0)
    assert abs(cat.probs.sum() - 1.0) <= 1e-9


def test_categorical_entropy_uniform():
    assert Categorical(np.full(6, 1 / 6)).entropy() == pytest.approx(np.log(6), abs=1e-14)


# ------------------------------------------------------------------ reparameterize


def test_reparameterize_zero_noise_returns_mean():
    q = DiagGaussian([0.4, -1.2], [0.3, 2.0])
    np.testing.assert_array_equal(reparameterize(q, [0.0, 0.0]), q.mu)


def test_reparameterize_tiny_sigma():
    q = DiagGaussian([0.5], [1e-8])
    assert reparameterize(q, [1.0])[0] == pytest.approx(0.5 + 1e-8, abs=1e-16)


def test_reparameterize_dimension_mismatch():
    with pytest.raises(DimensionError):
        reparameterize(DiagGaussian([0.0, 0.0], [1.0, 1.0]), [0.0])


def test_reparameterize_monte_carlo_moments():
    mu, sigma, n = np.array([1.5, -0.5]), np.array([0.7, 2.0]), 100_000
    rng = np.random.default_rng(123)
    q = DiagGaussian(np.broadcast_to(mu, (n, 2)), np.broadcast_to(sigma, (n, 2)))
    z = reparameterize(q, rng.standard_normal((n, 2)))
    se_mean = sigma / np.sqrt(n)
    se_std = sigma / np.sqrt(2 * (n - 1))
    assert np.all(np.abs(z.mean(axis=0) - mu) < 3 * se_mean)
    assert np.all(np.abs(z.std(axis=0, ddof=1) - sigma) < 3 * se_std)


# ------------------------------------------------------------------ Adam


def test_adam_first_step_is_minus_lr_sign():
    p = ParamTensor([0.0])
    opt = Adam([p], lr=0.1)
    p.grad[:] = 1.0
    opt.step()
    assert p.values[0] == pytest.approx(-0.1, abs=1e-9)
    assert p.grad[0] == 1.0  # grads are left for the caller to zero


def test_adam_zero_grad_leaves_parameter():
    p = ParamTensor([2.5, -1.0])
    opt = Adam([p], lr=0.1)
    for _ in range(10):
        opt.step()
    np.testing.assert_array_equal(p.values, [2.5, -1.0])


def test_adam_converges_on_quadratic():
    p = ParamTensor([0.0])
    opt = Adam([p], lr=0.05)
    for _ in range(1000):
        opt.zero_grad()
        p.grad[:] = 2.0 * (p.values - 3.0)
        opt.step()
    assert abs(p.values[0] - 3.0) < 1e-2


def test_adam_moment_shapes_and_step_counter():
    ps = [ParamTensor(np.ones((2, 3))), ParamTensor(np.ones(4))]
    opt = Adam(ps, lr=1e-3)
    assert opt.t == 0
    assert [m.shape for m in opt.m] == [(2, 3), (4,)] and [v.shape for v in opt.v] == [(2, 3), (4,)]
    opt.step()
    assert opt.t == 1


def test_identical_seeds_give_identical_trajectories():
    def run():
        rng = np.random.default_rng(9)
        net = Mlp([3, 8, 1], "tanh", rng)
        opt = Adam(net.parameters(), lr=1e-2)
        x, y = rng.normal(size=(16, 3)), rng.normal(size=(16, 1))
        for _ in range(50):
            opt.zero_grad()
            net.backward(2 * (net.forward(x) - y))
            opt.step()
        return encode_params(net.named_parameters("net"))

    assert run() == run()


# ------------------------------------------------------------------ checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = Mlp([4, 6, 2], "tanh", np.random.default_rng(0))
    data = encode_params(net.named_parameters("net"))
    assert data.startswith(b"IILPARAM1")
    other = Mlp([4, 6, 2], "tanh", np.random.default_rng(1))
    assign_params(other.named_parameters("net"), decode_params(data))
    assert encode_params(other.named_parameters("net")) == data


def test_checkpoint_bad_magic_and_truncation():
    data = encode_params([("w", np.ones((2, 2)))])
    with pytest.raises(CheckpointFormatError) as exc:
        decode_params(b"X" + data[1:])
    assert exc.value.offset == 0
    with pytest.raises(CheckpointFormatError) as exc:
        decode_params(data[:-3])
    assert exc.value.offset > 0


def test_assign_params_checks_shapes_and_names():
    net = Mlp([2, 2], "tanh", np.random.default_rng(0))
    with pytest.raises(KeyError):
        assign_params(net.named_parameters("net"), {})
    bad = {name: np.zeros((3, 3)) for name, _ in net.named_parameters("net")}
    with pytest.raises(DimensionError):
        assign_params(net.named_parameters("net"), bad)


@settings(max_examples=30)
@given(st.lists(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 3)),
                       elements=st.floats(allow_nan=False)), min_size=1, max_size=4))
def test_checkpoint_round_trip_property(tensors):
    named = [(f"t{i}", t) for i, t in enumerate(tensors)]
    decoded = decode_params(encode_params(named))
    for name, t in named:
        assert decoded[name].tobytes() == t.tobytes()
