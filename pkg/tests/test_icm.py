from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from toys import open_grid_transitions, split_cells

from girilab.diff import NumericAbort, encode_params
from girilab.girl import Normalizer
from girilab.gradcheck import check_gradients, numeric_gradient
from girilab.icm import IcmModule, IcmReward, icm_objective, icm_reward, train_icm


def random_batch(rng, discrete, B=4, d=3, k=2):
    s, s2 = rng.uniform(-1, 1, (B, d)), rng.uniform(-1, 1, (B, d))
    a = rng.integers(0, k, B) if discrete else rng.uniform(-1, 1, (B, k))
    return s, a, s2


@pytest.fixture(scope="module")
def trained_grid():
    train_cells, test_cells = split_cells()
    train = open_grid_transitions(n=600, seed=0, cells=train_cells)
    test = open_grid_transitions(n=300, seed=1, cells=test_cells)
    m = IcmModule(2, 4, True, np.random.default_rng(0), feature_dim=16, hidden=64)
    log = train_icm(m, train, epochs=1500, lr=1e-3, stride=1, rng=np.random.default_rng(1), log_interval=50)
    return m, train, test, log


def test_module_shapes_and_names():
    m = IcmModule(5, 3, True, np.random.default_rng(0), feature_dim=7, hidden=9)
    assert m.feature_net.output_dim == 7
    assert m.inverse_net.input_dim == 14 and m.inverse_net.output_dim == 3
    assert m.forward_net.input_dim == 7 + 3 and m.forward_net.output_dim == 7
    assert IcmModule(2, 2, True, np.random.default_rng(0)).feature_dim == 32
    assert all(n.startswith("icm.") for n, _ in m.named_parameters())
    with pytest.raises(ValueError):
        IcmModule(2, 2, True, np.random.default_rng(0), lam=0.0)


def test_exact_forward_prediction_zero_loss_and_reward():
    m = IcmModule(3, 2, True, np.random.default_rng(0), feature_dim=4, hidden=6)
    # constant features and a forward model that outputs the same constant
    m.feature_net.layers[-1].weight.values[:] = 0.0
    m.feature_net.layers[-1].bias.values[:] = [0.1, 0.2, 0.3, 0.4]
    m.forward_net.layers[-1].weight.values[:] = 0.0
    m.forward_net.layers[-1].bias.values[:] = [0.1, 0.2, 0.3, 0.4]
    s, a, s2 = random_batch(np.random.default_rng(1), True)
    assert icm_objective(m, s, a, s2, backward=False).forward == 0.0
    assert np.all(icm_reward(m, s, a, s2) == 0.0)


def test_uniform_inverse_logits_give_log_n():
    m = IcmModule(3, 5, True, np.random.default_rng(0), feature_dim=4, hidden=6)
    m.inverse_net.layers[-1].weight.values[:] = 0.0
    m.inverse_net.layers[-1].bias.values[:] = 0.0
    s, a, s2 = random_batch(np.random.default_rng(1), True, k=5)
    assert icm_objective(m, s, a, s2, backward=False).inverse == pytest.approx(np.log(5), abs=1e-12)


@pytest.mark.parametrize("discrete", [True, False])
def test_gradients_finite_difference(discrete):
    rng = np.random.default_rng(2)
    m = IcmModule(3, 2, discrete, np.random.default_rng(3), feature_dim=4, hidden=6)
    s, a, s2 = random_batch(rng, discrete, B=3)
    res = check_gradients("icm", m.parameters(), lambda: icm_objective(m, s, a, s2, backward=False).total,
                          lambda: icm_objective(m, s, a, s2))
    assert res.rel_error < 1e-4


def test_feature_net_gets_gradient_from_both_losses():
    rng = np.random.default_rng(4)
    m = IcmModule(3, 2, True, np.random.default_rng(5), feature_dim=4, hidden=6)
    s, a, s2 = random_batch(rng, True)
    m.zero_grad()
    icm_objective(m, s, a, s2)
    w = m.feature_net.layers[0].weight
    analytic = w.grad.copy()
    from_inverse = numeric_gradient(w, lambda: icm_objective(m, s, a, s2, backward=False).inverse)
    from_forward = numeric_gradient(w, lambda: icm_objective(m, s, a, s2, backward=False).forward)
    assert np.linalg.norm(from_inverse) > 1e-6 and np.linalg.norm(from_forward) > 1e-6
    np.testing.assert_allclose(analytic, from_inverse + from_forward, rtol=1e-5, atol=1e-9)


def test_total_is_sum():
    m = IcmModule(3, 2, False, np.random.default_rng(0), feature_dim=4, hidden=6)
    s, a, s2 = random_batch(np.random.default_rng(1), False)
    out = icm_objective(m, s, a, s2, backward=False)
    assert out.total == out.inverse + out.forward


def test_zero_epochs_and_determinism():
    demo = open_grid_transitions(n=50)
    m = IcmModule(2, 4, True, np.random.default_rng(0), feature_dim=4, hidden=8)
    before = encode_params(m.named_parameters())
    train_icm(m, demo, epochs=0)
    assert encode_params(m.named_parameters()) == before

    def run():
        mm = IcmModule(2, 4, True, np.random.default_rng(0), feature_dim=4, hidden=8)
        train_icm(mm, demo, epochs=30, lr=1e-3, stride=1, rng=np.random.default_rng(1))
        return encode_params(mm.named_parameters())

    assert run() == run()


def test_mode_mismatch_and_nan():
    demo = open_grid_transitions(n=20)
    with pytest.raises(ValueError):
        train_icm(IcmModule(2, 4, False, np.random.default_rng(0)), demo, epochs=1)
    demo.states[:] = np.nan
    with pytest.raises(NumericAbort):
        train_icm(IcmModule(2, 4, True, np.random.default_rng(0), hidden=4), demo, epochs=2, stride=1)


def test_held_out_inverse_accuracy(trained_grid):
    m, _, test, _ = trained_grid
    acc = np.mean(m.predict_actions(test.states, test.next_states) == test.actions)
    assert acc > 0.9


def test_inverse_loss_decreases_in_windowed_median(trained_grid):
    _, _, _, log = trained_grid
    inv = np.array([e["inverse"] for e in log])
    medians = [np.median(inv[i : i + 5]) for i in range(0, len(inv) - 4, 5)]
    assert sum(b > a for a, b in zip(medians, medians[1:])) <= 1
    assert medians[-1] < 0.5 * medians[0]


def test_reward_deterministic_and_linear_in_lambda():
    rng = np.random.default_rng(0)
    s, a, s2 = random_batch(rng, True)
    one = IcmModule(3, 2, True, np.random.default_rng(1), feature_dim=4, hidden=6, lam=1.0)
    two = IcmModule(3, 2, True, np.random.default_rng(1), feature_dim=4, hidden=6, lam=2.0)
    r = icm_reward(one, s, a, s2)
    np.testing.assert_array_equal(icm_reward(one, s, a, s2), r)
    np.testing.assert_array_equal(icm_reward(two, s, a, s2), 2.0 * r)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.booleans())
def test_reward_nonnegative(seed, discrete):
    rng = np.random.default_rng(seed)
    m = IcmModule(3, 2, discrete, rng, feature_dim=4, hidden=6)
    s, a, s2 = random_batch(rng, discrete)
    assert np.all(icm_reward(m, s, a, s2) >= 0.0)


def test_reward_source_normalizes_states():
    m = IcmModule(2, 4, True, np.random.default_rng(0), feature_dim=4, hidden=6)
    norm = Normalizer([0.0, 0.0], [2.0, 2.0])
    src = IcmReward(m, norm)
    s, s2 = np.array([[0.0, 2.0]]), np.array([[1.0, 1.0]])
    np.testing.assert_array_equal(src.rewards(s, np.array([3]), s2),
                                  icm_reward(m, [[-1.0, 1.0]], [3], [[0.0, 0.0]]))
    assert not src.uses_env_reward
