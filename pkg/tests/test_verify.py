import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bmil import autodiff as ad
from bmil.envs import TabularPomdp
from bmil.verify import (GRAD_SUITE, EnumerationGuardError, HistoryPolicy, PreconditionError, TabularPolicy,
                         ZeroProbabilityHistory, bayes_filter, belief_key, check_dpi_chain, finite_diff_check,
                         js_divergence, monte_carlo_state_measure, random_instance, relative_error,
                         run_dpi_suite, run_grad_suite, visitation_measures)


def two_state(accuracy=0.85):
    t = np.stack([np.eye(2), np.eye(2)], axis=1)  # identity for both actions
    u = np.array([[accuracy, 1 - accuracy], [1 - accuracy, accuracy]])
    return TabularPomdp(t, u, np.array([0.5, 0.5]))


def test_empty_history_is_prior():
    np.testing.assert_array_equal(bayes_filter(two_state(), [], []), [0.5, 0.5])


def test_one_observation_bayes():
    np.testing.assert_allclose(bayes_filter(two_state(), [0], []), [0.85, 0.15], rtol=1e-14)


def test_uninformative_observations_only_push_prior(rng):
    pomdp = TabularPomdp.random(rng, 3, 2, 2)
    pomdp = TabularPomdp(pomdp.transition, np.full((3, 2), 0.5), pomdp.p0)
    b = bayes_filter(pomdp, [1, 0, 1], [1, 0])
    expected = pomdp.p0 @ pomdp.transition[:, 1, :] @ pomdp.transition[:, 0, :]
    np.testing.assert_allclose(b, expected, atol=1e-15)


def test_impossible_history():
    pomdp = TabularPomdp(np.stack([np.eye(2)], axis=1), np.eye(2), np.array([1.0, 0.0]))
    with pytest.raises(ZeroProbabilityHistory):
        bayes_filter(pomdp, [1], [])


def test_horizon_zero_measures(rng):
    pomdp = TabularPomdp.random(rng, 3, 2, 1)
    s, b, ba = visitation_measures(pomdp, TabularPolicy(2, 0), horizon=0)
    np.testing.assert_allclose([s.normalized()[i] for i in range(3)], pomdp.p0)
    assert b.normalized() == {belief_key(pomdp.p0): pytest.approx(1.0)}


def test_single_observation_beliefs_are_policy_independent():
    shift = np.roll(np.eye(3), 1, axis=1)
    pomdp = TabularPomdp(np.stack([shift, shift], axis=1), np.ones((3, 1)), np.array([0.6, 0.3, 0.1]), horizon=2)
    supports = []
    for seed in (1, 2):
        _, b, _ = visitation_measures(pomdp, TabularPolicy(2, seed))
        supports.append(set(b.weights))
    expected = {belief_key(np.array([0.6, 0.3, 0.1]) @ np.linalg.matrix_power(shift, t)) for t in range(3)}
    assert supports[0] == supports[1] == expected


def test_measures_share_normalizer(rng):
    pomdp = TabularPomdp.random(rng, 2, 2, 2, horizon=3)
    s, b, ba = visitation_measures(pomdp, TabularPolicy(2, 4))
    z = sum(0.9 ** t for t in range(4))
    for m in (s, b, ba):
        assert m.normalizer == pytest.approx(z)
        assert m.total() == pytest.approx(z)


def test_state_measure_matches_monte_carlo():
    pomdp = TabularPomdp.random(np.random.default_rng(11), 2, 2, 2, horizon=4)
    policy = TabularPolicy(2, 5)
    s, _, _ = visitation_measures(pomdp, policy)
    mean, se = monte_carlo_state_measure(pomdp, policy, 200_000, np.random.default_rng(0))
    exact = np.array([s.normalized()[i] for i in range(2)])
    assert np.all(np.abs(mean - exact) <= 3 * se)


def test_enumeration_guard():
    pomdp = TabularPomdp.random(np.random.default_rng(0), 3, 3, 3, horizon=6)
    with pytest.raises(EnumerationGuardError):
        visitation_measures(pomdp, TabularPolicy(3, 0))


def test_js_identical_and_disjoint():
    assert js_divergence([0.2, 0.8], [0.2, 0.8]) == 0.0
    assert js_divergence({"a": 1.0}, {"b": 1.0}) == pytest.approx(math.log(2))


def test_js_hand_value():
    p, q = np.array([0.5, 0.5]), np.array([0.9, 0.1])
    m = (p + q) / 2
    kl = lambda x, y: float(np.sum(x * np.log(x / y)))
    assert js_divergence(p, q) == pytest.approx(0.5 * kl(p, m) + 0.5 * kl(q, m), rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_js_symmetric_and_bounded(a, b):
    p, q = np.array(a) + 1e-3, np.array(b) + 1e-3
    p, q = p / p.sum(), q / q.sum()
    d = js_divergence(p, q)
    assert d == js_divergence(q, p)
    assert 0.0 <= d <= math.log(2)


def test_identical_policies_give_zero_divergences():
    pomdp, pi, _ = random_instance(3)
    rep = check_dpi_chain(pomdp, pi, TabularPolicy(pi.n_actions, pi.seed))
    assert max(rep.djs_s, rep.djs_b, rep.djs_ba) < 1e-12 and rep.ok


def test_chain_with_uninformative_observations(rng):
    pomdp = TabularPomdp.random(rng, 3, 2, 2, horizon=3)
    pomdp = TabularPomdp(pomdp.transition, np.full((3, 2), 0.5), pomdp.p0, 3)
    rep = check_dpi_chain(pomdp, TabularPolicy(2, 1), TabularPolicy(2, 2))
    assert rep.ok
    assert rep.djs_s <= rep.djs_b + 1e-9 <= rep.djs_ba + 2e-9


def test_chain_rejects_history_policies():
    pomdp, pi, _ = random_instance(0)
    with pytest.raises(PreconditionError):
        check_dpi_chain(pomdp, pi, HistoryPolicy(lambda h: np.ones(2) / 2))


def test_dpi_suite_sample():
    reports = run_dpi_suite(20, seed=100)
    assert all(r.ok for r in reports)
    assert [r.seed for r in reports] == list(range(100, 120))


# -- finite differences -----------------------------------------------------------------


def test_linear_loss_is_exact(rng):
    w = ad.Node(rng.normal(size=4), requires_grad=True)
    x = rng.normal(size=4)
    rep = finite_diff_check(lambda: ad.sum(ad.mul(w, x)), [w])
    assert rep.max_rel_error < 1e-9


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 1.01) == pytest.approx(0.01 / 2.01)


def test_corrupted_backward_is_detected(rng, monkeypatch):
    original = ad.tanh

    def bad_tanh(a):
        out = original(a)
        if out._parents:  # graphs are only built outside no_grad
            parent, fn = out._parents[0]
            out._parents = ((parent, lambda g: 1.01 * fn(g)),)
        return out

    w = ad.Node(rng.normal(size=(3, 2)), requires_grad=True)
    x = rng.normal(size=(4, 3))
    build = lambda: ad.sum(ad.square(ad.tanh(ad.matmul(x, w))))
    assert finite_diff_check(build, [w]).passed
    monkeypatch.setattr(ad, "tanh", bad_tanh)
    assert not finite_diff_check(build, [w]).passed


def test_registry_covers_ops_and_losses():
    required = {"add", "mul", "matmul", "tanh", "sigmoid", "log", "exp", "square", "mean", "sum", "concat",
                "slice", "conv1d", "gru_cell", "loss_ar", "loss_forward", "loss_inverse", "loss_action",
                "loss_belief_total", "disc_loss", "policy_loss", "critic_loss", "imitation_pathwise"}
    assert required <= set(GRAD_SUITE)


def test_grad_suite_smoke():
    results = run_grad_suite(2, seed=1)
    assert len(results) == len(GRAD_SUITE)
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]
