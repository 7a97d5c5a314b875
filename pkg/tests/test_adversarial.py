import math

import numpy as np
import pytest

import reference as ref
from bmil import autodiff as ad
from bmil.adversarial import (MAX_REWARD, Discriminator, ImitationTerms, disc_loss, imitation_loss_phi, log_d,
                              shaped_reward)
from bmil.belief import BeliefModule, Row, make_batch
from bmil.policy import PolicyNet
from bmil.verify import finite_diff_check


def set_logit(disc, value):
    """Make the discriminator output a constant logit."""
    last = disc.net.layers[-1]
    last.weight.value = np.zeros_like(last.weight.value)
    last.bias.value = np.array([value])


def test_chance_level_loss(rng):
    disc = Discriminator(3, 1, rng)
    set_logit(disc, 0.0)
    b, a = rng.normal(size=(4, 3)), rng.normal(size=(4, 1))
    assert disc_loss(disc, b, a, b, a).item() == pytest.approx(2 * math.log(2))


def test_perfect_classifier_limit(rng):
    disc = Discriminator(1, 1, rng, belief_only=True)
    for layer in disc.net.layers:
        layer.weight.value = np.zeros_like(layer.weight.value)
        layer.bias.value = np.zeros_like(layer.bias.value)
    disc.net.layers[0].weight.value[0, 0] = 5.0
    disc.net.layers[1].weight.value[0, 0] = 5.0
    disc.net.layers[2].weight.value[0, 0] = 100.0
    expert_b, policy_b = np.ones((3, 1)), -np.ones((3, 1))
    loss = disc_loss(disc, expert_b, np.zeros((3, 1)), policy_b, np.zeros((3, 1))).item()
    assert loss == pytest.approx(2 * math.log1p(math.exp(-20)), rel=1e-9)
    assert loss < 1e-8


def test_loss_matches_reference(rng):
    disc = Discriminator(3, 2, rng)
    eb, ea = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    pb, pa = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    de = ref.sigmoid(ref.mlp(disc.net, np.hstack([eb, ea]))[:, 0])
    dp = ref.sigmoid(ref.mlp(disc.net, np.hstack([pb, pa]))[:, 0])
    expected = -(np.mean(np.log(de)) + np.mean(np.log(1 - dp)))
    assert disc_loss(disc, eb, ea, pb, pa).item() == pytest.approx(expected, rel=1e-12)


def test_disc_loss_needs_both_batches(rng):
    disc = Discriminator(3, 1, rng)
    with pytest.raises(ValueError):
        disc_loss(disc, np.zeros((0, 3)), np.zeros((0, 1)), np.zeros((2, 3)), np.zeros((2, 1)))


def test_disc_gradients(rng):
    disc = Discriminator(3, 2, rng)
    eb, ea = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    pb, pa = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    rep = finite_diff_check(lambda: disc_loss(disc, eb, ea, pb, pa), disc.parameters(), max_coords=30)
    assert rep.passed, rep


def test_disc_loss_does_not_reach_beliefs(rng):
    disc = Discriminator(3, 1, rng)
    b = ad.Node(rng.normal(size=(4, 3)), requires_grad=True)
    ad.backward(disc_loss(disc, b, np.zeros((4, 1)), b, np.ones((4, 1))))
    assert b.grad is None


@pytest.mark.parametrize("d,expected", [(0.5, math.log(2)), (1 - 1 / math.e, 1.0)])
def test_reward_plug_in(rng, d, expected):
    disc = Discriminator(2, 1, rng)
    set_logit(disc, math.log(d / (1 - d)))
    r = shaped_reward(disc, np.zeros((1, 2)), np.zeros((1, 1)))
    assert r[0] == pytest.approx(expected, rel=1e-12)


def test_reward_is_monotone_and_bounded(rng):
    disc = Discriminator(2, 1, rng)
    rewards = []
    for d in (0.1, 0.6, 0.9):
        set_logit(disc, math.log(d / (1 - d)))
        rewards.append(shaped_reward(disc, rng.normal(size=(3, 2)), rng.normal(size=(3, 1)))[0])
    assert rewards[0] < rewards[1] < rewards[2]
    set_logit(disc, 1e3)
    assert shaped_reward(disc, np.zeros((1, 2)), np.zeros((1, 1)))[0] == pytest.approx(MAX_REWARD)


# -- imitation loss on the belief parameters ------------------------------------------


def setup(rng, steps=5):
    bm = BeliefModule(2, 1, rng, hidden_size=6, enc_width=5, act_code=4, ks=(1,))
    disc = Discriminator(6, 1, rng)
    policy = PolicyNet(6, 1, rng)
    obs, act = rng.uniform(-1, 1, (steps, 2)), rng.uniform(-1, 1, (steps, 1))
    eobs, eact = rng.uniform(-1, 1, (steps, 2)), rng.uniform(-1, 1, (steps, 1))
    batch = make_batch([Row(obs, act, 0, steps, 0, steps), Row(eobs, eact, 0, steps, 0, steps)], 6)
    q = rng.normal(size=steps)

    def loss(terms):
        b = bm.beliefs(batch)
        pb = ad.take(b, (slice(None), 0))
        eb = ad.take(b, (slice(None), 1))
        if terms is None:
            return ad.mean(log_d(disc.logits(eb, eact)))
        return imitation_loss_phi(disc, policy, eb, eact, pb, act, q, terms)

    return bm, loss


def test_pathwise_term_gradients(rng):
    bm, loss = setup(rng)
    rep = finite_diff_check(lambda: loss(ImitationTerms(False, False, True)), bm.parameters(), max_coords=20, rng=rng)
    assert rep.passed, rep


def grads(bm, node):
    bm.zero_grad()
    ad.backward(node)
    return [None if p.grad is None else p.grad.copy() for p in bm.parameters()]


def test_switching_off_terms_leaves_expert_gradient(rng):
    bm, loss = setup(rng)
    only_expert = grads(bm, loss(ImitationTerms(True, False, False)))
    manual = grads(bm, loss(None))
    full = grads(bm, loss(ImitationTerms(True, True, True)))
    for a, b in zip(only_expert, manual):
        np.testing.assert_array_equal(a, b)
    assert any(not np.allclose(a, b) for a, b in zip(only_expert, full) if a is not None)


def test_terms_add_up(rng):
    bm, loss = setup(rng)
    parts = [loss(ImitationTerms(*m)).item() for m in ((1, 0, 0), (0, 1, 0), (0, 0, 1))]
    assert loss(ImitationTerms()).item() == pytest.approx(sum(parts), rel=1e-12)
    with pytest.raises(ValueError):
        loss(ImitationTerms(False, False, False))


def test_constant_belief_has_no_recurrent_gradient(rng):
    bm, loss = setup(rng)
    for p in bm.gru.parameters():
        p.value = np.zeros_like(p.value)
    bm.zero_grad()
    ad.backward(loss(ImitationTerms(True, False, True)))
    hs = bm.hidden_size
    assert not bm.gru.u_zr.grad.any()
    assert not bm.gru.u_h.grad.any()
    assert not bm.gru.w_x.grad[:, :2 * hs].any()
    assert not bm.gru.b.grad[:2 * hs].any()
