"""Discriminator, its log-loss, the shaped reward and the belief-side imitation loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .nn import GaussianHead, Mlp, Module, gaussian_log_prob

LOGIT_CLAMP = 20.0


class Discriminator(Module):
    """``D(b, a) = sigmoid(clamp(f(b, a), -20, 20))`` with ``f`` a 64-64 MLP.

    With ``belief_only`` the action is not an input (diagnostic setting in
    which a constant belief is an optimum of the adversarial objective).
    """

    def __init__(self, belief_width: int, action_dim: int, rng: np.random.Generator, belief_only: bool = False):
        super().__init__()
        self.belief_only = belief_only
        self.action_dim = action_dim
        n_in = belief_width + (0 if belief_only else action_dim)
        self.net = self.child("net", Mlp(n_in, 1, rng))

    def logits(self, b, a) -> Node:
        x = ad.as_node(b) if self.belief_only else ad.concat([ad.as_node(b), ad.as_node(a)], axis=-1)
        raw = self.net(x)
        return ad.clip(ad.reshape(raw, raw.value.shape[:-1]), -LOGIT_CLAMP, LOGIT_CLAMP)

    def prob(self, b, a) -> np.ndarray:
        with ad.no_grad():
            return ad.sigmoid(self.logits(b, a)).value


def log_d(logit: Node) -> Node:
    """``log sigmoid(l) = -softplus(-l)``."""
    return ad.neg(ad.softplus(ad.neg(logit)))


def log_one_minus_d(logit: Node) -> Node:
    """``log(1 - sigmoid(l)) = -softplus(l)``."""
    return ad.neg(ad.softplus(logit))


def disc_loss(disc: Discriminator, expert_b, expert_a, policy_b, policy_a) -> Node:
    """``-(mean log D on expert + mean log(1 - D) on policy)``.

    Beliefs are detached here so the update only reaches the discriminator.
    """
    if len(expert_a) == 0 or len(policy_a) == 0:
        raise ValueError("disc_loss needs nonempty expert and policy batches")
    eb = _detached(expert_b)
    pb = _detached(policy_b)
    real = ad.mean(log_d(disc.logits(eb, expert_a)))
    fake = ad.mean(log_one_minus_d(disc.logits(pb, policy_a)))
    return ad.neg(ad.add(real, fake))


def _detached(b) -> np.ndarray:
    return b.value if isinstance(b, Node) else np.asarray(b, dtype=np.float64)


def shaped_reward(disc: Discriminator, b, a) -> np.ndarray:
    """``r = -log(1 - D(b, a)) = softplus(logit)``, bounded by the logit clamp."""
    with ad.no_grad():
        return np.logaddexp(0.0, disc.logits(_detached(b), a).value)


MAX_REWARD = math.log1p(math.exp(LOGIT_CLAMP))


@dataclass
class ImitationTerms:
    """Switches for the three pieces of the belief gradient of the imitation objective."""

    expert: bool = True
    policy_gradient: bool = True
    pathwise: bool = True


def imitation_loss_phi(disc: Discriminator, policy: GaussianHead, expert_b: Node | None, expert_a,
                       policy_b: Node | None, policy_a, q_hat=None,
                       terms: ImitationTerms = ImitationTerms(), sampled_a=None) -> Node:
    """Imitation loss whose gradient with respect to the belief parameters is the sum of

    (i)   mean ``log D(b_E, a_E)`` on expert data,
    (ii)  mean ``log pi(a | b) * Q_hat`` on policy data (``Q_hat`` constant),
    (iii) mean ``log(1 - D(b, a))`` on policy data (pathwise through ``b``).

    Discriminator and policy weights are read but the caller only steps the
    belief parameters. ``Q_hat`` is the estimate for the cost ``log(1 - D)``
    being minimized, i.e. the negated advantage of the shaped reward.
    ``sampled_a`` (default ``policy_a``) are the unclipped draws scored by the
    policy density, while the discriminator sees the executed actions.
    """
    total: Node | None = None

    def acc(node):
        nonlocal total
        total = node if total is None else ad.add(total, node)

    if terms.expert:
        acc(ad.mean(log_d(disc.logits(expert_b, expert_a))))
    if terms.policy_gradient:
        if q_hat is None:
            raise ValueError("policy-gradient term needs Q_hat estimates")
        q = np.asarray(q_hat, dtype=np.float64).reshape(-1)
        logp = gaussian_log_prob(policy, policy_b, policy_a if sampled_a is None else sampled_a)
        if logp.value.shape != q.shape:
            raise ad.ShapeError(f"Q_hat shape {q.shape} != log-prob shape {logp.value.shape}")
        acc(ad.mean(ad.mul(logp, q)))
    if terms.pathwise:
        acc(ad.mean(log_one_minus_d(disc.logits(policy_b, policy_a))))
    if total is None:
        raise ValueError("all imitation terms are disabled")
    return total
