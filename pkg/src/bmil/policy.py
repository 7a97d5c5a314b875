"""Belief-conditioned actor and critic, GAE and the A2C losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .nn import GaussianHead, Mlp, Module, gaussian_log_prob


class PolicyNet(GaussianHead):
    """Gaussian policy ``pi(a | b)`` with a 64-64 tanh mean network and free log-std."""


class CriticNet(Module):
    def __init__(self, n_in: int, rng: np.random.Generator):
        super().__init__()
        self.net = self.child("net", Mlp(n_in, 1, rng))

    def __call__(self, b) -> Node:
        v = self.net(b)
        return ad.reshape(v, v.value.shape[:-1])

    def values(self, b) -> np.ndarray:
        with ad.no_grad():
            return self(b).value


@dataclass
class GaeParams:
    gamma: float = 0.99
    lam: float = 0.95

    def __post_init__(self):
        if not (0 < self.gamma <= 1 and 0 < self.lam <= 1):
            raise ValueError("gamma and lambda must lie in (0, 1]")


@dataclass
class RolloutBatch:
    """``c`` steps from ``N`` parallel episodes, time-major ``(c, N, ...)``.

    ``dones[t]`` is set when the episode ended right after step ``t``;
    ``bootstrap`` is ``V(b_{c})`` for the state following the last step.
    """

    beliefs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    bootstrap: np.ndarray

    @property
    def length(self) -> int:
        return self.rewards.shape[0]


def gae_advantages(rewards, values, dones, bootstrap, p: GaeParams = GaeParams()):
    """Backward recursion ``A_t = delta_t + gamma lam (1 - done_t) A_{t+1}``.

    ``delta_t = r_t + gamma (1 - done_t) V_{t+1} - V_t`` with ``V_c`` the
    bootstrap value. Works on ``(T,)`` or ``(T, N)`` arrays. Returns
    ``(advantages, returns)`` with ``returns = advantages + values``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    notdone = 1.0 - np.asarray(dones, dtype=np.float64)
    next_v = np.asarray(bootstrap, dtype=np.float64)
    adv = np.zeros_like(rewards)
    running = np.zeros_like(next_v)
    for t in range(rewards.shape[0] - 1, -1, -1):
        delta = rewards[t] + p.gamma * notdone[t] * next_v - values[t]
        running = delta + p.gamma * p.lam * notdone[t] * running
        adv[t] = running
        next_v = values[t]
    return adv, adv + values


def policy_loss(policy: GaussianHead, beliefs, actions, advantages, entropy_coef: float = 0.001,
                normalize: bool = False) -> Node:
    """``-mean(log pi(a|b) A) - beta * entropy`` with advantages held constant.

    Beliefs enter as plain arrays, so this loss never reaches the belief module.
    """
    b = beliefs.value if isinstance(beliefs, Node) else np.asarray(beliefs, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64).reshape(-1)
    if normalize and adv.size > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    logp = gaussian_log_prob(policy, b.reshape(-1, b.shape[-1]), np.asarray(actions).reshape(len(adv), -1))
    pg = ad.neg(ad.mean(ad.mul(logp, adv)))
    if entropy_coef == 0:
        return pg
    return ad.sub(pg, ad.scale(policy.entropy(), entropy_coef))


def critic_loss(critic: CriticNet, beliefs, returns) -> Node:
    b = beliefs.value if isinstance(beliefs, Node) else np.asarray(beliefs, dtype=np.float64)
    ret = np.asarray(returns, dtype=np.float64).reshape(-1)
    v = critic(b.reshape(-1, b.shape[-1]))
    return ad.mean(ad.square(ad.sub(v, ret)))
