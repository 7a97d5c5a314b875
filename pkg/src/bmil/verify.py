"""Exact oracles: Bayes filtering, visitation measures, Jensen-Shannon divergence,
the divergence chain check on tabular POMDPs, and the finite-difference harness.
"""

from __future__ import annotations

import copy
import hashlib
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .envs import TabularPomdp

KEY_DECIMALS = 12
MAX_HISTORIES = 10 ** 6


class ZeroProbabilityHistory(ValueError):
    """The observation sequence is impossible under every state."""


class EnumerationGuardError(RuntimeError):
    pass


class PreconditionError(ValueError):
    pass


def belief_key(b: np.ndarray) -> tuple:
    """Hashable atom for a belief: entries rounded to 12 decimals (``-0.0`` folded to ``0.0``)."""
    return tuple((np.round(np.asarray(b, dtype=np.float64), KEY_DECIMALS) + 0.0).tolist())


# ---------------------------------------------------------------------------
# Bayes filter


def bayes_update(pomdp: TabularPomdp, b: np.ndarray, action: int, obs: int) -> np.ndarray:
    """Predict through ``T[:, a, :]``, weight by ``U[:, o]``, renormalize."""
    joint = (b @ pomdp.transition[:, action, :]) * pomdp.observation[:, obs]
    z = joint.sum()
    if z <= 0:
        raise ZeroProbabilityHistory(f"observation {obs} after action {action} has probability zero")
    return joint / z


def bayes_filter(pomdp: TabularPomdp, observations: Sequence[int], actions: Sequence[int]) -> np.ndarray:
    """Exact ``p(s_t | o_{<=t}, a_{<t})``.

    ``observations`` is ``o_0 .. o_t`` (the first one emitted at reset) and
    ``actions`` is ``a_0 .. a_{t-1}``. An empty history returns ``p0``.
    """
    observations, actions = list(observations), list(actions)
    if not observations:
        if actions:
            raise ValueError("actions without observations")
        return pomdp.p0.copy()
    if len(actions) != len(observations) - 1:
        raise ValueError("need exactly one action between consecutive observations")
    for o in observations:
        if not 0 <= int(o) < pomdp.n_obs:
            raise ValueError(f"observation {o} out of range")
    b = pomdp.p0 * pomdp.observation[:, observations[0]]
    z = b.sum()
    if z <= 0:
        raise ZeroProbabilityHistory(f"initial observation {observations[0]} has probability zero")
    b = b / z
    for a, o in zip(actions, observations[1:]):
        if not 0 <= int(a) < pomdp.n_actions:
            raise ValueError(f"action {a} out of range")
        b = bayes_update(pomdp, b, int(a), int(o))
    return b


# ---------------------------------------------------------------------------
# policies over beliefs


class BeliefPolicy:
    """A policy that depends on the history only through the exact belief."""

    def probs(self, b: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def probs_at(self, key: tuple, b: np.ndarray) -> np.ndarray:
        """``probs(b)`` when the caller already holds ``belief_key(b)``."""
        return self.probs(b)

    def probs_batch(self, keys: Sequence[tuple], beliefs: np.ndarray) -> np.ndarray:
        return np.stack([self.probs_at(k, b) for k, b in zip(keys, beliefs)])


class TabularPolicy(BeliefPolicy):
    """Random function of the belief atom: a Dirichlet(1) row per distinct belief key.

    Rows come from a keyed hash of ``(seed, key)`` so they do not depend on the
    order in which beliefs are visited. Normalized exponential draws give the
    Dirichlet(1) row; hashing is far cheaper than seeding a generator per atom.
    """

    def __init__(self, n_actions: int, seed: int, table: dict | None = None):
        self.n_actions = n_actions
        self.seed = int(seed)
        self.table: dict[tuple, np.ndarray] = dict(table or {})

    def probs(self, b: np.ndarray) -> np.ndarray:
        return self.probs_at(belief_key(b), b)

    def probs_at(self, key: tuple, b: np.ndarray) -> np.ndarray:
        return self.probs_batch([key], b[None])[0]

    def probs_batch(self, keys: Sequence[tuple], beliefs: np.ndarray) -> np.ndarray:
        missing = [k for k in dict.fromkeys(keys) if k not in self.table]
        if missing:
            salt = self.seed.to_bytes(8, "little", signed=True)
            raw = b"".join(hashlib.blake2b(repr(k).encode("ascii"), digest_size=8 * self.n_actions,
                                           key=salt).digest() for k in missing)
            u = ((np.frombuffer(raw, dtype="<u8") >> 11).astype(np.float64) + 0.5) * 2.0 ** -53
            rows = -np.log(u).reshape(len(missing), self.n_actions)
            rows /= rows.sum(axis=1, keepdims=True)
            self.table.update(zip(missing, rows))
        return np.stack([self.table[k] for k in keys])


class HistoryPolicy:
    """A policy keyed on the raw history; not admissible for the chain check."""

    def __init__(self, fn: Callable[[tuple], np.ndarray]):
        self.fn = fn


# ---------------------------------------------------------------------------
# visitation measures


@dataclass
class VisitationMeasure:
    weights: dict
    normalizer: float

    def normalized(self) -> dict:
        return {k: v / self.normalizer for k, v in self.weights.items()}

    def total(self) -> float:
        return float(sum(self.weights.values()))


def visitation_measures(pomdp: TabularPomdp, policy: BeliefPolicy, horizon: int | None = None,
                        gamma: float | None = None):
    """Exact ``rho(s)``, ``rho(b)`` and ``rho(b, a)`` by enumerating every history.

    Time ``t`` runs ``0 .. H``; a history of length ``t`` contributes
    ``gamma^t P(history)``. All three measures share the normalizer
    ``sum_t gamma^t``.
    """
    horizon = pomdp.horizon if horizon is None else horizon
    gamma = pomdp.discount if gamma is None else gamma
    branching = pomdp.n_obs * (pomdp.n_actions * pomdp.n_obs) ** horizon
    if branching > MAX_HISTORIES:
        raise EnumerationGuardError(f"{branching} histories exceed the guard of {MAX_HISTORIES}")
    rho_s = np.zeros(pomdp.n_states)
    rho_b: dict = {}
    rho_ba: dict = {}
    obs_t = pomdp.observation.T                      # (O, S)
    # one row per history: the unnormalized filter alpha = P(s_t, history)
    frontier = pomdp.p0[None, :] * obs_t
    for t in range(horizon + 1):
        frontier = frontier[frontier.sum(axis=1) > 0]
        if not len(frontier):
            break
        w = gamma ** t
        p_hist = frontier.sum(axis=1)
        beliefs = frontier / p_hist[:, None]
        keys = [tuple(k) for k in (np.round(beliefs, KEY_DECIMALS) + 0.0).tolist()]
        rho_s += w * frontier.sum(axis=0)
        pa = policy.probs_batch(keys, beliefs)
        for key, ph, row in zip(keys, (w * p_hist).tolist(), pa.tolist()):
            rho_b[key] = rho_b.get(key, 0.0) + ph
            for a, pr in enumerate(row):
                if pr > 0:
                    rho_ba[(key, a)] = rho_ba.get((key, a), 0.0) + ph * pr
        if t == horizon:
            break
        children = []
        for a in range(pomdp.n_actions):
            pred = (frontier * pa[:, a:a + 1]) @ pomdp.transition[:, a, :]
            children.append((pred[:, None, :] * obs_t[None]).reshape(-1, pomdp.n_states))
        frontier = np.concatenate(children)
    z = sum(gamma ** t for t in range(horizon + 1))
    return (VisitationMeasure({s: float(rho_s[s]) for s in range(pomdp.n_states)}, z),
            VisitationMeasure(rho_b, z), VisitationMeasure(rho_ba, z))


def monte_carlo_state_measure(pomdp: TabularPomdp, policy: BeliefPolicy, episodes: int,
                              rng: np.random.Generator, horizon: int | None = None,
                              gamma: float | None = None):
    """Sampled normalized ``rho(s)`` with per-atom standard errors.

    The policy acts on the exact filtered belief. Episodes are simulated as
    one vector; the policy is queried once per distinct belief per step.
    """
    horizon = pomdp.horizon if horizon is None else horizon
    gamma = pomdp.discount if gamma is None else gamma
    ns, na, no = pomdp.n_states, pomdp.n_actions, pomdp.n_obs
    z = sum(gamma ** t for t in range(horizon + 1))
    cdf_p0 = np.cumsum(pomdp.p0)
    state = np.minimum(np.searchsorted(cdf_p0, rng.random(episodes), side="right"), ns - 1)
    obs_cdf = np.cumsum(pomdp.observation, axis=1)
    tr_cdf = np.cumsum(pomdp.transition, axis=2)

    def sample_obs(s):
        return np.minimum((rng.random(len(s))[:, None] > obs_cdf[s]).sum(axis=1), no - 1)

    obs = sample_obs(state)
    b = pomdp.p0[None, :] * pomdp.observation[:, obs].T
    b /= b.sum(axis=1, keepdims=True)
    acc = np.zeros((episodes, ns))
    for t in range(horizon + 1):
        acc[np.arange(episodes), state] += gamma ** t / z
        if t == horizon:
            break
        keys = np.round(b, KEY_DECIMALS)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        rows = np.stack([policy.probs(u) for u in uniq])
        act_cdf = np.cumsum(rows[inv], axis=1)
        act = np.minimum((rng.random(episodes)[:, None] > act_cdf).sum(axis=1), na - 1)
        state = np.minimum((rng.random(episodes)[:, None] > tr_cdf[state, act]).sum(axis=1), ns - 1)
        obs = sample_obs(state)
        pred = np.einsum("ns,nst->nt", b, pomdp.transition[:, act, :].transpose(1, 0, 2))
        b = pred * pomdp.observation[:, obs].T
        b /= b.sum(axis=1, keepdims=True)
    mean = acc.mean(axis=0)
    se = acc.std(axis=0, ddof=1) / math.sqrt(episodes)
    return mean, se


# ---------------------------------------------------------------------------
# divergences


def _as_distribution(m) -> dict:
    if isinstance(m, VisitationMeasure):
        return m.normalized()
    if isinstance(m, dict):
        return dict(m)
    arr = np.asarray(m, dtype=np.float64)
    return {i: float(v) for i, v in enumerate(arr)}


def js_divergence(p, q) -> float:
    """``0.5 KL(p || m) + 0.5 KL(q || m)`` with ``m = (p + q) / 2``, natural log.

    Accepts measures, dicts or arrays; atoms missing on one side have zero mass.
    Each atom's contribution is computed in a form symmetric in (p, q) so
    ``js(p, q) == js(q, p)`` holds bit for bit.
    """
    pd, qd = _as_distribution(p), _as_distribution(q)
    total = 0.0
    keys = set(pd) | set(qd)
    try:
        keys = sorted(keys)
    except TypeError:
        keys = sorted(keys, key=repr)
    for k in keys:
        a, b = pd.get(k, 0.0), qd.get(k, 0.0)
        lo, hi = (a, b) if a <= b else (b, a)
        m = 0.5 * (lo + hi)
        term = 0.0
        if lo > 0:
            term += lo * math.log(lo / m)
        if hi > 0:
            term += hi * math.log(hi / m)
        total += 0.5 * term
    return min(max(total, 0.0), math.log(2.0))


@dataclass
class DpiReport:
    djs_s: float
    djs_b: float
    djs_ba: float
    holds: tuple[bool, bool]
    margins: tuple[float, float] = (0.0, 0.0)
    seed: int | None = None

    @property
    def ok(self) -> bool:
        return all(self.holds)

    @property
    def margin(self) -> float:
        return min(self.margins)

    def line(self) -> str:
        return (f"seed={self.seed} djs_s={self.djs_s:.12e} djs_b={self.djs_b:.12e} "
                f"djs_ba={self.djs_ba:.12e} margin={self.margin:.3e} holds={'yes' if self.ok else 'NO'}")


def check_dpi_chain(pomdp: TabularPomdp, policy_pi, policy_e, horizon: int | None = None,
                    gamma: float | None = None, tol: float = 1e-9) -> DpiReport:
    """Divergences between state, belief and belief-action visitation measures.

    Both policies must be functions of the belief so that ``p(s | b)`` does not
    depend on the policy.
    """
    for pol in (policy_pi, policy_e):
        if not isinstance(pol, BeliefPolicy):
            raise PreconditionError("both policies must depend on the history only through the belief")
    s_pi, b_pi, ba_pi = visitation_measures(pomdp, policy_pi, horizon, gamma)
    s_e, b_e, ba_e = visitation_measures(pomdp, policy_e, horizon, gamma)
    d_s, d_b, d_ba = js_divergence(s_pi, s_e), js_divergence(b_pi, b_e), js_divergence(ba_pi, ba_e)
    m1, m2 = d_b - d_s, d_ba - d_b
    return DpiReport(d_s, d_b, d_ba, (m1 >= -tol, m2 >= -tol), (m1, m2))


def random_instance(seed: int, max_size: int = 3, max_horizon: int = 4, gamma: float = 0.9):
    """A random POMDP (sizes in 2..max_size, horizon in 1..max_horizon) and two belief policies."""
    rng = np.random.default_rng(seed)
    ns, na, no = (int(rng.integers(2, max_size + 1)) for _ in range(3))
    horizon = int(rng.integers(1, max_horizon + 1))
    pomdp = TabularPomdp.random(rng, ns, na, no, horizon, gamma)
    pi = TabularPolicy(na, int(rng.integers(2 ** 31)))
    expert = TabularPolicy(na, int(rng.integers(2 ** 31)))
    return pomdp, pi, expert


def run_dpi_suite(instances: int, seed: int = 0, identical: bool = False) -> list[DpiReport]:
    """The randomized chain check; instance ``i`` uses seed ``seed + i``."""
    reports = []
    for i in range(instances):
        pomdp, pi, expert = random_instance(seed + i)
        if identical:
            expert = TabularPolicy(pi.n_actions, pi.seed)
        rep = check_dpi_chain(pomdp, pi, expert)
        rep.seed = seed + i
        reports.append(rep)
    return reports


# ---------------------------------------------------------------------------
# finite differences


def relative_error(a, f) -> np.ndarray:
    """Elementwise ``|a - f| / max(1e-8, |a| + |f|)``."""
    a, f = np.asarray(a, dtype=np.float64), np.asarray(f, dtype=np.float64)
    return np.abs(a - f) / np.maximum(1e-8, np.abs(a) + np.abs(f))


def block_relative_error(a, f) -> float:
    """The same ratio with Euclidean norms over a block of probed coordinates.

    Coordinates whose true derivative is far below the differencing noise
    (about 1e-10 at h = 1e-5) would dominate an elementwise maximum without
    saying anything about the analytic gradient; the norm form does not.
    """
    a, f = np.asarray(a, dtype=np.float64), np.asarray(f, dtype=np.float64)
    return float(np.linalg.norm(a - f) / max(1e-8, np.linalg.norm(a) + np.linalg.norm(f)))


@dataclass
class BlockReport:
    name: str
    max_rel_error: float
    coords: int
    passed: bool


@dataclass
class FdReport:
    blocks: list[BlockReport] = field(default_factory=list)
    reproducible: bool = True

    @property
    def passed(self) -> bool:
        return self.reproducible and all(b.passed for b in self.blocks)

    @property
    def max_rel_error(self) -> float:
        return max((b.max_rel_error for b in self.blocks), default=0.0)


def finite_diff_check(loss_builder: Callable[[], ad.Node], params: Sequence[ad.Node], h: float = 1e-5,
                      tol: float = 1e-4, max_coords: int = 200, rng: np.random.Generator | None = None,
                      names: Sequence[str] | None = None) -> FdReport:
    """Compare analytic gradients with central differences, per parameter block.

    At most ``max_coords`` coordinates per block are probed (a random subset
    when the block is larger); the block passes when
    :func:`block_relative_error` over them is below ``tol``.
    """
    rng = rng or np.random.default_rng(0)
    params = list(params)
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    ad.zero_grad(params)
    loss = loss_builder()
    with ad.no_grad():
        again = loss_builder().item()
    report = FdReport()
    if again != loss.item():
        report.reproducible = False
        return report
    ad.backward(loss)
    for name, p in zip(names, params):
        grad = np.zeros_like(p.value) if p.grad is None else p.grad
        n = p.value.size
        idx = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        fds = np.empty(len(idx))
        for n_, i in enumerate(idx):
            pos = np.unravel_index(i, p.value.shape)
            orig = p.value[pos]
            p.value[pos] = orig + h
            with ad.no_grad():
                up = loss_builder().item()
            p.value[pos] = orig - h
            with ad.no_grad():
                down = loss_builder().item()
            p.value[pos] = orig
            fds[n_] = (up - down) / (2 * h)
        worst = block_relative_error(grad.reshape(-1)[idx], fds)
        report.blocks.append(BlockReport(name, worst, len(idx), worst < tol))
    ad.zero_grad(params)
    return report


# ---------------------------------------------------------------------------
# gradient suite


def _u(rng, *shape):
    return rng.uniform(-2.0, 2.0, size=shape)


def _leaf(rng, *shape, name="x", low=-2.0, high=2.0):
    return ad.Node(rng.uniform(low, high, size=shape), requires_grad=True, name=name)


def _elementwise(op, low=-2.0, high=2.0):
    def build(rng):
        x = _leaf(rng, 3, 4, low=low, high=high)
        w = rng.standard_normal((3, 4))
        return (lambda: ad.sum(ad.mul(op(x), w))), [x]
    return build


def _binary(op, broadcast=False):
    def build(rng):
        a = _leaf(rng, 3, 4, name="a")
        b = _leaf(rng, *((4,) if broadcast else (3, 4)), name="b")
        w = rng.standard_normal((3, 4))
        return (lambda: ad.sum(ad.mul(op(a, b), w))), [a, b]
    return build


def _clip_build(rng):
    x = _leaf(rng, 3, 4)
    # keep probes away from the kinks at +-1
    x.value[np.abs(np.abs(x.value) - 1.0) < 1e-3] += 0.01
    w = rng.standard_normal((3, 4))
    return (lambda: ad.sum(ad.mul(ad.clip(x, -1.0, 1.0), w))), [x]


def _reduction(kind):
    def build(rng):
        x = _leaf(rng, 3, 4)
        if kind == "sum_axis":
            w = rng.standard_normal(3)
            return (lambda: ad.sum(ad.mul(ad.sum(x, axis=1), w))), [x]
        if kind == "mean":
            return (lambda: ad.mean(ad.square(x))), [x]
        if kind == "reshape":
            w = rng.standard_normal((2, 6))
            return (lambda: ad.sum(ad.mul(ad.reshape(ad.tanh(x), (2, 6)), w))), [x]
        raise KeyError(kind)
    return build


def _concat_build(rng):
    a, b = _leaf(rng, 3, 2, name="a"), _leaf(rng, 3, 4, name="b")
    w = rng.standard_normal((3, 6))
    return (lambda: ad.sum(ad.mul(ad.tanh(ad.concat([a, b], axis=-1)), w))), [a, b]


def _stack_build(rng):
    a, b = _leaf(rng, 4, name="a"), _leaf(rng, 4, name="b")
    w = rng.standard_normal((2, 4))
    return (lambda: ad.sum(ad.mul(ad.tanh(ad.stack([a, b])), w))), [a, b]


def _take_build(rng):
    x = _leaf(rng, 5, 3)
    idx = np.array([0, 2, 2, 4])
    w = rng.standard_normal((4, 3))
    return (lambda: ad.sum(ad.mul(ad.add(ad.take(x, idx), ad.take(x, (slice(1, 5),))), w))), [x]


def _matmul_build(rng):
    a, b = _leaf(rng, 3, 4, name="a"), _leaf(rng, 4, 2, name="b")
    w = rng.standard_normal((3, 2))
    return (lambda: ad.sum(ad.mul(ad.tanh(ad.matmul(a, b)), w))), [a, b]


def _linear_build(rng):
    x, wt, b = _leaf(rng, 3, 4, name="x"), _leaf(rng, 4, 2, name="w"), _leaf(rng, 2, name="b")
    w = rng.standard_normal((3, 2))
    return (lambda: ad.sum(ad.mul(ad.tanh(ad.linear(x, wt, b)), w))), [x, wt, b]


def _conv_build(rng):
    x = _leaf(rng, 2, 6, 3, name="x")
    k = ad.Node(0.5 * _u(rng, 3, 3, 2), requires_grad=True, name="kernels")
    b = _leaf(rng, 2, name="bias")
    w = rng.standard_normal((2, 6, 2))
    return (lambda: ad.sum(ad.mul(ad.tanh(ad.conv1d(x, k, b)), w))), [x, k, b]


def _gru_cell_build(rng):
    hs = 4
    h = _leaf(rng, 2, hs, name="h")
    xp = _leaf(rng, 2, 3 * hs, name="xproj")
    uzr = ad.Node(0.5 * _u(rng, hs, 2 * hs), requires_grad=True, name="u_zr")
    uh = ad.Node(0.5 * _u(rng, hs, hs), requires_grad=True, name="u_h")
    w = rng.standard_normal((2, hs))
    return (lambda: ad.sum(ad.mul(ad.gru_cell(h, xp, uzr, uh), w))), [h, xp, uzr, uh]


def _gru_seq_build(rng):
    hs = 3
    h = _leaf(rng, 2, hs, name="h0")
    xp = _leaf(rng, 4, 2, 3 * hs, name="xproj")
    uzr = ad.Node(0.5 * _u(rng, hs, 2 * hs), requires_grad=True, name="u_zr")
    uh = ad.Node(0.5 * _u(rng, hs, hs), requires_grad=True, name="u_h")
    w = rng.standard_normal((4, 2, hs))
    return (lambda: ad.sum(ad.mul(ad.gru_sequence(h, xp, uzr, uh), w))), [h, xp, uzr, uh]


def _named(module):
    pairs = list(module.named_parameters())
    return [p for _, p in pairs], [n for n, _ in pairs]


def _small_belief(rng, ks=(1, 2), encoding_space=False):
    from .belief import BeliefModule
    return BeliefModule(3, 2, rng, hidden_size=6, enc_width=5, ks=ks, encoding_space=encoding_space, act_code=4)


def _window_batch(rng, bm, length=6, rows=2):
    from .belief import Row, make_batch
    rs = []
    for _ in range(rows):
        obs = _u(rng, length, bm.obs_dim)
        act = _u(rng, length, bm.action_dim)
        rs.append(Row(obs, act, 0, length, 0, length))
    return make_batch(rs, bm.hidden_size)


def _belief_loss_build(kind):
    def build(rng):
        from . import belief as bl
        bm = _small_belief(rng, encoding_space=kind == "forward_enc")
        batch = _window_batch(rng, bm)
        if bm.encoding_space:
            # targets carry no gradient, so differences must not move them either
            frozen = copy.deepcopy(bm.encoder)
            bm.encode_targets = lambda obs: frozen(obs).value
        if kind == "ar":
            fn = lambda: bl.loss_ar(bm, batch)  # noqa: E731
        elif kind in ("forward", "forward_enc"):
            fn = lambda: bl.loss_forward(bm, batch, 2)  # noqa: E731
        elif kind == "inverse":
            fn = lambda: bl.loss_inverse(bm, batch, 2)  # noqa: E731
        elif kind == "action":
            fn = lambda: bl.loss_action(bm, batch, 2)  # noqa: E731
        elif kind == "total":
            weights = bl.RegWeights(0.2, 0.2, 0.2, (1, 2))
            fn = lambda: bl.loss_belief_total(bm, batch, weights, ad.scale(ad.sum(ad.take(bm.beliefs(batch), (-1,))), 0.1))  # noqa: E731
        elif kind == "encode":
            fn = lambda: ad.sum(ad.square(ad.take(bm.beliefs(batch), (-1,))))  # noqa: E731
        else:
            raise KeyError(kind)
        params, names = _named(bm)
        return fn, params, names
    return build


def _gru_step_build(rng):
    from .nn import GruCell, gru_step
    cell = GruCell(3, rng, hidden_size=4)
    for p in cell.parameters():
        p.value = p.value + 0.3 * rng.standard_normal(p.value.shape)
    h = _u(rng, 4)
    x = _u(rng, 3)
    params, names = _named(cell)
    return (lambda: ad.sum(gru_step(cell, h, x))), params, names


def _gauss_build(rng):
    from .nn import GaussianHead, gaussian_log_prob
    head = GaussianHead(3, 2, rng, init_log_std=-0.3)
    b, a = _u(rng, 4, 3), _u(rng, 4, 2)
    params, names = _named(head)
    return (lambda: ad.sum(gaussian_log_prob(head, b, a))), params, names


def _disc_build(rng):
    from .adversarial import Discriminator, disc_loss
    d = Discriminator(3, 2, rng)
    eb, ea, pb, pa = _u(rng, 4, 3), _u(rng, 4, 2), _u(rng, 5, 3), _u(rng, 5, 2)
    params, names = _named(d)
    return (lambda: disc_loss(d, eb, ea, pb, pa)), params, names


def _policy_build(rng):
    from .policy import PolicyNet, policy_loss
    pol = PolicyNet(3, 2, rng)
    b, a, adv = _u(rng, 5, 3), _u(rng, 5, 2), _u(rng, 5)
    params, names = _named(pol)
    return (lambda: policy_loss(pol, b, a, adv, 0.01)), params, names


def _critic_build(rng):
    from .policy import CriticNet, critic_loss
    cr = CriticNet(3, rng)
    b, ret = _u(rng, 5, 3), _u(rng, 5)
    params, names = _named(cr)
    return (lambda: critic_loss(cr, b, ret)), params, names


def _imitation_build(term):
    def build(rng):
        from .adversarial import Discriminator, ImitationTerms, imitation_loss_phi
        from .policy import PolicyNet
        bm = _small_belief(rng)
        d = Discriminator(bm.hidden_size, 2, rng)
        pol = PolicyNet(bm.hidden_size, 2, rng)
        batch = _window_batch(rng, bm, length=5, rows=2)
        ea, pa, q = _u(rng, 5, 2), _u(rng, 5, 2), _u(rng, 5)
        terms = ImitationTerms(term in ("expert", "all"), term in ("pg", "all"), term in ("pathwise", "all"))

        def fn():
            b = bm.beliefs(batch)
            eb = ad.take(b, (slice(None), 0))
            pb = ad.take(b, (slice(None), 1))
            return imitation_loss_phi(d, pol, eb, ea, pb, pa, q, terms)
        params, names = _named(bm)
        return fn, params, names
    return build


GRAD_SUITE: dict[str, Callable] = {
    "add": _binary(ad.add),
    "add_bias": _binary(ad.add, broadcast=True),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "mul_row": _binary(ad.mul, broadcast=True),
    "scale": _elementwise(lambda x: ad.scale(x, -1.7)),
    "neg": _elementwise(ad.neg),
    "tanh": _elementwise(ad.tanh),
    "sigmoid": _elementwise(ad.sigmoid),
    "log": _elementwise(ad.log, low=0.2, high=2.0),
    "exp": _elementwise(ad.exp),
    "softplus": _elementwise(ad.softplus),
    "square": _elementwise(ad.square),
    "clip": _clip_build,
    "sum": _reduction("sum_axis"),
    "mean": _reduction("mean"),
    "reshape": _reduction("reshape"),
    "concat": _concat_build,
    "stack": _stack_build,
    "slice": _take_build,
    "matmul": _matmul_build,
    "linear": _linear_build,
    "conv1d": _conv_build,
    "gru_cell": _gru_cell_build,
    "gru_sequence": _gru_seq_build,
    "gru_step": _gru_step_build,
    "gaussian_log_prob": _gauss_build,
    "encode_sequence": _belief_loss_build("encode"),
    "loss_ar": _belief_loss_build("ar"),
    "loss_forward": _belief_loss_build("forward"),
    "loss_forward_encoding_space": _belief_loss_build("forward_enc"),
    "loss_inverse": _belief_loss_build("inverse"),
    "loss_action": _belief_loss_build("action"),
    "loss_belief_total": _belief_loss_build("total"),
    "disc_loss": _disc_build,
    "policy_loss": _policy_build,
    "critic_loss": _critic_build,
    "imitation_pathwise": _imitation_build("pathwise"),
    "imitation_expert": _imitation_build("expert"),
    "imitation_policy_gradient": _imitation_build("pg"),
}


@dataclass
class GradResult:
    name: str
    instances: int
    failures: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def line(self) -> str:
        return (f"{self.name} instances={self.instances} failures={self.failures} "
                f"max_rel_error={self.max_rel_error:.3e} {'ok' if self.passed else 'FAIL'}")


def run_grad_suite(instances: int = 100, seed: int = 0, names: Sequence[str] | None = None,
                   max_coords: int = 6, tol: float = 1e-4, budget: int = 48) -> list[GradResult]:
    """Finite-difference check of every registered op and loss on random instances.

    Each instance probes at most ``budget`` coordinates spread over its
    parameter blocks (at least one per block, at most ``max_coords``); fresh
    instances pick fresh coordinates.
    """
    results = []
    for name in (names or list(GRAD_SUITE)):
        build = GRAD_SUITE[name]
        fails, worst = 0, 0.0
        for i in range(instances):
            rng = np.random.default_rng([seed, zlib.crc32(name.encode()), i])
            built = build(rng)
            fn, params = built[0], built[1]
            pnames = built[2] if len(built) > 2 else None
            per_block = max(1, min(max_coords, budget // len(params)))
            rep = finite_diff_check(fn, params, tol=tol, max_coords=per_block, rng=rng, names=pnames)
            worst = max(worst, rep.max_rel_error)
            fails += 0 if rep.passed else 1
        results.append(GradResult(name, instances, fails, worst))
    return results
