"""The recurrent belief module and its self-supervised losses.

Beliefs are computed time-major: a :class:`SeqBatch` holds ``B`` spans of
episodes, each span starting either at the episode start (zero hidden state)
or at a carried, detached hidden state. Loss anchors are positions inside the
span; prediction targets are read from each row's raw episode arrays, so a
``k``-step pair may reach past the unrolled span as long as it stays inside
the same episode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .nn import ActionSeqEncoder, GruCell, Mlp, Module, ObsEncoder


class NoPairsError(ValueError):
    """No (t, t +/- k) pair fits inside the supplied data."""


@dataclass
class RegWeights:
    lambda_f: float = 0.2
    lambda_i: float = 0.2
    lambda_a: float = 0.2
    ks: tuple[int, ...] = (1, 5)

    def __post_init__(self):
        self.ks = tuple(int(k) for k in self.ks)
        if min(self.lambda_f, self.lambda_i, self.lambda_a) < 0:
            raise ValueError("regularizer weights must be nonnegative")
        if not self.ks or min(self.ks) < 1:
            raise ValueError("offsets must be positive integers")

    @property
    def active(self) -> bool:
        return max(self.lambda_f, self.lambda_i, self.lambda_a) > 0


@dataclass
class Row:
    """One episode span for a :class:`SeqBatch`.

    ``observations``/``actions`` are the raw episode arrays known so far
    (``actions[t]`` follows ``observations[t]``). The belief is unrolled over
    ``[start, stop)`` and losses are anchored at ``[anchor_lo, anchor_hi)``.
    ``h0`` is the hidden state before ``start``; it must be None when
    ``start == 0``.
    """

    observations: np.ndarray
    actions: np.ndarray
    start: int
    stop: int
    anchor_lo: int
    anchor_hi: int
    h0: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.observations)
        if len(self.actions) < self.stop - 1 or not 0 <= self.start < self.stop <= n:
            raise ValueError(f"bad span [{self.start}, {self.stop}) for {n} observations")
        if not self.start <= self.anchor_lo <= self.anchor_hi <= self.stop:
            raise ValueError("anchors must lie inside the span")


@dataclass
class SeqBatch:
    obs: np.ndarray            # (T, B, obs_dim)
    prev_actions: np.ndarray   # (T, B, act_dim), zero before the first action of an episode
    h0: np.ndarray             # (B, hidden)
    rows: list[Row] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return self.obs.shape[0]

    @property
    def size(self) -> int:
        return self.obs.shape[1]


def make_batch(rows: Sequence[Row], hidden_size: int) -> SeqBatch:
    """Right-pad the spans to a common length and stack them time-major."""
    rows = list(rows)
    if not rows:
        raise ValueError("empty batch")
    od = rows[0].observations.shape[1]
    adim = rows[0].actions.shape[1]
    steps = max(r.stop - r.start for r in rows)
    obs = np.zeros((steps, len(rows), od))
    prev = np.zeros((steps, len(rows), adim))
    h0 = np.zeros((len(rows), hidden_size))
    for j, r in enumerate(rows):
        n = r.stop - r.start
        obs[:n, j] = r.observations[r.start:r.stop]
        lo = max(r.start - 1, 0)
        acts = r.actions[lo:r.stop - 1]
        if r.start == 0:
            prev[1:n, j] = acts
        else:
            prev[:n, j] = acts
        if r.h0 is not None:
            if r.start == 0:
                raise ValueError("a span starting at the episode start takes no carried state")
            h0[j] = r.h0
        elif r.start != 0:
            raise ValueError("a span starting mid-episode needs a carried hidden state")
    return SeqBatch(obs, prev, h0, rows)


class IdentityEncoder(Module):
    """Pass observations through unchanged (used to check the encoding-space variant)."""

    def __init__(self, obs_dim: int):
        super().__init__()
        self.width = obs_dim

    def __call__(self, obs) -> Node:
        return ad.as_node(obs)


class BeliefModule(Module):
    """GRU belief over encoded observations and previous actions, plus prediction heads.

    Heads are kept per offset ``k`` (``f{k}``, ``i{k}``, ``a{k}``); the past
    and future action encoders are shared across offsets and pad to
    ``max(ks)`` steps.
    """

    def __init__(self, obs_dim: int, action_dim: int, rng: np.random.Generator,
                 hidden_size: int = 256, enc_width: int = 64, ks: Sequence[int] = (1, 5),
                 encoding_space: bool = False, identity_encoder: bool = False, act_code: int = 32):
        super().__init__()
        self.obs_dim, self.action_dim, self.hidden_size = obs_dim, action_dim, hidden_size
        self.ks = tuple(sorted(set(int(k) for k in ks)))
        self.max_k = max(self.ks)
        self.encoding_space = encoding_space
        if identity_encoder:
            self.encoder = self.child("encoder", IdentityEncoder(obs_dim))
        else:
            self.encoder = self.child("encoder", ObsEncoder(obs_dim, rng, enc_width))
        ew = self.encoder.width
        self.gru = self.child("gru", GruCell(ew + action_dim, rng, hidden_size))
        self.ar_head = self.child("ar", Mlp(hidden_size + action_dim, obs_dim, rng))
        self.past_actions = self.child("past_actions", ActionSeqEncoder(action_dim, self.max_k, rng, out_width=act_code))
        self.future_actions = self.child("future_actions", ActionSeqEncoder(action_dim, self.max_k, rng, out_width=act_code))
        target_w = ew if encoding_space else obs_dim
        self.target_width = target_w
        self.heads: dict[str, Mlp] = {}
        for k in self.ks:
            self.heads[f"f{k}"] = self.child(f"f{k}", Mlp(hidden_size + act_code, target_w, rng))
            self.heads[f"i{k}"] = self.child(f"i{k}", Mlp(hidden_size + act_code, target_w, rng))
            self.heads[f"a{k}"] = self.child(f"a{k}", Mlp(hidden_size + ew, k * action_dim, rng))

    # -- belief computation ------------------------------------------------

    def gru_inputs(self, obs, prev_actions) -> Node:
        enc = self.encoder(obs)
        return ad.concat([enc, ad.as_node(prev_actions)], axis=-1)

    def encode_sequence(self, observations, prev_actions, h0=None) -> Node:
        """Beliefs ``b_1 .. b_T`` for a ``(T, obs_dim)`` or ``(T, B, obs_dim)`` sequence."""
        observations = np.asarray(observations, dtype=np.float64)
        prev_actions = np.asarray(prev_actions, dtype=np.float64)
        if observations.shape[-1] != self.obs_dim or prev_actions.shape[-1] != self.action_dim:
            raise ad.ShapeError(
                f"expected obs width {self.obs_dim} and action width {self.action_dim}, "
                f"got {observations.shape[-1]} and {prev_actions.shape[-1]}")
        if observations.shape[:-1] != prev_actions.shape[:-1]:
            raise ad.ShapeError("observation and action sequences differ in length")
        if h0 is None:
            h0 = np.zeros(observations.shape[1:-1] + (self.hidden_size,))
        xproj = self.gru.project_inputs(self.gru_inputs(observations, prev_actions))
        return ad.gru_sequence(h0, xproj, self.gru.u_zr, self.gru.u_h)

    def beliefs(self, batch: SeqBatch) -> Node:
        return self.encode_sequence(batch.obs, batch.prev_actions, batch.h0)

    def step(self, h, obs, prev_action) -> np.ndarray:
        """One online update without building a graph (rollouts and evaluation)."""
        with ad.no_grad():
            x = self.gru_inputs(np.asarray(obs, dtype=np.float64), np.asarray(prev_action, dtype=np.float64))
            return self.gru.step_projected(h, self.gru.project_inputs(x)).value

    def zero_state(self, n: int | None = None) -> np.ndarray:
        return np.zeros(self.hidden_size if n is None else (n, self.hidden_size))

    def encode_targets(self, obs: np.ndarray) -> np.ndarray:
        """Encoder outputs used as fixed prediction targets in the encoding-space variant."""
        with ad.no_grad():
            return self.encoder(obs).value


# ---------------------------------------------------------------------------
# pair enumeration


def _anchor_pairs(batch: SeqBatch, kind: str, k: int):
    """Valid anchors as (span index, row index, absolute time) arrays."""
    tix, bix, tabs = [], [], []
    for j, r in enumerate(batch.rows):
        n_obs, n_act = len(r.observations), len(r.actions)
        for t in range(r.anchor_lo, r.anchor_hi):
            if kind in ("f", "a"):
                ok = t + k < n_obs and t + k <= n_act
            elif kind == "i":
                ok = t - k >= 0
            elif kind == "ar":
                ok = t + 1 < n_obs and t < n_act
            else:
                raise ValueError(kind)
            if ok:
                tix.append(t - r.start)
                bix.append(j)
                tabs.append(t)
    return np.array(tix, dtype=np.int64), np.array(bix, dtype=np.int64), np.array(tabs, dtype=np.int64)


def _gather(beliefs: Node, tix: np.ndarray, bix: np.ndarray) -> Node:
    return ad.take(beliefs, (tix, bix))


def _mse(pred: Node, target: np.ndarray) -> Node:
    return ad.mean(ad.sum(ad.square(ad.sub(pred, target)), axis=-1))


def _action_seqs(batch: SeqBatch, bix, tabs, k: int, max_k: int, past: bool) -> np.ndarray:
    adim = batch.rows[0].actions.shape[1]
    out = np.zeros((len(bix), max_k, adim))
    for n, (j, t) in enumerate(zip(bix, tabs)):
        acts = batch.rows[j].actions
        out[n, :k] = acts[t - k:t] if past else acts[t:t + k]
    return out


def _target_obs(batch: SeqBatch, bix, tabs) -> np.ndarray:
    return np.stack([batch.rows[j].observations[t] for j, t in zip(bix, tabs)])


def _require(tix, what: str, k: int):
    if len(tix) == 0:
        raise NoPairsError(f"{what}: no valid pair for k={k} (window shorter than k+1)")


def _beliefs_or_compute(bm: BeliefModule, batch: SeqBatch, beliefs: Node | None) -> Node:
    return bm.beliefs(batch) if beliefs is None else beliefs


def encoding_space_targets(bm: BeliefModule, obs: np.ndarray) -> np.ndarray:
    """Targets for the forward and inverse losses: raw observations, or detached encodings."""
    return bm.encode_targets(obs) if bm.encoding_space else np.asarray(obs, dtype=np.float64)


# ---------------------------------------------------------------------------
# losses


def loss_ar(bm: BeliefModule, batch: SeqBatch, beliefs: Node | None = None) -> Node:
    """Mean of ``||o_{t+1} - g_ar(b_t, a_t)||^2`` over anchors with a next observation."""
    tix, bix, tabs = _anchor_pairs(batch, "ar", 1)
    _require(tix, "loss_ar", 1)
    b = _gather(_beliefs_or_compute(bm, batch, beliefs), tix, bix)
    acts = np.stack([batch.rows[j].actions[t] for j, t in zip(bix, tabs)])
    pred = bm.ar_head(ad.concat([b, acts], axis=-1))
    return _mse(pred, _target_obs(batch, bix, tabs + 1))


def loss_forward(bm: BeliefModule, batch: SeqBatch, k: int, beliefs: Node | None = None) -> Node:
    """Mean of ``||o_{t+k} - g_f(b_t, a_{t:t+k-1})||^2``."""
    tix, bix, tabs = _anchor_pairs(batch, "f", k)
    _require(tix, "loss_forward", k)
    b = _gather(_beliefs_or_compute(bm, batch, beliefs), tix, bix)
    code = bm.future_actions(_action_seqs(batch, bix, tabs, k, bm.max_k, past=False), np.full(len(bix), k))
    pred = bm.heads[f"f{k}"](ad.concat([b, code], axis=-1))
    return _mse(pred, encoding_space_targets(bm, _target_obs(batch, bix, tabs + k)))


def loss_inverse(bm: BeliefModule, batch: SeqBatch, k: int, beliefs: Node | None = None) -> Node:
    """Mean of ``||o_{t-k} - g_i(b_t, a_{t-k:t-1})||^2``."""
    tix, bix, tabs = _anchor_pairs(batch, "i", k)
    _require(tix, "loss_inverse", k)
    b = _gather(_beliefs_or_compute(bm, batch, beliefs), tix, bix)
    code = bm.past_actions(_action_seqs(batch, bix, tabs, k, bm.max_k, past=True), np.full(len(bix), k))
    pred = bm.heads[f"i{k}"](ad.concat([b, code], axis=-1))
    return _mse(pred, encoding_space_targets(bm, _target_obs(batch, bix, tabs - k)))


def loss_action(bm: BeliefModule, batch: SeqBatch, k: int, beliefs: Node | None = None) -> Node:
    """Mean of ``||a_{t:t+k-1} - g_a(b_t, Enc(o_{t+k}))||^2`` with actions flattened."""
    tix, bix, tabs = _anchor_pairs(batch, "a", k)
    _require(tix, "loss_action", k)
    b = _gather(_beliefs_or_compute(bm, batch, beliefs), tix, bix)
    enc = bm.encoder(_target_obs(batch, bix, tabs + k))
    pred = bm.heads[f"a{k}"](ad.concat([b, enc], axis=-1))
    target = _action_seqs(batch, bix, tabs, k, k, past=False).reshape(len(bix), -1)
    return _mse(pred, target)


@dataclass
class RegTerms:
    """Regularizer values per (loss, k); ``total`` is the weighted sum as a graph node."""

    total: Node | None
    parts: dict[str, float]


def regularizer_terms(bm: BeliefModule, batch: SeqBatch, weights: RegWeights,
                      beliefs: Node | None = None) -> RegTerms:
    """``sum_k lambda_f L^f_k + lambda_i L^i_k + lambda_a L^a_k``; terms without pairs are skipped.

    Terms whose weight is zero are not built at all.
    """
    beliefs = _beliefs_or_compute(bm, batch, beliefs)
    total: Node | None = None
    parts: dict[str, float] = {}
    for k in weights.ks:
        for name, lam, fn in (("f", weights.lambda_f, loss_forward),
                              ("i", weights.lambda_i, loss_inverse),
                              ("a", weights.lambda_a, loss_action)):
            if lam == 0:
                continue
            try:
                term = fn(bm, batch, k, beliefs)
            except NoPairsError:
                continue
            parts[f"{name}{k}"] = term.item()
            weighted = ad.scale(term, lam)
            total = weighted if total is None else ad.add(total, weighted)
    return RegTerms(total, parts)


def loss_belief_total(bm: BeliefModule, batch: SeqBatch, weights: RegWeights,
                      imitation_term: Node, beliefs: Node | None = None) -> Node:
    """``L^IM + sum_k (lambda_f L^f_k + lambda_i L^i_k + lambda_a L^a_k)``."""
    if not weights.active:
        return imitation_term
    reg = regularizer_terms(bm, batch, weights, beliefs)
    return imitation_term if reg.total is None else ad.add(imitation_term, reg.total)
