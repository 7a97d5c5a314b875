"""The joint training loop: rollouts, policy, discriminator and belief updates.

One iteration follows the order policy -> discriminator -> belief ->
off-policy belief. ``run.num_envs`` environments are stepped in lockstep in
this thread, so every rollout row has the same length and episodes end
together (all toys stop on a time limit only).
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .adversarial import Discriminator, ImitationTerms, disc_loss, imitation_loss_phi, shaped_reward
from .belief import BeliefModule, RegWeights, Row, loss_ar, make_batch, regularizer_terms
from .demos import DemoBuffer, ReplayBuffer, Trajectory, expert_policy, record_demos
from .envs import PomdpEnv, ground_truth_return, make_env, privileged
from .nn import load_checkpoint, save_checkpoint
from .policy import CriticNet, GaeParams, PolicyNet, critic_loss, gae_advantages, policy_loss

logger = logging.getLogger(__name__)

MODES = ("bmil", "bmil-noreg", "task-agnostic", "gail-ff", "gail-obstack", "bmil-encoding-space")
REG_ONLY = ("", "forward", "inverse", "action")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class EnvConfig:
    id: str = "masked-pendulum"
    demos: str = ""            # demo file; empty records demos in memory from demo_seed
    demo_count: int = 50
    demo_seed: int = 1000


@dataclass
class RunConfig:
    mode: str = "bmil"
    seed: int = 0
    total_steps: int = 300_000
    num_envs: int = 16
    out_dir: str = "runs"
    name: str = ""
    wall_clock: bool = False


@dataclass
class AlgoConfig:
    c: int = 5
    gamma: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 0.001
    value_coef: float = 0.5
    normalize_advantages: bool = False
    disc_steps: int = 1
    off_policy_steps: int = 2
    off_policy_batch: int = 16
    expert_batch: int = 16
    replay_capacity: int = 1000
    warmup: str = "carry"      # "rerun": re-encode from the episode start; "carry": start from the stored state
    im_expert: bool = True
    im_policy_gradient: bool = True
    im_pathwise: bool = True
    disc_belief_only: bool = False


@dataclass
class RegConfig:
    lambda1: float = 0.2
    lambda2: float = 0.2
    lambda3: float = 0.2
    k: tuple = (1, 5)
    only: str = ""             # "", "forward", "inverse" or "action"


@dataclass
class NetConfig:
    hidden: int = 256
    enc_width: int = 64
    stack: int = 4             # frames fed to gail-obstack (current + 3 previous)
    init_log_std: float = 0.0


@dataclass
class OptimConfig:
    lr: float = 3e-4
    decay: float = 0.99
    eps: float = 1e-8
    max_grad_norm: float = 0.5  # 0 disables clipping


@dataclass
class EvalConfig:
    interval: int = 5000
    episodes: int = 10
    seed: int = 2024


@dataclass
class TrainConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    run: RunConfig = field(default_factory=RunConfig)
    algo: AlgoConfig = field(default_factory=AlgoConfig)
    reg: RegConfig = field(default_factory=RegConfig)
    net: NetConfig = field(default_factory=NetConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = ("env", "run", "algo", "reg", "net", "optim", "eval")

    # -- dotted keys ----------------------------------------------------------
    @classmethod
    def keys(cls) -> list[str]:
        cfg = cls()
        return [f"{s}.{f.name}" for s in cls.SECTIONS for f in dataclasses.fields(getattr(cfg, s))]

    def resolve(self, key: str) -> str:
        if "." in key:
            if key not in self.keys():
                raise KeyError(f"unknown config key {key!r}")
            return key
        hits = [k for k in self.keys() if k.split(".", 1)[1] == key]
        if len(hits) != 1:
            raise KeyError(f"unknown or ambiguous config key {key!r}")
        return hits[0]

    def get(self, key: str):
        sec, name = self.resolve(key).split(".", 1)
        return getattr(getattr(self, sec), name)

    def set(self, key: str, value) -> None:
        sec, name = self.resolve(key).split(".", 1)
        section = getattr(self, sec)
        current = getattr(section, name)
        setattr(section, name, _coerce(value, current, key))

    def to_dict(self) -> dict[str, Any]:
        return {k: (list(v) if isinstance(v := self.get(k), tuple) else v) for k in self.keys()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        cfg = cls()
        for k, v in data.items():
            cfg.set(k, v)
        return cfg

    def to_text(self) -> str:
        parser = configparser.ConfigParser()
        for sec in self.SECTIONS:
            parser[sec] = {f.name: _format(getattr(getattr(self, sec), f.name))
                           for f in dataclasses.fields(getattr(self, sec))}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        parser = configparser.ConfigParser()
        parser.read_string(text)
        cfg = cls()
        for sec in parser.sections():
            if sec not in cls.SECTIONS:
                raise KeyError(f"unknown config section [{sec}]")
            for name, value in parser[sec].items():
                cfg.set(f"{sec}.{name}", value)
        return cfg

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def validate(self) -> None:
        if self.run.mode not in MODES:
            raise ValueError(f"unknown mode {self.run.mode!r}; choose from {', '.join(MODES)}")
        if self.reg.only not in REG_ONLY:
            raise ValueError(f"reg.only must be one of {REG_ONLY}")
        if self.algo.warmup not in ("rerun", "carry"):
            raise ValueError("algo.warmup must be 'rerun' or 'carry'")
        if self.algo.c < 1 or self.run.num_envs < 1 or self.run.total_steps < 1:
            raise ValueError("c, num_envs and total_steps must be positive")
        if min(self.reg.lambda1, self.reg.lambda2, self.reg.lambda3) < 0:
            raise ValueError("regularizer weights must be nonnegative")
        if not self.reg.k or min(self.reg.k) < 1:
            raise ValueError("offsets k must be positive")

    # -- derived settings -------------------------------------------------------
    @property
    def uses_belief(self) -> bool:
        return not self.run.mode.startswith("gail")

    def reg_weights(self) -> RegWeights:
        l1, l2, l3 = self.reg.lambda1, self.reg.lambda2, self.reg.lambda3
        if self.run.mode in ("bmil-noreg", "task-agnostic") or not self.uses_belief:
            l1 = l2 = l3 = 0.0
        only = self.reg.only
        if only:
            l1 = l1 if only == "forward" else 0.0
            l2 = l2 if only == "inverse" else 0.0
            l3 = l3 if only == "action" else 0.0
        return RegWeights(l1, l2, l3, tuple(self.reg.k))

    def run_name(self) -> str:
        return self.run.name or f"{self.env.id}_{self.run.mode}_s{self.run.seed}"


def _coerce(value, current, key):
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        s = str(value).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(current, tuple):
        if isinstance(value, (list, tuple)):
            return tuple(int(v) for v in value)
        return tuple(int(v) for v in str(value).replace(" ", "").strip("{}()[]").split(",") if v)
    if isinstance(current, int):
        return int(float(value)) if isinstance(value, str) and "e" in value.lower() else int(value)
    if isinstance(current, float):
        return float(value)
    return str(value)


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


# ---------------------------------------------------------------------------
# metrics


def metrics_header(ks) -> list[str]:
    cols = ["iteration", "env_steps", "return_mean", "return_std", "disc_loss", "policy_loss",
            "critic_loss", "loss_im", "loss_ar"]
    for k in ks:
        cols += [f"loss_f{k}", f"loss_i{k}", f"loss_a{k}"]
    return cols + ["mean_reward", "belief_var", "wall_clock"]


class _Averager:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.counts: dict[str, int] = {}

    def add(self, key: str, value: float) -> None:
        self.sums[key] = self.sums.get(key, 0.0) + float(value)
        self.counts[key] = self.counts.get(key, 0) + 1

    def pop(self) -> dict[str, float]:
        out = {k: self.sums[k] / self.counts[k] for k in self.sums}
        self.sums, self.counts = {}, {}
        return out


def _fmt(x) -> str:
    if x is None or x == "":
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


class TrainingAborted(RuntimeError):
    """A loss or gradient went non-finite; a diagnostic dump was written."""


# ---------------------------------------------------------------------------
# agent


class Agent:
    """All networks of one run plus the feature pipeline that feeds them."""

    def __init__(self, cfg: TrainConfig, obs_dim: int, action_dim: int, rng: np.random.Generator):
        self.cfg = cfg
        self.obs_dim, self.action_dim = obs_dim, action_dim
        self.belief: BeliefModule | None = None
        if cfg.uses_belief:
            self.belief = BeliefModule(obs_dim, action_dim, rng, hidden_size=cfg.net.hidden,
                                       enc_width=cfg.net.enc_width, ks=cfg.reg.k,
                                       encoding_space=cfg.run.mode == "bmil-encoding-space")
            width = cfg.net.hidden
        elif cfg.run.mode == "gail-obstack":
            width = obs_dim * cfg.net.stack
        else:
            width = obs_dim
        self.feature_width = width
        self.policy = PolicyNet(width, action_dim, rng, init_log_std=cfg.net.init_log_std)
        self.critic = CriticNet(width, rng)
        self.disc = Discriminator(width, action_dim, rng, belief_only=cfg.algo.disc_belief_only)

    def modules(self) -> dict:
        mods = {"policy": self.policy, "critic": self.critic, "disc": self.disc}
        if self.belief is not None:
            mods["belief"] = self.belief
        return mods

    def state_dict(self):
        out = {}
        for prefix, mod in self.modules().items():
            for name, arr in mod.state_dict().items():
                out[f"{prefix}.{name}"] = arr
        return out

    def load_state_dict(self, tensors) -> None:
        for prefix, mod in self.modules().items():
            sub = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
            mod.load_state_dict(sub)

    def all_parameters(self):
        return [p for m in self.modules().values() for p in m.parameters()]

    # feature-based baselines ---------------------------------------------------
    def features(self, obs_history: np.ndarray, t: np.ndarray | int) -> np.ndarray:
        """Policy input for observation-based baselines at time(s) ``t`` of one episode."""
        t = np.asarray(t)
        if self.cfg.run.mode != "gail-obstack":
            return obs_history[t]
        n = self.cfg.net.stack
        idx = np.maximum(t[..., None] - np.arange(n - 1, -1, -1), 0)
        return obs_history[idx].reshape(t.shape + (n * self.obs_dim,))


class _EnvSlot:
    """Per-environment episode bookkeeping during training."""

    def __init__(self, env: PomdpEnv, rng: np.random.Generator):
        self.env, self.rng = env, rng
        self.obs: list[np.ndarray] = []
        self.act: list[np.ndarray] = []
        self.hidden: list[np.ndarray] = []
        self.h: np.ndarray | None = None

    def reset(self, hidden_size: int | None):
        self.obs = [self.env.reset(self.rng)]
        self.act, self.hidden = [], []
        self.h = None if hidden_size is None else np.zeros(hidden_size)

    @property
    def t(self) -> int:
        return len(self.act)


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    def __init__(self, cfg: TrainConfig, demos: DemoBuffer | None = None):
        cfg.validate()
        self.cfg = cfg
        seeds = np.random.SeedSequence(cfg.run.seed).spawn(6)
        init_rng, env_seed, self.act_rng, self.fetch_rng, self.replay_rng, _ = (np.random.default_rng(s) for s in seeds)
        self.envs = [make_env(cfg.env.id) for _ in range(cfg.run.num_envs)]
        env0 = self.envs[0]
        if any(e.max_episode_steps != env0.max_episode_steps for e in self.envs):
            raise ValueError("lockstep rollouts need equal episode lengths")
        self.obs_dim, self.action_dim = env0.observation_dim, env0.action_dim
        self.demos = demos if demos is not None else load_or_record_demos(cfg)
        self._check_demos()
        self.agent = Agent(cfg, self.obs_dim, self.action_dim, init_rng)
        env_rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(env_seed.integers(2 ** 63)).spawn(cfg.run.num_envs)]
        self.slots = [_EnvSlot(e, r) for e, r in zip(self.envs, env_rngs)]
        self.replay = ReplayBuffer(cfg.algo.replay_capacity)
        self.weights = cfg.reg_weights()
        self.gae = GaeParams(cfg.algo.gamma, cfg.algo.gae_lambda)
        self.terms = ImitationTerms(cfg.algo.im_expert, cfg.algo.im_policy_gradient, cfg.algo.im_pathwise)
        self.iterations = -(-cfg.run.total_steps // (cfg.algo.c * cfg.run.num_envs))
        mode = cfg.run.mode
        self.do_belief_update = cfg.uses_belief and mode != "task-agnostic"
        self.n_off = cfg.algo.off_policy_steps if (mode == "task-agnostic" or self.weights.active) and cfg.uses_belief else 0
        phi_steps = self.iterations * ((1 if self.do_belief_update else 0) + self.n_off)
        self.opt_theta = self._optim(self.iterations)
        self.opt_omega = self._optim(self.iterations * cfg.algo.disc_steps)
        self.opt_phi = self._optim(max(phi_steps, 1))
        self.theta_params = self.agent.policy.parameters() + self.agent.critic.parameters()
        self.omega_params = self.agent.disc.parameters()
        self.phi_params = self.agent.belief.parameters() if self.agent.belief is not None else []
        self.expert_hidden: dict[int, np.ndarray] = {}
        self.env_steps = 0
        self.iteration = 0
        self.rows: list[dict] = []
        self._avg = _Averager()
        self._start = time.perf_counter()
        self._last_losses: dict[str, float] = {}

    def _optim(self, total: int) -> ad.RmsPropState:
        o = self.cfg.optim
        return ad.RmsPropState(total_steps=max(int(total), 1), base_lr=o.lr, decay=o.decay, epsilon=o.eps,
                               max_grad_norm=o.max_grad_norm if o.max_grad_norm > 0 else None)

    def _check_demos(self):
        meta_env = self.demos.meta.get("env_id")
        if meta_env is not None and meta_env != self.cfg.env.id:
            raise ValueError(f"demos were recorded on {meta_env!r}, training env is {self.cfg.env.id!r}")
        tr = self.demos[0]
        if tr.observations.shape[1] != self.obs_dim or tr.actions.shape[1] != self.action_dim:
            raise ValueError("demo dimensions do not match the environment")

    @property
    def hidden_size(self) -> int | None:
        return self.cfg.net.hidden if self.cfg.uses_belief else None

    # -- main loop ---------------------------------------------------------------
    def train(self) -> dict:
        """Run every iteration; returns the final metrics row."""
        for s in self.slots:
            s.reset(self.hidden_size)
        next_eval = self.cfg.eval.interval
        while self.iteration < self.iterations:
            try:
                self.step()
            except ad.NonFiniteError as exc:
                self._abort(exc)
            if self.env_steps >= next_eval or self.iteration == self.iterations:
                self.log_row()
                while next_eval <= self.env_steps:
                    next_eval += self.cfg.eval.interval
        return self.rows[-1]

    def step(self) -> None:
        """One iteration of the algorithm."""
        roll = self.rollout()
        self.update_policy(roll)
        expert = self.fetch_expert()
        batch, beliefs = self.encode_for_update(roll, expert)
        for _ in range(self.cfg.algo.disc_steps):
            self.update_disc(roll, expert, batch, beliefs)
        if self.do_belief_update:
            self.update_belief(roll, expert, batch, beliefs)
        for _ in range(self.n_off):
            self.off_policy_update()
        if roll["done"]:
            for s in self.slots:
                s.reset(self.hidden_size)
        self.iteration += 1

    # -- (a) rollout ---------------------------------------------------------------
    def rollout(self) -> dict:
        cfg, agent = self.cfg, self.agent
        n = len(self.slots)
        start = self.slots[0].t
        steps = min(cfg.algo.c, self.envs[0].max_episode_steps - start)
        h_start = None if agent.belief is None else np.stack([s.h for s in self.slots])
        feats, samples, executed, rewards, values = [], [], [], [], []
        for _ in range(steps):
            obs = np.stack([s.obs[-1] for s in self.slots])
            if agent.belief is not None:
                prev = np.stack([s.act[-1] if s.act else np.zeros(self.action_dim) for s in self.slots])
                h = agent.belief.step(np.stack([s.h for s in self.slots]), obs, prev)
                for s, hi in zip(self.slots, h):
                    s.h = hi
                    s.hidden.append(hi.astype(np.float32))
                f = h
            else:
                f = np.stack([agent.features(np.array(s.obs), s.t) for s in self.slots])
            a = agent.policy.sample(f, self.act_rng)
            a_exec = np.stack([s.env.clip_action(ai) for s, ai in zip(self.slots, a)])
            r = shaped_reward(agent.disc, f, a_exec)
            v = agent.critic.values(f)
            done = False
            for s, ai in zip(self.slots, a_exec):
                o, done = s.env.step(ai)
                s.act.append(ai)
                s.obs.append(o)
            feats.append(f)
            samples.append(a)
            executed.append(a_exec)
            rewards.append(r)
            values.append(v)
        self.env_steps += steps * n
        done = self.slots[0].env.done
        if done:
            bootstrap = np.zeros(n)
            for s in self.slots:
                s.obs.pop()  # the post-terminal reading is not part of the stored episode
                traj = Trajectory(np.array(s.obs), np.array(s.act), True,
                                  hidden=np.array(s.hidden) if s.hidden else None)
                self.replay.add(traj)
        else:
            obs = np.stack([s.obs[-1] for s in self.slots])
            if agent.belief is not None:
                prev = np.stack([s.act[-1] for s in self.slots])
                f = agent.belief.step(np.stack([s.h for s in self.slots]), obs, prev)
            else:
                f = np.stack([agent.features(np.array(s.obs), s.t) for s in self.slots])
            bootstrap = agent.critic.values(f)
        dones = np.zeros((steps, n))
        if done:
            dones[-1] = 1.0
        rewards = np.array(rewards)
        values = np.array(values)
        adv, ret = gae_advantages(rewards, values, dones, bootstrap, self.gae)
        self._avg.add("mean_reward", float(rewards.mean()))
        return {"start": start, "steps": steps, "h_start": h_start, "feats": np.array(feats),
                "samples": np.array(samples), "executed": np.array(executed), "adv": adv, "ret": ret,
                "done": done,
                "episodes": [(np.array(s.obs), np.array(s.act)) for s in self.slots]}

    # -- (b) policy ----------------------------------------------------------------
    def update_policy(self, roll: dict) -> None:
        agent, cfg = self.agent, self.cfg
        ad.zero_grad(self.theta_params)
        feats = roll["feats"].reshape(-1, roll["feats"].shape[-1])
        pl = policy_loss(agent.policy, feats, roll["samples"].reshape(len(feats), -1), roll["adv"].reshape(-1),
                         cfg.algo.entropy_coef, cfg.algo.normalize_advantages)
        cl = critic_loss(agent.critic, feats, roll["ret"].reshape(-1))
        loss = ad.add(pl, ad.scale(cl, cfg.algo.value_coef))
        ad.backward(loss)
        ad.rmsprop_step(self.theta_params, self.opt_theta)
        self._avg.add("policy_loss", pl.item())
        self._avg.add("critic_loss", cl.item())

    # -- (c) expert windows and discriminator ---------------------------------------
    def fetch_expert(self) -> list:
        """Expert windows of length ``c`` (trajectory, offset) for this iteration."""
        c = self.cfg.algo.c
        out = []
        for slot in range(self.cfg.algo.expert_batch):
            if self.cfg.uses_belief and self.cfg.algo.warmup == "carry":
                w = self.demos.next_window(slot, c, self.fetch_rng)
                h0 = None if w.offset == 0 else self.expert_hidden.get(slot)
                if w.offset > 0 and h0 is None:
                    raise RuntimeError("missing carried expert state")
            else:
                w = self.demos.fetch_window(c, self.fetch_rng)
                h0 = None
            out.append((w, h0, slot))
        return out

    def encode_for_update(self, roll: dict, expert: list):
        """Rows for the on-policy rollout and the expert windows, encoded with the current beliefs."""
        agent = self.agent
        if agent.belief is None:
            return None, None
        carry = self.cfg.algo.warmup == "carry"
        rows = []
        s0, steps = roll["start"], roll["steps"]
        for j, (obs, act) in enumerate(roll["episodes"]):
            if carry and s0 > 0:
                rows.append(Row(obs, act, s0, s0 + steps, s0, s0 + steps, roll["h_start"][j]))
            else:
                rows.append(Row(obs, act, 0, s0 + steps, s0, s0 + steps))
        for w, h0, _ in expert:
            tr = w.trajectory
            lo, hi = w.offset, w.offset + w.length
            if carry and lo > 0:
                rows.append(Row(tr.observations, tr.actions, lo, hi, lo, hi, h0))
            else:
                rows.append(Row(tr.observations, tr.actions, 0, hi, lo, hi))
        batch = make_batch(rows, self.cfg.net.hidden)
        beliefs = agent.belief.beliefs(batch)
        if carry:
            n = len(roll["episodes"])
            for j, (w, _, slot) in enumerate(expert):
                r = rows[n + j]
                self.expert_hidden[slot] = beliefs.value[r.anchor_hi - 1 - r.start, n + j].copy()
        return batch, beliefs

    def _policy_index(self, batch, roll):
        """(time, row) indices of the rollout steps in time-major order."""
        n, steps, s0 = len(roll["episodes"]), roll["steps"], roll["start"]
        tix = np.array([s0 + t - batch.rows[j].start for t in range(steps) for j in range(n)])
        bix = np.array([j for _ in range(steps) for j in range(n)])
        return tix, bix

    def _expert_index(self, batch, roll, expert):
        n = len(roll["episodes"])
        tix, bix, acts = [], [], []
        for j in range(len(expert)):
            r = batch.rows[n + j]
            for t in range(r.anchor_lo, r.anchor_hi):
                tix.append(t - r.start)
                bix.append(n + j)
                acts.append(r.actions[t])
        return np.array(tix), np.array(bix), np.array(acts)

    def _expert_features(self, expert):
        feats, acts = [], []
        for w, _, _ in expert:
            ts = np.arange(w.offset, w.offset + w.length)
            feats.append(self.agent.features(w.trajectory.observations, ts))
            acts.append(w.actions)
        return np.concatenate(feats), np.concatenate(acts)

    def update_disc(self, roll, expert, batch, beliefs) -> None:
        agent = self.agent
        pol_a = roll["executed"].reshape(-1, self.action_dim)
        if beliefs is None:
            eb, ea = self._expert_features(expert)
            pb = roll["feats"].reshape(len(pol_a), -1)
        else:
            tix, bix, ea = self._expert_index(batch, roll, expert)
            eb = beliefs.value[tix, bix]
            ptix, pbix = self._policy_index(batch, roll)
            pb = beliefs.value[ptix, pbix]
        ad.zero_grad(self.omega_params)
        loss = disc_loss(agent.disc, eb, ea, pb, pol_a)
        ad.backward(loss)
        ad.rmsprop_step(self.omega_params, self.opt_omega)
        self._avg.add("disc_loss", loss.item())

    # -- (d) belief -------------------------------------------------------------------
    def update_belief(self, roll, expert, batch, beliefs) -> None:
        agent = self.agent
        tix, bix, ea = self._expert_index(batch, roll, expert)
        ptix, pbix = self._policy_index(batch, roll)
        eb = ad.take(beliefs, (tix, bix))
        pb = ad.take(beliefs, (ptix, pbix))
        q_hat = -roll["adv"].reshape(-1)
        ad.zero_grad(self.agent.all_parameters())
        im = imitation_loss_phi(agent.disc, agent.policy, eb, ea, pb, roll["executed"].reshape(-1, self.action_dim),
                                q_hat, self.terms, sampled_a=roll["samples"].reshape(-1, self.action_dim))
        total = im
        if self.weights.active:
            reg = regularizer_terms(agent.belief, batch, self.weights, beliefs)
            for k, v in reg.parts.items():
                self._avg.add(f"loss_{k}", v)
            if reg.total is not None:
                total = ad.add(im, reg.total)
        ad.backward(total)
        ad.rmsprop_step(self.phi_params, self.opt_phi)
        self._avg.add("loss_im", im.item())

    # -- (e) off-policy ---------------------------------------------------------------
    def off_policy_update(self) -> None:
        c = self.cfg.algo.c
        eligible = [tr for tr in self.replay if tr.length >= c]
        if not eligible:
            return
        rows = []
        carry = self.cfg.algo.warmup == "carry"
        for _ in range(self.cfg.algo.off_policy_batch):
            w = self.replay.fetch_window(c, self.replay_rng)
            tr = w.trajectory
            lo, hi = w.offset, w.offset + w.length
            if carry and lo > 0 and tr.hidden is not None:
                rows.append(Row(tr.observations, tr.actions, lo, hi, lo, hi, tr.hidden[lo - 1].astype(np.float64)))
            else:
                rows.append(Row(tr.observations, tr.actions, 0, hi, lo, hi))
        bm = self.agent.belief
        batch = make_batch(rows, self.cfg.net.hidden)
        beliefs = bm.beliefs(batch)
        ad.zero_grad(self.phi_params)
        if self.cfg.run.mode == "task-agnostic":
            loss = loss_ar(bm, batch, beliefs)
            self._avg.add("loss_ar", loss.item())
        else:
            reg = regularizer_terms(bm, batch, self.weights, beliefs)
            if reg.total is None:
                return
            loss = reg.total
            for k, v in reg.parts.items():
                self._avg.add(f"loss_{k}", v)
        ad.backward(loss)
        ad.rmsprop_step(self.phi_params, self.opt_phi)

    # -- logging ---------------------------------------------------------------------
    def log_row(self) -> dict:
        ev = evaluate_agent(self.agent, self.cfg.env.id, self.cfg.eval.episodes,
                            np.random.default_rng(self.cfg.eval.seed))
        avg = self._avg.pop()
        row = {"iteration": self.iteration, "env_steps": self.env_steps,
               "return_mean": ev["mean"], "return_std": ev["std"], "belief_var": ev["belief_var"],
               "wall_clock": (time.perf_counter() - self._start) if self.cfg.run.wall_clock else ""}
        for col in metrics_header(self.cfg.reg.k):
            if col not in row:
                row[col] = avg.get(col, "")
        self.rows.append(row)
        logger.info("iter %d steps %d return %.2f +- %.2f", self.iteration, self.env_steps, ev["mean"], ev["std"])
        return row

    def metrics_text(self) -> str:
        header = metrics_header(self.cfg.reg.k)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in self.rows:
            w.writerow([_fmt(row[c]) for c in header])
        return buf.getvalue()

    def save(self, out_dir=None) -> tuple[Path, Path]:
        out = Path(out_dir or self.cfg.run.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        name = self.cfg.run_name()
        metrics = out / f"{name}.csv"
        ckpt = out / f"{name}.ckpt"
        metrics.write_text(self.metrics_text())
        save_checkpoint(ckpt, self.agent.state_dict(),
                        {"config": self.cfg.to_dict(), "env_steps": self.env_steps, "iteration": self.iteration,
                         "obs_dim": self.obs_dim, "action_dim": self.action_dim})
        return metrics, ckpt

    def _abort(self, exc: Exception):
        out = Path(self.cfg.run.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dump = out / f"{self.cfg.run_name()}.abort.json"
        dump.write_text(json.dumps({"iteration": self.iteration, "env_steps": self.env_steps,
                                    "error": str(exc), "last_rows": self.rows[-3:]}, indent=2, default=str))
        raise TrainingAborted(f"non-finite value at iteration {self.iteration}: {exc} (dump: {dump})") from exc


def load_or_record_demos(cfg: TrainConfig) -> DemoBuffer:
    if cfg.env.demos:
        path = Path(cfg.env.demos)
        if not path.exists():
            raise FileNotFoundError(f"demo file {path} does not exist; run the demos command first")
        return DemoBuffer.load(path)
    env = make_env(cfg.env.id)
    return record_demos(env, expert_policy(cfg.env.id), cfg.env.demo_count,
                        np.random.default_rng(cfg.env.demo_seed), seed=cfg.env.demo_seed)


# ---------------------------------------------------------------------------
# evaluation


def evaluate_agent(agent: Agent, env_id: str, episodes: int, rng: np.random.Generator) -> dict:
    """Deterministic (mean-action) episodes scored by the privileged evaluator.

    Also reports the temporal variance of the beliefs: the variance over time
    of each belief coordinate, averaged over coordinates and episodes.
    """
    if episodes < 1:
        raise ValueError("episodes must be positive")
    envs = [make_env(env_id) for _ in range(episodes)]
    seeds = rng.integers(2 ** 62, size=episodes)
    obs = np.stack([e.reset(np.random.default_rng(int(s))) for e, s in zip(envs, seeds)])
    hist = [[o] for o in obs]
    latents = [[] for _ in envs]
    actions = [[] for _ in envs]
    h = None if agent.belief is None else agent.belief.zero_state(episodes)
    prev = np.zeros((episodes, agent.action_dim))
    beliefs = []
    done = False
    with ad.no_grad():
        while not done:
            if agent.belief is not None:
                h = agent.belief.step(h, obs, prev)
                beliefs.append(h)
                f = h
            else:
                f = np.stack([agent.features(np.array(hh), len(hh) - 1) for hh in hist])
            a = agent.policy.mean(f).value
            for i, e in enumerate(envs):
                with privileged(e):
                    latents[i].append(e.latent_state())
                u = e.clip_action(a[i])
                actions[i].append(u)
                o, done = e.step(u)
                obs[i] = o
                hist[i].append(o)
                prev[i] = u
    returns = []
    for e, lat, act in zip(envs, latents, actions):
        with privileged(e):
            returns.append(ground_truth_return(e, lat, act))
    returns = np.array(returns)
    bvar = float(np.array(beliefs).var(axis=0).mean()) if beliefs else float("nan")
    return {"mean": float(returns.mean()), "std": float(returns.std()), "returns": returns, "belief_var": bvar}


def agent_from_checkpoint(path) -> tuple[Agent, TrainConfig]:
    tensors, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    agent = Agent(cfg, int(meta["obs_dim"]), int(meta["action_dim"]), np.random.default_rng(0))
    agent.load_state_dict(tensors)
    return agent, cfg


def evaluate(checkpoint, env_id: str | None = None, episodes: int = 10, rng: np.random.Generator | None = None) -> dict:
    agent, cfg = agent_from_checkpoint(checkpoint)
    return evaluate_agent(agent, env_id or cfg.env.id, episodes, rng or np.random.default_rng(cfg.eval.seed))


def train(cfg: TrainConfig, demos: DemoBuffer | None = None, out_dir=None) -> tuple[Path, Path]:
    """Train one run and write its metrics CSV and final checkpoint."""
    trainer = Trainer(cfg, demos)
    trainer.train()
    return trainer.save(out_dir)
