"""Scripted experts, the demonstration buffer and the agent replay buffer."""

from __future__ import annotations

import json
import math
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .envs import PomdpEnv, base_env_id, ground_truth_return, privileged, wrap_angle


@dataclass
class Trajectory:
    """One episode of (observation, action) pairs; ``actions[t]`` was taken after seeing ``observations[t]``."""

    observations: np.ndarray
    actions: np.ndarray
    terminal: bool = True
    # beliefs the agent held while acting; kept in memory only, never saved
    hidden: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.observations.ndim != 2 or self.actions.ndim != 2:
            raise ValueError("observations and actions must be 2-D (steps x dim)")
        if len(self.observations) != len(self.actions):
            raise ValueError("observations and actions differ in length")

    @property
    def length(self) -> int:
        return len(self.observations)

    def __len__(self) -> int:
        return self.length


@dataclass
class Window:
    """A contiguous slice ``[offset, offset + length)`` of one trajectory.

    ``prefix_*`` hold the same episode's history before the slice so a belief
    can be warmed up from the episode start.
    """

    observations: np.ndarray
    actions: np.ndarray
    prefix_observations: np.ndarray
    prefix_actions: np.ndarray
    offset: int
    trajectory_index: int
    trajectory: Trajectory

    @property
    def length(self) -> int:
        return len(self.observations)


class NoWindowError(ValueError):
    pass


def fetch_window(trajectories: list[Trajectory], c: int, rng: np.random.Generator,
                 index: int | None = None) -> Window:
    """Uniform trajectory (among those of length >= c), then uniform start offset."""
    if not trajectories:
        raise NoWindowError("buffer is empty")
    eligible = [i for i, tr in enumerate(trajectories) if tr.length >= c]
    if not eligible:
        raise NoWindowError(f"no trajectory has length >= {c}")
    i = eligible[int(rng.integers(len(eligible)))] if index is None else index
    tr = trajectories[i]
    off = int(rng.integers(tr.length - c + 1))
    return Window(tr.observations[off:off + c], tr.actions[off:off + c],
                  tr.observations[:off], tr.actions[:off], off, i, tr)


class DemoBuffer:
    """Expert demonstrations; read-only once built."""

    def __init__(self, trajectories: Iterable[Trajectory], meta: dict | None = None):
        self._trajectories = tuple(trajectories)
        self.meta = dict(meta or {})
        self._cursors: dict[int, tuple[int, int]] = {}

    @property
    def trajectories(self) -> tuple[Trajectory, ...]:
        return self._trajectories

    def __len__(self) -> int:
        return len(self._trajectories)

    def __getitem__(self, i: int) -> Trajectory:
        return self._trajectories[i]

    def fetch_window(self, c: int, rng: np.random.Generator) -> Window:
        return fetch_window(list(self._trajectories), c, rng)

    def next_window(self, slot: int, c: int, rng: np.random.Generator) -> Window:
        """Sequential fetch: ``slot`` walks one trajectory in steps of ``c``.

        A fresh trajectory is drawn uniformly when the slot starts or runs off
        the end of its current one.
        """
        idx, off = self._cursors.get(slot, (-1, 0))
        if idx < 0 or off + c > self._trajectories[idx].length:
            eligible = [i for i, tr in enumerate(self._trajectories) if tr.length >= c]
            if not eligible:
                raise NoWindowError(f"no trajectory has length >= {c}")
            idx, off = eligible[int(rng.integers(len(eligible)))], 0
        tr = self._trajectories[idx]
        self._cursors[slot] = (idx, off + c)
        return Window(tr.observations[off:off + c], tr.actions[off:off + c],
                      tr.observations[:off], tr.actions[:off], off, idx, tr)

    def save(self, path) -> None:
        save_trajectories(path, self._trajectories, self.meta)

    @classmethod
    def load(cls, path) -> "DemoBuffer":
        trajs, meta = load_trajectories(path)
        return cls(trajs, meta)


class ReplayBuffer:
    """FIFO store of the agent's own completed episodes."""

    def __init__(self, capacity: int = 1000):
        self.capacity = capacity
        self._items: deque[Trajectory] = deque(maxlen=capacity)

    def add(self, traj: Trajectory) -> None:
        self._items.append(traj)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i: int) -> Trajectory:
        return self._items[i]

    def fetch_window(self, c: int, rng: np.random.Generator) -> Window:
        return fetch_window(list(self._items), c, rng)

    def save(self, path, meta: dict | None = None) -> None:
        save_trajectories(path, list(self._items), {"kind": "replay", **(meta or {})})


# ---------------------------------------------------------------------------
# file format

DEMO_MAGIC = b"BMILDEMO"
DEMO_VERSION = 1


def save_trajectories(path, trajectories, meta: dict) -> None:
    """Magic, u32 version, u32 header length, JSON header, then per trajectory
    ``u32 length``, observations, actions (little-endian float64), ``u8 terminal``."""
    trajectories = list(trajectories)
    obs_dim = trajectories[0].observations.shape[1] if trajectories else int(meta.get("obs_dim", 0))
    act_dim = trajectories[0].actions.shape[1] if trajectories else int(meta.get("act_dim", 0))
    header = dict(meta, obs_dim=obs_dim, act_dim=act_dim, count=len(trajectories))
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    out = bytearray(DEMO_MAGIC)
    out += struct.pack("<II", DEMO_VERSION, len(raw)) + raw
    for tr in trajectories:
        if tr.observations.shape[1] != obs_dim or tr.actions.shape[1] != act_dim:
            raise ValueError("trajectories disagree on dimensions")
        out += struct.pack("<I", tr.length)
        out += np.ascontiguousarray(tr.observations, dtype="<f8").tobytes()
        out += np.ascontiguousarray(tr.actions, dtype="<f8").tobytes()
        out += struct.pack("<B", 1 if tr.terminal else 0)
    Path(path).write_bytes(bytes(out))


def load_trajectories(path) -> tuple[list[Trajectory], dict]:
    data = Path(path).read_bytes()
    if data[:8] != DEMO_MAGIC:
        raise ValueError(f"{path}: not a demonstration file")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != DEMO_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = 16
    meta = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    od, ad_ = int(meta["obs_dim"]), int(meta["act_dim"])
    trajs = []
    for _ in range(int(meta["count"])):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        obs = np.frombuffer(data, "<f8", n * od, pos).reshape(n, od).astype(np.float64)
        pos += 8 * n * od
        act = np.frombuffer(data, "<f8", n * ad_, pos).reshape(n, ad_).astype(np.float64)
        pos += 8 * n * ad_
        (term,) = struct.unpack_from("<B", data, pos)
        pos += 1
        trajs.append(Trajectory(obs, act, bool(term)))
    return trajs, meta


# ---------------------------------------------------------------------------
# scripted experts


@dataclass
class PendulumExpert:
    """Energy pumping far from upright, PD balance near it.

    Pumping uses ``u = k_e (E* - E) theta_dot`` with ``E = theta_dot^2 / 2 + g cos(theta)``
    (unit mass and length), which makes ``dE/dt = u theta_dot`` push E toward
    the upright energy ``E* = g``.
    """

    g: float = 9.81
    max_torque: float = 2.0
    k_energy: float = 1.0
    kp: float = 12.0
    kd: float = 3.0
    catch_angle: float = 0.5

    def __call__(self, state) -> np.ndarray:
        theta, theta_dot = float(wrap_angle(state[0])), float(state[1])
        energy = 0.5 * theta_dot ** 2 + self.g * math.cos(theta)
        if abs(theta) < self.catch_angle and abs(energy - self.g) < 0.5 * self.g:
            u = -self.kp * theta - self.kd * theta_dot
        else:
            u = self.k_energy * (self.g - energy) * theta_dot
            if abs(theta_dot) < 1e-3 and abs(theta) > 1e-6:
                u = self.max_torque
        return np.array([float(np.clip(u, -self.max_torque, self.max_torque))])


@dataclass
class PointMassExpert:
    """PD regulator to the origin, clipped to the force bound."""

    kp: float = 4.0
    kd: float = 4.0
    max_force: float = 1.0

    def __call__(self, state) -> np.ndarray:
        u = -self.kp * np.asarray(state[:2]) - self.kd * np.asarray(state[2:])
        return np.clip(u, -self.max_force, self.max_force)


def expert_policy(env_id: str):
    """The scripted expert for an environment family (it reads the latent state)."""
    family = base_env_id(env_id)
    if family == "masked-pendulum":
        return PendulumExpert()
    if family == "pointmass-nav":
        return PointMassExpert()
    raise KeyError(f"no expert for {env_id!r}")


def run_episode(env: PomdpEnv, controller, rng: np.random.Generator):
    """Roll one full episode with a latent-state controller.

    Returns the trajectory of masked observations, the latent states and the
    ground-truth return.
    """
    obs = env.reset(rng)
    observations, actions, latents = [], [], []
    with privileged(env):
        done = False
        while not done:
            s = env.latent_state()
            a = np.asarray(controller(s), dtype=np.float64).reshape(env.action_dim)
            observations.append(obs)
            actions.append(a)
            latents.append(s)
            obs, done = env.step(a)
        ret = ground_truth_return(env, latents, actions)
    return Trajectory(np.array(observations), np.array(actions), True), np.array(latents), ret


def random_controller(env: PomdpEnv, rng: np.random.Generator):
    def act(_state):
        return rng.uniform(env.action_low, env.action_high)
    return act


def record_demos(env: PomdpEnv, expert, n: int, rng: np.random.Generator,
                 path=None, seed: int | None = None) -> DemoBuffer:
    """Record ``n`` expert episodes (masked observations only) and optionally save them.

    Each episode resets from its own derived seed, kept in the header so the
    episode can be replayed through the scorer later.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    trajs, returns, episode_seeds = [], [], []
    for _ in range(n):
        ep_seed = int(rng.integers(2 ** 62))
        tr, _, ret = run_episode(env, expert, np.random.default_rng(ep_seed))
        trajs.append(tr)
        returns.append(ret)
        episode_seeds.append(ep_seed)
    meta = {"env_id": env.env_id, "returns": returns, "episode_seeds": episode_seeds, "seed": seed,
            "expert_mean_return": float(np.mean(returns))}
    buf = DemoBuffer(trajs, meta)
    if path is not None:
        buf.save(path)
    return buf


def replay_return(env: PomdpEnv, traj: Trajectory, episode_seed: int) -> float:
    """Score a recorded action sequence by re-running it from its reset seed."""
    env.reset(np.random.default_rng(episode_seed))
    latents = []
    with privileged(env):
        for a in traj.actions:
            latents.append(env.latent_state())
            env.step(a)
        return ground_truth_return(env, latents, traj.actions)
