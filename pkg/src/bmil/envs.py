"""Partially observable environments.

Two continuous toys (a torque-limited pendulum and a force-controlled point
mass) expose masked sensor readings through ``reset``/``step``. The latent
state is private; scoring code must enter :func:`privileged` to read it.
Exact tabular POMDPs support the verification oracles.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class EpisodeFinished(RuntimeError):
    pass


class PrivilegedAccessError(RuntimeError):
    pass


class PomdpEnv:
    """Common stepping contract. Subclasses fill in dynamics and sensors."""

    env_id: str = ""
    observation_dim: int
    action_dim: int
    max_episode_steps: int
    action_low: np.ndarray
    action_high: np.ndarray

    def __init__(self):
        self._state: np.ndarray | None = None
        self._t = 0
        self._done = True
        self._privileged = False

    # -- public interface ---------------------------------------------------
    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._state = self._sample_initial(rng)
        self._t = 0
        self._done = False
        return self._observe()

    def step(self, action) -> tuple[np.ndarray, bool]:
        if self._done:
            raise EpisodeFinished("step() called on a finished episode; call reset()")
        u = self.clip_action(action)
        self._state = self._advance(self._state, u)
        self._t += 1
        self._done = self._t >= self.max_episode_steps
        return self._observe(), self._done

    def clip_action(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=np.float64).reshape(self.action_dim)
        return np.clip(a, self.action_low, self.action_high)

    @property
    def done(self) -> bool:
        return self._done

    @property
    def t(self) -> int:
        return self._t

    # -- privileged ---------------------------------------------------------
    def latent_state(self) -> np.ndarray:
        if not self._privileged:
            raise PrivilegedAccessError("latent state is only readable inside privileged(env)")
        return self._state.copy()

    def set_latent_state(self, state) -> None:
        if not self._privileged:
            raise PrivilegedAccessError("latent state is only writable inside privileged(env)")
        self._state = np.asarray(state, dtype=np.float64).copy()

    def step_cost(self, state: np.ndarray, u: np.ndarray) -> float:
        raise NotImplementedError

    # -- subclass hooks -----------------------------------------------------
    def _sample_initial(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def _advance(self, state: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _observe(self) -> np.ndarray:
        raise NotImplementedError


@contextlib.contextmanager
def privileged(env: PomdpEnv):
    """Evaluation-only access to the latent state (experts and scoring)."""
    inner = env.inner if isinstance(env, VelocityOnly) else None
    prev = env._privileged
    env._privileged = True
    if inner is not None:
        inner._privileged = True
    try:
        yield env
    finally:
        env._privileged = prev
        if inner is not None:
            inner._privileged = prev


def wrap_angle(theta):
    return (np.asarray(theta) + math.pi) % (2.0 * math.pi) - math.pi


class MaskedPendulum(PomdpEnv):
    """Torque-limited pendulum, angle measured from upright (theta = 0).

    ``theta_ddot = (g / l) sin(theta) + u / (m l^2)``, semi-implicit Euler.
    The sensor reports ``(cos theta, sin theta)``; angular velocity is hidden.
    """

    env_id = "masked-pendulum"
    latent_names = ("theta", "theta_dot")
    position_channels = 2
    velocity_channels = 1

    def __init__(self, g: float = 9.81, mass: float = 1.0, length: float = 1.0, dt: float = 0.05,
                 max_torque: float = 2.0, max_speed: float = 8.0, max_episode_steps: int = 200,
                 sensors: str = "position"):
        super().__init__()
        self.g, self.mass, self.length, self.dt = g, mass, length, dt
        self.max_torque, self.max_speed = max_torque, max_speed
        self.max_episode_steps = max_episode_steps
        self.action_dim = 1
        self.action_low = np.array([-max_torque])
        self.action_high = np.array([max_torque])
        self.sensors = sensors
        self.observation_dim = {"position": 2, "velocity": 1, "full": 3}[sensors]

    def _sample_initial(self, rng):
        return np.array([rng.uniform(-math.pi, math.pi), rng.uniform(-1.0, 1.0)])

    def _advance(self, state, u):
        theta, theta_dot = state
        acc = self.g / self.length * math.sin(theta) + u[0] / (self.mass * self.length ** 2)
        theta_dot = float(np.clip(theta_dot + self.dt * acc, -self.max_speed, self.max_speed))
        theta = float(wrap_angle(theta + self.dt * theta_dot))
        return np.array([theta, theta_dot])

    def _observe(self):
        theta, theta_dot = self._state
        if self.sensors == "position":
            return np.array([math.cos(theta), math.sin(theta)])
        if self.sensors == "velocity":
            return np.array([theta_dot])
        return np.array([math.cos(theta), math.sin(theta), theta_dot])

    def step_cost(self, state, u):
        theta, theta_dot = state
        theta = float(wrap_angle(theta))
        return theta ** 2 + 0.1 * theta_dot ** 2 + 0.001 * float(u[0]) ** 2


class PointMassNav(PomdpEnv):
    """Unit-mass double integrator in the plane; the goal is the origin.

    The sensor reports position ``(x, y)``; velocity is hidden.
    """

    env_id = "pointmass-nav"
    latent_names = ("x", "y", "x_dot", "y_dot")

    def __init__(self, dt: float = 0.05, max_force: float = 1.0, max_episode_steps: int = 100,
                 spawn_center=(0.0, 0.0), spawn_half_width: float = 1.0,
                 init_speed: float = 0.5, sensors: str = "position"):
        super().__init__()
        self.dt, self.max_force = dt, max_force
        self.max_episode_steps = max_episode_steps
        self.spawn_center = np.asarray(spawn_center, dtype=np.float64)
        self.spawn_half_width = spawn_half_width
        self.init_speed = init_speed
        self.action_dim = 2
        self.action_low = np.full(2, -max_force)
        self.action_high = np.full(2, max_force)
        self.sensors = sensors
        self.observation_dim = {"position": 2, "velocity": 2, "full": 4}[sensors]

    def _sample_initial(self, rng):
        pos = self.spawn_center + rng.uniform(-self.spawn_half_width, self.spawn_half_width, size=2)
        vel = rng.uniform(-self.init_speed, self.init_speed, size=2)
        return np.concatenate([pos, vel])

    def _advance(self, state, u):
        vel = state[2:] + self.dt * u
        pos = state[:2] + self.dt * vel
        return np.concatenate([pos, vel])

    def _observe(self):
        if self.sensors == "position":
            return self._state[:2].copy()
        if self.sensors == "velocity":
            return self._state[2:].copy()
        return self._state.copy()

    def step_cost(self, state, u):
        return float(state[0] ** 2 + state[1] ** 2) + 0.001 * float(np.dot(u, u))


class VelocityOnly(PomdpEnv):
    """Complement of the default mask: only the velocity channels are reported."""

    def __init__(self, inner: PomdpEnv):
        super().__init__()
        self.inner = inner
        self.env_id = {"masked-pendulum": "pendulum-velonly", "pointmass-nav": "pointmass-velonly"}[inner.env_id]
        inner.sensors = "velocity"
        inner.observation_dim = {"masked-pendulum": 1, "pointmass-nav": 2}[inner.env_id]
        self.observation_dim = inner.observation_dim
        self.action_dim = inner.action_dim
        self.max_episode_steps = inner.max_episode_steps
        self.action_low, self.action_high = inner.action_low, inner.action_high
        self.latent_names = inner.latent_names

    def reset(self, rng):
        return self.inner.reset(rng)

    def step(self, action):
        return self.inner.step(action)

    @property
    def done(self):
        return self.inner.done

    @property
    def t(self):
        return self.inner.t

    def latent_state(self):
        return self.inner.latent_state()

    def set_latent_state(self, state):
        self.inner.set_latent_state(state)

    def step_cost(self, state, u):
        return self.inner.step_cost(state, u)


def ground_truth_return(env: PomdpEnv, latents, actions) -> float:
    """Evaluation score: minus the summed per-step cost of (latent, action) pairs.

    Pendulum cost is ``theta^2 + 0.1 theta_dot^2 + 0.001 u^2``; point mass is
    ``|pos|^2 + 0.001 |u|^2``. Only callable inside :func:`privileged`.
    """
    if not env._privileged:
        raise PrivilegedAccessError("ground_truth_return is an evaluation-only scorer")
    latents = np.asarray(latents, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64).reshape(len(latents), -1)
    total = 0.0
    for s, u in zip(latents, actions):
        total -= env.step_cost(s, env.clip_action(u))
    return total


# ---------------------------------------------------------------------------
# tabular POMDPs


@dataclass
class TabularPomdp:
    """Finite POMDP: ``T[s, a, s']``, ``U[s, o]``, ``p0[s]``."""

    transition: np.ndarray
    observation: np.ndarray
    p0: np.ndarray
    horizon: int = 4
    discount: float = 0.9

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.observation = np.asarray(self.observation, dtype=np.float64)
        self.p0 = np.asarray(self.p0, dtype=np.float64)
        s, a, s2 = self.transition.shape
        if s2 != s or self.observation.shape[0] != s or self.p0.shape != (s,):
            raise ValueError("inconsistent table shapes")
        for name, table in (("T", self.transition), ("U", self.observation), ("p0", self.p0)):
            if np.any(table < 0):
                raise ValueError(f"{name} has negative entries")
            if not np.allclose(table.sum(axis=-1), 1.0, atol=1e-12, rtol=0):
                raise ValueError(f"{name} rows must sum to 1")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n_obs(self) -> int:
        return self.observation.shape[1]

    @classmethod
    def random(cls, rng: np.random.Generator, n_states: int, n_actions: int, n_obs: int,
               horizon: int = 4, discount: float = 0.9) -> "TabularPomdp":
        t = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
        u = rng.dirichlet(np.ones(n_obs), size=n_states)
        p0 = rng.dirichlet(np.ones(n_states))
        return cls(t, u, p0, horizon, discount)

    def to_text(self) -> str:
        lines = [f"states {self.n_states}", f"actions {self.n_actions}", f"observations {self.n_obs}",
                 f"horizon {self.horizon}", f"discount {self.discount!r}", "p0",
                 " ".join(repr(float(x)) for x in self.p0), "T"]
        for s in range(self.n_states):
            for a in range(self.n_actions):
                lines.append(" ".join(repr(float(x)) for x in self.transition[s, a]))
        lines.append("U")
        for s in range(self.n_states):
            lines.append(" ".join(repr(float(x)) for x in self.observation[s]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TabularPomdp":
        """Parse the format written by :meth:`to_text` (``#`` starts a comment).

        Header lines ``states N``, ``actions N``, ``observations N`` (and
        optionally ``horizon``/``discount``), then sections ``p0``, ``T`` with
        one row per (s, a) pair in s-major order, and ``U`` with one row per s.
        """
        rows = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
        rows = [r for r in rows if r]
        header: dict[str, str] = {}
        sections: dict[str, list[list[float]]] = {}
        current = None
        for r in rows:
            parts = r.split()
            if parts[0] in ("p0", "T", "U") and len(parts) == 1:
                current = parts[0]
                sections[current] = []
            elif current is None:
                header[parts[0]] = parts[1]
            else:
                sections[current].append([float(x) for x in parts])
        ns, na, no = int(header["states"]), int(header["actions"]), int(header["observations"])
        t = np.array(sections["T"]).reshape(ns, na, ns)
        u = np.array(sections["U"]).reshape(ns, no)
        p0 = np.array(sections["p0"]).reshape(ns)
        return cls(t, u, p0, int(header.get("horizon", 4)), float(header.get("discount", 0.9)))

    @classmethod
    def load(cls, path) -> "TabularPomdp":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


class TabularEnv:
    """Sampling interface over a :class:`TabularPomdp`; observations are integer ids."""

    def __init__(self, pomdp: TabularPomdp, max_episode_steps: int | None = None):
        self.pomdp = pomdp
        self.env_id = "tabular"
        self.observation_count = pomdp.n_obs
        self.action_count = pomdp.n_actions
        self.max_episode_steps = pomdp.horizon if max_episode_steps is None else max_episode_steps
        self._state = None
        self._t = 0
        self._done = True
        self._privileged = False
        self._rng: np.random.Generator | None = None

    def reset(self, rng: np.random.Generator) -> int:
        self._rng = rng
        self._state = int(rng.choice(self.pomdp.n_states, p=self.pomdp.p0))
        self._t = 0
        self._done = False
        return int(rng.choice(self.pomdp.n_obs, p=self.pomdp.observation[self._state]))

    def step(self, action: int) -> tuple[int, bool]:
        if self._done:
            raise EpisodeFinished("step() called on a finished episode; call reset()")
        a = int(action)
        if not 0 <= a < self.pomdp.n_actions:
            raise ValueError(f"action {a} out of range")
        self._state = int(self._rng.choice(self.pomdp.n_states, p=self.pomdp.transition[self._state, a]))
        self._t += 1
        self._done = self._t >= self.max_episode_steps
        return int(self._rng.choice(self.pomdp.n_obs, p=self.pomdp.observation[self._state])), self._done

    def latent_state(self) -> int:
        if not self._privileged:
            raise PrivilegedAccessError("latent state is only readable inside privileged(env)")
        return self._state


ENV_IDS = ("masked-pendulum", "pointmass-nav", "pendulum-velonly", "pointmass-velonly",
           "pendulum-full", "pointmass-full")


def make_env(env_id: str):
    """Build an environment from its string id (``tabular:<file>`` for tabular POMDPs)."""
    if env_id.startswith("tabular:"):
        return TabularEnv(TabularPomdp.load(env_id.split(":", 1)[1]))
    if env_id == "masked-pendulum":
        return MaskedPendulum()
    if env_id == "pointmass-nav":
        return PointMassNav()
    if env_id == "pendulum-velonly":
        return VelocityOnly(MaskedPendulum())
    if env_id == "pointmass-velonly":
        return VelocityOnly(PointMassNav())
    if env_id == "pendulum-full":
        env = MaskedPendulum(sensors="full")
        env.env_id = "pendulum-full"
        return env
    if env_id == "pointmass-full":
        env = PointMassNav(sensors="full")
        env.env_id = "pointmass-full"
        return env
    raise KeyError(f"unknown environment id {env_id!r}; known: {', '.join(ENV_IDS)}, tabular:<file>")


def base_env_id(env_id: str) -> str:
    """The dynamics family an id belongs to (experts and scoring are shared per family)."""
    if "pendulum" in env_id:
        return "masked-pendulum"
    if "pointmass" in env_id:
        return "pointmass-nav"
    raise KeyError(f"no dynamics family for {env_id!r}")
