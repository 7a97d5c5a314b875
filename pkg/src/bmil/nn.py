"""Network building blocks on top of :mod:`bmil.autodiff`.

Layers hold their weights as grad-requiring leaf :class:`Node` objects and
build a fresh graph on every forward call. Batches are leading axes: an MLP
maps ``(..., in)`` to ``(..., out)``.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Node

LOG_2PI = math.log(2.0 * math.pi)


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float = 1.0) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class Module:
    """Owns parameters and child modules, in registration order."""

    def __init__(self):
        self._params: OrderedDict[str, Node] = OrderedDict()
        self._children: OrderedDict[str, Module] = OrderedDict()

    def param(self, name: str, value: np.ndarray) -> Node:
        node = Node(value, requires_grad=True, name=name)
        self._params[name] = node
        return node

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Node]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, c in self._children.items():
            yield from c.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Node]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        ad.zero_grad(self.parameters())

    def state_dict(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((n, p.value.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.value.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.value.shape}")
            p.value = arr.copy()


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, gain: float = 1.0):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.weight = self.param("weight", gain * uniform_fan_in(rng, n_in, (n_in, n_out)))
        self.bias = self.param("bias", gain * uniform_fan_in(rng, n_in, (n_out,)))

    def __call__(self, x) -> Node:
        return ad.linear(x, self.weight, self.bias)


class Mlp(Module):
    """``in -> 64 -> 64 -> out`` with tanh hidden activations and a linear head."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 hidden: tuple[int, ...] = (64, 64), out_gain: float = 1.0):
        super().__init__()
        widths = (n_in, *hidden, n_out)
        self.layers = []
        for i in range(len(widths) - 1):
            gain = out_gain if i == len(widths) - 2 else 1.0
            self.layers.append(self.child(f"l{i}", Linear(widths[i], widths[i + 1], rng, gain)))
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x) -> Node:
        h = x
        for layer in self.layers[:-1]:
            h = ad.tanh(layer(h))
        return self.layers[-1](h)


class ObsEncoder(Module):
    """Single linear layer plus tanh; its output also serves as the encoding space."""

    def __init__(self, obs_dim: int, rng: np.random.Generator, width: int = 64):
        super().__init__()
        self.width = width
        self.fc = self.child("fc", Linear(obs_dim, width, rng))

    def __call__(self, obs) -> Node:
        return ad.tanh(self.fc(obs))


class GruCell(Module):
    """Standard GRU: ``h' = (1 - z) * h + z * tanh(W_h x + U_h (r * h) + b_h)``."""

    def __init__(self, input_size: int, rng: np.random.Generator, hidden_size: int = 256):
        super().__init__()
        self.input_size, self.hidden_size = input_size, hidden_size
        hs = hidden_size
        wx = np.concatenate([orthogonal(rng, input_size, hs) for _ in range(3)], axis=1)
        uzr = np.concatenate([orthogonal(rng, hs, hs) for _ in range(2)], axis=1)
        self.w_x = self.param("w_x", wx)              # columns: z | r | h
        self.b = self.param("b", np.zeros(3 * hs))
        self.u_zr = self.param("u_zr", uzr)
        self.u_h = self.param("u_h", orthogonal(rng, hs, hs))

    def project_inputs(self, x) -> Node:
        """Input-side pre-activations; may be computed for a whole sequence at once."""
        return ad.linear(x, self.w_x, self.b)

    def step_projected(self, h_prev, xproj) -> Node:
        return ad.gru_cell(h_prev, xproj, self.u_zr, self.u_h)

    def step_composed(self, h_prev, xproj) -> Node:
        """Same update as :meth:`step_projected`, built from elementary ops."""
        hs = self.hidden_size
        h_prev, xproj = ad.as_node(h_prev), ad.as_node(xproj)
        lead = (slice(None),) * (xproj.value.ndim - 1)
        zr = ad.sigmoid(ad.add(ad.take(xproj, lead + (slice(0, 2 * hs),)), ad.matmul(h_prev, self.u_zr)))
        z = ad.take(zr, lead + (slice(0, hs),))
        r = ad.take(zr, lead + (slice(hs, 2 * hs),))
        cand = ad.tanh(ad.add(ad.take(xproj, lead + (slice(2 * hs, 3 * hs),)),
                              ad.matmul(ad.mul(r, h_prev), self.u_h)))
        return ad.add(h_prev, ad.mul(z, ad.sub(cand, h_prev)))

    def __call__(self, h_prev, x) -> Node:
        return gru_step(self, h_prev, x)


def gru_step(cell: GruCell, h_prev, x) -> Node:
    x = ad.as_node(x)
    h_prev = ad.as_node(h_prev)
    if x.value.shape[-1] != cell.input_size or h_prev.value.shape[-1] != cell.hidden_size:
        raise ad.ShapeError(
            f"gru_step: input width {x.value.shape[-1]} / hidden width {h_prev.value.shape[-1]} "
            f"do not match cell ({cell.input_size}, {cell.hidden_size})")
    return cell.step_projected(h_prev, cell.project_inputs(x))


class ActionSeqEncoder(Module):
    """Two conv1d layers (5 filters, kernel 3, stride 1, padding 1) then a linear map.

    Sequences are right-padded to ``max_k`` steps; padded steps are zeroed
    before each convolution so their content never reaches the output.
    """

    def __init__(self, action_dim: int, max_k: int, rng: np.random.Generator,
                 filters: tuple[int, int] = (5, 5), out_width: int = 32):
        super().__init__()
        self.action_dim, self.max_k, self.out_width = action_dim, max_k, out_width
        c1, c2 = filters
        self.k1 = self.param("k1", uniform_fan_in(rng, 3 * action_dim, (3, action_dim, c1)))
        self.b1 = self.param("b1", np.zeros(c1))
        self.k2 = self.param("k2", uniform_fan_in(rng, 3 * c1, (3, c1, c2)))
        self.b2 = self.param("b2", np.zeros(c2))
        self.proj = self.child("proj", Linear(max_k * c2, out_width, rng))
        self.c2 = c2

    def __call__(self, actions: np.ndarray, lengths) -> Node:
        """``actions`` is ``(B, max_k, action_dim)``; ``lengths`` gives valid steps per row."""
        actions = np.asarray(actions, dtype=np.float64)
        bsz = actions.shape[0]
        mask = (np.arange(self.max_k)[None, :] < np.asarray(lengths).reshape(-1, 1)).astype(np.float64)
        mask3 = mask[:, :, None]
        x = actions * mask3
        h = ad.tanh(ad.conv1d(x, self.k1, self.b1))
        h = ad.mul(h, np.broadcast_to(mask3, h.value.shape).copy())
        h = ad.tanh(ad.conv1d(h, self.k2, self.b2))
        h = ad.mul(h, np.broadcast_to(mask3, h.value.shape).copy())
        return ad.tanh(self.proj(ad.reshape(h, (bsz, self.max_k * self.c2))))


class GaussianHead(Module):
    """Diagonal Gaussian with state-independent log standard deviations."""

    def __init__(self, n_in: int, action_dim: int, rng: np.random.Generator, init_log_std: float = 0.0):
        super().__init__()
        self.action_dim = action_dim
        self.mean_net = self.child("mean", Mlp(n_in, action_dim, rng, out_gain=0.1))
        self.log_std = self.param("log_std", np.full(action_dim, init_log_std))

    def mean(self, b) -> Node:
        return self.mean_net(b)

    def log_prob(self, b, a) -> Node:
        return gaussian_log_prob(self, b, a)

    def entropy(self) -> Node:
        return ad.add(ad.sum(self.log_std), 0.5 * self.action_dim * (1.0 + LOG_2PI))

    def sample(self, b, rng: np.random.Generator) -> np.ndarray:
        return sample_action(self, b, rng)


def gaussian_log_prob(head: GaussianHead, b, a) -> Node:
    """Sum over action dimensions of independent Gaussian log-densities, per row."""
    a = np.asarray(a, dtype=np.float64)
    mu = head.mean(b)
    if a.shape != mu.value.shape:
        raise ad.ShapeError(f"action shape {a.shape} != mean shape {mu.value.shape}")
    inv_std = ad.exp(ad.neg(head.log_std))
    z = ad.mul(ad.sub(a, mu), inv_std)
    per_dim = ad.add(ad.scale(ad.square(z), -0.5), ad.neg(head.log_std))
    return ad.add(ad.sum(per_dim, axis=-1), -0.5 * head.action_dim * LOG_2PI)


def sample_action(head: GaussianHead, b, rng: np.random.Generator) -> np.ndarray:
    with ad.no_grad():
        mu = head.mean(b).value
    eps = rng.standard_normal(mu.shape)
    return mu + np.exp(head.log_std.value) * eps


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"BMILCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: "OrderedDict[str, np.ndarray]", meta: dict | None = None) -> None:
    """Write named tensors as (name, shape, little-endian float64) records."""
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<I", CKPT_VERSION)
    header = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(header)) + header
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = 8
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    return tensors, meta
