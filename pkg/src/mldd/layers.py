"""Learnable convolution parameters, the Adam optimizer and MLDD1 checkpoints."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

MAGIC = b"MLDD1"


@dataclass(eq=False)
class ConvParam:
    name: str
    weight: Tensor
    bias: Tensor
    stride: int = 1
    pad: int = 0

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size


class ParamRegistry:
    """Insertion-ordered name -> ConvParam map."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._params: dict[str, ConvParam] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> ConvParam:
        return self._params[name]

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def add(self, p: ConvParam) -> ConvParam:
        if p.name in self._params:
            raise KeyError(f"duplicate parameter name {p.name!r}")
        self._params[p.name] = p
        return p

    def conv(self, name: str, cout: int, cin: int, k: int, stride: int = 1, pad: int = 0) -> ConvParam:
        """Return the named conv, creating it on first use."""
        if name in self._params:
            return self._params[name]
        return self.add(init_conv(name, cout, cin, k, k, stride, pad, self.seed))

    def tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for p in self._params.values():
            out.append((p.name + "/weight", p.weight))
            out.append((p.name + "/bias", p.bias))
        return out

    def n_params(self, prefix: str = "") -> int:
        return sum(p.n_params for p in self._params.values() if p.name.startswith(prefix))

    def zero_grad(self) -> None:
        for _, t in self.tensors():
            t.zero_grad()

    def zero_(self) -> None:
        """Set every weight and bias to zero (in place)."""
        for _, t in self.tensors():
            t.data[...] = 0.0


def init_conv(name: str, cout: int, cin: int, kh: int, kw: int, stride: int = 1, pad: int = 0,
              rng_seed: int = 0) -> ConvParam:
    """Kaiming-uniform weights, zero bias.

    The RNG stream depends only on (seed, name), so a parameter's initial value
    does not change when other parameters are added or removed.
    """
    if min(cout, cin, kh, kw) < 1:
        raise ValueError(f"{name}: extents must be positive")
    bound = np.sqrt(6.0 / (cin * kh * kw))
    rng = np.random.default_rng([rng_seed, zlib.crc32(name.encode())])
    w = rng.uniform(-bound, bound, size=(cout, cin, kh, kw))
    return ConvParam(name, Tensor(w, requires_grad=True), Tensor(np.zeros(cout), requires_grad=True),
                     stride, pad)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(registry: ParamRegistry, state: AdamState) -> None:
    """One bias-corrected Adam update over every registered tensor, then clear grads."""
    named = registry.tensors()
    for name, t in named:
        if t.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, t in named:
        g = t.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.lr != 0.0:
            t.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(registry: ParamRegistry, path: str | Path) -> None:
    """Write every tensor in registry order.

    Layout after the 5-byte magic, per tensor: u32 name length, UTF-8 name,
    u32 rank, rank x u32 extents, then little-endian float64 values.
    """
    chunks = [MAGIC]
    for name, t in registry.tensors():
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:5] != MAGIC:
        raise ValueError(f"{path}: not an MLDD1 checkpoint")
    out: dict[str, np.ndarray] = {}
    pos = 5
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode()
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(shape))
            if pos + 8 * count > len(buf):
                raise ValueError("truncated payload")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += 8 * count
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return out


def load_checkpoint(registry: ParamRegistry, path: str | Path) -> None:
    """Copy checkpoint values into an already-built registry, checking names and shapes."""
    stored = read_checkpoint(path)
    expected = registry.tensors()
    missing = [n for n, _ in expected if n not in stored]
    extra = sorted(set(stored) - {n for n, _ in expected})
    if missing or extra:
        raise ValueError(f"{path}: checkpoint does not match model (missing {missing[:3]}, "
                         f"unexpected {extra[:3]})")
    for name, t in expected:
        if stored[name].shape != t.shape:
            raise ValueError(f"{path}: {name} has shape {stored[name].shape}, model expects {t.shape}")
        t.data[...] = stored[name]
