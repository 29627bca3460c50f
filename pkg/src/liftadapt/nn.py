"""Minimal dense-network substrate.

Residual LeakyReLU MLPs over flat f64 parameter storage with hand-written
reverse-mode gradients, RMSProp, WGAN weight clipping, MSE and a binary
checkpoint format. Everything is batched over a leading axis.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import BadClip, CheckpointError, DimMismatch, TapeMismatch


class ParamStore:
    """Flat parameter and gradient vectors with named, shaped views into them."""

    def __init__(self, shapes: Iterable[tuple[str, tuple]]):
        self.layout = {}
        offset = 0
        for name, shape in shapes:
            if name in self.layout:
                raise ValueError(f"duplicate parameter name {name!r}")
            size = int(np.prod(shape))
            self.layout[name] = (offset, tuple(shape))
            offset += size
        self.values = np.zeros(offset)
        self.grads = np.zeros(offset)

    def __len__(self):
        return self.values.size

    def value(self, name: str) -> np.ndarray:
        off, shape = self.layout[name]
        return self.values[off:off + int(np.prod(shape))].reshape(shape)

    def grad(self, name: str) -> np.ndarray:
        off, shape = self.layout[name]
        return self.grads[off:off + int(np.prod(shape))].reshape(shape)

    def zero_grad(self):
        self.grads[:] = 0.0

    def named_arrays(self, prefix: str = "") -> dict:
        return {prefix + name: self.value(name).copy() for name in self.layout}

    def load_arrays(self, arrays: dict, prefix: str = ""):
        for name, (_, shape) in self.layout.items():
            key = prefix + name
            if key not in arrays:
                raise CheckpointError(f"checkpoint lacks parameter {key!r}")
            arr = np.asarray(arrays[key], dtype=float)
            if arr.shape != shape:
                raise CheckpointError(f"{key}: shape {arr.shape} != expected {shape}")
            self.value(name)[...] = arr

    def copy(self) -> "ParamStore":
        new = ParamStore((n, s) for n, (_, s) in self.layout.items())
        new.values[:] = self.values
        return new


@dataclass(frozen=True)
class NetworkSpec:
    """Residual MLP topology.

    ``block_count == 0`` means a single affine map from input to output.
    Otherwise: input projection, ``block_count`` residual blocks of
    ``depth_per_block`` linear+LeakyReLU layers, then a linear head.
    """
    input_dim: int
    output_dim: int
    hidden_dim: int = 256
    block_count: int = 1
    depth_per_block: int = 2
    slope: float = 0.2

    def __post_init__(self):
        if min(self.input_dim, self.output_dim) <= 0:
            raise DimMismatch("network dimensions must be positive")
        if self.block_count > 0 and (self.hidden_dim <= 0 or self.depth_per_block <= 0):
            raise DimMismatch("hidden_dim and depth_per_block must be positive")

    def layers(self) -> list[tuple[str, int, int]]:
        if self.block_count == 0:
            return [("out", self.input_dim, self.output_dim)]
        h = self.hidden_dim
        out = [("in", self.input_dim, h)]
        for i in range(self.block_count):
            out += [(f"b{i}.l{j}", h, h) for j in range(self.depth_per_block)]
        out.append(("out", h, self.output_dim))
        return out

    def param_shapes(self, prefix: str = "") -> list[tuple[str, tuple]]:
        shapes = []
        for name, fan_in, fan_out in self.layers():
            shapes += [(f"{prefix}{name}.W", (fan_in, fan_out)), (f"{prefix}{name}.b", (fan_out,))]
        return shapes

    def to_dict(self) -> dict:
        return asdict(self)


def leaky_relu(z, slope):
    return np.where(z > 0, z, slope * z)


class Tape:
    __slots__ = ("owner", "inputs", "preacts", "batch_shape")

    def __init__(self, owner, batch_shape):
        self.owner = owner
        self.batch_shape = batch_shape
        self.inputs = []
        self.preacts = []


class Mlp:
    """A residual MLP whose parameters live in ``store`` under ``prefix``."""

    def __init__(self, spec: NetworkSpec, store: ParamStore, prefix: str = ""):
        self.spec = spec
        self.store = store
        self.prefix = prefix
        self._names = [prefix + name for name, _, _ in spec.layers()]

    def init(self, rng: np.random.Generator, zero_head: bool = False):
        """Kaiming-uniform hidden layers, zero biases, optionally an all-zero head."""
        gain = np.sqrt(2.0 / (1.0 + self.spec.slope ** 2))
        for (name, fan_in, _), full in zip(self.spec.layers(), self._names):
            W = self.store.value(full + ".W")
            if name == "out":
                W[...] = 0.0 if zero_head else rng.uniform(-1, 1, W.shape) * np.sqrt(1.0 / fan_in)
            else:
                W[...] = rng.uniform(-1, 1, W.shape) * gain * np.sqrt(3.0 / fan_in)
            self.store.value(full + ".b")[...] = 0.0

    def _affine(self, tape, idx, x):
        tape.inputs.append(x)
        name = self._names[idx]
        return x @ self.store.value(name + ".W") + self.store.value(name + ".b")

    def forward(self, x) -> tuple[np.ndarray, Tape]:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.spec.input_dim:
            raise DimMismatch(f"expected input dim {self.spec.input_dim}, got {x.shape[-1]}")
        tape = Tape(self, x.shape[:-1])
        x = x.reshape(-1, self.spec.input_dim)
        s = self.spec.slope
        if self.spec.block_count == 0:
            out = self._affine(tape, 0, x)
        else:
            idx = 0
            z = self._affine(tape, idx, x)
            tape.preacts.append(z)
            h = leaky_relu(z, s)
            for _ in range(self.spec.block_count):
                t = h
                for _ in range(self.spec.depth_per_block):
                    idx += 1
                    z = self._affine(tape, idx, t)
                    tape.preacts.append(z)
                    t = leaky_relu(z, s)
                h = h + t
            out = self._affine(tape, idx + 1, h)
        return out.reshape(tape.batch_shape + (self.spec.output_dim,)), tape

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def _affine_back(self, tape, idx, g, accumulate):
        name = self._names[idx]
        if accumulate:
            self.store.grad(name + ".W")[...] += tape.inputs[idx].T @ g
            self.store.grad(name + ".b")[...] += g.sum(axis=0)
        return g @ self.store.value(name + ".W").T

    def backward(self, tape: Tape, output_grad, accumulate: bool = True) -> np.ndarray:
        """Accumulate parameter gradients; return the gradient w.r.t. the input."""
        if tape.owner is not self:
            raise TapeMismatch("tape was recorded by a different network")
        g = np.asarray(output_grad, dtype=float)
        if g.shape != tape.batch_shape + (self.spec.output_dim,):
            raise TapeMismatch(f"output grad shape {g.shape} does not match the tape")
        g = g.reshape(-1, self.spec.output_dim)
        s = self.spec.slope
        if self.spec.block_count == 0:
            g_in = self._affine_back(tape, 0, g, accumulate)
        else:
            n_layers = len(self._names)
            g_h = self._affine_back(tape, n_layers - 1, g, accumulate)
            idx = n_layers - 2
            for _ in range(self.spec.block_count):
                g_t = g_h
                for _ in range(self.spec.depth_per_block):
                    z = tape.preacts[idx]
                    g_t = self._affine_back(tape, idx, g_t * np.where(z > 0, 1.0, s), accumulate)
                    idx -= 1
                g_h = g_h + g_t
            z = tape.preacts[0]
            g_in = self._affine_back(tape, 0, g_h * np.where(z > 0, 1.0, s), accumulate)
        return g_in.reshape(tape.batch_shape + (self.spec.input_dim,))


def mlp_forward(spec: NetworkSpec, params: ParamStore, x, prefix: str = ""):
    return Mlp(spec, params, prefix).forward(x)


def backward(tape: Tape, output_grad, params: ParamStore) -> np.ndarray:
    if tape.owner.store is not params:
        raise TapeMismatch("tape belongs to a different parameter store")
    return tape.owner.backward(tape, output_grad)


class RmsProp:
    """``v <- rho v + (1 - rho) g^2``; ``theta <- theta - lr g / (sqrt(v) + eps)``."""

    def __init__(self, size: int, lr: float = 1e-4, rho: float = 0.99, eps: float = 1e-8):
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.second_moment = np.zeros(size)

    def step(self, params: ParamStore):
        g = params.grads
        v = self.second_moment
        v *= self.rho
        v += (1.0 - self.rho) * g * g
        params.values -= self.lr * g / (np.sqrt(v) + self.eps)
        params.zero_grad()


def rmsprop_step(params: ParamStore, state: RmsProp):
    state.step(params)


def clip_weights(params: ParamStore, c: float):
    if not c > 0:
        raise BadClip(f"clip constant must be positive, got {c}")
    np.clip(params.values, -c, c, out=params.values)


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise DimMismatch(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# checkpoint files: magic, entry count, then per entry
# (name length, name, ndim, dims, little-endian f64 payload)
_MAGIC = b"LIFTCKP1"


def save_params(path, arrays: dict):
    buf = [_MAGIC, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = name.encode("utf-8")
        buf.append(struct.pack("<H", len(raw)) + raw)
        buf.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.append(arr.tobytes())
    Path(path).write_bytes(b"".join(buf))


def load_params(path) -> dict:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = 8
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            size = int(np.prod(shape))
            out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(float)
            pos += 8 * size
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: truncated checkpoint") from e
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after {count} entries")
    return out


def save_checkpoint(path, arrays: dict, manifest: dict):
    """Write ``path`` (parameters) and ``path`` + ``.json`` (manifest)."""
    path = Path(path)
    save_params(path, arrays)
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    mpath = Path(str(path) + ".json")
    if not path.exists() or not mpath.exists():
        raise CheckpointError(f"checkpoint {path} or its manifest is missing")
    return load_params(path), json.loads(mpath.read_text())
