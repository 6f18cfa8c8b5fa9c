"""Small numpy kernels for the policy network, with hand-written gradients.

Layers are stateless descriptions. Parameters live in a flat ``dict`` keyed
``"<layer>.<tensor>"`` and are treated as immutable snapshots: ``sgd_step``
returns a new dict instead of updating in place.

Tensors flowing between layers use the layout ``(batch, time, ...)``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

DTYPE = np.float64

Params = dict[str, np.ndarray]


class ShapeMismatch(ValueError):
    def __init__(self, what: str, expected: Any, actual: Any):
        super().__init__(f"{what}: expected shape {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class StaleTrace(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, computed after subtracting the row max."""
    z = np.asarray(logits, dtype=DTYPE)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=DTYPE)
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Layer:
    """Base class. Subclasses define shapes, init, forward and backward."""

    kind = "layer"
    stochastic = False

    def __init__(self, name: str, in_shape: tuple[int, ...]):
        self.name = name
        self.in_shape = tuple(in_shape)

    @property
    def out_shape(self) -> tuple[int, ...]:
        return self.in_shape

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def init(self, rng: np.random.Generator) -> Params:
        return {}

    def key(self, tensor: str) -> str:
        return f"{self.name}.{tensor}"

    def describe(self) -> dict:
        return {"kind": self.kind, "name": self.name, "in": list(self.in_shape),
                "out": list(self.out_shape)}

    def forward(self, params: Params, x: np.ndarray, train: bool,
                rng: np.random.Generator | None) -> tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(self, params: Params, cache: Any, dy: np.ndarray,
                 need_dx: bool = True) -> tuple[np.ndarray | None, Params]:
        raise NotImplementedError


class TimeConv1D(Layer):
    """1-D convolution along the feature axis, applied independently per time step.

    Input ``(B, T, F, C_in)``, output ``(B, T, F, C_out)`` with same padding
    and stride 1. Optional ReLU.
    """

    kind = "time_conv1d"

    def __init__(self, name, in_shape, filters: int, kernel_size: int = 3, relu: bool = True):
        super().__init__(name, in_shape)
        if kernel_size % 2 != 1:
            raise ValueError("same padding needs an odd kernel size")
        self.filters = filters
        self.kernel_size = kernel_size
        self.relu = relu

    @property
    def out_shape(self):
        t, f, _ = self.in_shape
        return (t, f, self.filters)

    def param_shapes(self):
        c_in = self.in_shape[2]
        return {self.key("W"): (self.kernel_size, c_in, self.filters),
                self.key("b"): (self.filters,)}

    def init(self, rng):
        k, c_in = self.kernel_size, self.in_shape[2]
        return {self.key("W"): _glorot(rng, (k, c_in, self.filters), k * c_in, k * self.filters),
                self.key("b"): np.zeros(self.filters, dtype=DTYPE)}

    def describe(self):
        return {**super().describe(), "filters": self.filters,
                "kernel_size": self.kernel_size, "relu": self.relu}

    def forward(self, params, x, train, rng):
        w, b = params[self.key("W")], params[self.key("b")]
        pad = self.kernel_size // 2
        f = x.shape[2]
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (0, 0)))
        z = xp[:, :, 0:f, :] @ w[0]
        for j in range(1, self.kernel_size):
            z += xp[:, :, j:j + f, :] @ w[j]
        z += b
        y = np.maximum(z, 0.0) if self.relu else z
        return y, (xp, z)

    def backward(self, params, cache, dy, need_dx=True):
        xp, z = cache
        w = params[self.key("W")]
        if self.relu:
            dy = dy * (z > 0)
        f = dy.shape[2]
        pad = self.kernel_size // 2
        c_in = xp.shape[-1]
        dz = dy.reshape(-1, self.filters)
        dw = np.empty_like(w)
        for j in range(self.kernel_size):
            xj = np.ascontiguousarray(xp[:, :, j:j + f, :]).reshape(-1, c_in)
            dw[j] = xj.T @ dz
        grads = {self.key("W"): dw, self.key("b"): dz.sum(axis=0)}
        if not need_dx:
            return None, grads
        dxp = np.zeros(xp.shape, dtype=DTYPE)
        for j in range(self.kernel_size):
            dxp[:, :, j:j + f, :] += dy @ w[j].T
        return dxp[:, :, pad:pad + f, :], grads


class TimeMaxPool(Layer):
    """Non-overlapping max-pool along the feature axis; trailing remainder dropped."""

    kind = "time_maxpool"

    def __init__(self, name, in_shape, pool_size: int = 2):
        super().__init__(name, in_shape)
        self.pool_size = pool_size

    @property
    def out_shape(self):
        t, f, c = self.in_shape
        return (t, f // self.pool_size, c)

    def describe(self):
        return {**super().describe(), "pool_size": self.pool_size}

    def forward(self, params, x, train, rng):
        p = self.pool_size
        fo = x.shape[2] // p
        # running max over the window offsets; strict ">" keeps the first maximum on ties
        y = x[:, :, 0:fo * p:p, :].copy()
        idx = np.zeros(y.shape, dtype=np.intp)
        for j in range(1, p):
            cand = x[:, :, j:fo * p:p, :]
            better = cand > y
            y[better] = cand[better]
            idx[better] = j
        return y, (idx, x.shape)

    def backward(self, params, cache, dy, need_dx=True):
        idx, shape = cache
        p = self.pool_size
        fo = shape[2] // p
        dx = np.zeros(shape, dtype=DTYPE)
        for j in range(p):
            dx[:, :, j:fo * p:p, :] = np.where(idx == j, dy, 0.0)
        return dx, {}


class TimeFlatten(Layer):
    """``(B, T, F, C) -> (B, T, F*C)``."""

    kind = "time_flatten"

    @property
    def out_shape(self):
        return (self.in_shape[0], int(np.prod(self.in_shape[1:])))

    def forward(self, params, x, train, rng):
        return x.reshape(x.shape[0], x.shape[1], -1), x.shape

    def backward(self, params, cache, dy, need_dx=True):
        return dy.reshape(cache), {}


class LSTM(Layer):
    """Single-layer LSTM over ``(B, T, D)`` returning the last hidden state ``(B, H)``.

    Gate order in the packed weights is input, forget, cell, output. The
    packed weight ``W`` has shape ``(D + H, 4H)`` acting on ``[x_t, h_{t-1}]``.
    """

    kind = "lstm"

    def __init__(self, name, in_shape, units: int, forget_bias: float = 1.0):
        super().__init__(name, in_shape)
        self.units = units
        self.forget_bias = forget_bias

    @property
    def out_shape(self):
        return (self.units,)

    def param_shapes(self):
        d, h = self.in_shape[1], self.units
        return {self.key("W"): (d + h, 4 * h), self.key("b"): (4 * h,)}

    def init(self, rng):
        d, h = self.in_shape[1], self.units
        b = np.zeros(4 * h, dtype=DTYPE)
        b[h:2 * h] = self.forget_bias
        return {self.key("W"): _glorot(rng, (d + h, 4 * h), d + h, 4 * h), self.key("b"): b}

    def describe(self):
        return {**super().describe(), "units": self.units, "forget_bias": self.forget_bias}

    def forward(self, params, x, train, rng):
        w, b = params[self.key("W")], params[self.key("b")]
        bsz, t, d = x.shape
        h_n = self.units
        wx, wh = w[:d], w[d:]
        # input projection for all steps at once
        xw = (x.reshape(bsz * t, d) @ wx).reshape(bsz, t, 4 * h_n) + b
        h = np.zeros((bsz, h_n), dtype=DTYPE)
        c = np.zeros((bsz, h_n), dtype=DTYPE)
        hs = np.empty((t + 1, bsz, h_n), dtype=DTYPE)
        cs = np.empty((t + 1, bsz, h_n), dtype=DTYPE)
        gates = np.empty((t, bsz, 4 * h_n), dtype=DTYPE)
        hs[0], cs[0] = h, c
        for s in range(t):
            a = xw[:, s, :] + h @ wh
            g = np.empty_like(a)
            g[:, :2 * h_n] = _sigmoid(a[:, :2 * h_n])
            g[:, 2 * h_n:3 * h_n] = np.tanh(a[:, 2 * h_n:3 * h_n])
            g[:, 3 * h_n:] = _sigmoid(a[:, 3 * h_n:])
            i, f, gg, o = (g[:, k * h_n:(k + 1) * h_n] for k in range(4))
            c = f * c + i * gg
            h = o * np.tanh(c)
            gates[s], hs[s + 1], cs[s + 1] = g, h, c
        return h, (x, hs, cs, gates)

    def backward(self, params, cache, dy, need_dx=True):
        x, hs, cs, gates = cache
        w = params[self.key("W")]
        bsz, t, d = x.shape
        h_n = self.units
        wh = w[d:]
        dx_gates = np.empty((t, bsz, 4 * h_n), dtype=DTYPE)
        dh = dy.copy()
        dc = np.zeros((bsz, h_n), dtype=DTYPE)
        dwh = np.zeros_like(wh)
        for s in range(t - 1, -1, -1):
            g = gates[s]
            i, f, gg, o = (g[:, k * h_n:(k + 1) * h_n] for k in range(4))
            tc = np.tanh(cs[s + 1])
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            di = dc * gg
            df = dc * cs[s]
            dgg = dc * i
            da = np.concatenate([di * i * (1 - i), df * f * (1 - f),
                                 dgg * (1 - gg * gg), do * o * (1 - o)], axis=1)
            dx_gates[s] = da
            dwh += hs[s].T @ da
            dh = da @ wh.T
            dc = dc * f
        da_all = dx_gates.transpose(1, 0, 2).reshape(bsz * t, 4 * h_n)
        dwx = x.reshape(bsz * t, d).T @ da_all
        db = da_all.sum(axis=0)
        dx = (da_all @ w[:d].T).reshape(bsz, t, d)
        return dx, {self.key("W"): np.concatenate([dwx, dwh], axis=0), self.key("b"): db}


class Dropout(Layer):
    """Inverted dropout: kept units are divided by ``1 - rate`` in train mode."""

    kind = "dropout"
    stochastic = True

    def __init__(self, name, in_shape, rate: float):
        super().__init__(name, in_shape)
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def describe(self):
        return {**super().describe(), "rate": self.rate}

    def forward(self, params, x, train, rng):
        if not train or self.rate == 0.0:
            return x, None
        if rng is None:
            raise ValueError("train-mode dropout needs a random generator")
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * mask, mask

    def backward(self, params, cache, dy, need_dx=True):
        return (dy if cache is None else dy * cache), {}


class Dense(Layer):
    kind = "dense"

    def __init__(self, name, in_shape, units: int, relu: bool = True):
        super().__init__(name, in_shape)
        self.units = units
        self.relu = relu

    @property
    def out_shape(self):
        return (self.units,)

    def param_shapes(self):
        return {self.key("W"): (self.in_shape[0], self.units), self.key("b"): (self.units,)}

    def init(self, rng):
        n_in = self.in_shape[0]
        return {self.key("W"): _glorot(rng, (n_in, self.units), n_in, self.units),
                self.key("b"): np.zeros(self.units, dtype=DTYPE)}

    def describe(self):
        return {**super().describe(), "units": self.units, "relu": self.relu}

    def forward(self, params, x, train, rng):
        z = x @ params[self.key("W")] + params[self.key("b")]
        y = np.maximum(z, 0.0) if self.relu else z
        return y, (x, z)

    def backward(self, params, cache, dy, need_dx=True):
        x, z = cache
        if self.relu:
            dy = dy * (z > 0)
        grads = {self.key("W"): x.T @ dy, self.key("b"): dy.sum(axis=0)}
        return dy @ params[self.key("W")].T, grads


@dataclass
class ForwardTrace:
    """Per-layer inputs and caches from one forward pass over a batch."""

    params: Params
    train: bool
    inputs: list = field(repr=False)
    caches: list = field(repr=False)
    logits: np.ndarray = field(repr=False)


class Sequential:
    """An ordered stack of layers producing logits; the softmax head is applied by callers."""

    def __init__(self, layers: list[Layer]):
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_shape != nxt.in_shape:
                raise ShapeMismatch(f"layer {nxt.name} input", prev.out_shape, nxt.in_shape)
        self.layers = layers

    @property
    def in_shape(self):
        return self.layers[0].in_shape

    @property
    def out_shape(self):
        return self.layers[-1].out_shape

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for layer in self.layers:
            shapes.update(layer.param_shapes())
        return shapes

    def init(self, rng: np.random.Generator) -> Params:
        params = {}
        for layer in self.layers:
            params.update(layer.init(rng))
        return params

    def describe(self) -> list[dict]:
        return [layer.describe() for layer in self.layers]

    def digest(self) -> bytes:
        blob = json.dumps(self.describe(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()

    def check_params(self, params: Params) -> None:
        for k, shape in self.param_shapes().items():
            if k not in params:
                raise KeyError(f"missing parameter {k}")
            if params[k].shape != shape:
                raise ShapeMismatch(f"parameter {k}", shape, params[k].shape)

    def forward(self, params: Params, x: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None,
                keep_trace: bool | None = None) -> tuple[np.ndarray, ForwardTrace | None]:
        """Return logits ``(B, n_out)`` and a trace for :meth:`backward`.

        A trace is kept by default in train mode only. An eval-mode trace can
        be kept too and later handed to :meth:`resume`.
        """
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[1:] != self.in_shape:
            raise ShapeMismatch("network input", ("B",) + self.in_shape, x.shape)
        if keep_trace is None:
            keep_trace = train
        return self._run(params, x, 0, train, rng, keep_trace, [], [])

    def resume(self, trace: ForwardTrace, train: bool = True,
               rng: np.random.Generator | None = None) -> tuple[np.ndarray, ForwardTrace]:
        """Re-run only the layers from the first stochastic one on, reusing the
        deterministic prefix of ``trace``. Equivalent to a fresh forward pass
        with the same parameters and input."""
        start = next((i for i, layer in enumerate(self.layers) if layer.stochastic), len(self.layers))
        return self._run(trace.params, trace.inputs[start], start, train, rng, True,
                         trace.inputs[:start], trace.caches[:start])

    def _run(self, params, x, start, train, rng, keep, inputs, caches):
        inputs, caches = list(inputs), list(caches)
        for layer in self.layers[start:]:
            if keep:
                inputs.append(x)
            x, cache = layer.forward(params, x, train, rng)
            if keep:
                caches.append(cache)
        if not keep:
            return x, None
        return x, ForwardTrace(params=params, train=train, inputs=inputs, caches=caches, logits=x)

    def backward(self, trace: ForwardTrace, dlogits: np.ndarray, params: Params | None = None,
                 input_grad: bool = True) -> tuple[Params, np.ndarray | None]:
        """Gradients of a scalar loss given ``dloss/dlogits``; returns ``(grads, dinput)``."""
        if trace is None or not trace.train:
            raise StaleTrace("backward needs a trace from a train-mode forward pass")
        if params is not None and params is not trace.params:
            raise StaleTrace("trace was computed with a different parameter snapshot")
        dy = np.asarray(dlogits, dtype=DTYPE)
        if dy.shape != trace.logits.shape:
            raise ShapeMismatch("loss gradient", trace.logits.shape, dy.shape)
        grads: Params = {}
        n = len(self.layers)
        for i in range(n - 1, -1, -1):
            need_dx = input_grad or i > 0
            dy, g = self.layers[i].backward(trace.params, trace.caches[i], dy, need_dx=need_dx)
            grads.update(g)
        return grads, dy


def sgd_step(params: Params, grads: Params, learning_rate: float) -> Params:
    """Plain SGD, ``p - lr * g``. Returns a new dict; ``params`` is left untouched."""
    out = {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            out[k] = p
            continue
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient {k}", p.shape, g.shape)
        out[k] = p - learning_rate * g
    extra = set(grads) - set(params)
    if extra:
        raise KeyError(f"gradients for unknown parameters: {sorted(extra)}")
    return out


_CKPT_MAGIC = b"POLN"
_CKPT_VERSION = 1


def save_checkpoint(path: str | Path, net: Sequential, params: Params) -> None:
    """Layout: magic, u16 version, 32-byte architecture digest, u32 count, then
    per tensor: u16 name length, name, u16 ndim, u32 dims, float64 LE values."""
    net.check_params(params)
    parts = [_CKPT_MAGIC, struct.pack("<H", _CKPT_VERSION), net.digest(),
             struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<HH", len(raw), arr.ndim) + raw)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path, net: Sequential) -> Params:
    data = Path(path).read_bytes()
    if data[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a policy checkpoint")
    try:
        (version,) = struct.unpack_from("<H", data, 4)
        if version != _CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        if data[6:38] != net.digest():
            raise CheckpointError(f"{path}: architecture digest does not match")
        (count,) = struct.unpack_from("<I", data, 38)
        pos = 42
        params = {}
        for _ in range(count):
            nlen, ndim = struct.unpack_from("<HH", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode()
            pos += nlen
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if pos + 8 * n > len(data):
                raise CheckpointError(f"{path}: truncated")
            params[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(DTYPE)
            pos += 8 * n
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated") from exc
    net.check_params(params)
    return params
