"""Dense float64 tensor kernel with reverse-mode gradients.

Small taped autodiff engine over numpy arrays, plus the layer set needed by
the matching towers: dense, 2D convolution, max-pool, embedding lookup, an
LSTM cell, binary cross-entropy, Adam with L2 weight decay, and a central
finite-difference gradient checker. Everything runs in 64-bit floats and is
deterministic given seeds.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when operands do not have compatible shapes."""


class GraphError(RuntimeError):
    """Raised when backward is called without a usable forward graph."""


class NumericsError(RuntimeError):
    """Raised on non-finite gradients or values where finiteness is required."""


class CheckpointError(RuntimeError):
    """Raised on malformed or mismatching checkpoint files."""


# ---------------------------------------------------------------------------
# Tensor and graph


class Tensor:
    """A node in the computation graph holding a float64 ndarray.

    Tensors produced by operations keep closures for their backward pass;
    constants (no grad-requiring parents) carry no graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "_backward_fn")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = tuple(parents)
        self._backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return mul(reduce_sum(self), 1.0 / self.size)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """Trainable tensor with a stable name, accumulated gradient and Adam state."""

    __slots__ = ("name", "m", "v", "step")

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data, parents, backward_fn):
    if any(p.requires_grad for p in parents):
        return Tensor(data, parents=parents, backward_fn=backward_fn)
    return Tensor(data)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor):
    """Run reverse-mode accumulation from a scalar loss node.

    Gradients accumulate into every reachable Parameter's .grad (they are not
    zeroed here; see zero_grads). Intermediate node gradients are transient.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.parents and loss._backward_fn is None:
        raise GraphError("backward called before any forward computation")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
            continue
        if node._backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node._backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grads(params):
    for p in params:
        p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# Elementwise and structural operations


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), bwd)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), bwd)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), bwd)


def relu(t):
    t = _wrap(t)
    mask = t.data > 0.0
    out = np.where(mask, t.data, 0.0)

    def bwd(g):
        return (g * mask,)

    return _node(out, (t,), bwd)


def sigmoid(t):
    t = _wrap(t)
    x = t.data
    out = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _node(out, (t,), bwd)


def tanh(t):
    t = _wrap(t)
    out = np.tanh(t.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _node(out, (t,), bwd)


def log(t):
    t = _wrap(t)
    if np.any(t.data <= 0.0):
        raise NumericsError("log of a non-positive value")
    out = np.log(t.data)

    def bwd(g):
        return (g / t.data,)

    return _node(out, (t,), bwd)


def clamp(t, lo, hi):
    t = _wrap(t)
    out = np.clip(t.data, lo, hi)
    mask = (t.data >= lo) & (t.data <= hi)

    def bwd(g):
        return (g * mask,)

    return _node(out, (t,), bwd)


def reduce_sum(t, axis=None, keepdims=False):
    t = _wrap(t)
    out = t.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, t.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, t.data.shape).copy(),)

    return _node(out, (t,), bwd)


def reshape(t, *shape):
    t = _wrap(t)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = t.data.reshape(shape)

    def bwd(g):
        return (g.reshape(t.data.shape),)

    return _node(out, (t,), bwd)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bwd(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _node(out, tuple(tensors), bwd)


def narrow(t, axis, start, length):
    """Slice `length` entries from `start` along `axis`."""
    t = _wrap(t)
    idx = [slice(None)] * t.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = t.data[idx]

    def bwd(g):
        full = np.zeros_like(t.data)
        full[idx] = g
        return (full,)

    return _node(out, (t,), bwd)


# ---------------------------------------------------------------------------
# Layers


def dense_forward(x, weights, bias=None):
    """Affine layer: x @ weights (+ bias). x is (batch, n_in)."""
    x, weights = _wrap(x), _wrap(weights)
    if x.data.ndim != 2 or x.data.shape[1] != weights.data.shape[0]:
        raise ShapeError(
            f"dense_forward: input {x.data.shape} incompatible with weights {weights.data.shape}")
    out = matmul(x, weights)
    if bias is not None:
        out = add(out, bias)
    return out


def embedding_lookup(indices, table):
    """Gather rows of `table` (V, E) or entries of a vector (V,) at `indices`."""
    table = _wrap(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("embedding_lookup: indices must be integers")
    n = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(
            f"embedding_lookup: index out of bounds for table of {n} rows "
            f"(got range {idx.min()}..{idx.max()})")
    out = table.data[idx]

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(out, (table,), bwd)


def conv2d_forward(x, kernels, bias=None):
    """Valid 2D convolution, stride 1. x is (B, C_in, H, W), kernels (C_out, C_in, kh, kw)."""
    x, kernels = _wrap(x), _wrap(kernels)
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError(
            f"conv2d_forward: need 4-D input and kernels, got {x.data.shape} and {kernels.data.shape}")
    b_n, c_in, h, w = x.data.shape
    c_out, c_in2, kh, kw = kernels.data.shape
    if c_in != c_in2 or kh > h or kw > w:
        raise ShapeError(
            f"conv2d_forward: kernels {kernels.data.shape} do not fit input {x.data.shape}")
    ho, wo = h - kh + 1, w - kw + 1
    s = x.data.strides
    cols = np.lib.stride_tricks.as_strided(
        x.data, (b_n, c_in, kh, kw, ho, wo), (s[0], s[1], s[2], s[3], s[2], s[3]))
    out = np.tensordot(cols, kernels.data, axes=([1, 2, 3], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bwd_k(g):
        # g: (B, C_out, Ho, Wo)
        dk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        dx = np.zeros_like(x.data)
        for a in range(kh):
            for b in range(kw):
                patch = np.tensordot(g, kernels.data[:, :, a, b], axes=([1], [0]))
                dx[:, :, a:a + ho, b:b + wo] += patch.transpose(0, 3, 1, 2)
        return dx, dk

    node = _node(out, (x, kernels), bwd_k)
    if bias is not None:
        bias = _wrap(bias)
        node = add(node, reshape(bias, (1, c_out, 1, 1)))
    return node


def maxpool(x, pool):
    """Non-overlapping max pooling with window `pool` = (ph, pw); trailing rows/cols drop."""
    x = _wrap(x)
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool: need 4-D input, got {x.data.shape}")
    ph, pw = pool
    b_n, c, h, w = x.data.shape
    ho, wo = h // ph, w // pw
    if ho == 0 or wo == 0:
        raise ShapeError(f"maxpool: window {pool} larger than input {x.data.shape}")
    crop = x.data[:, :, :ho * ph, :wo * pw]
    win = crop.reshape(b_n, c, ho, ph, wo, pw).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b_n, c, ho, wo, ph * pw)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dcrop = dwin.reshape(b_n, c, ho, wo, ph, pw).transpose(0, 1, 2, 4, 3, 5)
        dcrop = dcrop.reshape(b_n, c, ho * ph, wo * pw)
        dx = np.zeros_like(x.data)
        dx[:, :, :ho * ph, :wo * pw] = dcrop
        return (dx,)

    return _node(out, (x,), bwd)


@dataclass
class LstmState:
    """Hidden and cell vectors, each (batch, hidden)."""
    h: Tensor
    c: Tensor


def lstm_zero_state(batch: int, hidden: int) -> LstmState:
    return LstmState(Tensor(np.zeros((batch, hidden))), Tensor(np.zeros((batch, hidden))))


def lstm_step(x, state: LstmState, weights, bias) -> LstmState:
    """One LSTM step with the standard gate set (input/forget/output/candidate).

    weights is ((input_dim + hidden), 4*hidden) with gate blocks ordered i, f, o, g.
    """
    x = _wrap(x)
    hidden = state.h.data.shape[1]
    expected = x.data.shape[1] + hidden
    if _wrap(weights).data.shape != (expected, 4 * hidden):
        raise ShapeError(
            f"lstm_step: weights {_wrap(weights).data.shape} do not match input "
            f"{x.data.shape} with hidden size {hidden}")
    z = dense_forward(concat([x, state.h], axis=1), weights, bias)
    i = sigmoid(narrow(z, 1, 0, hidden))
    f = sigmoid(narrow(z, 1, hidden, hidden))
    o = sigmoid(narrow(z, 1, 2 * hidden, hidden))
    g = tanh(narrow(z, 1, 3 * hidden, hidden))
    c = add(mul(f, state.c), mul(i, g))
    h = mul(o, tanh(c))
    return LstmState(h, c)


def bce_loss(scores, labels):
    """Mean binary cross-entropy of probability scores against {0,1} labels.

    Scores are clamped to [1e-12, 1 - 1e-12] before the logs, so the loss is
    always finite.
    """
    scores = _wrap(scores)
    t = np.asarray(labels, dtype=np.float64).reshape(scores.data.shape)
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ShapeError("bce_loss: labels must be 0 or 1")
    s = clamp(scores, 1e-12, 1.0 - 1e-12)
    losses = -(mul(log(s), t) + mul(log(add(mul(s, -1.0), 1.0)), 1.0 - t))
    return losses.mean()


# ---------------------------------------------------------------------------
# Initialization and optimization


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform init in +-1/sqrt(fan_in); reproducible from the generator state."""
    lim = 1.0 / np.sqrt(float(fan_in))
    return rng.uniform(-lim, lim, size=shape)


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """Bias-corrected Adam update over `params`.

    Weight decay is the classic coupled L2 form: the decay term is added to
    the gradient before the moment updates.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericsError(f"non-finite gradient for parameter {p.name!r}")
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    """Per-parameter worst relative error between analytic and numeric gradients."""
    tolerance: float
    errors: dict = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def __str__(self):
        lines = [f"grad check (tolerance {self.tolerance:g}): "
                 f"{'PASS' if self.passed else 'FAIL'}, worst {self.worst:.3e}"]
        for name, err in sorted(self.errors.items()):
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def grad_check(loss_fn, params, h=1e-5, tolerance=1e-4) -> GradCheckReport:
    """Compare analytic gradients of loss_fn() against central finite differences.

    loss_fn must rebuild its forward graph from the current parameter values on
    every call and return a scalar Tensor. Fragments are capped at 1e4 scalar
    parameters to keep the check tractable.
    """
    params = list(params)
    total = sum(p.data.size for p in params)
    if total > 10_000:
        raise ValueError(f"grad_check: fragment has {total} parameters, limit is 10000")

    zero_grads(params)
    loss = loss_fn()
    backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}

    report = GradCheckReport(tolerance=tolerance)
    for p in params:
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic[p.name].reshape(-1)[i]
            # Relative error with a small floor so that near-zero gradient
            # coordinates are compared on an absolute scale.
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
        report.errors[p.name] = worst
    return report


# ---------------------------------------------------------------------------
# Checkpoints

_CHECKPOINT_MAGIC = b"PJFC\x01\n"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def save_checkpoint(path, config: dict, params: dict):
    """Write named float64 arrays plus a config manifest to a single file.

    The byte layout is deterministic: a JSON header with sorted keys followed
    by the raw little-endian array data in header order.
    """
    names = sorted(params)
    entries = []
    offset = 0
    for name in names:
        arr = np.asarray(params[name], dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "format_version": 1,
        "config": config,
        "config_hash": config_hash(config),
        "params": entries,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack(">Q", len(blob)))
        fh.write(blob)
        for name in names:
            arr = np.ascontiguousarray(params[name], dtype=np.float64)
            fh.write(arr.astype("<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint; returns (config, {name: ndarray}). Validates the layout."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack(">Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        if header.get("format_version") != 1:
            raise CheckpointError(f"{path}: unsupported format version")
        if config_hash(header["config"]) != header["config_hash"]:
            raise CheckpointError(f"{path}: config hash mismatch")
        params = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise CheckpointError(f"{path}: truncated data for {entry['name']!r}")
            params[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return header["config"], params


def validate_params(expected: dict, loaded: dict, context: str):
    """Check that `loaded` has exactly the names and shapes of `expected`."""
    missing = sorted(set(expected) - set(loaded))
    if missing:
        raise CheckpointError(f"{context}: missing parameters {missing[:4]}")
    for name, arr in expected.items():
        if tuple(loaded[name].shape) != tuple(np.asarray(arr).shape):
            raise CheckpointError(
                f"{context}: shape mismatch for {name!r}: "
                f"{loaded[name].shape} vs {np.asarray(arr).shape}")
