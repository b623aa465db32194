"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable op records its inputs and a backward rule on the value
graph; :func:`backward` replays that recording once, in reverse topological
order, accumulating gradients additively. Reductions run in numpy's fixed
sequential order and any op producing NaN/Inf raises immediately, so results
are reproducible and silent numerical corruption is impossible.
"""

from __future__ import annotations

import hashlib
import struct
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericalError

_GRAD_STATE = threading.local()

# Mask value added to disallowed attention scores: large enough that exp
# underflows to exactly 0 after max-subtraction, small enough to stay finite.
MASKED_SCORE = -1e30


def _grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    previous = _grad_enabled()
    _GRAD_STATE.enabled = False
    try:
        yield
    finally:
        _GRAD_STATE.enabled = previous


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode grads."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # Operator sugar; every route goes through the op constructors below.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(op)
    out = Tensor(data)
    out._op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over the axes that broadcasting expanded to reach ``shape``."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(out_data, "add", (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, "mul", (a, b), backward_fn)


def matmul(a, b) -> Tensor:
    """Matrix product for 2-d operands, stacked 3-d/4-d batches with matching
    leading dims, or a stacked left operand against a 2-d right operand."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    if not (b.data.ndim == 2 or (a.data.ndim == b.data.ndim and a.data.shape[:-2] == b.data.shape[:-2])):
        raise ValueError(f"unsupported matmul operand shapes: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                k = a.data.shape[-1]
                n = g.shape[-1]
                b.accumulate_grad(a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                b.accumulate_grad(np.swapaxes(a.data, -1, -2) @ g)

    return _make(out_data, "matmul", (a, b), backward_fn)


def reshape(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    t = as_tensor(t)
    out_data = t.data.reshape(shape)

    def backward_fn(g):
        t.accumulate_grad(g.reshape(t.shape))

    return _make(out_data, "reshape", (t,), backward_fn)


def swapaxes(t: Tensor, axis1: int, axis2: int) -> Tensor:
    t = as_tensor(t)
    out_data = np.swapaxes(t.data, axis1, axis2)

    def backward_fn(g):
        t.accumulate_grad(np.swapaxes(g, axis1, axis2))

    return _make(out_data, "swapaxes", (t,), backward_fn)


def tensor_sum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    out_data = t.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            t.accumulate_grad(np.broadcast_to(g, t.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        t.accumulate_grad(np.broadcast_to(g, t.shape))

    return _make(out_data, "sum", (t,), backward_fn)


def tensor_mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    count = t.data.size if axis is None else t.data.shape[axis]
    return mul(tensor_sum(t, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out_data = exp / exp.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        t.accumulate_grad(out_data * (g - inner))

    return _make(out_data, "softmax", (t,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    dim = x.data.shape[-1]
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(variance + epsilon)
    normalized = centered * inv_std
    out_data = normalized * gain.data + bias.data

    def backward_fn(g):
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, dim).sum(axis=0))
        if gain.requires_grad:
            gain.accumulate_grad((g * normalized).reshape(-1, dim).sum(axis=0))
        if x.requires_grad:
            d_norm = g * gain.data
            mean_d = d_norm.mean(axis=-1, keepdims=True)
            mean_dx = (d_norm * normalized).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv_std * (d_norm - mean_d - normalized * mean_dx))

    return _make(out_data, "layer_norm", (x, gain, bias), backward_fn)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Tanh-form GELU activation."""
    x = as_tensor(x)
    inner = _GELU_C * (x.data + _GELU_A * x.data ** 3)
    tanh = np.tanh(inner)
    out_data = 0.5 * x.data * (1.0 + tanh)

    def backward_fn(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data ** 2)
        local = 0.5 * (1.0 + tanh) + 0.5 * x.data * (1.0 - tanh ** 2) * d_inner
        x.accumulate_grad(g * local)

    return _make(out_data, "gelu", (x,), backward_fn)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``weight`` by integer ids of any shape."""
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    out_data = weight.data[ids]

    def backward_fn(g):
        dw = np.zeros_like(weight.data)
        np.add.at(dw, ids, g)
        weight.accumulate_grad(dw)

    return _make(out_data, "embedding", (weight,), backward_fn)


def last_position(t: Tensor) -> Tensor:
    """Select the final sequence position of a (batch, seq, dim) tensor."""
    t = as_tensor(t)
    out_data = t.data[:, -1, :]

    def backward_fn(g):
        dx = np.zeros_like(t.data)
        dx[:, -1, :] = g
        t.accumulate_grad(dx)

    return _make(out_data, "last_position", (t,), backward_fn)


def concat(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = np.concatenate([a.data, b.data], axis=axis)
    split = a.data.shape[axis]

    def backward_fn(g):
        ga, gb = np.split(g, [split], axis=axis)
        if a.requires_grad:
            a.accumulate_grad(ga)
        if b.requires_grad:
            b.accumulate_grad(gb)

    return _make(out_data, "concat", (a, b), backward_fn)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-softmax of the true class over a (n, classes) batch."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ValueError(f"expected (n, classes) logits and (n,) labels, got {logits.shape} and {labels.shape}")
    n = logits.data.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    out_data = -log_probs[np.arange(n), labels].mean()

    def backward_fn(g):
        grad = np.exp(log_probs)
        grad[np.arange(n), labels] -= 1.0
        logits.accumulate_grad(grad * (float(g) / n))

    return _make(out_data, "cross_entropy", (logits,), backward_fn)


def backward(loss: Tensor) -> None:
    """Populate grads of every tensor the scalar loss depends on.

    Gradients accumulate additively across multiple uses of a tensor. Running
    backward twice on the same recorded graph is an error.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise RuntimeError("backward already ran for this graph; rebuild it before differentiating again")
    loss._backward_done = True

    ordered: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            ordered.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad:
                stack.append((parent, False))

    loss.accumulate_grad(np.ones((), dtype=np.float64))
    for node in reversed(ordered):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


class AdamW:
    """Bias-corrected adaptive updates with decoupled weight decay.

    The decay multiplies each parameter by (1 - lr * weight_decay) regardless
    of the gradient, so zero-gradient steps still shrink the weights.
    """

    def __init__(self, params: Iterable[Tensor], learning_rate: float = 5e-5,
                 weight_decay: float = 0.01, beta1: float = 0.9, beta2: float = 0.999,
                 epsilon: float = 1e-8):
        if not 0.0 < beta1 < 1.0 or not 0.0 < beta2 < 1.0:
            raise ValueError(f"betas must lie in (0, 1), got {beta1}, {beta2}")
        self.params = list(params)
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        """Apply one update. Grads are left untouched; the caller zeroes them."""
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise ValueError(f"{len(missing)} parameters have no gradient; run backward first")
        self.step_count += 1
        bias1 = 1.0 - self.beta1 ** self.step_count
        bias2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.epsilon)
            p.data = p.data * (1.0 - self.learning_rate * self.weight_decay) - self.learning_rate * update
            if not np.all(np.isfinite(p.data)):
                raise NumericalError("adamw_step", step=self.step_count)

    def zero_grad(self) -> None:
        zero_grads(self.params)


CHECKPOINT_MAGIC = b"FSC1"
CHECKPOINT_VERSION = 1


def save_checkpoint(arrays: dict[str, np.ndarray], path) -> str:
    """Write named float64 arrays to a versioned binary container.

    A plain-text sidecar manifest (name, shape, sha256 of the raw bytes) is
    written next to the container. Returns the sha256 of the container file.
    """
    path = str(path)
    manifest_lines = []
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for name, array in arrays.items():
            # note: ascontiguousarray would promote 0-d arrays to 1-d;
            # tobytes() already emits C order for any layout
            array = np.asarray(array, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", array.ndim))
            fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
            raw = array.tobytes()
            fh.write(raw)
            shape_text = "x".join(str(d) for d in array.shape) or "scalar"
            manifest_lines.append(f"{name} {shape_text} {hashlib.sha256(raw).hexdigest()}")
    with open(path + ".manifest", "w", encoding="utf-8") as fh:
        fh.write(f"checkpoint-version {CHECKPOINT_VERSION}\n")
        for line in manifest_lines:
            fh.write(line + "\n")
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            n_bytes = 8 * int(np.prod(shape, dtype=np.int64)) if ndim else 8
            arrays[name] = np.frombuffer(fh.read(n_bytes), dtype=np.float64).reshape(shape).copy()
        return arrays
