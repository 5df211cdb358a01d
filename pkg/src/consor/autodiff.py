"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

Sized for desk-scale encoder training: operations record onto the active
``Tape`` (a context manager), ``backward`` replays it in reverse, and an
adaptive-moment optimizer updates parameters in place.  Everything runs in
64-bit arithmetic so gradients can be checked tightly against central
finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeMismatch(AutodiffError):
    pass


class AxisOutOfRange(AutodiffError):
    pass


class NotScalarLoss(AutodiffError):
    pass


class DanglingTape(AutodiffError):
    pass


class TapeNode:
    __slots__ = ("inputs", "output", "backward_fn", "tape")

    def __init__(self, inputs, output, backward_fn, tape):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Ordered record of executed primitives; use as a context manager.

    Exiting the context stops recording and releases the recorded graph, so
    ``backward`` must run inside the ``with`` block.  Releasing breaks the
    tensor/node reference cycles; without it, every training batch would
    leave a full forward graph behind for the cycle collector, whose
    thresholds count objects rather than array bytes.
    """

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []
        self.released = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()
        self.release()

    def release(self) -> None:
        """Drop the graph: recorded tensors keep data and grads, lose ancestry."""
        for node in self.nodes:
            node.output.creator = None
            node.inputs = ()
            node.output = None
            node.backward_fn = None
        self.nodes.clear()
        self.released = True


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "creator")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.creator: TapeNode | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return take_slice(self, key)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    tape = active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        node = TapeNode(inputs, out, backward_fn, tape)
        out.creator = node
        tape.nodes.append(node)
    return out


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise AxisOutOfRange(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim == b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeMismatch(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    elif a.ndim == b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeMismatch(f"matmul: incompatible batched shapes {a.shape} @ {b.shape}")
    else:
        raise ShapeMismatch(f"matmul supports 2-D or batched 3-D operands, got {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        swap = (0, 2, 1) if a.ndim == 3 else (1, 0)
        return g @ b.data.transpose(swap), a.data.transpose(swap) @ g

    return _record(out, (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeMismatch("concat of zero tensors")
    axis = _normalize_axis(axis, tensors[0].ndim)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            g[(slice(None),) * axis + (slice(offsets[i], offsets[i + 1]),)]
            for i in range(len(tensors))
        )

    return _record(out, tuple(tensors), backward)


def take_slice(a: Tensor, key) -> Tensor:
    out = Tensor(a.data[key])

    def backward(g):
        gx = np.zeros_like(a.data)
        gx[key] = g
        return (gx,)

    return _record(out, (a,), backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows along axis 0; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(a.data[idx])

    def backward(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(out, (a,), backward)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))
    return _record(out, (a,), lambda g: (g.transpose(inverse),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0
    return _record(out, (a,), lambda g: (g * mask,))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    out = Tensor(y)
    # Subgradient guard: clamp the denominator so a zero input poisons
    # nothing downstream (treated as slope 0 contribution).
    return _record(out, (a,), lambda g: (g / (2.0 * np.maximum(y, 1e-12)),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _normalize_axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), backward)


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance normalization along ``axis`` (no affine part)."""
    axis = _normalize_axis(axis, a.ndim)
    mu = a.data.mean(axis=axis, keepdims=True)
    var = a.data.var(axis=axis, keepdims=True)
    std = np.sqrt(var + eps)
    xhat = (a.data - mu) / std
    out = Tensor(xhat)

    def backward(g):
        g_mean = g.mean(axis=axis, keepdims=True)
        gx_mean = (g * xhat).mean(axis=axis, keepdims=True)
        return ((g - g_mean - xhat * gx_mean) / std,)

    return _record(out, (a,), backward)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm (eps guards zero)."""
    axis = _normalize_axis(axis, a.ndim)
    norm = np.sqrt((a.data ** 2).sum(axis=axis, keepdims=True) + eps * eps)
    y = a.data / norm
    out = Tensor(y)

    def backward(g):
        gx_dot = (g * a.data).sum(axis=axis, keepdims=True)
        return (g / norm - y * gx_dot / (norm * norm),)

    return _record(out, (a,), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None = None,
            training: bool = True) -> Tensor:
    """Inverted dropout; the identity when not training or rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise AutodiffError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise AutodiffError("training-mode dropout needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    out = Tensor(a.data * keep)
    return _record(out, (a,), lambda g: (g * keep,))


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    if axis is not None:
        axis = _normalize_axis(axis, a.ndim)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), backward)


def reduce_mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[_normalize_axis(axis, a.ndim)]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from the tape."""
    if loss.data.size != 1:
        raise NotScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if tape.released:
        raise DanglingTape("tape already released; run backward inside the Tape block")

    # Walk the ancestry once: detect nodes recorded on a different tape.
    stack = [loss]
    seen: set[int] = set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        node = t.creator
        if node is None:
            continue
        if node.tape is not tape:
            raise DanglingTape("loss ancestry includes nodes recorded on another tape")
        stack.extend(node.inputs)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        for inp, g_in in zip(node.inputs, node.backward_fn(g_out)):
            if g_in is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g_in
            else:
                grads[key] = g_in

    # Assign accumulated grads; off-ancestry tensors get zeros.
    assigned: set[int] = set()
    for node in tape.nodes:
        for t in node.inputs + (node.output,):
            if t.requires_grad and id(t) not in assigned:
                assigned.add(id(t))
                t.grad = grads.get(id(t), np.zeros_like(t.data))
    if loss.requires_grad and id(loss) not in assigned:
        loss.grad = np.ones_like(loss.data)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    grads: dict[str, np.ndarray] | None = None,
) -> AdamState:
    """One adaptive-moment update with bias correction, in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"grad shape {g.shape} != param shape {p.data.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        p.data -= state.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    return state


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def finite_difference_check(
    fn: Callable[..., Tensor],
    point: Tensor | Sequence[Tensor] | dict[str, Tensor],
    step: float = 1e-4,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` must be deterministic and rebuild its graph from the given
    tensors on each call.  The relative error uses |a| + |fd| in the
    denominator with a 1e-6 floor so near-zero components stay meaningful.
    """
    if isinstance(point, Tensor):
        tensors = [point]
    elif isinstance(point, dict):
        tensors = list(point.values())
    else:
        tensors = list(point)
    for t in tensors:
        t.requires_grad = True

    with Tape() as tape:
        loss = fn(*tensors)
        backward(loss, tape)
    analytic = [t.grad.copy() for t in tensors]

    def evaluate() -> float:
        return float(fn(*tensors).data)

    max_err = 0.0
    for t, a_grad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            f_plus = evaluate()
            flat[i] = original - step
            f_minus = evaluate()
            flat[i] = original
            fd = (f_plus - f_minus) / (2.0 * step)
            a = a_grad.reshape(-1)[i]
            err = abs(a - fd) / max(abs(a) + abs(fd), 1e-6)
            max_err = max(max_err, err)
    return max_err


# ---------------------------------------------------------------------------
# Tensor archive (checkpoint format)
# ---------------------------------------------------------------------------

_ARCHIVE_MAGIC = b"CONSOR-TENSORS-1\n"


def save_tensor_archive(arrays: dict[str, np.ndarray], path: Path) -> None:
    """Flat archive: magic, manifest (names in load order, shapes), raw <f8 data."""
    manifest = {
        "order": list(arrays),
        "shapes": {name: list(np.asarray(a).shape) for name, a in arrays.items()},
        "dtype": "<f8",
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_ARCHIVE_MAGIC)
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        for name in arrays:
            f.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load_tensor_archive(path: Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(len(_ARCHIVE_MAGIC))
        if magic != _ARCHIVE_MAGIC:
            raise AutodiffError(f"{path}: not a tensor archive")
        size = int.from_bytes(f.read(8), "little")
        manifest = json.loads(f.read(size).decode("utf-8"))
        arrays = {}
        for name in manifest["order"]:
            shape = tuple(manifest["shapes"][name])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            if len(buf) != count * 8:
                raise AutodiffError(f"{path}: truncated archive at {name!r}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        if f.read(1):
            raise AutodiffError(f"{path}: trailing bytes after archive payload")
    return arrays
