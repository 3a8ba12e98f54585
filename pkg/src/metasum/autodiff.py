"""Tape-based reverse-mode automatic differentiation on dense numpy arrays.

Every operation records a node on the innermost active ``Tape``. Backward
rules are themselves written in terms of the public ops, so gradients can
be re-entered (``create_graph=True``) to differentiate through an inner
optimization loop. 64-bit floats are the default; ``set_dtype`` switches
the whole engine to 32-bit when speed matters more than checkability.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float64


def set_dtype(dtype) -> None:
    """Set the global float dtype (np.float64 default, np.float32 opt-in)."""
    global _DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DTYPE = dtype


def get_dtype():
    return _DTYPE


class AutodiffError(Exception):
    """Base class for engine failures."""


class ShapeError(AutodiffError):
    """Inputs not conformable for the requested operation."""


class NonFiniteError(AutodiffError):
    """An operation produced NaN or Inf."""


class TapeError(AutodiffError):
    """Tape misuse: detached graph, non-scalar loss, double backward."""


class Tensor:
    """Dense float tensor: row-major data plus gradient-tracking metadata.

    ``requires_grad=True`` on a tensor with no recorded node marks a leaf
    (a parameter). Tensors produced by ops while a tape is active carry a
    ``node`` reference and propagate ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "name", "node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"tensor {name or ''} contains non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.name = self.name
        out.node = None
        return out

    def copy(self, requires_grad: bool | None = None, name: str | None = None) -> Tensor:
        return Tensor(
            self.data.copy(),
            requires_grad=self.requires_grad if requires_grad is None else requires_grad,
            name=self.name if name is None else name,
        )

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad, name=name)


class _Node:
    __slots__ = ("inputs", "output", "vjp", "tape")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor, vjp: Callable, tape: "Tape"):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp
        self.tape = tape


_STACK = threading.local()


def _tape_stack() -> list:
    if not hasattr(_STACK, "tapes"):
        _STACK.tapes = []
    return _STACK.tapes


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class _PushCtx:
    """Push a tape (or None, to suspend recording) for the block's duration."""

    def __init__(self, entry):
        self._entry = entry

    def __enter__(self):
        _tape_stack().append(self._entry)
        return self._entry

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


def stop_recording() -> _PushCtx:
    return _PushCtx(None)


class Tape:
    """Append-only record of operations; topological by construction.

    Single-threaded by design: one tape per task. ``backward`` consumes the
    tape (a second call raises); ``grad`` is the reusable query used for
    higher-order differentiation.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def _index_of(self, t: Tensor) -> int:
        node = t.node
        if node is None:
            raise TapeError("tensor is not attached to a tape (detached graph)")
        if node.tape is not self:
            raise TapeError("tensor was recorded on a different tape")
        for i in range(len(self.nodes) - 1, -1, -1):
            if self.nodes[i] is node:
                return i
        raise TapeError("node missing from tape")

    def grad(
        self,
        output: Tensor,
        wrt: Iterable[Tensor],
        create_graph: bool = False,
    ) -> list[Tensor]:
        """Gradients of scalar ``output`` w.r.t. each tensor in ``wrt``.

        With ``create_graph=True`` the returned gradients are recorded on
        this same tape, so they can be differentiated again. ``wrt`` may
        contain leaves or intermediate tensors.
        """
        if output.shape != ():
            raise TapeError(f"loss must be scalar, got shape {output.shape}")
        wrt = list(wrt)
        start = self._index_of(output)
        keep = {id(t) for t in wrt}
        grads: dict[int, Tensor] = {id(output): Tensor(np.ones((), dtype=_DTYPE))}
        ctx = _PushCtx(self) if create_graph else stop_recording()
        with ctx:
            for i in range(start, -1, -1):
                node = self.nodes[i]
                g = grads.get(id(node.output))
                if g is None:
                    continue
                if id(node.output) not in keep:
                    del grads[id(node.output)]
                for inp, gi in zip(node.inputs, node.vjp(g)):
                    if gi is None:
                        continue
                    if not (inp.requires_grad or inp.node is not None):
                        continue
                    prev = grads.get(id(inp))
                    grads[id(inp)] = gi if prev is None else add(prev, gi)
        out = []
        for t in wrt:
            g = grads.get(id(t))
            if g is None:
                g = Tensor(np.zeros(t.shape, dtype=_DTYPE))
            out.append(g)
        return out

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
        """Consume the tape once, returning a gradient per requires_grad leaf."""
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward")
        self._consumed = True
        if wrt is None:
            seen: dict[int, Tensor] = {}
            start = self._index_of(loss)
            for node in self.nodes[: start + 1]:
                for inp in node.inputs:
                    if inp.requires_grad and inp.node is None:
                        seen.setdefault(id(inp), inp)
            targets = list(seen.values())
        else:
            targets = list(wrt)
        grads = self.grad(loss, targets, create_graph=False)
        return {t: g for t, g in zip(targets, grads)}


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Run reverse-mode accumulation from a scalar loss on its own tape."""
    if loss.node is None:
        raise TapeError("loss is not attached to a tape (detached graph)")
    return loss.node.tape.backward(loss, wrt=wrt)


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.name = None
    tape = _active_tape()
    tracked = tape is not None and any(t.requires_grad or t.node is not None for t in inputs)
    if tracked:
        node = _Node(tuple(inputs), out, vjp, tape)
        tape.nodes.append(node)
        out.node = node
        out.requires_grad = True
    else:
        out.node = None
        out.requires_grad = False
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _sum_to_shape(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = reduce_sum(g, axis=0)
    for ax, (gs, s) in enumerate(zip(g.shape, shape)):
        if s == 1 and gs != 1:
            g = reduce_sum(g, axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementary ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc

    def vjp(g: Tensor):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

    return _record("add", out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from exc

    def vjp(g: Tensor):
        return _sum_to_shape(g, a.shape), _sum_to_shape(neg(g), b.shape)

    return _record("sub", out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc

    def vjp(g: Tensor):
        return _sum_to_shape(mul(g, b), a.shape), _sum_to_shape(mul(g, a), b.shape)

    return _record("mul", out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def vjp(g: Tensor):
        return (neg(g),)

    return _record("neg", -a.data, (a,), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = _as_tensor(a)
    s = float(s)

    def vjp(g: Tensor):
        return (scale(g, s),)

    return _record("scale", a.data * s, (a,), vjp)


def shift(a: Tensor, c: float) -> Tensor:
    """Add a python scalar constant."""
    a = _as_tensor(a)

    def vjp(g: Tensor):
        return (g,)

    return _record("shift", a.data + float(c), (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}") from exc

    def vjp(g: Tensor):
        ga = _sum_to_shape(matmul(g, transpose_last2(b)), a.shape)
        gb = _sum_to_shape(matmul(transpose_last2(a), g), b.shape)
        return ga, gb

    return _record("matmul", out, (a, b), vjp)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))

    def vjp(g: Tensor):
        return (permute(g, inverse),)

    return _record("permute", np.transpose(a.data, axes), (a,), vjp)


def transpose_last2(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape

    def vjp(g: Tensor):
        return (reshape(g, old),)

    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {tuple(shape)}") from exc
    return _record("reshape", out, (a,), vjp)


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    in_shape = a.shape

    def vjp(g: Tensor):
        if axis is None:
            gk = reshape(g, (1,) * len(in_shape))
        elif not keepdims:
            kshape = list(in_shape)
            kshape[axis] = 1
            gk = reshape(g, kshape)
        else:
            gk = g
        return (broadcast_to(gk, in_shape),)

    return _record("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def reduce_mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    in_shape = a.shape

    def vjp(g: Tensor):
        return (_sum_to_shape(g, in_shape),)

    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast: {a.shape} -> {shape}") from exc
    return _record("broadcast", out, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    holder: list[Tensor] = []

    def vjp(g: Tensor):
        return (mul(g, holder[0]),)

    result = _record("exp", np.exp(a.data), (a,), vjp)
    holder.append(result)
    return result


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def vjp(g: Tensor):
        return (mul(g, power(a, -1.0)),)

    return _record("log", np.log(a.data), (a,), vjp)


def power(a: Tensor, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)

    def vjp(g: Tensor):
        return (mul(g, scale(power(a, p - 1.0), p)),)

    return _record("power", np.power(a.data, p), (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    holder: list[Tensor] = []

    def vjp(g: Tensor):
        o = holder[0]
        return (mul(g, shift(neg(mul(o, o)), 1.0)),)

    result = _record("tanh", np.tanh(a.data), (a,), vjp)
    holder.append(result)
    return result


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = (a.data > 0).astype(_DTYPE)

    def vjp(g: Tensor):
        return (mul(g, Tensor(mask)),)

    return _record("relu", a.data * mask, (a,), vjp)


def stop_gradient(a: Tensor) -> Tensor:
    return a.detach()


# ---------------------------------------------------------------------------
# indexing ops (mutually adjoint pairs)
# ---------------------------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding ids out of range [0, {table.shape[0]}): "
            f"min {ids.min()}, max {ids.max()}"
        )
    n_rows = table.shape[0]

    def vjp(g: Tensor):
        return (scatter_rows(g, ids, n_rows),)

    return _record("embedding", table.data[ids], (table,), vjp)


def scatter_rows(src: Tensor, ids: np.ndarray, n_rows: int) -> Tensor:
    """Adjoint of embedding: accumulate src rows into a (n_rows, d) table."""
    src = _as_tensor(src)
    ids = np.asarray(ids)
    d = src.shape[-1]
    out = np.zeros((n_rows, d), dtype=_DTYPE)
    np.add.at(out, ids.ravel(), src.data.reshape(-1, d))

    def vjp(g: Tensor):
        return (embedding(g, ids),)

    return _record("scatter_rows", out, (src,), vjp)


def take_lastdim(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry per row along the last axis: out[...] = a[..., idx[...]]."""
    a = _as_tensor(a)
    idx = np.asarray(idx)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"take_lastdim: idx {idx.shape} vs tensor {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-1]):
        raise ShapeError(f"take_lastdim index out of range [0, {a.shape[-1]})")
    depth = a.shape[-1]
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def vjp(g: Tensor):
        return (put_lastdim(g, idx, depth),)

    return _record("take_lastdim", out, (a,), vjp)


def put_lastdim(src: Tensor, idx: np.ndarray, depth: int) -> Tensor:
    """Adjoint of take_lastdim: scatter src into zeros along a new last axis."""
    src = _as_tensor(src)
    idx = np.asarray(idx)
    out = np.zeros(src.shape + (depth,), dtype=_DTYPE)
    np.put_along_axis(out, idx[..., None], src.data[..., None], axis=-1)

    def vjp(g: Tensor):
        return (take_lastdim(g, idx),)

    return _record("put_lastdim", out, (src,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g: Tensor):
        outs = []
        for i in range(len(parts)):
            key = [slice(None)] * g.ndim
            key[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(slice_tensor(g, tuple(key)))
        return tuple(outs)

    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[p.shape for p in parts]}") from exc
    return _record("concat", out, tuple(parts), vjp)


def slice_tensor(a: Tensor, key: tuple) -> Tensor:
    """Basic slicing (tuple of slices); adjoint pads back with zeros."""
    a = _as_tensor(a)
    in_shape = a.shape

    def vjp(g: Tensor):
        return (pad_slice(g, key, in_shape),)

    return _record("slice", a.data[key].copy(), (a,), vjp)


def pad_slice(src: Tensor, key: tuple, shape: tuple[int, ...]) -> Tensor:
    """Adjoint of slice_tensor: place src into zeros of the original shape."""
    src = _as_tensor(src)
    out = np.zeros(shape, dtype=_DTYPE)
    out[key] = src.data

    def vjp(g: Tensor):
        return (slice_tensor(g, key),)

    return _record("pad_slice", out, (src,), vjp)


# ---------------------------------------------------------------------------
# composite neural-net ops
# ---------------------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    a = _as_tensor(a)
    cubic = mul(mul(a, a), a)
    inner = scale(add(a, scale(cubic, 0.044715)), _GELU_C)
    return scale(mul(a, shift(tanh(inner), 1.0)), 0.5)


def softmax_lastdim(a: Tensor) -> Tensor:
    """Shift-stable softmax along the last axis; the max-shift is detached."""
    a = _as_tensor(a)
    m = Tensor(a.data.max(axis=-1, keepdims=True))
    e = exp(sub(a, m))
    z = reduce_sum(e, axis=-1, keepdims=True)
    return mul(e, power(z, -1.0))


def log_softmax_lastdim(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    m = Tensor(a.data.max(axis=-1, keepdims=True))
    s = sub(a, m)
    z = log(reduce_sum(exp(s), axis=-1, keepdims=True))
    return sub(s, z)


def layernorm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    a = _as_tensor(a)
    n = a.shape[-1]
    mu = scale(reduce_sum(a, axis=-1, keepdims=True), 1.0 / n)
    d = sub(a, mu)
    var = scale(reduce_sum(mul(d, d), axis=-1, keepdims=True), 1.0 / n)
    return mul(d, power(shift(var, eps), -0.5))


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rate == 0 or no rng supplied."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate).astype(_DTYPE) / (1.0 - rate)
    return mul(a, Tensor(keep))


def cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-position NLL of integer targets under softmax(logits)."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} vs logits {logits.shape}")
    return neg(take_lastdim(log_softmax_lastdim(logits), targets))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


# ---------------------------------------------------------------------------
# spec surface: primitive dispatch, grad_check
# ---------------------------------------------------------------------------

_PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "relu": relu,
    "gelu": gelu,
    "softmax-lastdim": softmax_lastdim,
    "layernorm": layernorm,
    "embedding-lookup": embedding,
    "concat": concat,
    "slice": slice_tensor,
    "dropout": dropout,
    "cross-entropy-with-logits": cross_entropy_with_logits,
}


def forward_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch one of the named forward primitives onto the active tape."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    return fn(*inputs, **kwargs)


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    probes: int


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    tol: float = 1e-5,
    rng: np.random.Generator | None = None,
    max_probes: int | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar f against central differences.

    Probes every coordinate of x, or a seeded random subset when
    ``max_probes`` caps the work. Relative error uses max(|a|, |n|, 1) as
    the denominator so near-zero gradients are judged absolutely.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(leaf)
    if loss.shape != ():
        raise TapeError("grad_check needs a scalar-valued f")
    if loss.node is None:  # f is constant w.r.t. x
        analytic = np.zeros(x.shape, dtype=_DTYPE)
    else:
        analytic = tape.backward(loss, wrt=[leaf])[leaf].data

    flat = x.data.ravel()
    n = flat.size
    if max_probes is not None and max_probes < n:
        gen = rng if rng is not None else np.random.default_rng(0)
        idxs = gen.choice(n, size=max_probes, replace=False)
    else:
        idxs = np.arange(n)

    def eval_at(vec: np.ndarray) -> float:
        out = f(Tensor(vec.reshape(x.shape)))
        val = float(out.data)
        if not math.isfinite(val):
            raise NonFiniteError("f is non-finite at a probe point")
        return val

    max_err = 0.0
    for i in idxs:
        plus = flat.copy()
        plus[i] += eps
        minus = flat.copy()
        minus[i] -= eps
        numeric = (eval_at(plus) - eval_at(minus)) / (2.0 * eps)
        a = analytic.ravel()[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
        max_err = max(max_err, err)
    return GradCheckReport(max_rel_error=max_err, passed=max_err < tol, probes=len(idxs))
