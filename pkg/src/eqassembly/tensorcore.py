"""Minimal reverse-mode automatic differentiation over numpy arrays.

The engine is eager: every operation computes its numpy result immediately and
records, on the output tensor, its parents and a vector-Jacobian closure.
:func:`backward` topologically sorts the recorded graph into a :class:`Tape`
and walks it exactly once, accumulating gradients additively into the ``grad``
buffers of leaf tensors.

Only the dense operations the equivariant network needs are provided; each is
covered by a central finite-difference oracle in the test suite, and
:func:`gradient_check` exposes that oracle as a library utility.

Determinism: every forward and backward computation lowers to numpy
operations with fixed evaluation order (including ``np.add.at`` for scatter
accumulation), so results are bit-identical across runs for the same inputs
and thread configuration.  Forward evaluation may use threaded BLAS
internally; a graph is built and differentiated by a single writer.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeMismatch",
    "DisconnectedGraph",
    "Tensor",
    "Tape",
    "as_tensor",
    "parameter",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "shift",
    "matmul",
    "batch_contract",
    "softmax",
    "gelu",
    "power",
    "abs_val",
    "maximum_scalar",
    "reduce_sum",
    "reduce_mean",
    "gather",
    "scatter_add",
    "reshape",
    "transpose",
    "flip_last",
    "pad_crop_last",
    "concat",
    "backward",
    "gradient_check",
]


class ShapeMismatch(ValueError):
    """Operand shapes (or subscripts) are incompatible with the operation."""


class DisconnectedGraph(ValueError):
    """backward() was asked for gradients where no differentiable path exists."""


class Tensor:
    """A dense real array plus the bookkeeping for reverse-mode gradients.

    ``data`` is always a numpy array (float32 or float64 in practice);
    ``grad`` is populated on leaves by :func:`backward` and accumulates across
    calls until explicitly reset via :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A leaf view of this tensor's value, cut off from the graph."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    """Lift numpy arrays / scalars to constant tensors; pass tensors through."""
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    """A trainable leaf (requires_grad=True); copies its input buffer."""
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


def constant(data, name: str | None = None) -> Tensor:
    """A non-trainable leaf."""
    return Tensor(data, requires_grad=False, name=name)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant (kept out of the graph)."""
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * np.asarray(c, dtype=a.dtype), (a,), lambda g: (g * c,))


def shift(a, c: float) -> Tensor:
    """Add a python scalar constant (kept out of the graph)."""
    a = as_tensor(a)
    return _make(a.data + np.asarray(float(c), dtype=a.dtype), (a,), lambda g: (g,))


def power(a, p: float) -> Tensor:
    """Elementwise a**p for a constant exponent (caller keeps a in the domain)."""
    a = as_tensor(a)
    p = float(p)
    out = a.data**p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def abs_val(a) -> Tensor:
    """Elementwise absolute value; subgradient 0 at the kink."""
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def maximum_scalar(a, c: float) -> Tensor:
    """Elementwise max(a, c) for a scalar floor; gradient flows where a > c."""
    a = as_tensor(a)
    c = float(c)
    out = np.maximum(a.data, np.asarray(c, dtype=a.dtype))
    return _make(out, (a,), lambda g: (g * (a.data > c),))


# ---------------------------------------------------------------------------
# Linear algebra and contraction
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch(
            f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}"
        ) from None
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), vjp)


def _parse_subscripts(subscripts: str, operands: Sequence[Tensor]) -> tuple[list[str], str]:
    if "..." in subscripts:
        raise ShapeMismatch("batch_contract requires explicit subscripts (no '...')")
    if "->" not in subscripts:
        raise ShapeMismatch("batch_contract requires an explicit '->' output")
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise ShapeMismatch(
            f"subscripts name {len(in_subs)} operands but {len(operands)} were given"
        )
    dims: dict[str, int] = {}
    for sub, op in zip(in_subs, operands):
        if len(sub) != op.ndim:
            raise ShapeMismatch(
                f"subscript '{sub}' does not match operand of shape {op.shape}"
            )
        if len(set(sub)) != len(sub):
            raise ShapeMismatch(f"repeated label within one operand: '{sub}'")
        for label, n in zip(sub, op.shape):
            if dims.setdefault(label, n) != n:
                raise ShapeMismatch(
                    f"label '{label}' bound to both {dims[label]} and {n}"
                )
    if len(set(out_sub)) != len(out_sub):
        raise ShapeMismatch(f"repeated label in output: '{out_sub}'")
    for label in out_sub:
        if label not in dims:
            raise ShapeMismatch(f"output label '{label}' not present in any input")
    # Every input label must be recoverable when differentiating: it has to
    # appear in the output or in some other operand (pure reductions belong to
    # reduce_sum / reduce_mean).
    for i, sub in enumerate(in_subs):
        visible = set(out_sub).union(*(set(s) for j, s in enumerate(in_subs) if j != i))
        missing = set(sub) - visible
        if missing:
            raise ShapeMismatch(
                f"labels {sorted(missing)} appear only in operand {i}; "
                f"use reduce_sum/reduce_mean for plain reductions"
            )
    return in_subs, out_sub


def batch_contract(subscripts: str, *operands) -> Tensor:
    """Einstein-summation contraction with reverse-mode gradients.

    Subscripts must be explicit (e.g. ``'eca,ab->ecb'``).  Each operand's
    labels must appear in the output or another operand so that every
    gradient is itself expressible as a contraction of the incoming gradient
    with the remaining operands.
    """
    ops = tuple(as_tensor(x) for x in operands)
    in_subs, out_sub = _parse_subscripts(subscripts, ops)
    out = np.einsum(subscripts, *(t.data for t in ops), optimize=True)

    def vjp(g):
        grads = []
        for i, sub in enumerate(in_subs):
            rest_subs = [out_sub] + [s for j, s in enumerate(in_subs) if j != i]
            rest_ops = [g] + [t.data for j, t in enumerate(ops) if j != i]
            spec = ",".join(rest_subs) + "->" + sub
            grads.append(np.einsum(spec, *rest_ops, optimize=True))
        return tuple(grads)

    return _make(out, ops, vjp)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact Gaussian-error-function GELU: x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi

    def vjp(g):
        dens = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (phi + x * dens).astype(x.dtype),)

    return _make(out.astype(x.dtype), (a,), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``.

    Entries equal to -inf receive weight (and gradient) exactly zero, which is
    how padded neighbor slots are masked out; a fully masked slice is the
    caller's error and yields NaNs.
    """
    a = as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=axis, keepdims=True)
    y = e / z

    def vjp(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _make(y, (a,), vjp)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axes, keepdims: bool) -> np.ndarray:
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _make(
        np.asarray(out),
        (a,),
        lambda g: (_expand_reduced(np.asarray(g), a.shape, axes, keepdims).copy(),),
    )


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims) if axes else a.data.copy()
    return _make(
        np.asarray(out),
        (a,),
        lambda g: (_expand_reduced(np.asarray(g), a.shape, axes, keepdims) / count,),
    )


# ---------------------------------------------------------------------------
# Indexing, shaping, concatenation
# ---------------------------------------------------------------------------


def gather(a, index) -> Tensor:
    """Select rows along axis 0: output shape = index.shape + a.shape[1:]."""
    a = as_tensor(a)
    idx = np.asarray(index)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeMismatch("gather index must be an integer array")
    if a.ndim < 1:
        raise ShapeMismatch("gather needs at least a 1-d operand")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeMismatch(
            f"gather index out of range [0, {a.shape[0]}): "
            f"[{idx.min()}, {idx.max()}]"
        )
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(out, (a,), vjp)


def scatter_add(a, index, size: int) -> Tensor:
    """Segment sum along axis 0: out[s] = sum of rows with index == s.

    ``index`` is a 1-d integer array with one entry per row of ``a``; the
    output has shape (size,) + a.shape[1:].  Accumulation uses np.add.at,
    which processes entries in order and is deterministic.
    """
    a = as_tensor(a)
    idx = np.asarray(index)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeMismatch("scatter_add index must be a 1-d integer array")
    if a.ndim < 1 or a.shape[0] != idx.shape[0]:
        raise ShapeMismatch(
            f"scatter_add needs one index per row: {a.shape} vs {idx.shape}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ShapeMismatch(f"scatter_add index out of range [0, {size})")
    out = np.zeros((size,) + a.shape[1:], dtype=a.dtype)
    np.add.at(out, idx, a.data)
    return _make(out, (a,), lambda g: (g[idx],))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if np.prod(shape, dtype=np.int64) != a.data.size and -1 not in shape:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}")
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatch(f"transpose axes {axes} are not a permutation for {a.shape}")
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _make(out, (a,), lambda g: (g.transpose(inv),))


def flip_last(a) -> Tensor:
    """Reverse the order of entries along the last axis."""
    a = as_tensor(a)
    if a.ndim < 1:
        raise ShapeMismatch("flip_last needs at least one axis")
    out = np.ascontiguousarray(a.data[..., ::-1])
    return _make(out, (a,), lambda g: (np.ascontiguousarray(g[..., ::-1]),))


def pad_crop_last(a, size: int) -> Tensor:
    """Center-aligned resize of the last axis to ``size``.

    Both the input length and ``size`` must be odd so the center entry stays
    fixed: growing pads zeros symmetrically, shrinking drops the outermost
    entries symmetrically.
    """
    a = as_tensor(a)
    if a.ndim < 1:
        raise ShapeMismatch("pad_crop_last needs at least one axis")
    n = a.shape[-1]
    if n % 2 != 1 or size % 2 != 1 or size < 1:
        raise ShapeMismatch(f"pad_crop_last needs odd sizes, got {n} -> {size}")
    if size == n:
        return _make(a.data.copy(), (a,), lambda g: (g,))
    if size > n:
        pad = (size - n) // 2
        width = [(0, 0)] * (a.ndim - 1) + [(pad, pad)]
        out = np.pad(a.data, width)

        def vjp(g):
            return (np.ascontiguousarray(g[..., pad:pad + n]),)

        return _make(out, (a,), vjp)
    crop = (n - size) // 2
    out = np.ascontiguousarray(a.data[..., crop:crop + size])

    def vjp(g):
        width = [(0, 0)] * (a.ndim - 1) + [(crop, crop)]
        return (np.pad(g, width),)

    return _make(out, (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ops = tuple(as_tensor(t) for t in tensors)
    if not ops:
        raise ShapeMismatch("concat needs at least one tensor")
    ndim = ops[0].ndim
    if ndim == 0:
        raise ShapeMismatch("concat operands must have at least one axis")
    ax = axis % ndim
    for t in ops:
        if t.ndim != ndim:
            raise ShapeMismatch("concat operands must share rank")
        if t.shape[:ax] + t.shape[ax + 1 :] != ops[0].shape[:ax] + ops[0].shape[ax + 1 :]:
            raise ShapeMismatch(
                f"concat shapes differ off-axis: {t.shape} vs {ops[0].shape}"
            )
    out = np.concatenate([t.data for t in ops], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in ops])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(out, ops, vjp)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


class Tape:
    """The recorded computation reaching a scalar loss, in topological order.

    ``entries`` lists every gradient-requiring tensor from inputs to the loss;
    :meth:`run` walks it backwards exactly once, accumulating leaf gradients
    additively into ``Tensor.grad``.
    """

    def __init__(self, entries: list[Tensor]):
        self.entries = entries

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        return cls(order)

    def run(self, seed: np.ndarray) -> None:
        flowing: dict[int, np.ndarray] = {id(self.entries[-1]): seed}
        for node in reversed(self.entries):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.dtype)
                if pg.shape != parent.shape:
                    raise ShapeMismatch(
                        f"internal: vjp produced shape {pg.shape} for parent "
                        f"of shape {parent.shape}"
                    )
                key = id(parent)
                if key in flowing:
                    flowing[key] = flowing[key] + pg
                else:
                    flowing[key] = pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable trainable leaf's .grad.

    ``loss`` must be a scalar tensor with at least one differentiable path to
    a gradient-requiring leaf; otherwise DisconnectedGraph is raised.  Calling
    twice without zero_grad doubles the accumulated gradients.
    """
    if loss.data.size != 1:
        raise ShapeMismatch(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise DisconnectedGraph(
            "loss does not depend on any tensor with requires_grad=True"
        )
    tape = Tape.from_loss(loss)
    tape.run(np.ones_like(loss.data))


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def gradient_check(
    fn: Callable[..., Tensor],
    *leaves: Tensor,
    eps: float = 1e-6,
    rel_tol: float = 1e-4,
) -> float:
    """Compare reverse-mode gradients of ``sum(fn(*leaves))`` with central
    finite differences, returning the worst relative error.

    Raises AssertionError when the relative error (normalized by the larger
    of the two gradient magnitudes, floored at 1e-8) exceeds ``rel_tol``.
    Leaves must be float64 for the oracle to be meaningful.
    """
    for leaf in leaves:
        leaf.zero_grad()
    out = fn(*leaves)
    loss = reduce_sum(out) if out.data.size != 1 else out
    backward(loss)
    worst = 0.0
    for leaf in leaves:
        if not leaf.requires_grad:
            continue
        if leaf.grad is None:
            raise AssertionError(f"no gradient reached leaf {leaf!r}")
        if not leaf.data.flags["C_CONTIGUOUS"]:
            leaf.data = np.ascontiguousarray(leaf.data)
        flat = leaf.data.reshape(-1)
        got = leaf.grad.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = float(reduce_sum(fn(*leaves)).data)
            flat[i] = keep - eps
            down = float(reduce_sum(fn(*leaves)).data)
            flat[i] = keep
            want = (up - down) / (2 * eps)
            denom = max(abs(want), abs(float(got[i])), 1e-8)
            err = abs(float(got[i]) - want) / denom
            worst = max(worst, err)
            if err > rel_tol:
                raise AssertionError(
                    f"gradient mismatch at {leaf!r}[{i}]: "
                    f"analytic {got[i]:.6e} vs numeric {want:.6e} (rel {err:.2e})"
                )
    return worst
