"""Minimal reverse-mode autodiff on dense float64 numpy arrays.

A ``Tape`` records every operation in execution order (which is already a
topological order), ``Var`` pairs a value with a gradient slot, and
``backward`` replays the tape in reverse. Gradients accumulate additively
across fan-out. Ops accept plain numpy inputs too: with no recorded ``Var``
among the arguments (or with recording paused) they just compute values and
return a bare ndarray, so the same numerical code runs with and without
gradient tracking.

The backward traversal itself is written in terms of these ops. Calling
``Tape.grad(..., create_graph=True)`` therefore records the adjoint
computation back onto the tape, which is what makes unrolled inner-gradient
schemes (gradients of gradients) work without a second autodiff system.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import expit as _expit


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class TapeMismatchError(RuntimeError):
    """Raised when an op mixes Vars recorded on different tapes."""


class Var:
    """A tape-recorded value. ``grad`` is populated by ``Tape.backward``."""

    __slots__ = ("value", "grad", "tape", "_id")

    def __init__(self, value: np.ndarray, tape: "Tape", node_id: int):
        self.value = value
        self.grad: np.ndarray | None = None
        self.tape = tape
        self._id = node_id

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape}, id={self._id})"

    # arithmetic sugar; mirrors the free functions below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "out", "parents", "vjp")

    def __init__(self, op, out, parents, vjp):
        self.op = op
        self.out = out
        self.parents = parents  # tuple of Var or None (None = constant input)
        self.vjp = vjp  # callable(adjoint) -> grads aligned with parents


@dataclass
class CustomPrimitive:
    """An op with a hand-written backward, e.g. an implicit-function VJP.

    ``forward`` maps input values to ``(output_value, ctx)``; ``backward``
    maps ``(ctx, output_adjoint)`` to one gradient per input. Custom
    primitives are first-order only: they cannot appear inside a
    ``create_graph=True`` traversal.
    """

    name: str
    forward: Callable[..., tuple]
    backward: Callable[[Any, np.ndarray], tuple]


class Tape:
    def __init__(self):
        self.nodes: list[_Node] = []
        self.recording = True

    def __len__(self):
        return len(self.nodes)

    def release(self):
        """Drop all recorded nodes so their buffers free immediately.

        Vars on the tape keep their values and grads but the tape itself is
        spent: no further backward or grad calls. Training loops call this
        once per step; tape/node/Var reference cycles otherwise pin large
        intermediate arrays until a gc pass notices them.
        """
        self.nodes.clear()
        self.recording = False

    @contextmanager
    def paused(self):
        prev = self.recording
        self.recording = False
        try:
            yield self
        finally:
            self.recording = prev

    def leaf(self, value) -> Var:
        """Create an input Var (a node with no parents)."""
        return self._record("leaf", _as_array(value), (), None)

    def _record(self, op, value, parents, vjp) -> Var:
        out = Var(value, self, len(self.nodes))
        self.nodes.append(_Node(op, out, parents, vjp))
        return out

    def grad(self, root: Var, wrt: Sequence[Var], create_graph: bool = False):
        """Adjoints of ``root`` w.r.t. each Var in ``wrt``.

        With ``create_graph=False`` the traversal runs with recording paused
        and returns plain ndarrays. With ``create_graph=True`` the adjoint
        arithmetic is recorded onto this tape and the results come back as
        Vars (constants stay ndarrays), so they can be differentiated again.
        Vars not reachable from ``root`` get zero gradients.
        """
        self._check_root(root)
        if create_graph:
            adj = self._traverse(root)
        else:
            with self.paused():
                adj = self._traverse(root)
        out = []
        for v in wrt:
            if v.tape is not self:
                raise TapeMismatchError("wrt Var lives on a different tape")
            g = adj[v._id]
            out.append(np.zeros_like(v.value) if g is None else g)
        return out

    def backward(self, root: Var) -> dict:
        """Populate ``.grad`` on every Var of this tape; return the leaf map.

        Reachable Vars get their adjoint, unreachable ones get zeros. The
        returned dict maps each leaf Var to its gradient array.
        """
        self._check_root(root)
        with self.paused():
            adj = self._traverse(root)
        leaf_grads: dict[Var, np.ndarray] = {}
        for node in self.nodes:
            v = node.out
            g = adj[v._id] if v._id < len(adj) else None
            v.grad = np.zeros_like(v.value) if g is None else np.asarray(g)
            if node.op == "leaf":
                leaf_grads[v] = v.grad
        return leaf_grads

    def _check_root(self, root: Var):
        if not isinstance(root, Var) or root.tape is not self:
            raise TapeMismatchError("backward root must be a Var on this tape")
        if root._id >= len(self.nodes):
            raise TapeMismatchError("tape was released; record before backward")
        if root.value.ndim != 0:
            raise ShapeError(
                f"backward root must be scalar-valued, got shape {root.value.shape}"
            )

    def _traverse(self, root: Var):
        # Adjoints indexed by node id; ndarray or Var depending on mode.
        adj: list = [None] * (root._id + 1)
        adj[root._id] = np.ones((), dtype=np.float64)
        for nid in range(root._id, -1, -1):
            g = adj[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            if node.vjp is None:
                continue
            parent_grads = node.vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                if parent is None or pg is None:
                    continue
                pid = parent._id
                adj[pid] = pg if adj[pid] is None else add(adj[pid], pg)
        return adj


# ---------------------------------------------------------------------------
# op plumbing


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else _as_array(x)


def _find_tape(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise TapeMismatchError("operands live on different tapes")
    return tape


def _emit(op, value, args, vjp_factory):
    """Record ``value`` if any arg is a Var and recording is on."""
    tape = _find_tape(*args)
    if tape is None or not tape.recording:
        return value
    parents = tuple(a if isinstance(a, Var) else None for a in args)
    out = tape._record(op, value, parents, None)
    tape.nodes[out._id].vjp = vjp_factory(out)
    return out


def _check_elementwise(op, av, bv):
    if av.shape != bv.shape and av.ndim != 0 and bv.ndim != 0:
        raise ShapeError(f"{op}: shapes {av.shape} and {bv.shape} do not match "
                         "(only scalar-tensor broadcasting is supported)")


def _unbroadcast(g, shape):
    """Reduce an adjoint back to a scalar operand's shape."""
    if shape == () and _value(g).ndim != 0:
        return sum(g)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    av, bv = _value(a), _value(b)
    _check_elementwise("add", av, bv)
    return _emit("add", av + bv, (a, b),
                 lambda out: lambda g: (_unbroadcast(g, av.shape),
                                        _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = _value(a), _value(b)
    _check_elementwise("sub", av, bv)
    return _emit("sub", av - bv, (a, b),
                 lambda out: lambda g: (_unbroadcast(g, av.shape),
                                        _unbroadcast(neg(g), bv.shape)))


def mul(a, b):
    av, bv = _value(a), _value(b)
    _check_elementwise("mul", av, bv)
    return _emit("mul", av * bv, (a, b),
                 lambda out: lambda g: (_unbroadcast(mul(g, b), av.shape),
                                        _unbroadcast(mul(g, a), bv.shape)))


def div(a, b):
    av, bv = _value(a), _value(b)
    _check_elementwise("div", av, bv)

    def factory(out):
        def vjp(g):
            ga = _unbroadcast(div(g, b), av.shape)
            gb = _unbroadcast(neg(mul(g, div(out, b))), bv.shape)
            return ga, gb

        return vjp

    return _emit("div", av / bv, (a, b), factory)


def neg(a):
    return _emit("neg", -_value(a), (a,), lambda out: lambda g: (neg(g),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    av, bv = _value(a), _value(b)
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise ShapeError(f"matmul: operands must be 1-D or 2-D, "
                         f"got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, "
                         f"{av.shape} @ {bv.shape}")

    def factory(out):
        def vjp(g):
            if av.ndim == 2 and bv.ndim == 2:
                return matmul(g, transpose(b)), matmul(transpose(a), g)
            if av.ndim == 1 and bv.ndim == 2:
                # (k,) @ (k,n) -> (n,)
                ga = matmul(b, g)
                gb = matmul(reshape(a, (av.shape[0], 1)),
                            reshape(g, (1, bv.shape[1])))
                return ga, gb
            if av.ndim == 2 and bv.ndim == 1:
                # (m,k) @ (k,) -> (m,)
                ga = matmul(reshape(g, (av.shape[0], 1)),
                            reshape(b, (1, bv.shape[0])))
                gb = matmul(transpose(a), g)
                return ga, gb
            # dot product -> scalar adjoint
            return mul(g, b), mul(g, a)

        return vjp

    return _emit("matmul", av @ bv, (a, b), factory)


def transpose(a):
    av = _value(a)
    if av.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {av.shape}")
    return _emit("transpose", av.T, (a,),
                 lambda out: lambda g: (transpose(g),))


def reshape(a, shape):
    av = _value(a)
    orig = av.shape
    return _emit("reshape", av.reshape(shape), (a,),
                 lambda out: lambda g: (reshape(g, orig),))


# ---------------------------------------------------------------------------
# reductions and expansions


def sum(a):  # noqa: A001 - intentional, namespaced as autodiff.sum
    av = _value(a)
    ones = np.ones_like(av)
    return _emit("sum", av.sum(), (a,),
                 lambda out: lambda g: (mul(g, ones),))


def mean(a):
    av = _value(a)
    w = np.full_like(av, 1.0 / av.size)
    return _emit("mean", av.mean(), (a,),
                 lambda out: lambda g: (mul(g, w),))


def sum_axis(a, axis: int):
    av = _value(a)
    if av.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"sum_axis expects a matrix and axis 0/1, "
                         f"got shape {av.shape}, axis {axis}")
    n = av.shape[axis]

    def factory(out):
        def vjp(g):
            if axis == 0:
                return (repeat_rows(g, n),)
            return (repeat_cols(g, n),)

        return vjp

    return _emit("sum_axis", av.sum(axis=axis), (a,), factory)


def mean_axis(a, axis: int):
    av = _value(a)
    if av.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"mean_axis expects a matrix and axis 0/1, "
                         f"got shape {av.shape}, axis {axis}")
    n = av.shape[axis]

    def factory(out):
        def vjp(g):
            scaled = mul(g, 1.0 / n)
            if axis == 0:
                return (repeat_rows(scaled, n),)
            return (repeat_cols(scaled, n),)

        return vjp

    return _emit("mean_axis", av.mean(axis=axis), (a,), factory)


def repeat_rows(v, n: int):
    """(k,) -> (n, k), every row a copy of ``v``."""
    vv = _value(v)
    if vv.ndim != 1:
        raise ShapeError(f"repeat_rows expects a vector, got shape {vv.shape}")
    return _emit("repeat_rows", np.tile(vv, (n, 1)), (v,),
                 lambda out: lambda g: (sum_axis(g, 0),))


def repeat_cols(v, n: int):
    """(m,) -> (m, n), every column a copy of ``v``."""
    vv = _value(v)
    if vv.ndim != 1:
        raise ShapeError(f"repeat_cols expects a vector, got shape {vv.shape}")
    return _emit("repeat_cols", np.repeat(vv[:, None], n, axis=1), (v,),
                 lambda out: lambda g: (sum_axis(g, 1),))


# ---------------------------------------------------------------------------
# nonlinearities


def square(a):
    return _emit("square", _value(a) ** 2, (a,),
                 lambda out: lambda g: (mul(mul(g, a), 2.0),))


def sqrt(a):
    return _emit("sqrt", np.sqrt(_value(a)), (a,),
                 lambda out: lambda g: (div(mul(g, 0.5), out),))


def exp(a):
    return _emit("exp", np.exp(_value(a)), (a,),
                 lambda out: lambda g: (mul(g, out),))


def log(a):
    return _emit("log", np.log(_value(a)), (a,),
                 lambda out: lambda g: (div(g, a),))


def tanh(a):
    return _emit("tanh", np.tanh(_value(a)), (a,),
                 lambda out: lambda g: (mul(g, sub(1.0, square(out))),))


def sigmoid(a):
    return _emit("sigmoid", _expit(_value(a)), (a,),
                 lambda out: lambda g: (mul(g, mul(out, sub(1.0, out))),))


def softplus(a):
    av = _value(a)
    val = np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av)))
    # d/dx log(1+e^x) = sigmoid(x) = 1 - e^{-softplus(x)}
    return _emit("softplus", val, (a,),
                 lambda out: lambda g: (mul(g, sub(1.0, exp(neg(out)))),))


def elu(a, alpha: float = 1.0):
    av = _value(a)
    pos = av > 0
    val = np.where(pos, av, alpha * np.expm1(av))
    m = pos.astype(np.float64)
    inv = 1.0 - m

    def factory(out):
        def vjp(g):
            # derivative: 1 where x > 0, else alpha * exp(x) = out + alpha
            d = add(mul(add(out, alpha), inv), m)
            return (mul(g, d),)

        return vjp

    return _emit("elu", val, (a,), factory)


def sin(a):
    return _emit("sin", np.sin(_value(a)), (a,),
                 lambda out: lambda g: (mul(g, cos(a)),))


def cos(a):
    return _emit("cos", np.cos(_value(a)), (a,),
                 lambda out: lambda g: (neg(mul(g, sin(a))),))


def clamp(a, lo=None, hi=None):
    """Clip to [lo, hi]; gradient is zero outside the active region.

    Bounds are constants: scalars or arrays broadcastable against ``a``.
    """
    if lo is None and hi is None:
        raise ValueError("clamp needs at least one bound")
    av = _value(a)
    val = np.clip(av, lo, hi)
    active = np.ones_like(av)
    if lo is not None:
        active = active * (av >= np.asarray(lo, dtype=np.float64))
    if hi is not None:
        active = active * (av <= np.asarray(hi, dtype=np.float64))
    return _emit("clamp", val, (a,),
                 lambda out: lambda g: (mul(g, active),))


# ---------------------------------------------------------------------------
# shape surgery


def concat(parts: Sequence, axis: int = 0):
    vals = [_value(p) for p in parts]
    nd = vals[0].ndim
    if any(v.ndim != nd for v in vals) or axis >= nd:
        raise ShapeError(f"concat: incompatible shapes "
                         f"{[v.shape for v in vals]} along axis {axis}")
    sizes = [v.shape[axis] for v in vals]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def factory(out):
        def vjp(g):
            return tuple(narrow(g, axis, int(offsets[i]), sizes[i])
                         for i in range(len(parts)))

        return vjp

    return _emit("concat", np.concatenate(vals, axis=axis), tuple(parts),
                 factory)


def narrow(a, axis: int, start: int, length: int):
    """Contiguous slice [start, start+length) along ``axis``."""
    av = _value(a)
    if av.ndim <= axis:
        raise ShapeError(f"narrow: axis {axis} out of range for {av.shape}")
    idx = [slice(None)] * av.ndim
    idx[axis] = slice(start, start + length)
    total = av.shape[axis]

    def factory(out):
        def vjp(g):
            before = list(av.shape)
            before[axis] = start
            after = list(av.shape)
            after[axis] = total - start - length
            pieces = []
            if start > 0:
                pieces.append(np.zeros(before))
            pieces.append(g)
            if after[axis] > 0:
                pieces.append(np.zeros(after))
            return (concat(pieces, axis=axis) if len(pieces) > 1 else g,)

        return vjp

    return _emit("narrow", av[tuple(idx)].copy(), (a,), factory)


def index_select(a, indices):
    """Gather elements (1-D input) or rows (2-D input) by index."""
    av = _value(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("index_select expects a flat index list")
    size = av.shape[0]
    return _emit("index_select", av[idx].copy(), (a,),
                 lambda out: lambda g: (scatter(g, idx, size),))


def scatter(src, indices, size: int):
    """Adjoint of index_select: sum ``src`` slices into a zero array."""
    sv = _value(src)
    idx = np.asarray(indices, dtype=np.intp)
    out_val = np.zeros((size,) + sv.shape[1:], dtype=np.float64)
    np.add.at(out_val, idx, sv)
    return _emit("scatter", out_val, (src,),
                 lambda out: lambda g: (index_select(g, idx),))


# ---------------------------------------------------------------------------
# custom primitives


def register_custom(prim: CustomPrimitive, inputs: Sequence):
    """Apply ``prim`` to ``inputs`` and record it if a tape is active.

    With no recording Var among the inputs this just runs the forward and
    returns its value, which keeps custom primitives usable in plain-numpy
    code paths.
    """
    vals = [_value(x) for x in inputs]
    out_val, ctx = prim.forward(*vals)
    out_val = _as_array(out_val)
    in_shapes = [v.shape for v in vals]

    tape = _find_tape(*inputs)
    if tape is None or not tape.recording:
        return out_val

    def factory(out):
        def vjp(g):
            if tape.recording:
                raise NotImplementedError(
                    f"custom primitive '{prim.name}' is first-order only and "
                    "cannot be differentiated under create_graph=True")
            grads = prim.backward(ctx, _value(g))
            if len(grads) != len(vals):
                raise ShapeError(
                    f"custom primitive '{prim.name}' backward returned "
                    f"{len(grads)} gradients for {len(vals)} inputs")
            checked = []
            for gr, shp in zip(grads, in_shapes):
                if gr is None:
                    checked.append(None)
                    continue
                gr = _as_array(gr)
                if gr.shape != shp:
                    raise ShapeError(
                        f"custom primitive '{prim.name}' backward returned "
                        f"gradient of shape {gr.shape} for input of shape {shp}")
                checked.append(gr)
            return tuple(checked)

        return vjp

    parents = tuple(x if isinstance(x, Var) else None for x in inputs)
    out = tape._record(f"custom:{prim.name}", out_val, parents, None)
    tape.nodes[out._id].vjp = factory(out)
    return out
