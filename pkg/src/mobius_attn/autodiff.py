"""Minimal reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` is an append-only list of nodes.  Each node records the op,
its input variables and whatever the op saved for the backward pass.  Since
inputs are always created before their consumers, append order is already a
topological order and ``backward`` is a single reverse sweep.

Binary elementwise ops broadcast like numpy; adjoints are summed back to the
input shapes.  Complex quantities are handled one level up (see ``cvar``) as
pairs of real variables.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtr

from .errors import NotScalarLoss, ShapeMismatch, UnknownOp


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


class Ctx:
    """Scratch space an op fills during forward and reads during backward."""

    __slots__ = ("saved", "attrs", "shapes")


# ---------------------------------------------------------------------------
# op registry
# ---------------------------------------------------------------------------

@dataclass
class Op:
    name: str
    forward: Callable
    backward: Callable


OPS: dict[str, Op] = {}


def _register(name):
    def deco(cls):
        OPS[name] = Op(name, cls.forward, cls.backward)
        return cls
    return deco


@_register("add")
class _Add:
    def forward(ctx, a, b):
        return a + b

    def backward(ctx, g):
        sa, sb = ctx.shapes
        return unbroadcast(g, sa), unbroadcast(g, sb)


@_register("sub")
class _Sub:
    def forward(ctx, a, b):
        return a - b

    def backward(ctx, g):
        sa, sb = ctx.shapes
        return unbroadcast(g, sa), unbroadcast(-g, sb)


@_register("mul")
class _Mul:
    def forward(ctx, a, b):
        ctx.saved = (a, b)
        return a * b

    def backward(ctx, g):
        a, b = ctx.saved
        return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)


@_register("div")
class _Div:
    def forward(ctx, a, b):
        out = a / b
        ctx.saved = (b, out)
        return out

    def backward(ctx, g):
        b, out = ctx.saved
        ga = g / b
        return unbroadcast(ga, ctx.shapes[0]), unbroadcast(-ga * out, b.shape)


@_register("matmul")
class _Matmul:
    def forward(ctx, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
        ctx.saved = (a, b)
        if b.ndim == 2 and a.ndim > 2:
            # one BLAS call instead of a batched loop
            return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + b.shape[-1:])
        return a @ b

    def backward(ctx, g):
        a, b = ctx.saved
        if b.ndim == 2 and a.ndim > 2:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.T).reshape(a.shape)
            gb = a.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        return unbroadcast(g @ _swap(b), a.shape), unbroadcast(_swap(a) @ g, b.shape)


@_register("transpose")
class _Transpose:
    def forward(ctx, a):
        return _swap(a)

    def backward(ctx, g):
        return (_swap(g),)


@_register("reshape")
class _Reshape:
    def forward(ctx, a, shape):
        return a.reshape(shape)

    def backward(ctx, g):
        return (g.reshape(ctx.shapes[0]),)


@_register("concat")
class _Concat:
    # leading axes broadcast, so a probed and an unprobed branch can be joined
    def forward(ctx, *xs, axis=-1):
        if axis != -1:
            raise ValueError("concat supports the last axis only")
        lead = np.broadcast_shapes(*(x.shape[:-1] for x in xs))
        return np.concatenate([np.broadcast_to(x, lead + x.shape[-1:]) for x in xs], axis=-1)

    def backward(ctx, g):
        cuts = np.cumsum([s[-1] for s in ctx.shapes])[:-1]
        return tuple(unbroadcast(p, s) for p, s in zip(np.split(g, cuts, axis=-1), ctx.shapes))


@_register("slice")
class _Slice:
    def forward(ctx, a, axis=-1, start=0, stop=None):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, stop)
        ctx.saved = tuple(idx)
        return a[ctx.saved]

    def backward(ctx, g):
        out = np.zeros(ctx.shapes[0])
        out[ctx.saved] = g
        return (out,)


@_register("softmax_rows")
class _Softmax:
    def forward(ctx, a):
        e = np.exp(a - a.max(axis=-1, keepdims=True))
        y = e / e.sum(axis=-1, keepdims=True)
        ctx.saved = y
        return y

    def backward(ctx, g):
        y = ctx.saved
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


@_register("layer_norm")
class _LayerNorm:
    def forward(ctx, x, gain, bias, eps=1e-12):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        ctx.saved = (xhat, inv, gain)
        return xhat * gain + bias

    def backward(ctx, g):
        xhat, inv, gain = ctx.saved
        gx = g * gain
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        _, sg, sb = ctx.shapes
        return unbroadcast(dx, ctx.shapes[0]), unbroadcast(g * xhat, sg), unbroadcast(g, sb)


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@_register("gelu")
class _Gelu:
    # exact form x * Phi(x); ndtr is the standard normal CDF
    def forward(ctx, x):
        cdf = ndtr(x)
        ctx.saved = (x, cdf)
        return x * cdf

    def backward(ctx, g):
        x, cdf = ctx.saved
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)


@_register("sum")
class _Sum:
    def forward(ctx, a, axis=None, keepdims=False):
        ctx.saved = (axis, keepdims)
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(ctx, g):
        axis, keepdims = ctx.saved
        shape = ctx.shapes[0]
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)


@_register("scale")
class _Scale:
    def forward(ctx, a, c=1.0):
        ctx.saved = c
        return a * c

    def backward(ctx, g):
        return (g * ctx.saved,)


@_register("sqrt")
class _Sqrt:
    def forward(ctx, a):
        out = np.sqrt(a)
        ctx.saved = out
        return out

    def backward(ctx, g):
        return (g * 0.5 / ctx.saved,)


@_register("clamp_min")
class _ClampMin:
    def forward(ctx, a, lo=0.0):
        ctx.saved = a > lo
        return np.maximum(a, lo)

    def backward(ctx, g):
        return (g * ctx.saved,)


@_register("gather")
class _Gather:
    """Row lookup ``table[ids]``.

    ``table`` is ``[V, d]`` or, with a leading probe axis, ``[P, V, d]``; in the
    latter case ``ids`` of shape ``[B, n]`` (``B`` in ``{1, P}``) index each
    probe's own table.
    """

    def forward(ctx, table, ids):
        ids = np.asarray(ids, dtype=np.int64)
        ctx.saved = ids
        if table.ndim == 2:
            return table[ids]
        if ids.ndim == 1:
            ids = ids[None, :]
        probe = np.arange(table.shape[0])[:, None]
        ids = np.broadcast_to(ids, (table.shape[0], ids.shape[-1]))
        ctx.saved = (probe, ids)
        return table[probe, ids]

    def backward(ctx, g):
        out = np.zeros(ctx.shapes[0])
        if len(ctx.shapes[0]) == 2:
            np.add.at(out, ctx.saved, g)
        else:
            probe, ids = ctx.saved
            np.add.at(out, (probe, ids), g)
        return (out, None)


@_register("cross_entropy")
class _CrossEntropy:
    """Mean negative log-likelihood over positions whose label != ignore_index."""

    def forward(ctx, logits, labels, ignore_index=-100):
        labels = np.asarray(labels, dtype=np.int64)
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        valid = labels != ignore_index
        count = max(int(valid.sum()), 1)
        safe = np.where(valid, labels, 0)
        picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
        ctx.saved = (logp, safe, valid, count)
        return np.asarray(-(picked * valid).sum() / count)

    def backward(ctx, g):
        logp, safe, valid, count = ctx.saved
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[..., None],
                          np.take_along_axis(grad, safe[..., None], axis=-1) - 1.0, axis=-1)
        grad *= (valid[..., None] / count) * g
        return grad, None


# ---------------------------------------------------------------------------
# variables and the tape
# ---------------------------------------------------------------------------

class Variable:
    """A tape node's output: a float64 value plus (after backward) its adjoint."""

    __slots__ = ("tape", "id", "value", "grad", "requires_grad", "name")

    def __init__(self, tape, id_, value, requires_grad, name=None):
        self.tape = tape
        self.id = id_
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Variable(id={self.id}, shape={self.shape}, name={self.name!r})"

    def _lift(self, other):
        if isinstance(other, Variable):
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return self.tape.record("add", self, self._lift(other))

    def __radd__(self, other):
        return self.tape.record("add", self._lift(other), self)

    def __sub__(self, other):
        return self.tape.record("sub", self, self._lift(other))

    def __rsub__(self, other):
        return self.tape.record("sub", self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.tape.record("scale", self, c=float(other))
        return self.tape.record("mul", self, self._lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return self.tape.record("scale", self, c=1.0 / float(other))
        return self.tape.record("div", self, self._lift(other))

    def __rtruediv__(self, other):
        return self.tape.record("div", self._lift(other), self)

    def __matmul__(self, other):
        return self.tape.record("matmul", self, self._lift(other))

    def __rmatmul__(self, other):
        return self.tape.record("matmul", self._lift(other), self)

    def __neg__(self):
        return self.tape.record("scale", self, c=-1.0)

    @property
    def T(self):
        return self.tape.record("transpose", self)

    def sum(self, axis=None, keepdims=False):
        return self.tape.record("sum", self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return self.tape.record("reshape", self, shape=tuple(shape))


@dataclass
class _Node:
    op: Op | None
    inputs: tuple
    ctx: Ctx | None
    out: Variable


@dataclass
class Tape:
    """Append-only computation record; one tape per forward pass."""

    nodes: list = field(default_factory=list)

    def _push(self, value, requires_grad, op=None, inputs=(), ctx=None, name=None):
        var = Variable(self, len(self.nodes), value, requires_grad, name)
        self.nodes.append(_Node(op, inputs, ctx, var))
        return var

    def leaf(self, value, requires_grad=True, name=None) -> Variable:
        value = np.array(value, dtype=np.float64)
        return self._push(value, requires_grad, name=name)

    def constant(self, value) -> Variable:
        return self.leaf(value, requires_grad=False)

    @property
    def parameters(self) -> list[Variable]:
        return [n.out for n in self.nodes if n.op is None and n.out.requires_grad]

    def record(self, op: str, *inputs: Variable, **attrs) -> Variable:
        try:
            spec = OPS[op]
        except KeyError:
            raise UnknownOp(op) from None
        for x in inputs:
            if not isinstance(x, Variable) or x.tape is not self:
                raise TypeError(f"{op}: inputs must be Variables on this tape")
        ctx = Ctx()
        ctx.shapes = tuple(x.value.shape for x in inputs)
        if op == "gather":
            # ids are integer data, not a differentiable input
            table, ids = inputs
            value = spec.forward(ctx, table.value, ids.value.astype(np.int64))
        elif op == "cross_entropy":
            logits, labels = inputs
            value = spec.forward(ctx, logits.value, labels.value.astype(np.int64), **attrs)
        else:
            try:
                value = spec.forward(ctx, *(x.value for x in inputs), **attrs)
            except ValueError as exc:
                raise ShapeMismatch(f"{op}: {exc}") from exc
        value = np.asarray(value, dtype=np.float64)
        requires_grad = any(x.requires_grad for x in inputs)
        if not requires_grad:
            ctx = None
        return self._push(value, requires_grad, OPS[op], inputs, ctx)

    def zero_grad(self):
        for n in self.nodes:
            n.out.grad = None

    def backward(self, loss: Variable):
        """Reverse sweep from a scalar ``loss``.

        Leaf adjoints accumulate across calls (reset with :meth:`zero_grad`);
        leaves unreachable from ``loss`` get zero gradients.
        """
        if loss.value.size != 1:
            raise NotScalarLoss(f"loss has shape {loss.shape}")
        adj: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.id + 1]):
            var = node.out
            g = adj.pop(var.id, None)
            if node.op is None:
                if var.requires_grad:
                    if g is None:
                        g = np.zeros_like(var.value)
                    var.grad = g if var.grad is None else var.grad + g
                continue
            if g is None or not var.requires_grad:
                continue
            var.grad = g
            grads = node.op.backward(node.ctx, g)
            for x, gx in zip(node.inputs, grads):
                if gx is None or not x.requires_grad:
                    continue
                if x.id in adj:
                    adj[x.id] = adj[x.id] + gx
                else:
                    adj[x.id] = gx
        # leaves created after the loss never saw it
        for node in self.nodes[loss.id + 1:]:
            if node.op is None and node.out.requires_grad and node.out.grad is None:
                node.out.grad = np.zeros_like(node.out.value)


# ---------------------------------------------------------------------------
# functional front-end
# ---------------------------------------------------------------------------

def matmul(a, b):
    return a.tape.record("matmul", a, b)


def transpose(a):
    return a.tape.record("transpose", a)


def concat(xs, axis=-1):
    return xs[0].tape.record("concat", *xs, axis=axis)


def slice_(a, start, stop, axis=-1):
    return a.tape.record("slice", a, axis=axis, start=start, stop=stop)


def softmax_rows(a):
    return a.tape.record("softmax_rows", a)


def layer_norm(x, gain, bias, eps=1e-12):
    return x.tape.record("layer_norm", x, gain, bias, eps=eps)


def gelu(x):
    return x.tape.record("gelu", x)


def sqrt(x):
    return x.tape.record("sqrt", x)


def clamp_min(x, lo):
    return x.tape.record("clamp_min", x, lo=float(lo))


def gather(table, ids):
    return table.tape.record("gather", table, table.tape.constant(np.asarray(ids)))


def cross_entropy(logits, labels, ignore_index=-100):
    t = logits.tape
    return t.record("cross_entropy", logits, t.constant(np.asarray(labels)),
                    ignore_index=ignore_index)


@contextlib.contextmanager
def corrupted_adjoint(op: str, factor: float = 1.01):
    """Test hook: scale the first input adjoint of ``op`` by ``factor``."""
    orig = OPS[op]

    def bad_backward(ctx, g):
        grads = list(orig.backward(ctx, g))
        grads[0] = grads[0] * factor
        return tuple(grads)

    OPS[op] = Op(op, orig.forward, bad_backward)
    try:
        yield
    finally:
        OPS[op] = orig


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    offending: str | None
    tol: float
    per_param: dict[str, float]
    n_checked: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def tape_gradients(forward_fn, params: dict[str, np.ndarray]):
    """Run ``forward_fn(tape, vars)`` once and backpropagate the summed output."""
    tape = Tape()
    pv = {k: tape.leaf(v, name=k) for k, v in params.items()}
    out = forward_fn(tape, pv)
    loss = out if out.value.size == 1 and out.ndim == 0 else out.sum()
    tape.backward(loss)
    return float(loss.value), {k: v.grad for k, v in pv.items()}


def _evaluate(forward_fn, params) -> np.ndarray:
    tape = Tape()
    pv = {k: tape.leaf(v, requires_grad=False) for k, v in params.items()}
    return forward_fn(tape, pv).value


def _per_probe(out: np.ndarray, n: int) -> np.ndarray:
    out = np.asarray(out)
    if out.ndim == 0 or out.shape[0] != n:
        # output did not pick up the probe axis: parameter is unused
        return np.full(n, float(out.sum()))
    return out.reshape(n, -1).sum(axis=1)


def grad_check(forward_fn, params: dict[str, np.ndarray], h: float = 1e-6,
               tol: float = 1e-5, vectorized: bool = False, chunk: int = 256,
               floor_frac: float = 0.0) -> GradCheckReport:
    """Compare tape gradients with central differences for every scalar parameter.

    ``forward_fn(tape, vars)`` must be deterministic.  With the default
    ``floor_frac=0`` the error of an entry is ``|g - fd| / max(|g|, 1e-8)``.
    A positive ``floor_frac`` uses ``|g - fd| / max(|g|, |fd|, floor)`` with
    ``floor = floor_frac * max|g|`` over all parameters instead: fully
    relative for entries within ``1/floor_frac`` of the largest gradient and
    relative to that floor below it, where central-difference round-off
    (about ``eps * |f| / h``) swamps the comparison, e.g. for the
    exactly-zero gradient of a key bias.

    With ``vectorized=True`` the perturbed parameter is passed with an extra
    leading axis of up to ``chunk`` probes (all other parameters unchanged)
    and ``forward_fn`` must return one value per probe.  Without it each
    entry costs two scalar evaluations.
    """
    _, grads = tape_gradients(forward_fn, params)
    gmax = max((float(np.abs(g).max()) for g in grads.values() if g.size), default=0.0)
    floor = floor_frac * gmax
    per_param: dict[str, float] = {}
    worst, offending, n = 0.0, None, 0
    for name, base in params.items():
        g = grads[name].reshape(-1)
        fd = np.empty(base.size)
        if vectorized:
            for lo in range(0, base.size, chunk):
                idx = np.arange(lo, min(lo + chunk, base.size))
                probe = np.repeat(base.reshape(1, -1), len(idx), axis=0)
                rows = np.arange(len(idx))
                vals = []
                for sign in (1.0, -1.0):
                    probe[rows, idx] = base.reshape(-1)[idx] + sign * h
                    p = dict(params)
                    p[name] = probe.reshape((len(idx),) + base.shape)
                    vals.append(_per_probe(_evaluate(forward_fn, p), len(idx)))
                fd[idx] = (vals[0] - vals[1]) / (2 * h)
        else:
            flat = base.reshape(-1).copy()
            for i in range(base.size):
                p = dict(params)
                orig = flat[i]
                flat[i] = orig + h
                p[name] = flat.reshape(base.shape).copy()
                fp = float(np.sum(_evaluate(forward_fn, p)))
                flat[i] = orig - h
                p[name] = flat.reshape(base.shape).copy()
                fm = float(np.sum(_evaluate(forward_fn, p)))
                flat[i] = orig
                fd[i] = (fp - fm) / (2 * h)
        if floor_frac > 0.0:
            rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), max(floor, 1e-300))
        else:
            rel = np.abs(g - fd) / np.maximum(np.abs(g), 1e-8)
        m = float(rel.max()) if rel.size else 0.0
        per_param[name] = m
        n += base.size
        if offending is None or m > worst:
            worst, offending = m, name
    return GradCheckReport(worst, offending, tol, per_param, n)
