"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything downstream (layers, losses, training) is built from the
primitives in this module, so gradient correctness is established once,
here, against central finite differences.

Conventions:
  * all data is float64, row-major numpy arrays
  * a fresh ``Tape`` is opened per training step; there is no persistent graph
  * broadcasting is restricted: two operands must have equal shapes, or
    exactly one of them may expand (a scalar, missing leading axes such as a
    bias vector, or explicit size-1 axes such as a per-channel gate)
  * op outputs may be views into their inputs; array buffers are treated as
    immutable once wrapped in a Tensor
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit as _expit

__all__ = [
    "Tensor", "Tape", "GradMap", "SliceGrad", "as_tensor", "backward",
    "add", "sub", "mul", "div", "exp", "log", "tanh", "sigmoid", "relu",
    "scale", "elementwise", "matmul", "reduce", "reduce_sum", "reduce_mean",
    "reduce_max", "softmax", "log_softmax", "take", "slice_axis", "pad_axis",
    "concat", "stack", "reshape", "transpose", "dropout", "custom_op",
    "finite_diff_check", "FiniteDiffReport",
]

# Test hook: multiplies the tanh vjp so the finite-difference harness can be
# shown to catch a wrong backward. Must stay 1.0 outside harness-sanity tests.
_debug_vjp_scale = 1.0

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A dense float64 array, optionally tracked by the active gradient tape.

    ``tape``/``node`` are set when the tensor was produced by (or watched on)
    a tape; a tensor with no tape link only participates in forward compute.
    """

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, _tape=None, _node=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = _tape
        self.node = _node

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def copy(self) -> "Tensor":
        """Untracked copy of the values."""
        return Tensor(self.data.copy())

    def __repr__(self):
        tracked = ", tracked" if self.tape is not None else ""
        return f"Tensor(shape={self.data.shape}{tracked})"

    # arithmetic sugar; plain numbers are folded in as constants
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)


def _wrap(data, tape=None, node=None) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.tape = tape
    t.node = node
    return t


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class GradMap:
    """Gradients for the watched leaves of one backward pass. The arrays are
    owned by the caller afterwards but may alias tape internals; treat them
    as read-only."""

    def __init__(self, grads):
        self._grads = grads  # id(tensor) -> ndarray

    def wrt(self, tensor: Tensor) -> np.ndarray:
        try:
            return self._grads[id(tensor)]
        except KeyError:
            raise KeyError("tensor was not watched on the tape") from None

    __getitem__ = wrt

    def __len__(self):
        return len(self._grads)


class SliceGrad:
    """Deferred gradient contribution touching one slice of the operand.

    A vjp may return SliceGrad(full_shape, slice_tuple, g) instead of a dense
    array; the backward sweep accumulates it in place, which keeps ops that
    touch one time step from repeatedly materializing full-size zeros.
    """

    __slots__ = ("shape", "sl", "g")

    def __init__(self, shape, sl, g):
        self.shape = shape
        self.sl = sl
        self.g = g


_SliceGrad = SliceGrad


class Tape:
    """Ordered record of primitive ops; replayed in reverse by backward().

    Use as a context manager around one step of computation:

        with Tape() as tape:
            tape.watch(*params)
            loss = forward(...)
        grads = tape.backward(loss)

    Node order is construction order, so every node's inputs precede it.
    A tape is confined to one thread for its lifetime.
    """

    def __init__(self):
        self._parents: list = []   # per node: ((parent_id, vjp), ...)
        self._watched: dict[int, Tensor] = {}
        self.closed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        self.closed = True
        _TAPE_STACK.remove(self)
        return False

    def __len__(self):
        return len(self._parents)

    def watch(self, *tensors: Tensor):
        """Mark tensors as differentiable leaves of this tape."""
        for t in tensors:
            if t.tape is self:
                raise ValueError("tensor is already on this tape; cannot re-watch")
            t.tape = self
            t.node = len(self._parents)
            self._parents.append(())
            self._watched[t.node] = t

    def _emit(self, out_data, parents) -> Tensor:
        node = len(self._parents)
        self._parents.append(parents)
        return _wrap(out_data, self, node)

    def backward(self, loss: Tensor) -> GradMap:
        """Reverse sweep from a tracked scalar.

        Gradients accumulate additively at fan-out; watched leaves the loss
        never touched come back as zeros of the leaf's shape.

        Accumulation buffers the tape allocates itself are updated in place;
        arrays returned by vjps are never mutated.
        """
        if loss.data.shape != ():
            raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        top = loss.node
        grads: list = [None] * (top + 1)
        owned = bytearray(top + 1)
        grads[top] = np.ones((), dtype=np.float64)
        parents_by_node = self._parents
        watched = self._watched
        for nid in range(top, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            if type(g) is _SliceGrad:
                dense = np.zeros(g.shape, dtype=np.float64)
                dense[g.sl] = g.g
                g = dense
                grads[nid] = g
            for pid, vjp in parents_by_node[nid]:
                pg = vjp(g)
                acc = grads[pid]
                if type(pg) is _SliceGrad:
                    if acc is None:
                        grads[pid] = pg
                    else:
                        if type(acc) is _SliceGrad:
                            dense = np.zeros(acc.shape, dtype=np.float64)
                            dense[acc.sl] = acc.g
                            grads[pid] = acc = dense
                            owned[pid] = 1
                        elif not owned[pid]:
                            grads[pid] = acc = acc.copy()
                            owned[pid] = 1
                        acc[pg.sl] += pg.g
                else:
                    if acc is None:
                        grads[pid] = pg
                    elif owned[pid]:
                        if type(acc) is _SliceGrad:  # pragma: no cover - owned is always dense
                            raise AssertionError
                        acc += pg
                    else:
                        if type(acc) is _SliceGrad:
                            dense = np.zeros(acc.shape, dtype=np.float64)
                            dense[acc.sl] = acc.g
                            dense += pg
                            grads[pid] = dense
                        else:
                            grads[pid] = acc + pg
                        owned[pid] = 1
            if nid not in watched:
                grads[nid] = None
        out = {}
        for nid, t in watched.items():
            g = grads[nid] if nid <= top else None
            if g is None:
                g = np.zeros(t.data.shape, dtype=np.float64)
            elif type(g) is _SliceGrad:
                dense = np.zeros(g.shape, dtype=np.float64)
                dense[g.sl] = g.g
                g = dense
            elif g.shape != t.data.shape:
                g = np.broadcast_to(g, t.data.shape).copy()
            out[id(t)] = g
        return GradMap(out)


def backward(loss: Tensor) -> GradMap:
    """Run the reverse sweep on the tape that recorded ``loss``."""
    if loss.tape is None:
        raise ValueError("loss is not tracked by any tape")
    return loss.tape.backward(loss)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape of the operand that was expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_binary_shapes(sa, sb, op):
    """Equal shapes, or exactly one operand expands. Both-side expansion
    (e.g. (3,1) with (1,3)) is rejected to keep gradient flow auditable."""
    try:
        out = np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ValueError(f"{op}: shapes {sa} and {sb} are incompatible") from None
    if out != sa and out != sb:
        raise ValueError(f"{op}: shapes {sa} and {sb} would both expand; only one operand may broadcast")


def _vjp_identity(g):
    return g


def _vjp_negate(g):
    return -g


def _binary(a, b, op, fwd, vjp_a, vjp_b) -> Tensor:
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(b)
    ad, bd = a.data, b.data
    same_shape = ad.shape == bd.shape
    if not same_shape:
        _check_binary_shapes(ad.shape, bd.shape, op)
    out_data = fwd(ad, bd)
    tape = _TAPE_STACK[-1] if _TAPE_STACK else None
    if tape is None:
        return _wrap(out_data)
    parents = []
    if a.tape is tape:
        f = vjp_a(ad, bd)
        if not same_shape and ad.shape != out_data.shape:
            f = (lambda g, _f=f, _s=ad.shape: _unbroadcast(_f(g), _s))
        parents.append((a.node, f))
    if b.tape is tape:
        f = vjp_b(ad, bd)
        if not same_shape and bd.shape != out_data.shape:
            f = (lambda g, _f=f, _s=bd.shape: _unbroadcast(_f(g), _s))
        parents.append((b.node, f))
    if not parents:
        return _wrap(out_data)
    return tape._emit(out_data, parents)


def _unary(a, fwd, make_vjp) -> Tensor:
    if not isinstance(a, Tensor):
        a = Tensor(a)
    out_data = fwd(a.data)
    tape = _TAPE_STACK[-1] if _TAPE_STACK else None
    if tape is None or a.tape is not tape:
        return _wrap(out_data)
    return tape._emit(out_data, ((a.node, make_vjp(a.data, out_data)),))


def add(a, b) -> Tensor:
    return _binary(a, b, "add", np.add,
                   lambda x, y: _vjp_identity, lambda x, y: _vjp_identity)


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", np.subtract,
                   lambda x, y: _vjp_identity, lambda x, y: _vjp_negate)


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul", np.multiply,
                   lambda x, y: lambda g: g * y,
                   lambda x, y: lambda g: g * x)


def div(a, b) -> Tensor:
    return _binary(a, b, "div", np.divide,
                   lambda x, y: lambda g: g / y,
                   lambda x, y: lambda g: -g * x / (y * y))


def scale(a, c: float) -> Tensor:
    c = float(c)
    return _unary(a, lambda x: x * c, lambda x, out: lambda g: g * c)


def exp(a) -> Tensor:
    return _unary(a, np.exp, lambda x, out: lambda g: g * out)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log requires strictly positive values")
    return _unary(a, np.log, lambda x, out: lambda g: g / x)


def tanh(a) -> Tensor:
    return _unary(a, np.tanh,
                  lambda x, out: lambda g: g * (1.0 - out * out) * _debug_vjp_scale)


def sigmoid(a) -> Tensor:
    return _unary(a, _expit, lambda x, out: lambda g: g * out * (1.0 - out))


def relu(a) -> Tensor:
    return _unary(a, lambda x: np.maximum(x, 0.0),
                  lambda x, out: lambda g: g * (x > 0.0))


_ELEMENTWISE_UNARY = {"exp": exp, "log": log, "tanh": tanh, "sigmoid": sigmoid, "relu": relu}
_ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name over the pointwise op set.

    ``scale-by-constant`` expects b to be a plain python number.
    """
    if op_kind == "scale-by-constant":
        if not isinstance(b, (int, float)):
            raise ValueError("scale-by-constant takes a plain number")
        return scale(a, b)
    if op_kind in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ValueError(f"{op_kind} is unary")
        return _ELEMENTWISE_UNARY[op_kind](a)
    if op_kind in _ELEMENTWISE_BINARY:
        if b is None:
            raise ValueError(f"{op_kind} is binary")
        return _ELEMENTWISE_BINARY[op_kind](a, b)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def matmul(a, b) -> Tensor:
    """a @ b with b two-dimensional (K, N); a may carry leading batch axes."""
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(b)
    ad, bd = a.data, b.data
    if bd.ndim != 2:
        raise ValueError(f"matmul: right operand must be 2-D, got {bd.shape}")
    if ad.ndim < 1 or ad.shape[-1] != bd.shape[0]:
        raise ValueError(f"matmul: inner dimensions disagree, {ad.shape} @ {bd.shape}")
    out_data = ad @ bd
    tape = _TAPE_STACK[-1] if _TAPE_STACK else None
    if tape is None:
        return _wrap(out_data)
    parents = []
    if a.tape is tape:
        parents.append((a.node, lambda g, _bt=bd.T: g @ _bt))
    if b.tape is tape:
        k = bd.shape[0]

        def vjp_b(g, _a=ad, _k=k):
            return _a.reshape(-1, _k).T @ g.reshape(-1, g.shape[-1])

        parents.append((b.node, vjp_b))
    if not parents:
        return _wrap(out_data)
    return tape._emit(out_data, parents)


def _norm_axis(axis, ndim, op):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ValueError(f"{op}: axis {axis} invalid for ndim {ndim}")
    return axis % ndim


def reduce_sum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axis = _norm_axis(axis, a.data.ndim, "sum")

    def make_vjp(x, out):
        shp = x.shape

        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, shp)
            return np.broadcast_to(np.expand_dims(g, axis), shp)

        return vjp

    return _unary(a, lambda x: np.sum(x, axis=axis), make_vjp)


def reduce_mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axis = _norm_axis(axis, a.data.ndim, "mean")
    n = a.data.size if axis is None else a.data.shape[axis]

    def make_vjp(x, out):
        shp = x.shape

        def vjp(g):
            gs = g / n
            if axis is None:
                return np.broadcast_to(gs, shp)
            return np.broadcast_to(np.expand_dims(gs, axis), shp)

        return vjp

    return _unary(a, lambda x: np.mean(x, axis=axis), make_vjp)


def reduce_max(a, axis=None) -> Tensor:
    """Max over an axis; ties route the gradient to the first maximum."""
    a = as_tensor(a)
    axis = _norm_axis(axis, a.data.ndim, "max")

    def make_vjp(x, out):
        def vjp(g):
            z = np.zeros_like(x)
            if axis is None:
                idx = np.unravel_index(np.argmax(x), x.shape)
                z[idx] = g
                return z
            sel = np.expand_dims(np.argmax(x, axis=axis), axis)
            np.put_along_axis(z, sel, np.expand_dims(g, axis), axis)
            return z

        return vjp

    return _unary(a, lambda x: np.max(x, axis=axis), make_vjp)


_REDUCE = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(op_kind: str, a, axis=None) -> Tensor:
    if op_kind not in _REDUCE:
        raise ValueError(f"unknown reduce op {op_kind!r}")
    return _REDUCE[op_kind](a, axis)


def softmax(a) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    a = as_tensor(a)
    if np.any(np.isnan(a.data)):
        raise ValueError("softmax: NaN in input")

    def fwd(x):
        shifted = x - np.max(x, axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / np.sum(e, axis=-1, keepdims=True)

    def make_vjp(x, out):
        def vjp(g):
            dot = np.sum(g * out, axis=-1, keepdims=True)
            return out * (g - dot)

        return vjp

    return _unary(a, fwd, make_vjp)


def log_softmax(a) -> Tensor:
    """log(softmax(a)) over the last axis, computed without forming log(p)."""
    a = as_tensor(a)
    if np.any(np.isnan(a.data)):
        raise ValueError("log_softmax: NaN in input")

    def fwd(x):
        shifted = x - np.max(x, axis=-1, keepdims=True)
        return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))

    def make_vjp(x, out):
        def vjp(g):
            return g - np.exp(out) * np.sum(g, axis=-1, keepdims=True)

        return vjp

    return _unary(a, fwd, make_vjp)


def take(a, index: int, axis: int) -> Tensor:
    """One slice along ``axis`` (the axis is dropped); output is a view."""
    a = as_tensor(a)
    axis = _norm_axis(axis, a.data.ndim, "take")
    if not 0 <= index < a.data.shape[axis]:
        raise ValueError(f"take: index {index} out of range on axis {axis}")
    sl = (slice(None),) * axis + (index,)

    def make_vjp(x, out):
        return lambda g, _shp=x.shape, _sl=sl: _SliceGrad(_shp, _sl, g)

    return _unary(a, lambda x: x[sl], make_vjp)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along ``axis`` (axis kept); a view."""
    a = as_tensor(a)
    axis = _norm_axis(axis, a.data.ndim, "slice_axis")
    sl = (slice(None),) * axis + (slice(start, stop),)

    def make_vjp(x, out):
        return lambda g, _shp=x.shape, _sl=sl: _SliceGrad(_shp, _sl, g)

    return _unary(a, lambda x: x[sl], make_vjp)


def pad_axis(a, axis: int, before: int, after: int) -> Tensor:
    """Zero padding along one axis."""
    a = as_tensor(a)
    axis = _norm_axis(axis, a.data.ndim, "pad_axis")
    widths = [(0, 0)] * a.data.ndim
    widths[axis] = (before, after)

    def make_vjp(x, out):
        sl = (slice(None),) * axis + (slice(before, before + x.shape[axis]),)
        return lambda g, _sl=sl: g[_sl]

    return _unary(a, lambda x: np.pad(x, widths), make_vjp)


def concat(tensors, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = _norm_axis(axis, ts[0].data.ndim, "concat")
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    tape = _TAPE_STACK[-1] if _TAPE_STACK else None
    if tape is None:
        return _wrap(out_data)
    parents = []
    offset = 0
    head = (slice(None),) * axis
    for t in ts:
        n = t.data.shape[axis]
        if t.tape is tape:
            sl = head + (slice(offset, offset + n),)
            parents.append((t.node, lambda g, _sl=sl: g[_sl]))
        offset += n
    if not parents:
        return _wrap(out_data)
    return tape._emit(out_data, parents)


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in ts], axis=axis)
    tape = _TAPE_STACK[-1] if _TAPE_STACK else None
    if tape is None:
        return _wrap(out_data)
    parents = []
    head = (slice(None),) * _norm_axis(axis, out_data.ndim, "stack")
    for i, t in enumerate(ts):
        if t.tape is tape:
            sl = head + (i,)
            parents.append((t.node, lambda g, _sl=sl: g[_sl]))
    if not parents:
        return _wrap(out_data)
    return tape._emit(out_data, parents)


def custom_op(out_data, parents) -> Tensor:
    """Register a hand-written primitive on the active tape.

    ``parents`` holds (tensor, vjp) pairs; pairs whose tensor is not tracked
    on the active tape are dropped. Each vjp maps the upstream gradient to
    the gradient for its input, as a dense array or a SliceGrad. The engine
    performs no fusion itself; callers own the correctness of their backward
    (keep it under finite-difference coverage).
    """
    out_data = np.asarray(out_data, dtype=np.float64)
    tape = _TAPE_STACK[-1] if _TAPE_STACK else None
    if tape is None:
        return _wrap(out_data)
    node_parents = [(t.node, vjp) for t, vjp in parents if t.tape is tape]
    if not node_parents:
        return _wrap(out_data)
    return tape._emit(out_data, node_parents)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    return _unary(a, lambda x: x.reshape(shape),
                  lambda x, out: lambda g, _s=x.shape: np.ascontiguousarray(g).reshape(_s))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _unary(a, lambda x: np.transpose(x, axes),
                  lambda x, out: lambda g: np.transpose(g, inv))


def dropout(x, rate: float, rng, training: bool) -> Tensor:
    """Inverted dropout; exact identity (same tensor) in evaluation mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    x = as_tensor(x)
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(mask))


class FiniteDiffReport:
    """Outcome of one finite-difference comparison."""

    def __init__(self, max_rel_err, passed, per_param):
        self.max_rel_err = max_rel_err
        self.passed = passed
        self.per_param = per_param   # name -> max rel err

    def __repr__(self):
        status = "pass" if self.passed else "FAIL"
        return f"FiniteDiffReport({status}, max_rel_err={self.max_rel_err:.3e})"


def finite_diff_check(f, params, h: float = 1e-5, tol: float = 1e-4,
                      names=None) -> FiniteDiffReport:
    """Compare analytic gradients of ``f`` against central finite differences.

    f: zero-argument callable returning a scalar Tensor; it must read the
       current values of ``params`` and be deterministic (two untracked
       forward passes are compared bitwise to detect otherwise).
    params: tensors whose every element is perturbed by +-h.

    Relative error uses max(|analytic|, |numeric|, 1e-3) as denominator; the
    floor guards against finite-difference noise on near-zero gradients.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = list(params)
    if names is None:
        names = [f"param{i}" for i in range(len(params))]
    y0 = float(f().data)
    if float(f().data) != y0:
        raise ValueError("f is not deterministic: two forward passes disagree")
    with Tape() as tape:
        tape.watch(*params)
        loss = f()
    if loss.tape is tape:
        grads = tape.backward(loss)
    else:
        # f never touched the parameters (e.g. a constant): all-zero gradients
        grads = GradMap({id(p): np.zeros(p.data.shape) for p in params})
    per_param = {}
    worst = 0.0
    for p, name in zip(params, names):
        ana = grads.wrt(p).reshape(-1)
        flat = p.data.reshape(-1)
        worst_here = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            rel = abs(ana[i] - num) / max(abs(ana[i]), abs(num), 1e-3)
            if rel > worst_here:
                worst_here = rel
        per_param[name] = worst_here
        worst = max(worst, worst_here)
    return FiniteDiffReport(worst, worst < tol, per_param)
