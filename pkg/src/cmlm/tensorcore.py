"""Small reverse-mode autodiff over numpy arrays, plus Adam, the warmup schedule
and a central-difference gradient checker.

A :class:`Tensor` wraps an ndarray and remembers how it was produced. Calling
``backward()`` on a scalar result walks the graph in reverse topological order
and accumulates ``.grad`` on every tensor that requires it.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operands have incompatible shapes."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, _parents=(), op="leaf", name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of 4")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.op = op
        self.name = name

    # -- conveniences -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def _accum(self, g):
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Run reverse-mode accumulation from this tensor."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    pg = _unbroadcast(pg, parent.data.shape)
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _make(data, parents, backward, op):
    _check_finite(data, op)
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=parents if req else (), op=op)
    if req:
        out._backward = backward
    return out


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {op}")


# -- elementwise ----------------------------------------------------------


def _broadcast_check(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _broadcast_check(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _broadcast_check(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a, c: float):
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def _phi(x):
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0)))


def gelu(a):
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = _phi(x)
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return _make((x * cdf).astype(x.dtype), (a,), lambda g: (g * (cdf + x * pdf),), "gelu")


# -- reductions / shape ---------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes):
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def slice_(a, idx):
    def bw(g):
        out = np.zeros_like(a.data)
        out[idx] = g
        return (out,)

    return _make(a.data[idx], (a,), bw, "slice")


def take(a, indices):
    """Gather rows ``a[indices]`` (repeats allowed)."""
    indices = np.asarray(indices)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, indices, g)
        return (out,)

    return _make(a.data[indices], (a,), bw, "take")


def embedding(table, ids):
    """Row lookup ``table[ids]``; ids may be any integer array."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table of shape {table.shape}")
    return take(table, ids)


def gather_flat(a, flat_index):
    """Pick scalar entries ``a.ravel()[flat_index]``."""
    flat_index = np.asarray(flat_index)

    def bw(g):
        out = np.zeros(a.data.size, dtype=a.data.dtype)
        np.add.at(out, flat_index.ravel(), g.ravel())
        return (out.reshape(a.shape),)

    return _make(a.data.ravel()[flat_index], (a,), bw, "gather_flat")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or any(x != y for i, (x, y) in enumerate(zip(s, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: shapes {tuple(ref)} and {tuple(s)} differ off axis {axis}")
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


# -- linear algebra -------------------------------------------------------


def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# -- normalisation / probabilities ----------------------------------------


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (a,), bw, "softmax")


def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def logsumexp(a, axis=-1):
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    w = e / s

    def bw(g):
        return (np.expand_dims(g, axis) * w,)

    return _make(out, (a,), bw, "logsumexp")


def layer_norm(a, gamma, beta, eps=1e-5):
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def bw(g):
        gx_hat = g * gamma.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(xhat * gamma.data + beta.data, (a, gamma, beta), bw, "layer_norm")


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax."""
    lp = log_softmax(logits, axis=-1)
    rows = np.arange(len(targets))
    picked = gather_flat(lp, rows * lp.shape[-1] + np.asarray(targets))
    return neg(mean(picked))


# -- dropout --------------------------------------------------------------


def dropout_mask(shape, rate, seed, step, instance, dtype=DEFAULT_DTYPE):
    """Inverted-dropout keep mask from a counter-based generator.

    Keyed on (seed, step, instance) so any step can be replayed in isolation.
    """
    bitgen = np.random.Philox(key=np.array([seed & (2**64 - 1), (step << 20) ^ instance], dtype=np.uint64))
    keep = np.random.Generator(bitgen).random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


def dropout(a, rate, seed=0, step=0, instance=0, train=True):
    if not train or rate <= 0.0:
        return a
    m = dropout_mask(a.shape, rate, seed, step, instance, a.dtype)
    return _make(a.data * m, (a,), lambda g: (g * m,), "dropout")


# -- optimisation ---------------------------------------------------------


@dataclass
class LrSchedule:
    warmup_steps: int = 1000
    peak_lr: float = 5e-4

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warmup to ``peak_lr`` then inverse-sqrt decay."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step == 0:
        return 0.0
    w = schedule.warmup_steps
    return schedule.peak_lr * min(step / w, math.sqrt(w / step))


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    skipped: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: OptimizerState, params: dict, grads: dict, lr: float) -> bool:
    """Apply one bias-corrected Adam update in place.

    Returns False (and leaves everything untouched) if any gradient is non-finite.
    """
    for name, g in grads.items():
        if g is not None and g.shape != params[name].shape:
            raise ShapeError(f"adam: grad for {name} has shape {g.shape}, param has {params[name].shape}")
        if g is not None and not np.all(np.isfinite(g)):
            state.skipped += 1
            logger.warning("non-finite gradient for %s; skipping step (%d skipped so far)", name, state.skipped)
            return False
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
    return True


# -- gradient checking ----------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    analytic: float
    numeric: float
    per_param: dict

    def format(self) -> str:
        lines = [f"max_rel_error {self.max_rel_error:.3e}",
                 f"worst {self.worst_param}{list(self.worst_index)} analytic={self.analytic:.10g} numeric={self.numeric:.10g}"]
        lines += [f"param {k} {v:.3e}" for k, v in self.per_param.items()]
        return "\n".join(lines)


def _rel_err(a, n, floor):
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(f, params: dict, h=1e-5, coords_per_param=None, rng=None, floor=1e-7) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` with central differences.

    ``params`` maps names to leaf tensors that ``f`` closes over. If
    ``coords_per_param`` is set, only that many random coordinates of each
    tensor are probed. Relative errors use ``max(|analytic|, |numeric|, floor)``
    as denominator so coordinates with vanishing gradients are not dominated
    by round-off.
    """
    for p in params.values():
        p.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise FloatingPointError("grad_check: f is not finite at the base point")
    out.backward()
    rng = rng or np.random.default_rng(0)
    worst = (0.0, "", (), 0.0, 0.0)
    per = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        idxs = list(np.ndindex(p.shape))
        if coords_per_param is not None and len(idxs) > coords_per_param:
            pick = rng.choice(len(idxs), size=coords_per_param, replace=False)
            idxs = [idxs[i] for i in sorted(pick)]
        pw = 0.0
        for idx in idxs:
            orig = p.data[idx]
            p.data[idx] = orig + h
            fp = float(f().data)
            p.data[idx] = orig - h
            fm = float(f().data)
            p.data[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"grad_check: f not finite around {name}{idx}")
            num = (fp - fm) / (2 * h)
            e = _rel_err(float(analytic[idx]), num, floor)
            pw = max(pw, e)
            if e > worst[0] or not worst[1]:
                worst = (e, name, idx, float(analytic[idx]), num)
        per[name] = pw
    return GradCheckReport(*worst, per_param=per)
