"""Reverse- and forward-mode automatic differentiation over float64 arrays.

A small dynamic-graph engine: every operation records its operands plus two
closures, one for the reverse (cotangent) rule and one for the forward
(tangent) rule.  The reverse rules are themselves expressed with recorded
operations, so differentiating a gradient a second time works without a
separate forward-over-reverse engine.

Backward rules receive a per-parent ``need`` mask and may return None for
parents whose cotangent nobody asked for; vjp computes the mask from the
requested targets so that e.g. spectral inner loops never pay for parameter
gradients.

Activations are restricted to functions with at least one derivative almost
everywhere; at the leaky-ReLU kink the subgradient of the right branch is
used.
"""
from __future__ import annotations

from contextlib import contextmanager, nullcontext

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array with optional differentiation tracking.

    ``_parents`` links into the dynamic computation record; ``_bwd`` maps an
    output cotangent to per-parent cotangents, ``_tangent`` maps per-parent
    tangents to the output tangent.
    """

    __slots__ = ("data", "requires_grad", "disconnected", "_parents", "_bwd", "_tangent")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.disconnected = False
        self._parents = ()
        self._bwd = None
        self._tangent = None

    # -- passive views ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __pow__(self, p):
        return pow_const(self, float(p))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow_const(other, -1.0))
        return mul(self, Tensor(1.0 / np.asarray(other, dtype=np.float64)))

    def __rtruediv__(self, other):
        return mul(_wrap(other), pow_const(self, -1.0))

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else self.shape[axis]
        return reduce_sum(self, axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, bwd, tangent):
    """Create an output tensor, recording rules only when tracking is on."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = parents
        out._bwd = bwd
        out._tangent = tangent
        return out
    return Tensor(data)


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def _unbroadcast(g, shape):
    """Sum a cotangent back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = reduce_sum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = reduce_sum(g, axis=axes, keepdims=True)
    return g


def add(a, b):
    def bwd(g, need):
        return (_unbroadcast(g, a.shape) if need[0] else None,
                _unbroadcast(g, b.shape) if need[1] else None)

    def tangent(ta, tb):
        if ta is None:
            return broadcast_to(tb, np.broadcast_shapes(a.shape, b.shape))
        if tb is None:
            return broadcast_to(ta, np.broadcast_shapes(a.shape, b.shape))
        return add(ta, tb)

    return _node(a.data + b.data, (a, b), bwd, tangent)


def sub(a, b):
    def bwd(g, need):
        return (_unbroadcast(g, a.shape) if need[0] else None,
                neg(_unbroadcast(g, b.shape)) if need[1] else None)

    def tangent(ta, tb):
        if ta is None:
            return neg(broadcast_to(tb, np.broadcast_shapes(a.shape, b.shape)))
        if tb is None:
            return broadcast_to(ta, np.broadcast_shapes(a.shape, b.shape))
        return sub(ta, tb)

    return _node(a.data - b.data, (a, b), bwd, tangent)


def neg(a):
    def bwd(g, need):
        return (neg(g),)

    def tangent(ta):
        return neg(ta)

    return _node(-a.data, (a,), bwd, tangent)


def mul(a, b):
    def bwd(g, need):
        return (_unbroadcast(mul(g, b), a.shape) if need[0] else None,
                _unbroadcast(mul(g, a), b.shape) if need[1] else None)

    def tangent(ta, tb):
        if ta is None:
            return mul(a, tb)
        if tb is None:
            return mul(ta, b)
        return add(mul(ta, b), mul(a, tb))

    return _node(a.data * b.data, (a, b), bwd, tangent)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")

    def bwd(g, need):
        return (matmul(g, transpose(b)) if need[0] else None,
                matmul(transpose(a), g) if need[1] else None)

    def tangent(ta, tb):
        if ta is None:
            return matmul(a, tb)
        if tb is None:
            return matmul(ta, b)
        return add(matmul(ta, b), matmul(a, tb))

    return _node(a.data @ b.data, (a, b), bwd, tangent)


def affine(x, w, b):
    """x @ w + b in one recorded step; the workhorse of every MLP layer."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ValueError(f"affine expects (N,din) @ (din,dout) + (dout,), got {x.shape}, {w.shape}, {b.shape}")

    def bwd(g, need):
        return (matmul(g, transpose(w)) if need[0] else None,
                matmul(transpose(x), g) if need[1] else None,
                reduce_sum(g, axis=0) if need[2] else None)

    def tangent(tx, tw, tb):
        parts = []
        if tx is not None:
            parts.append(matmul(tx, w))
        if tw is not None:
            parts.append(matmul(x, tw))
        if tb is not None:
            parts.append(broadcast_to(tb, (x.shape[0], w.shape[1])))
        out = parts[0]
        for p in parts[1:]:
            out = add(out, p)
        return out

    return _node(x.data @ w.data + b.data, (x, w, b), bwd, tangent)


def transpose(a):
    def bwd(g, need):
        return (transpose(g),)

    def tangent(ta):
        return transpose(ta)

    return _node(a.data.T, (a,), bwd, tangent)


def reshape(a, shape):
    old = a.shape

    def bwd(g, need):
        return (reshape(g, old),)

    def tangent(ta):
        return reshape(ta, shape)

    return _node(a.data.reshape(shape), (a,), bwd, tangent)


def broadcast_to(a, shape):
    old = a.shape

    def bwd(g, need):
        return (_unbroadcast(g, old),)

    def tangent(ta):
        return broadcast_to(ta, shape)

    return _node(np.broadcast_to(a.data, shape), (a,), bwd, tangent)


def reduce_sum(a, axis=None, keepdims=False):
    def bwd(g, need):
        return (_spread(g, a.shape, axis, keepdims),)

    def tangent(ta):
        return reduce_sum(ta, axis=axis, keepdims=keepdims)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd, tangent)


def _spread(g, shape, axis, keepdims):
    """Inverse of reduce_sum's shape contraction: broadcast g back to shape."""
    if axis is None:
        return broadcast_to(reshape(g, (1,) * len(shape)), shape) if shape else g
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        new_shape = list(g.shape)
        for ax in sorted(ax % len(shape) for ax in axes):
            new_shape.insert(ax, 1)
        g = reshape(g, tuple(new_shape))
    return broadcast_to(g, shape)


def exp(a):
    out_data = np.exp(a.data)

    def bwd(g, need):
        return (mul(g, out),)

    def tangent(ta):
        return mul(ta, out)

    out = _node(out_data, (a,), bwd, tangent)
    return out


def log(a):
    def bwd(g, need):
        return (mul(g, pow_const(a, -1.0)),)

    def tangent(ta):
        return mul(ta, pow_const(a, -1.0))

    return _node(np.log(a.data), (a,), bwd, tangent)


def pow_const(a, p):
    def bwd(g, need):
        return (mul(g, mul(Tensor(p), pow_const(a, p - 1.0))),)

    def tangent(ta):
        return mul(ta, mul(Tensor(p), pow_const(a, p - 1.0)))

    return _node(a.data ** p, (a,), bwd, tangent)


def sqrt(a):
    return pow_const(a, 0.5)


def tanh(a):
    out_data = np.tanh(a.data)

    def bwd(g, need):
        return (mul(g, sub(Tensor(1.0), mul(out, out))),)

    def tangent(ta):
        return mul(ta, sub(Tensor(1.0), mul(out, out)))

    out = _node(out_data, (a,), bwd, tangent)
    return out


def sigmoid(a):
    out_data = _sigmoid(a.data)

    def bwd(g, need):
        return (mul(g, mul(out, sub(Tensor(1.0), out))),)

    def tangent(ta):
        return mul(ta, mul(out, sub(Tensor(1.0), out)))

    out = _node(out_data, (a,), bwd, tangent)
    return out


def _sigmoid(x):
    # evaluate on -|x| only, then mirror: no overflow, single exp pass
    e = np.exp(-np.abs(x))
    low = e / (1.0 + e)
    return np.where(x >= 0, 1.0 - low, low)


def softplus(a):
    # overflow-safe: sp(x) = max(x, 0) + log1p(exp(-|x|))
    x = a.data
    e = np.exp(-np.abs(x))
    out_data = np.maximum(x, 0.0)
    out_data += np.log1p(e)
    # one shared sigmoid node, reused by every backward/tangent sweep:
    # sigma(x) = (x >= 0 ? 1 : e) / (1 + e) with e = exp(-|x|)
    num = np.where(x >= 0, 1.0, e)
    num /= 1.0 + e
    sig = _node(num, (a,),
                lambda g, need: (mul(g, mul(sig, sub(Tensor(1.0), sig))),),
                lambda ta: mul(ta, mul(sig, sub(Tensor(1.0), sig))))

    def bwd(g, need):
        return (mul(g, sig),)

    def tangent(ta):
        return mul(ta, sig)

    return _node(out_data, (a,), bwd, tangent)


def leaky_relu(a, slope=0.2):
    # subgradient of the right branch at the kink: derivative 1 at x == 0
    factor = np.where(a.data >= 0, 1.0, slope)

    def bwd(g, need):
        return (mul(g, Tensor(factor)),)

    def tangent(ta):
        return mul(ta, Tensor(factor))

    return _node(a.data * factor, (a,), bwd, tangent)


def relu(a):
    return leaky_relu(a, slope=0.0)


def elu(a, alpha=1.0):
    neg_part = alpha * (np.exp(np.minimum(a.data, 0.0)) - 1.0)
    out_data = np.where(a.data >= 0, a.data, neg_part)
    deriv = np.where(a.data >= 0, 1.0, neg_part + alpha)

    def bwd(g, need):
        # second derivative treated as constant (third order unsupported)
        return (mul(g, _elu_deriv(a, deriv)),)

    def tangent(ta):
        return mul(ta, _elu_deriv(a, deriv))

    return _node(out_data, (a,), bwd, tangent)


def _elu_deriv(a, deriv):
    second = np.where(a.data >= 0, 0.0, deriv)

    def bwd(g, need):
        return (mul(g, Tensor(second)),)

    def tangent(ta):
        return mul(ta, Tensor(second))

    return _node(deriv, (a,), bwd, tangent)


def concat(tensors, axis=0):
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def bwd(g, need):
        return tuple(
            narrow(g, axis, int(offsets[i]), int(offsets[i + 1])) if need[i] else None
            for i in range(len(tensors)))

    def tangent(*tans):
        parts = [t if t is not None else Tensor(np.zeros(p.shape)) for t, p in zip(tans, tensors)]
        return concat(parts, axis=axis)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd, tangent)


def narrow(a, axis, start, stop):
    index = tuple(slice(None) if i != axis else slice(start, stop) for i in range(a.ndim))

    def bwd(g, need):
        return (_pad_slice(g, a.shape, index),)

    def tangent(ta):
        return narrow(ta, axis, start, stop)

    return _node(a.data[index], (a,), bwd, tangent)


def _pad_slice(g, shape, index):
    def bwd(gg, need):
        return (_narrow_index(gg, index),)

    def tangent(tg):
        return _pad_slice(tg, shape, index)

    data = np.zeros(shape)
    data[index] = g.data
    return _node(data, (g,), bwd, tangent)


def _narrow_index(a, index):
    def bwd(g, need):
        return (_pad_slice(g, a.shape, index),)

    def tangent(ta):
        return _narrow_index(ta, index)

    return _node(a.data[index], (a,), bwd, tangent)


def where_mask(mask, a, b):
    """Select per element with a constant boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    fa = Tensor(np.where(mask, 1.0, 0.0))
    fb = Tensor(np.where(mask, 0.0, 1.0))
    return add(mul(a, fa), mul(b, fb))


def logsumexp(a, axis=1):
    """Row-stable log-sum-exp; the max shift is treated as a constant."""
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    s = reduce_sum(exp(sub(a, shift)), axis=axis)
    return add(log(s), reshape(shift, s.shape))


def standard_normal_logpdf_rows(x):
    """log N(x; 0, I) per row of a (N, D) batch."""
    d = x.shape[1]
    return sub(mul(Tensor(-0.5), reduce_sum(mul(x, x), axis=1)),
               Tensor(0.5 * d * np.log(2.0 * np.pi)))


def gaussian_logpdf_rows(x, mean, var):
    """log N(x; mean, var*I) per row; mean broadcastable, var scalar or rows."""
    d = x.shape[1]
    diff = sub(x, mean)
    quad = reduce_sum(mul(diff, diff), axis=1)
    var = _wrap(var)
    return sub(mul(Tensor(-0.5), mul(quad, pow_const(var, -1.0))),
               add(mul(Tensor(0.5 * d), log(var)), Tensor(0.5 * d * np.log(2.0 * np.pi))))


def rows_norm(x, eps=0.0):
    """Euclidean norm of each row of a (N, D) batch."""
    sq = reduce_sum(mul(x, x), axis=1)
    if eps:
        sq = add(sq, Tensor(eps))
    return pow_const(sq, 0.5)


# ---------------------------------------------------------------------------
# graph walks
# ---------------------------------------------------------------------------

def _toposort(root):
    """Parents-before-children order over the recorded graph (iterative DFS)."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def vjp(output, targets, create_graph=False):
    """Gradients of a scalar output with respect to each target.

    Returned tensors are recordable when ``create_graph`` is set, enabling
    second-order differentiation.  Targets not reached by the backward sweep
    get a zero gradient with ``disconnected`` set.  Cotangents are only
    propagated along paths that can reach a target.
    """
    if output.size != 1:
        raise ValueError(f"vjp needs a scalar output, got shape {output.shape}")
    single = isinstance(targets, Tensor)
    targets = [targets] if single else list(targets)
    target_ids = {id(t) for t in targets}

    cot = {}
    if output.requires_grad:
        order = _toposort(output)
        needed = {}
        for node in order:
            nid = id(node)
            needed[nid] = nid in target_ids or any(needed.get(id(p), False) for p in node._parents)

        ctx = nullcontext() if create_graph else no_grad()
        with ctx:
            cot[id(output)] = Tensor(np.ones(output.shape))
            for node in reversed(order):
                nid = id(node)
                if not needed.get(nid, False) and nid != id(output):
                    cot.pop(nid, None)
                    continue
                g = cot.get(nid)
                if g is None or node._bwd is None:
                    continue
                need = tuple(p.requires_grad and needed.get(id(p), False) for p in node._parents)
                if not any(need):
                    continue
                parts = node._bwd(g, need)
                for p, pg in zip(node._parents, parts):
                    if pg is None:
                        continue
                    acc = cot.get(id(p))
                    cot[id(p)] = pg if acc is None else add(acc, pg)

    grads = []
    for t in targets:
        g = cot.get(id(t))
        if g is None:
            g = Tensor(np.zeros(t.shape))
            g.disconnected = True
        grads.append(g)
    return grads[0] if single else grads


def jvp(output, wrt, tangent, create_graph=False):
    """Directional derivative J . tangent of the recorded map wrt -> output."""
    tangent = _wrap(tangent)
    if tangent.shape != wrt.shape:
        raise ValueError(f"tangent shape {tangent.shape} != input shape {wrt.shape}")

    ctx = nullcontext() if create_graph else no_grad()
    with ctx:
        tans = {id(wrt): tangent}
        if output.requires_grad and wrt.requires_grad:
            for node in _toposort(output):
                if node._tangent is None or id(node) in tans:
                    continue
                parts = [tans.get(id(p)) for p in node._parents]
                if all(p is None for p in parts):
                    continue
                tans[id(node)] = node._tangent(*parts)
        t = tans.get(id(output))
    if t is None:
        t = Tensor(np.zeros(output.shape))
        t.disconnected = True
    return t


def jtj_apply(output, z, v, create_graph=False, jv=None):
    """Apply the Jacobian Gram matrix: returns J^T J v without forming J.

    Computed as the gradient with respect to ``z`` of <stop_grad(J v), output>,
    so only one forward-tangent and one reverse sweep are needed.  Pass a
    precomputed ``jv`` (ndarray) to skip the tangent sweep, e.g. when an
    iterative caller keeps J v up to date itself.
    """
    if jv is None:
        jv = jvp(output, z, v).data
    else:
        jv = np.asarray(jv, dtype=np.float64)
    inner = reduce_sum(mul(Tensor(jv), output))
    return vjp(inner, z, create_graph=create_graph)
