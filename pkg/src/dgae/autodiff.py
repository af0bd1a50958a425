"""Reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps an ndarray and remembers how it was produced. Calling
backward() on a scalar root walks the recorded graph in reverse
topological order and accumulates gradients into every Tensor that
requires them. Training runs in float64; inference code may pass
float32 arrays for speed.

Broadcasting is deliberately restricted: binary ops accept equal
shapes, a python scalar, or a trailing-suffix shape (bias add). This
keeps every backward rule explicit and easy to audit.
"""

from __future__ import annotations

import numpy as np

# Additive logit mask. Large enough that exp() underflows to exactly
# 0.0 in float64 (so masked classes get probability 0), small enough
# that arithmetic on it stays finite. Do not use -inf: an all-masked
# softmax row would produce NaN instead of zeros.
MASK_VALUE = -1e30


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        # callers always pass a gradient of exactly self.data.shape
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar root, got shape %r" % (self.shape,))
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
            else:
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar. Full primitives live at module level.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _node(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _suffix_axes(big, small):
    """Axes of `big` to sum over when reducing a gradient to `small`'s shape."""
    if small == big:
        return None
    k = len(big) - len(small)
    if k < 0 or big[k:] != small:
        raise ShapeError(f"shapes {big} and {small} are not suffix-compatible")
    return tuple(range(k))


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        out_data = a.data + b.data

        def bw(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g)

    else:
        # bias-style add: b broadcasts over leading axes of a
        axes = _suffix_axes(a.shape, b.shape)
        out_data = a.data + b.data

        def bw(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g.sum(axis=axes) if axes else g)

    return _node(out_data, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        axes = _suffix_axes(a.shape, b.shape)
    else:
        axes = None
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            gb = g * a.data
            b._accumulate(gb.sum(axis=axes) if axes else gb)

    return _node(out_data, (a, b), bw)


def neg(a):
    a = _as_tensor(a)

    def bw(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _node(-a.data, (a,), bw)


def matmul(a, b):
    """Matrix product. 2-D or batched with identical leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs >=2-D operands")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading dims must match exactly: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _node(out_data, (a, b), bw)


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _node(out_data, tuple(tensors), bw)


def reshape(a, shape):
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _node(out_data, (a,), bw)


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = np.argsort(axes)
    out_data = np.transpose(a.data, axes)

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.transpose(g, inv))

    return _node(out_data, (a,), bw)


def slice_(a, key):
    """Basic slicing (ints/slices). Backward scatters into a zero tensor."""
    a = _as_tensor(a)
    out_data = a.data[key]

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[key] = g
            a._accumulate(full)

    return _node(out_data, (a,), bw)


def tile(a, axis, reps):
    """Repeat a size-1 axis. The explicit stand-in for broadcasting."""
    a = _as_tensor(a)
    if a.shape[axis] != 1:
        raise ShapeError(f"tile needs size-1 axis, got {a.shape[axis]} at axis {axis}")
    out_data = np.repeat(a.data, reps, axis=axis)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g.sum(axis=axis, keepdims=True))

    return _node(out_data, (a,), bw)


def sum_(a, axis=None):
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis)

    def bw(g):
        if a.requires_grad:
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape).copy())
            else:
                a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _node(out_data, (a,), bw)


def mean(a, axis=None):
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis), 1.0 / count)


def relu(a):
    a = _as_tensor(a)
    keep = a.data > 0
    out_data = np.where(keep, a.data, 0.0)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * keep)

    return _node(out_data, (a,), bw)


def sigmoid(a):
    a = _as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), bw)


def log(a):
    a = _as_tensor(a)
    out_data = np.log(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _node(out_data, (a,), bw)


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _node(out_data, (a,), bw)


def softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate(out_data * (g - dot))

    return _node(out_data, (a,), bw)


def masked_fill(a, mask, value):
    """Replace entries where `mask` is True with `value` (no grad there)."""
    a = _as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out_data = np.where(mask, value, a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.where(mask, 0.0, g))

    return _node(out_data, (a,), bw)


def embedding(table, idx):
    """Row lookup: out[..., :] = table[idx[...], :]. Grad scatter-adds."""
    table = _as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    out_data = table.data[idx]

    def bw(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            table._accumulate(full)

    return _node(out_data, (table,), bw)


def straight_through(z_h, z_q):
    """Identity-gradient bridge across a non-differentiable map.

    Forward returns z_q's values; backward copies the incoming gradient
    onto z_h unchanged and sends nothing to z_q.
    """
    z_h, z_q = _as_tensor(z_h), _as_tensor(z_q)
    if z_h.shape != z_q.shape:
        raise ShapeError(f"straight_through shapes differ: {z_h.shape} vs {z_q.shape}")
    out_data = z_q.data.copy()

    def bw(g):
        if z_h.requires_grad:
            z_h._accumulate(g)

    return _node(out_data, (z_h, z_q), bw)


def cross_entropy_with_logits(logits, targets):
    """Per-row CE over the last axis with integer targets.

    Stable log-sum-exp; tolerates additively masked logits (MASK_VALUE)
    as long as the target class itself is unmasked.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} vs logits {logits.shape}")
    m = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    se = e.sum(axis=-1, keepdims=True)
    lse = (m + np.log(se)).squeeze(-1)
    picked = np.take_along_axis(logits.data, targets[..., None], axis=-1).squeeze(-1)
    out_data = lse - picked

    def bw(g):
        if logits.requires_grad:
            p = e / se
            onehot = np.zeros_like(p)
            np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
            logits._accumulate((p - onehot) * g[..., None])

    return _node(out_data, (logits,), bw)


def layernorm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis, then scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def bw(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            t1 = gx.mean(axis=-1, keepdims=True)
            t2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gx - t1 - xhat * t2))

    return _node(out_data, (x, gamma, beta), bw)


class BatchNormState:
    """Running statistics plus affine parameters for one batchnorm."""

    def __init__(self, width, momentum=0.9, eps=1e-5):
        self.gamma = Tensor(np.ones(width), requires_grad=True)
        self.beta = Tensor(np.zeros(width), requires_grad=True)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.momentum = momentum
        self.eps = eps


def batchnorm(x, state, train, mask=None):
    """Batch normalization over rows of a 2-D tensor.

    In training mode the batch statistics are computed over rows where
    `mask` is True (all rows if None); padding rows must be excluded by
    the caller or they would pollute the statistics. Every row is
    normalized with those statistics. Running buffers are updated in
    place with momentum `state.momentum`. In eval mode the running
    buffers are used and no state changes.
    """
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"batchnorm expects 2-D input, got {x.shape}")
    gamma, beta, eps = state.gamma, state.beta, state.eps

    if not train:
        inv = 1.0 / np.sqrt(state.running_var + eps)
        out_data = (x.data - state.running_mean) * inv * gamma.data + beta.data
        xhat = (x.data - state.running_mean) * inv

        def bw_eval(g):
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=0))
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=0))
            if x.requires_grad:
                x._accumulate(g * gamma.data * inv)

        return _node(out_data, (x, gamma, beta), bw_eval)

    if mask is None:
        sel = np.ones(x.shape[0], dtype=bool)
    else:
        sel = np.asarray(mask, dtype=bool)
    m = int(sel.sum())
    if m == 0:
        mu = np.zeros(x.shape[1])
        var = np.ones(x.shape[1])
    else:
        rows = x.data[sel]
        mu = rows.mean(axis=0)
        var = ((rows - mu) ** 2).mean(axis=0)
        state.running_mean *= state.momentum
        state.running_mean += (1.0 - state.momentum) * mu
        state.running_var *= state.momentum
        state.running_var += (1.0 - state.momentum) * var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            if m == 0:
                x._accumulate(gx * inv)
            else:
                # mu and var depend only on masked rows; all rows share them
                dmu = -(gx * inv).sum(axis=0)
                dvar = (gx * (x.data - mu)).sum(axis=0) * (-0.5) * inv ** 3
                gi = gx * inv
                corr = sel[:, None] * (dmu / m + dvar * 2.0 * (x.data - mu) / m)
                x._accumulate(gi + corr)

    return _node(out_data, (x, gamma, beta), bw)


def grad_check(f, inputs, eps=1e-5):
    """Max relative error between backprop and central differences.

    `f` maps the Tensor list to a scalar Tensor. Relative error per
    coordinate is |analytic - fd| / max(|analytic|, |fd|, floor) with
    floor = eps * (1 + |f|): below it a central difference is rounding
    noise of f itself, so coordinates whose true gradient is exactly
    zero would otherwise register spurious errors.
    Non-finite values raise with the offending input and coordinate.
    """
    for t in inputs:
        t.zero_grad()
    out = f(inputs)
    out.backward()
    floor = eps * (1.0 + abs(float(out.data)))
    analytic = []
    for t in inputs:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        analytic.append(g.copy())

    worst = 0.0
    for ti, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        for ci in range(flat.size):
            orig = flat[ci]
            flat[ci] = orig + eps
            hi = float(f(inputs).data)
            flat[ci] = orig - eps
            lo = float(f(inputs).data)
            flat[ci] = orig
            fd = (hi - lo) / (2.0 * eps)
            an = analytic[ti].reshape(-1)[ci]
            if not (np.isfinite(fd) and np.isfinite(an)):
                raise FloatingPointError(
                    f"non-finite gradient at input {ti} coord {ci}: analytic={an} fd={fd}")
            rel = abs(an - fd) / max(abs(an), abs(fd), floor)
            worst = max(worst, rel)
    return worst
