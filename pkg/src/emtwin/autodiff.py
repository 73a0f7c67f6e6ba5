"""Reverse-mode gradients over a small fixed operation vocabulary.

Every :class:`Var` created through a :class:`Tape` is appended to the tape in
evaluation order, so a single reverse sweep visits nodes in a valid
topological order. Complex quantities are carried as separate real and
imaginary ``Var`` objects.
"""
from __future__ import annotations

import numpy as np

LN10 = np.log(10.0)


class Var:
    __slots__ = ("value", "grad", "parents", "back", "needs_grad")

    def __init__(self, value, parents=(), back=None, needs_grad=False):
        self.value = value
        self.grad = None
        self.parents = parents
        self.back = back
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={np.shape(self.value)}, needs_grad={self.needs_grad})"


def _acc(v: Var, g):
    if not v.needs_grad:
        return
    v.grad = g if v.grad is None else v.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tape:
    def __init__(self):
        self.nodes: list[Var] = []

    # -- leaves ---------------------------------------------------------
    def param(self, value) -> Var:
        v = Var(np.asarray(value, dtype=float), needs_grad=True)
        self.nodes.append(v)
        return v

    def const(self, value) -> Var:
        return Var(np.asarray(value, dtype=float))

    def _wrap(self, x) -> Var:
        return x if isinstance(x, Var) else self.const(x)

    def _node(self, value, parents, back) -> Var:
        ng = any(p.needs_grad for p in parents)
        v = Var(value, parents if ng else (), back if ng else None, ng)
        if ng:
            self.nodes.append(v)
        return v

    # -- sweep ----------------------------------------------------------
    def backward(self, out: Var, seed=None):
        """Accumulate d(out)/d(leaf) into ``.grad`` of every parameter leaf."""
        if not out.needs_grad:
            return
        out.grad = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=float)
        for v in reversed(self.nodes):
            if v.back is not None and v.grad is not None:
                v.back(v.grad)

    # -- elementwise ----------------------------------------------------
    def add(self, a, b) -> Var:
        a, b = self._wrap(a), self._wrap(b)

        def back(g):
            _acc(a, _unbroadcast(g, a.value.shape))
            _acc(b, _unbroadcast(g, b.value.shape))
        return self._node(a.value + b.value, (a, b), back)

    def sub(self, a, b) -> Var:
        a, b = self._wrap(a), self._wrap(b)

        def back(g):
            _acc(a, _unbroadcast(g, a.value.shape))
            _acc(b, _unbroadcast(-g, b.value.shape))
        return self._node(a.value - b.value, (a, b), back)

    def mul(self, a, b) -> Var:
        a, b = self._wrap(a), self._wrap(b)

        def back(g):
            if a.needs_grad:
                _acc(a, _unbroadcast(g * b.value, a.value.shape))
            if b.needs_grad:
                _acc(b, _unbroadcast(g * a.value, b.value.shape))
        return self._node(a.value * b.value, (a, b), back)

    def div(self, a, b) -> Var:
        a, b = self._wrap(a), self._wrap(b)
        out = a.value / b.value

        def back(g):
            if a.needs_grad:
                _acc(a, _unbroadcast(g / b.value, a.value.shape))
            if b.needs_grad:
                _acc(b, _unbroadcast(-g * out / b.value, b.value.shape))
        return self._node(out, (a, b), back)

    def relu(self, a: Var) -> Var:
        mask = a.value > 0
        return self._node(np.where(mask, a.value, 0.0), (a,), lambda g: _acc(a, g * mask))

    def exp(self, a: Var) -> Var:
        out = np.exp(a.value)
        return self._node(out, (a,), lambda g: _acc(a, g * out))

    def sigmoid(self, a: Var) -> Var:
        out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
        return self._node(out, (a,), lambda g: _acc(a, g * out * (1.0 - out)))

    def sin(self, a: Var) -> Var:
        return self._node(np.sin(a.value), (a,), lambda g: _acc(a, g * np.cos(a.value)))

    def cos(self, a: Var) -> Var:
        return self._node(np.cos(a.value), (a,), lambda g: _acc(a, -g * np.sin(a.value)))

    def square(self, a: Var) -> Var:
        return self._node(a.value ** 2, (a,), lambda g: _acc(a, 2.0 * g * a.value))

    def sqrt(self, a: Var) -> Var:
        """Square root with zero gradient at exactly zero input."""
        out = np.sqrt(a.value)
        safe = np.where(out > 0, out, 1.0)
        return self._node(out, (a,), lambda g: _acc(a, np.where(out > 0, g * 0.5 / safe, 0.0)))

    def maximum(self, a: Var, floor: float) -> Var:
        mask = a.value > floor
        return self._node(np.where(mask, a.value, floor), (a,), lambda g: _acc(a, g * mask))

    def log10(self, a: Var) -> Var:
        return self._node(np.log10(a.value), (a,), lambda g: _acc(a, g / (a.value * LN10)))

    # -- linear algebra and reductions ----------------------------------
    def matmul(self, a, b) -> Var:
        a, b = self._wrap(a), self._wrap(b)

        def back(g):
            if a.needs_grad:
                _acc(a, g @ b.value.T)
            if b.needs_grad:
                _acc(b, a.value.T @ g)
        return self._node(a.value @ b.value, (a, b), back)

    def dense(self, x, w: Var, b: Var) -> Var:
        """x @ w + b as one node."""
        x = self._wrap(x)

        def back(g):
            if x.needs_grad:
                _acc(x, g @ w.value.T)
            _acc(w, x.value.T @ g)
            _acc(b, g.sum(axis=0))
        return self._node(x.value @ w.value + b.value, (x, w, b), back)

    def sum(self, a: Var, axis=None) -> Var:
        out = a.value.sum(axis=axis)

        def back(g):
            if axis is None:
                _acc(a, np.broadcast_to(g, a.value.shape).copy())
            else:
                _acc(a, np.broadcast_to(np.expand_dims(g, axis), a.value.shape).copy())
        return self._node(out, (a,), back)

    # -- indexing -------------------------------------------------------
    def take(self, a: Var, idx, axis=0) -> Var:
        idx = np.asarray(idx, dtype=int)

        def back(g):
            full = np.zeros_like(a.value)
            if axis == 0:
                np.add.at(full, idx, g)
            else:
                np.add.at(full, (slice(None), idx), g)
            _acc(a, full)
        return self._node(np.take(a.value, idx, axis=axis), (a,), back)

    def segment_sum(self, a: Var, seg, n: int) -> Var:
        """out[s] = sum of rows a[i] with seg[i] == s (fixed summation order)."""
        seg = np.asarray(seg, dtype=int)
        out = np.zeros((n,) + a.value.shape[1:])
        np.add.at(out, seg, a.value)
        return self._node(out, (a,), lambda g: _acc(a, g[seg]))

    def concat(self, parts, axis=1) -> Var:
        parts = [self._wrap(p) for p in parts]
        sizes = [p.value.shape[axis] for p in parts]
        cuts = np.cumsum(sizes)[:-1]

        def back(g):
            for p, gp in zip(parts, np.split(g, cuts, axis=axis)):
                _acc(p, gp)
        return self._node(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), back)

    def reshape(self, a: Var, shape) -> Var:
        return self._node(a.value.reshape(shape), (a,), lambda g: _acc(a, g.reshape(a.value.shape)))


# --- complex helpers ---------------------------------------------------------
# A complex tensor is a pair (re, im) of Vars or arrays.

def cmul(t: Tape, a, b):
    ar, ai = a
    br, bi = b
    return (t.sub(t.mul(ar, br), t.mul(ai, bi)), t.add(t.mul(ar, bi), t.mul(ai, br)))


def cadd(t: Tape, a, b):
    return (t.add(a[0], b[0]), t.add(a[1], b[1]))


def cabs2(t: Tape, a) -> Var:
    return t.add(t.square(t._wrap(a[0])), t.square(t._wrap(a[1])))


def polar(t: Tape, amp: Var, phase: Var):
    """amp * exp(j phase) as a real pair."""
    return (t.mul(amp, t.cos(phase)), t.mul(amp, t.sin(phase)))
