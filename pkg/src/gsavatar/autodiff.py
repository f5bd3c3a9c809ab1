"""Reverse-mode automatic differentiation on a flat scalar tape.

Every node holds one scalar: node i's value sits at ``values[i]`` and its
adjoint at ``grads[i]`` after :meth:`Tape.backward`.  Nodes are appended in
topological order (inputs always have smaller indices than the node they
feed), grouped into *blocks* so that graph construction and the backward
sweep stay vectorised: a block appends a whole batch of independent nodes in
one call and knows how to push adjoints back to its inputs.

Two engines share the same op surface:

* :class:`Tape` records blocks and supports ``backward``;
* :class:`Numeric` evaluates the same formulas eagerly on plain arrays.

Code written against the common ops runs bit-identically on either engine,
which is what keeps the differentiable and the plain rendering paths in
lockstep.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tape", "Numeric"]


def _scatter_add(buf: np.ndarray, idx: np.ndarray, w: np.ndarray) -> None:
    """buf[idx] += w with repeated indices accumulated."""
    idx = idx.ravel()
    w = w.ravel()
    if idx.size == 0:
        return
    lo = int(idx.min())
    hi = int(idx.max())
    span = hi - lo + 1
    # bincount beats add.at when the target range is dense relative to the
    # number of updates; both are deterministic.
    if span <= 4 * idx.size + 4096:
        buf[lo : hi + 1] += np.bincount(idx - lo, weights=w, minlength=span)
    else:
        np.add.at(buf, idx, w)


class _GenericBlock:
    """n independent nodes of arity k with explicit local partials."""

    __slots__ = ("out0", "n", "idx", "partials")

    def __init__(self, out0, n, idx, partials):
        self.out0 = out0
        self.n = n
        self.idx = idx
        self.partials = partials

    def backward(self, values, grads):
        g = grads[self.out0 : self.out0 + self.n]
        if not g.any():
            return
        _scatter_add(grads, self.idx, self.partials * g.reshape(-1, 1))


class _LinearBlock:
    """Batched affine map Y = X W^T + b; backward runs on BLAS."""

    __slots__ = ("out0", "n", "m", "k", "x_idx", "w0", "b0", "X", "W")

    def __init__(self, out0, n, m, k, x_idx, w0, b0, X, W):
        self.out0 = out0
        self.n = n
        self.m = m
        self.k = k
        self.x_idx = x_idx
        self.w0 = w0
        self.b0 = b0
        self.X = X
        self.W = W

    def backward(self, values, grads):
        g = grads[self.out0 : self.out0 + self.n * self.m]
        if not g.any():
            return
        dY = g.reshape(self.n, self.m)
        grads[self.w0 : self.w0 + self.m * self.k] += (dY.T @ self.X).ravel()
        grads[self.b0 : self.b0 + self.m] += dY.sum(axis=0)
        _scatter_add(grads, self.x_idx, dY @ self.W)


def _ids(a) -> np.ndarray:
    return np.asarray(a, dtype=np.int64)


class Tape:
    """Append-only scalar graph; records blocks and plays them backward."""

    recording = True

    def __init__(self, capacity: int = 4096):
        self._values = np.zeros(max(int(capacity), 16))
        self.n = 0
        self.blocks: list = []

    # ------------------------------------------------------------------ core

    @property
    def values(self) -> np.ndarray:
        return self._values[: self.n]

    def _append(self, vals: np.ndarray) -> int:
        vals = np.ascontiguousarray(vals, dtype=np.float64).ravel()
        need = self.n + vals.size
        if need > self._values.size:
            cap = self._values.size
            while cap < need:
                cap *= 2
            grown = np.zeros(cap)
            grown[: self.n] = self._values[: self.n]
            self._values = grown
        start = self.n
        self._values[start:need] = vals
        self.n = need
        return start

    def _out(self, start: int, shape) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        return np.arange(start, start + count, dtype=np.int64).reshape(shape)

    def value(self, ids):
        """Numeric value(s) currently stored for the given node ids."""
        return self._values[ids]

    def constant(self, arr) -> np.ndarray:
        """Leaf nodes with no producing block (constants and parameters)."""
        arr = np.asarray(arr, dtype=np.float64)
        start = self._append(arr)
        return self._out(start, arr.shape)

    def fused(self, out_vals, idx, partials) -> np.ndarray:
        """Raw batch of nodes: out_vals (n,), idx (n,k), partials (n,k).

        The caller supplies the local partial of each output with respect to
        each of its k inputs; everything else (graph order, accumulation)
        is handled here.
        """
        out_vals = np.asarray(out_vals, dtype=np.float64)
        idx = _ids(idx).reshape(out_vals.size, -1)
        partials = np.asarray(partials, dtype=np.float64).reshape(idx.shape)
        start = self._append(out_vals)
        if out_vals.size:
            self.blocks.append(_GenericBlock(start, out_vals.size, idx, partials))
        return self._out(start, out_vals.shape)

    # ----------------------------------------------------------- element ops

    def _unary(self, a, out_vals, partials):
        a = _ids(a)
        return self.fused(out_vals, a.reshape(-1, 1), np.asarray(partials).reshape(-1, 1)).reshape(a.shape)

    def _binary(self, a, b, out_vals, pa, pb):
        a = _ids(a)
        b = _ids(b)
        idx = np.stack([a.ravel(), b.ravel()], axis=1)
        p = np.stack([np.broadcast_to(pa, a.shape).ravel(), np.broadcast_to(pb, a.shape).ravel()], axis=1)
        return self.fused(out_vals, idx, p).reshape(a.shape)

    def add(self, a, b):
        va, vb = self.value(_ids(a)), self.value(_ids(b))
        return self._binary(a, b, va + vb, np.ones_like(va), np.ones_like(va))

    def sub(self, a, b):
        va, vb = self.value(_ids(a)), self.value(_ids(b))
        return self._binary(a, b, va - vb, np.ones_like(va), -np.ones_like(va))

    def mul(self, a, b):
        va, vb = self.value(_ids(a)), self.value(_ids(b))
        return self._binary(a, b, va * vb, vb, va)

    def div(self, a, b):
        va, vb = self.value(_ids(a)), self.value(_ids(b))
        return self._binary(a, b, va / vb, 1.0 / vb, -va / (vb * vb))

    def axpb(self, a, scale=1.0, shift=0.0):
        """scale * a + shift with constant scale/shift (scalars or arrays)."""
        va = self.value(_ids(a))
        s = np.broadcast_to(np.asarray(scale, dtype=np.float64), va.shape)
        return self._unary(a, s * va + shift, s)

    def lincomb(self, a, b, ca=1.0, cb=1.0):
        """ca * a + cb * b with constant coefficients."""
        va, vb = self.value(_ids(a)), self.value(_ids(b))
        ca = np.broadcast_to(np.asarray(ca, dtype=np.float64), va.shape)
        cb = np.broadcast_to(np.asarray(cb, dtype=np.float64), va.shape)
        return self._binary(a, b, ca * va + cb * vb, ca, cb)

    def fma(self, a, b, c):
        """a + b * c (running accumulations in compositing and the like)."""
        a, b, c = _ids(a), _ids(b), _ids(c)
        va, vb, vc = self.value(a), self.value(b), self.value(c)
        idx = np.stack([a.ravel(), b.ravel(), c.ravel()], axis=1)
        p = np.stack([np.ones(va.size), vc.ravel(), vb.ravel()], axis=1)
        return self.fused(va + vb * vc, idx, p).reshape(a.shape)

    def blend(self, alpha, x, y):
        """(1 - alpha) * x + alpha * y, element-wise."""
        alpha, x, y = _ids(alpha), _ids(x), _ids(y)
        va, vx, vy = self.value(alpha), self.value(x), self.value(y)
        idx = np.stack([alpha.ravel(), x.ravel(), y.ravel()], axis=1)
        p = np.stack([(vy - vx).ravel(), (1.0 - va).ravel(), va.ravel()], axis=1)
        return self.fused((1.0 - va) * vx + va * vy, idx, p).reshape(alpha.shape)

    def exp(self, a):
        v = np.exp(self.value(_ids(a)))
        return self._unary(a, v, v)

    def log(self, a):
        va = self.value(_ids(a))
        return self._unary(a, np.log(va), 1.0 / va)

    def sqrt(self, a):
        v = np.sqrt(self.value(_ids(a)))
        return self._unary(a, v, 0.5 / v)

    def square(self, a):
        va = self.value(_ids(a))
        return self._unary(a, va * va, 2.0 * va)

    def powc(self, a, p):
        va = self.value(_ids(a))
        return self._unary(a, va**p, p * va ** (p - 1.0))

    def tanh(self, a):
        v = np.tanh(self.value(_ids(a)))
        return self._unary(a, v, 1.0 - v * v)

    def sigmoid(self, a):
        v = 1.0 / (1.0 + np.exp(-self.value(_ids(a))))
        return self._unary(a, v, v * (1.0 - v))

    def relu(self, a):
        va = self.value(_ids(a))
        # subgradient 0 at the kink
        return self._unary(a, np.maximum(va, 0.0), (va > 0.0).astype(np.float64))

    def abs(self, a):
        va = self.value(_ids(a))
        return self._unary(a, np.abs(va), np.sign(va))

    def clamp(self, a, lo, hi):
        va = self.value(_ids(a))
        inside = ((va > lo) & (va < hi)).astype(np.float64)
        return self._unary(a, np.clip(va, lo, hi), inside)

    def minc(self, a, hi):
        va = self.value(_ids(a))
        return self._unary(a, np.minimum(va, hi), (va < hi).astype(np.float64))

    # ----------------------------------------------------------- reductions

    def rows_dot(self, A, B):
        """Row-wise dot product of two (n, k) id arrays -> (n,) ids."""
        A, B = _ids(A), _ids(B)
        VA, VB = self.value(A), self.value(B)
        idx = np.concatenate([A, B], axis=1)
        p = np.concatenate([VB, VA], axis=1)
        return self.fused((VA * VB).sum(axis=1), idx, p)

    def rows_wsum(self, A, w):
        """Row-wise weighted sum with constant weights ((k,) or (n, k))."""
        A = _ids(A)
        VA = self.value(A)
        w = np.broadcast_to(np.asarray(w, dtype=np.float64), A.shape)
        return self.fused((VA * w).sum(axis=1), A, w)

    def rows_sum(self, A):
        A = _ids(A)
        return self.fused(self.value(A).sum(axis=1), A, np.ones(A.shape))

    def dot(self, a, b):
        return self.rows_dot(_ids(a).reshape(1, -1), _ids(b).reshape(1, -1))[0]

    def wsum(self, a, w):
        return self.rows_wsum(_ids(a).reshape(1, -1), np.asarray(w, dtype=np.float64).reshape(1, -1))[0]

    def sum(self, a):
        return self.rows_sum(_ids(a).reshape(1, -1))[0]

    def mean(self, a):
        a = _ids(a)
        return self.wsum(a, np.full(a.size, 1.0 / a.size))

    def sumsq(self, a):
        a = _ids(a).reshape(1, -1)
        va = self.value(a)
        return self.fused((va * va).sum(axis=1), a, 2.0 * va)[0]

    def norm(self, a):
        """Euclidean norm of a vector of nodes (single scalar output)."""
        a = _ids(a).reshape(1, -1)
        va = self.value(a)
        n = float(np.sqrt((va * va).sum()))
        return self.fused([n], a, va / max(n, 1e-300))[0]

    # --------------------------------------------------------------- layers

    def linear(self, X, w_handle, b_handle):
        """Y = X @ W.T + b for an (n, k) batch against parameter leaves.

        ``w_handle``/``b_handle`` are id arrays from :meth:`constant` whose
        slots are contiguous (shape (m, k) and (m,)).
        """
        X = _ids(X)
        w_handle = _ids(w_handle)
        b_handle = _ids(b_handle)
        n, k = X.shape
        m = w_handle.shape[0]
        if w_handle.shape[1] != k:
            raise ValueError(f"linear: input width {k} does not match weight width {w_handle.shape[1]}")
        W = self.value(w_handle)
        b = self.value(b_handle)
        Xv = self.value(X)
        Y = Xv @ W.T + b
        start = self._append(Y)
        self.blocks.append(
            _LinearBlock(start, n, m, k, X, int(w_handle.ravel()[0]), int(b_handle.ravel()[0]), Xv, W)
        )
        return self._out(start, (n, m))

    # -------------------------------------------------------------- backward

    def backward(self, root: int) -> np.ndarray:
        """Adjoints of ``root`` w.r.t. every node, exact to the recorded graph."""
        root = int(root)
        if root < 0 or root >= self.n:
            raise IndexError(f"backward root {root} out of range for tape of size {self.n}")
        grads = np.zeros(self.n)
        grads[root] = 1.0
        values = self._values
        for block in reversed(self.blocks):
            block.backward(values, grads)
        return grads


class Numeric:
    """Eager twin of :class:`Tape`: same ops, plain float64 arrays, no graph."""

    recording = False

    @staticmethod
    def _arr(a):
        return np.asarray(a, dtype=np.float64)

    def value(self, a):
        return self._arr(a)

    def constant(self, arr):
        return self._arr(arr).copy()

    def fused(self, out_vals, idx, partials):
        return np.asarray(out_vals, dtype=np.float64)

    def add(self, a, b):
        return self._arr(a) + self._arr(b)

    def sub(self, a, b):
        return self._arr(a) - self._arr(b)

    def mul(self, a, b):
        return self._arr(a) * self._arr(b)

    def div(self, a, b):
        return self._arr(a) / self._arr(b)

    def axpb(self, a, scale=1.0, shift=0.0):
        return np.asarray(scale, dtype=np.float64) * self._arr(a) + shift

    def lincomb(self, a, b, ca=1.0, cb=1.0):
        ca = np.asarray(ca, dtype=np.float64)
        cb = np.asarray(cb, dtype=np.float64)
        return ca * self._arr(a) + cb * self._arr(b)

    def fma(self, a, b, c):
        return self._arr(a) + self._arr(b) * self._arr(c)

    def blend(self, alpha, x, y):
        alpha = self._arr(alpha)
        return (1.0 - alpha) * self._arr(x) + alpha * self._arr(y)

    def exp(self, a):
        return np.exp(self._arr(a))

    def log(self, a):
        return np.log(self._arr(a))

    def sqrt(self, a):
        return np.sqrt(self._arr(a))

    def square(self, a):
        a = self._arr(a)
        return a * a

    def powc(self, a, p):
        return self._arr(a) ** p

    def tanh(self, a):
        return np.tanh(self._arr(a))

    def sigmoid(self, a):
        return 1.0 / (1.0 + np.exp(-self._arr(a)))

    def relu(self, a):
        return np.maximum(self._arr(a), 0.0)

    def abs(self, a):
        return np.abs(self._arr(a))

    def clamp(self, a, lo, hi):
        return np.clip(self._arr(a), lo, hi)

    def minc(self, a, hi):
        return np.minimum(self._arr(a), hi)

    def rows_dot(self, A, B):
        return (self._arr(A) * self._arr(B)).sum(axis=1)

    def rows_wsum(self, A, w):
        A = self._arr(A)
        return (A * np.broadcast_to(np.asarray(w, dtype=np.float64), A.shape)).sum(axis=1)

    def rows_sum(self, A):
        return self._arr(A).sum(axis=1)

    def dot(self, a, b):
        return self.rows_dot(self._arr(a).reshape(1, -1), self._arr(b).reshape(1, -1))[0]

    def wsum(self, a, w):
        return self.rows_wsum(self._arr(a).reshape(1, -1), np.asarray(w, dtype=np.float64).reshape(1, -1))[0]

    def sum(self, a):
        return self.rows_sum(self._arr(a).reshape(1, -1))[0]

    def mean(self, a):
        a = self._arr(a)
        return self.wsum(a, np.full(a.size, 1.0 / a.size))

    def sumsq(self, a):
        a = self._arr(a).reshape(1, -1)
        return (a * a).sum(axis=1)[0]

    def norm(self, a):
        a = self._arr(a)
        return float(np.sqrt((a * a).sum()))

    def linear(self, X, w_handle, b_handle):
        return self._arr(X) @ self._arr(w_handle).T + self._arr(b_handle)
