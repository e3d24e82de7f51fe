"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

Arrays are numpy ``float64`` matrices. A vector is a column (``cols == 1``);
a minibatch of vectors is stored column-wise, so ``W @ X + b`` applies one
affine map to every batch member and the bias broadcasts across columns.

Every op accepts either :class:`Node` objects or plain arrays. When no input
is a Node the op returns a plain array, which gives a fast no-grad path that
is bit-identical to the recorded one.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class DomainError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    def __init__(self, op):
        self.op = op
        super().__init__(f"{op} produced a non-finite value")


class UsageError(AutodiffError, RuntimeError):
    pass


def as_array(x):
    """Coerce scalars and 1-D data to a 2-D float64 array (1-D becomes a column)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(-1, 1)
    if a.ndim != 2:
        raise ShapeError("as_array", a.shape)
    return a


class Node:
    __slots__ = ("value", "grad", "parents", "vjp", "op", "tape")

    # numpy must defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjp=None, op="leaf", tape=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return negate(self)

    def backward(self):
        backward(self)


class Tape:
    """Records nodes in creation order, which is a valid topological order."""

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def leaf(self, x):
        node = Node(as_array(x), tape=self)
        self.nodes.append(node)
        return node

    def leaves(self, tree):
        """Replace every array leaf of a parameter tree with a leaf node."""
        from volcast.tree import tree_map

        return tree_map(self.leaf, tree)

    def record(self, node):
        node.tape = self
        self.nodes.append(node)
        return node

    def reset(self):
        self.nodes = []
        self.consumed = False

    def backward(self, output):
        if not isinstance(output, Node) or output.tape is not self:
            raise UsageError("backward() needs a node recorded on this tape")
        if output.value.shape != (1, 1):
            raise UsageError(f"backward() needs a scalar output, got shape {output.value.shape}")
        if self.consumed:
            raise UsageError("backward() already ran on this tape; call reset() first")
        self.consumed = True
        output.grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            if node.vjp is None or node.grad is None:
                continue
            grads = node.vjp(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not isinstance(parent, Node):
                    continue
                g = _unbroadcast(g, parent.value.shape)
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g


def backward(output):
    if not isinstance(output, Node) or output.tape is None:
        raise UsageError("backward() needs a recorded node")
    output.tape.backward(output)


def value(x):
    return x.value if isinstance(x, Node) else as_array(x)


def _val(x):
    if isinstance(x, Node):
        return x.value
    if isinstance(x, np.ndarray) and x.ndim == 2:
        return x
    return as_array(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _emit(op, out, parents, vjp):
    # a finite sum implies finite entries; the full scan only runs otherwise
    if not math.isfinite(np.add.reduce(out, axis=None)) and not np.isfinite(out).all():
        raise NonFiniteError(op)
    tape = None
    for p in parents:
        if isinstance(p, Node) and p.tape is not None:
            tape = p.tape
            break
    if tape is None:
        return out
    return tape.record(Node(out, parents, vjp, op))


def _broadcast_shape(op, a, b):
    r = _dim(op, a.shape, b.shape, 0)
    c = _dim(op, a.shape, b.shape, 1)
    return r, c


def _dim(op, sa, sb, i):
    if sa[i] == sb[i] or sb[i] == 1:
        return sa[i]
    if sa[i] == 1:
        return sb[i]
    raise ShapeError(op, sa, sb)


# --- binary ops -------------------------------------------------------------


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.shape[1] != bv.shape[0]:
        raise ShapeError("matmul", av.shape, bv.shape)
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b):
    av, bv = _val(a), _val(b)
    _broadcast_shape("add", av, bv)
    return _emit("add", av + bv, (a, b), lambda g: (g, g))


def sub(a, b):
    av, bv = _val(a), _val(b)
    _broadcast_shape("sub", av, bv)
    return _emit("sub", av - bv, (a, b), lambda g: (g, -g))


def mul(a, b):
    av, bv = _val(a), _val(b)
    _broadcast_shape("mul", av, bv)
    return _emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b):
    av, bv = _val(a), _val(b)
    _broadcast_shape("div", av, bv)
    out = av / bv
    return _emit("div", out, (a, b), lambda g: (g / bv, -g * out / bv))


def concat(parts):
    """Stack inputs vertically (along rows); column counts must agree."""
    vals = [_val(p) for p in parts]
    cols = {v.shape[1] for v in vals}
    if len(cols) != 1:
        raise ShapeError("concat", *(v.shape for v in vals))
    bounds = np.cumsum([0] + [v.shape[0] for v in vals])

    def vjp(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(vals)))

    return _emit("concat", np.concatenate(vals, axis=0), tuple(parts), vjp)


# --- unary ops --------------------------------------------------------------


def negate(a):
    return _emit("negate", -_val(a), (a,), lambda g: (-g,))


def square(a):
    av = _val(a)
    return _emit("square", av * av, (a,), lambda g: (2.0 * g * av,))


def tanh(a):
    out = np.tanh(_val(a))
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = expit(_val(a))
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    av = _val(a)
    out = np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av)))
    return _emit("softplus", out, (a,), lambda g: (g * expit(av),))


def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(_val(a))
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a):
    av = _val(a)
    if (av <= 0).any():
        raise DomainError("log of a non-positive value")
    return _emit("log", np.log(av), (a,), lambda g: (g / av,))


def sum(a, axis=None):
    """Sum of all entries (1x1), or over rows (``axis=0`` -> 1 x cols)."""
    av = _val(a)
    if axis is None:
        out = np.array([[av.sum()]])
        return _emit("sum", out, (a,), lambda g: (np.broadcast_to(g, av.shape),))
    if axis == 0:
        out = av.sum(axis=0, keepdims=True)
        return _emit("sum", out, (a,), lambda g: (np.broadcast_to(g, av.shape),))
    if axis == 1:
        out = av.sum(axis=1, keepdims=True)
        return _emit("sum", out, (a,), lambda g: (np.broadcast_to(g, av.shape),))
    raise UsageError(f"sum: unsupported axis {axis}")


def mean(a):
    av = _val(a)
    return mul(sum(a), 1.0 / av.size)


# --- Gaussian densities -----------------------------------------------------


def gaussian_log_density(x, mean, std):
    """Elementwise log N(x; mean, std**2)."""
    if (_val(std) <= 0).any():
        raise DomainError("gaussian_log_density: std must be positive")
    z = div(sub(x, mean), std)
    return sub(negate(add(log(std), HALF_LOG_2PI)), mul(square(z), 0.5))


def gaussian_kl(mq, vq, mp, vp):
    """Elementwise KL(N(mq, vq**2) || N(mp, vp**2)); vq, vp are standard deviations."""
    if (_val(vq) <= 0).any() or (_val(vp) <= 0).any():
        raise DomainError("gaussian_kl: standard deviations must be positive")
    num = add(square(vq), square(sub(mq, mp)))
    return sub(add(sub(log(vp), log(vq)), div(num, mul(square(vp), 2.0))), 0.5)


# --- finite-difference checking ---------------------------------------------


def grad_check(f, leaves, step=1e-5):
    """Max over leaf entries of |AD - central difference| / max(1, |central difference|).

    ``f(*inputs)`` must return a scalar and must work both on recorded nodes
    and on plain arrays. NaN anywhere counts as an infinite error.
    """
    leaves = [as_array(x).copy() for x in leaves]
    tape = Tape()
    nodes = [tape.leaf(x) for x in leaves]
    out = f(*nodes)
    tape.backward(out)
    worst = 0.0
    for i, x in enumerate(leaves):
        ad = nodes[i].grad if nodes[i].grad is not None else np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + step
            fp = float(_val(f(*leaves))[0, 0])
            x[idx] = orig - step
            fm = float(_val(f(*leaves))[0, 0])
            x[idx] = orig
            fd = (fp - fm) / (2.0 * step)
            err = abs(ad[idx] - fd) / max(1.0, abs(fd))
            if not np.isfinite(err):
                return math.inf
            worst = max(worst, err)
    return worst


# --- random numbers ---------------------------------------------------------


class Rng:
    """Seeded random stream.

    Uniforms come from numpy's PCG64 seeded through ``SeedSequence``.
    Standard normals use Box-Muller on consecutive uniform pairs
    ``(u1, u2)``: ``sqrt(-2 log(1 - u1)) * (cos 2 pi u2, sin 2 pi u2)``; the
    cosine half fills the first ``ceil(n/2)`` outputs, the sine half the rest.
    """

    def __init__(self, seed, key=()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, *key):
        """Independent stream for a sub-task, keyed deterministically."""
        return Rng(self.seed, self.key + tuple(key))

    def uniform(self, low=0.0, high=1.0, size=None):
        u = self._gen.random(size)
        return low + (high - low) * u

    def normal(self, size):
        n = int(np.prod(size))
        half = (n + 1) // 2
        u = self._gen.random((2, half))
        rad = np.sqrt(-2.0 * np.log1p(-u[0]))
        ang = 2.0 * math.pi * u[1]
        z = np.concatenate([rad * np.cos(ang), rad * np.sin(ang)])[:n]
        return z.reshape(size)

    def integers(self, high, size=None):
        return self._gen.integers(0, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)
