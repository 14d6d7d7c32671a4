"""Reverse-mode automatic differentiation over numpy arrays.

Tensor-granular tape: each node wraps one ndarray and the local
vector-Jacobian products of the op that produced it. Spatial derivatives of
bilinearly sampled grids (``grid_sample_duv``) are themselves first-class
differentiable ops, which is how second-order terms like the eikonal penalty
get exact gradients without nested tapes.
"""

import numpy as np

from . import backend


class GraphError(RuntimeError):
    """Structural problem in the computation graph (e.g. a cycle)."""


_grad_enabled = True


class no_grad:
    """Context manager: ops inside build no graph (constant results)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """One node of the tape: a value, an adjoint slot, and its parents."""

    __slots__ = ("value", "grad", "parents", "requires_grad")

    def __init__(self, value, parents=(), requires_grad=None):
        self.value = np.asarray(value)
        self.grad = None
        if not _grad_enabled:
            parents, requires_grad = (), False
        self.parents = tuple(parents)  # (Tensor, vjp) pairs
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p, _ in self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def item(self):
        return self.value.item()

    def detach(self):
        return Tensor(self.value, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, grad={self.requires_grad})"

    # arithmetic sugar; constants are lifted automatically
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])


class Parameter(Tensor):
    """Leaf tensor updated by an optimizer."""

    __slots__ = ("name",)

    def __init__(self, value, name=""):
        super().__init__(np.array(value), requires_grad=True)
        self.requires_grad = True  # even when created under no_grad
        self.name = name


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False)


def constant(x, dtype=None):
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False)


def _topological_order(root):
    """Children-before-parents order; raises GraphError on a cycle."""
    order = []
    state = {}  # id -> 1 in progress, 2 done
    stack = [(root, iter(root.parents))]
    state[id(root)] = 1
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent, _ in it:
            s = state.get(id(parent))
            if s == 1:
                raise GraphError("cycle detected in computation graph")
            if s is None and parent.requires_grad:
                state[id(parent)] = 1
                stack.append((parent, iter(parent.parents)))
                advanced = True
                break
        if not advanced:
            state[id(node)] = 2
            order.append(node)
            stack.pop()
    return order


def _accumulate(tensor, g, upstream):
    if tensor.grad is None:
        # take ownership of fresh arrays; copy views, casts, or pass-throughs
        if (g is upstream or g.base is not None or not g.flags.owndata
                or g.dtype != tensor.value.dtype or g.shape != tensor.value.shape):
            tensor.grad = np.array(g, dtype=tensor.value.dtype, copy=True
                                   ).reshape(tensor.value.shape)
        else:
            tensor.grad = g
    else:
        tensor.grad += g


def backward(root, parameters=None, seed=None):
    """Reverse pass from a scalar root; visits each node exactly once.

    Returns ``{param: adjoint}`` when ``parameters`` is given; parameters the
    root does not depend on map to zeros.
    """
    if seed is None:
        if root.value.size != 1:
            raise GraphError("backward root must be scalar")
        seed = np.ones_like(root.value)
    order = _topological_order(root)
    root.grad = np.asarray(seed, dtype=root.value.dtype).reshape(root.value.shape)
    for node in reversed(order):
        if node.grad is None:
            continue
        g = node.grad
        for parent, vjp in node.parents:
            if parent.requires_grad:
                _accumulate(parent, np.asarray(vjp(g)), g)
        if node.parents:
            node.grad = None if node is not root else node.grad
    if parameters is None:
        return None
    out = {}
    for p in parameters:
        out[p] = p.grad if p.grad is not None else np.zeros_like(p.value)
    return out


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.value + b.value, [
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(g, b.value.shape)),
    ])


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.value - b.value, [
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(-g, b.value.shape)),
    ])


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.value * b.value, [
        (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
    ])


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    inv = 1.0 / b.value
    return Tensor(a.value * inv, [
        (a, lambda g: _unbroadcast(g * inv, a.value.shape)),
        (b, lambda g: _unbroadcast(-g * a.value * inv * inv, b.value.shape)),
    ])


def power(a, k):
    a = as_tensor(a)
    out = a.value ** k
    return Tensor(out, [(a, lambda g: g * k * a.value ** (k - 1))])


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return Tensor(out, [(a, lambda g: g * out)])


def log(a):
    a = as_tensor(a)
    return Tensor(np.log(a.value), [(a, lambda g: g / a.value)])


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return Tensor(out, [(a, lambda g: g * 0.5 / out)])


def absolute(a):
    a = as_tensor(a)
    s = np.sign(a.value)
    return Tensor(np.abs(a.value), [(a, lambda g: g * s)])


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    mask = (a.value >= b.value)
    return Tensor(np.maximum(a.value, b.value), [
        (a, lambda g: _unbroadcast(g * mask, a.value.shape)),
        (b, lambda g: _unbroadcast(g * ~mask, b.value.shape)),
    ])


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    mask = (a.value <= b.value)
    return Tensor(np.minimum(a.value, b.value), [
        (a, lambda g: _unbroadcast(g * mask, a.value.shape)),
        (b, lambda g: _unbroadcast(g * ~mask, b.value.shape)),
    ])


def clip(a, lo, hi):
    a = as_tensor(a)
    mask = (a.value >= lo) & (a.value <= hi)
    return Tensor(np.clip(a.value, lo, hi), [(a, lambda g: g * mask)])


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    one = np.asarray(1.0, dtype=a.value.dtype)
    k = np.asarray(slope, dtype=a.value.dtype)
    factor = np.where(a.value > 0, one, k)
    return Tensor(a.value * factor, [(a, lambda g: g * factor)])


def where(cond, a, b):
    """cond is a plain boolean array (not differentiated)."""
    cond = np.asarray(cond)
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(np.where(cond, a.value, b.value), [
        (a, lambda g: _unbroadcast(g * cond, a.value.shape)),
        (b, lambda g: _unbroadcast(g * ~cond, b.value.shape)),
    ])


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise GraphError("matmul expects 2-D operands")
    return Tensor(a.value @ b.value, [
        (a, lambda g: g @ b.value.T),
        (b, lambda g: a.value.T @ g),
    ])


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape).copy()
        gk = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gk, a.value.shape).copy()

    return Tensor(out, [(a, vjp)])


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod(
        [a.value.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


def cumsum(a, axis):
    a = as_tensor(a)
    out = np.cumsum(a.value, axis=axis)

    def vjp(g):
        return np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)

    return Tensor(out, [(a, vjp)])


def reshape(a, shape):
    a = as_tensor(a)
    return Tensor(a.value.reshape(shape),
                  [(a, lambda g: g.reshape(a.value.shape))])


def astype(a, dtype):
    a = as_tensor(a)
    return Tensor(a.value.astype(dtype),
                  [(a, lambda g: g.astype(a.value.dtype))])


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return Tensor(np.transpose(a.value, axes),
                  [(a, lambda g: np.transpose(g, inv))])


def index(a, key):
    """Basic slicing/int indexing (no advanced index arrays; see take_along)."""
    a = as_tensor(a)
    out = a.value[key]

    def vjp(g):
        full = np.zeros_like(a.value)
        full[key] = g
        return full

    return Tensor(out, [(a, vjp)])


def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.value.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return Tensor(out, [(t, make_vjp(i)) for i, t in enumerate(tensors)])


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.value for t in tensors], axis=axis)

    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    return Tensor(out, [(t, make_vjp(i)) for i, t in enumerate(tensors)])


def take_along(a, idx, axis):
    """Gather along one axis; duplicate indices accumulate in backward."""
    a = as_tensor(a)
    out = np.take_along_axis(a.value, idx, axis=axis)

    def vjp(g):
        full = np.zeros_like(a.value)
        np.add.at(full, _along_index(idx, a.value.shape, axis), g)
        return full

    return Tensor(out, [(a, vjp)])


def permute_along(a, perm, axis):
    """Gather by a per-row permutation; backward is the inverse gather.

    `perm` has the shape of `a` up to (broadcast) trailing axes; each slice
    along `axis` must be a permutation, so no scatter-accumulation is needed.
    """
    a = as_tensor(a)
    inv = np.argsort(perm, axis=axis, kind="stable")

    def expand(p):
        if p.ndim == a.value.ndim:
            return p
        extra = a.value.ndim - p.ndim
        p = p.reshape(p.shape + (1,) * extra)
        return np.broadcast_to(p, a.value.shape)

    out = np.take_along_axis(a.value, expand(perm), axis=axis)
    return Tensor(out, [(a, lambda g: np.take_along_axis(g, expand(inv),
                                                         axis=axis))])


def _along_index(idx, shape, axis):
    grids = np.ogrid[tuple(slice(s) for s in idx.shape)]
    grids = list(grids)
    grids[axis] = idx
    return tuple(grids)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - dot)

    return Tensor(out, [(a, vjp)])


def norm(a, axis=-1, keepdims=False, eps=0.0):
    """Euclidean norm along an axis (eps guards the sqrt at zero)."""
    sq = sum_(mul(a, a), axis=axis, keepdims=keepdims)
    return sqrt(add(sq, eps)) if eps else sqrt(sq)


def grid_sample(grid, uv, zero_outside=False):
    """Bilinear sample of grid (C,H,W) at uv (N,2) in [-1,1]^2 -> (N,C).

    Differentiable in both the grid entries and the query coordinates;
    out-of-domain queries clamp with zero spatial gradient beyond the border
    (or read zero when ``zero_outside``).
    """
    grid, uv = as_tensor(grid), as_tensor(uv)
    if grid.value.ndim != 3 or grid.value.shape[1] < 2 or grid.value.shape[2] < 2:
        raise GraphError("grid must be (C,H,W) with H,W >= 2")
    out = backend.gather(grid.value, uv.value, zero_outside)
    cache = {}

    def vjps(g):
        if cache.get("key") is not g:
            cache["key"] = g
            cache["val"] = backend.gather_bwd(grid.value, uv.value, zero_outside, g)
        return cache["val"]

    return Tensor(out, [
        (grid, lambda g: vjps(g)[0]),
        (uv, lambda g: vjps(g)[1].astype(uv.value.dtype)),
    ])


def grid_sample_duv(grid, uv, zero_outside=False):
    """Analytic d(sample)/d(uv) as a differentiable tensor (N,C,2)."""
    grid, uv = as_tensor(grid), as_tensor(uv)
    out = backend.gather_duv(grid.value, uv.value, zero_outside)
    cache = {}

    def vjps(g):
        if cache.get("key") is not g:
            cache["key"] = g
            cache["val"] = backend.gather_duv_bwd(grid.value, uv.value, zero_outside, g)
        return cache["val"]

    return Tensor(out, [
        (grid, lambda g: vjps(g)[0]),
        (uv, lambda g: vjps(g)[1].astype(uv.value.dtype)),
    ])


def bilinear_sample_with_grad(plane, uv):
    """Feature and its analytic uv-derivative for a (C,H,W) plane.

    Returns (feature (N,C), d_feature_d_uv (N,C,2)), both differentiable
    w.r.t. the plane entries (and uv).
    """
    return grid_sample(plane, uv), grid_sample_duv(plane, uv)
