"""Dense tensors with reverse-mode autodiff and Hessian-vector products.

The engine is deliberately small: enough ops for dense MLPs and analytic
test landscapes. The backward pass is *functional* -- it never mutates a
tensor. Cotangents are themselves tensors built from the same op set, so a
gradient is a differentiable graph and a second backward pass over it
yields exact Hessian-vector products (differentiate-the-gradient).
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ConfigError, NonFiniteError

_DTYPE = np.float64


def set_dtype(name: str):
    """Select the float width for newly created tensors ('float64' or 'float32')."""
    global _DTYPE
    if name == "float64":
        _DTYPE = np.float64
    elif name == "float32":
        _DTYPE = np.float32
    else:
        raise ConfigError(f"unsupported dtype {name!r}")


def get_dtype():
    return _DTYPE


# ---------------------------------------------------------------------------
# gradient-evaluation accounting (one count per backward sweep)

_eval_lock = threading.Lock()
_eval_count = 0


def _count_backward():
    global _eval_count
    with _eval_lock:
        _eval_count += 1


def grad_eval_count() -> int:
    return _eval_count


def reset_grad_eval_count():
    global _eval_count
    with _eval_lock:
        _eval_count = 0


# ---------------------------------------------------------------------------


class Tensor:
    """A node in the computation graph.

    Immutable once created; safe to share across threads. `vjp` maps an
    upstream cotangent tensor to cotangents for each parent (None for
    parents that receive no gradient).
    """

    __slots__ = ("data", "parents", "vjp", "name")

    def __init__(self, data, parents=(), vjp=None, name="tensor"):
        arr = np.asarray(data, dtype=_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(name)
        self.data = arr
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.data.shape})"


def _raw(data, parents, vjp, name) -> Tensor:
    # internal constructor that skips the asarray copy (data already _DTYPE)
    t = object.__new__(Tensor)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(name)
    t.data = data
    t.parents = parents
    t.vjp = vjp
    t.name = name
    return t


def constant(data, name="const") -> Tensor:
    return Tensor(data, (), None, name)


# ---------------------------------------------------------------------------
# ops; every vjp is expressed with these same ops so gradients are
# themselves differentiable


def add(a: Tensor, b: Tensor) -> Tensor:
    return _raw(a.data + b.data, (a, b), lambda u: (u, u), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _raw(a.data - b.data, (a, b), lambda u: (u, neg(u)), "sub")


def neg(a: Tensor) -> Tensor:
    return _raw(-a.data, (a,), lambda u: (neg(u),), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _raw(a.data * b.data, (a, b), lambda u: (mul(u, b), mul(u, a)), "mul")


def smul(a: Tensor, s: Tensor) -> Tensor:
    """Multiply by a scalar tensor (broadcast)."""
    return _raw(
        a.data * s.data,
        (a, s),
        lambda u: (smul(u, s), sum_all(mul(u, a))),
        "smul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _raw(a.data * c, (a,), lambda u: (scale(u, c),), "scale")


def affine(a: Tensor, m: float, c: float) -> Tensor:
    """m*a + c with float constants."""
    return _raw(a.data * m + c, (a,), lambda u: (scale(u, m),), "affine")


def cmul(a: Tensor, const: np.ndarray) -> Tensor:
    """Elementwise multiply by a constant array (masks, one-hots)."""
    return _raw(a.data * const, (a,), lambda u: (cmul(u, const),), "cmul")


def cadd(a: Tensor, const) -> Tensor:
    """Add a constant array or scalar."""
    return _raw(a.data + const, (a,), lambda u: (u,), "cadd")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """(n,d) + (d,) row-wise bias add."""
    return _raw(x.data + b.data, (x, b), lambda u: (u, sum0(u)), "add_bias")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _raw(
        a.data @ b.data,
        (a, b),
        lambda u: (matmul(u, transpose(b)), matmul(transpose(a), u)),
        "matmul",
    )


def transpose(a: Tensor) -> Tensor:
    return _raw(a.data.T, (a,), lambda u: (transpose(u),), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _raw(
        a.data.reshape(shape), (a,), lambda u: (reshape(u, old),), "reshape"
    )


def exp(a: Tensor) -> Tensor:
    out = _raw(np.exp(a.data), (a,), None, "exp")
    out.vjp = lambda u: (mul(u, out),)
    return out


def log(a: Tensor) -> Tensor:
    return _raw(np.log(a.data), (a,), lambda u: (mul(u, reciprocal(a)),), "log")


def reciprocal(a: Tensor) -> Tensor:
    out = _raw(1.0 / a.data, (a,), None, "reciprocal")
    out.vjp = lambda u: (neg(mul(u, mul(out, out))),)
    return out


def sqrt(a: Tensor) -> Tensor:
    out = _raw(np.sqrt(a.data), (a,), None, "sqrt")
    out.vjp = lambda u: (scale(mul(u, reciprocal(out)), 0.5),)
    return out


def tanh(a: Tensor) -> Tensor:
    out = _raw(np.tanh(a.data), (a,), None, "tanh")
    out.vjp = lambda u: (mul(u, affine(mul(out, out), -1.0, 1.0)),)
    return out


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(_DTYPE)
    return _raw(a.data * mask, (a,), lambda u: (cmul(u, mask),), "relu")


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    return _raw(
        np.asarray(a.data.sum()),
        (a,),
        lambda u: (broadcast_full(u, shape),),
        "sum_all",
    )


def broadcast_full(s: Tensor, shape) -> Tensor:
    return _raw(
        np.full(shape, 1.0, dtype=_DTYPE) * s.data,
        (s,),
        lambda u: (sum_all(u),),
        "broadcast_full",
    )


def sum0(a: Tensor) -> Tensor:
    """(n,d) -> (d,) column sums."""
    n = a.data.shape[0]
    return _raw(a.data.sum(axis=0), (a,), lambda u: (broadcast0(u, n),), "sum0")


def broadcast0(a: Tensor, n: int) -> Tensor:
    """(d,) -> (n,d) row tiling."""
    return _raw(
        np.broadcast_to(a.data, (n,) + a.data.shape).copy(),
        (a,),
        lambda u: (sum0(u),),
        "broadcast0",
    )


def sum1(a: Tensor) -> Tensor:
    """(n,d) -> (n,) row sums."""
    d = a.data.shape[1]
    return _raw(a.data.sum(axis=1), (a,), lambda u: (broadcast1(u, d),), "sum1")


def broadcast1(a: Tensor, d: int) -> Tensor:
    """(n,) -> (n,d) column tiling."""
    return _raw(
        np.repeat(a.data[:, None], d, axis=1),
        (a,),
        lambda u: (sum1(u),),
        "broadcast1",
    )


def dot(a: Tensor, b: Tensor) -> Tensor:
    return sum_all(mul(a, b))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def vjp_backward(root: Tensor, leaves) -> list:
    """Cotangents of a scalar `root` w.r.t. each leaf, as tensors.

    The returned tensors carry their own graphs, so a second call on a
    function of them differentiates the gradient (exact HVPs). Leaves
    that the graph never touches get zero cotangents.
    """
    if root.data.shape != ():
        raise ConfigError("backward root must be a scalar")
    _count_backward()
    cot = {id(root): constant(np.asarray(1.0), "seed")}
    for node in reversed(_topo_order(root)):
        u = cot.get(id(node))
        if u is None or node.vjp is None:
            continue
        for parent, part in zip(node.parents, node.vjp(u)):
            if part is None:
                continue
            held = cot.get(id(parent))
            cot[id(parent)] = part if held is None else add(held, part)
    out = []
    for leaf in leaves:
        c = cot.get(id(leaf))
        if c is None:
            c = constant(np.zeros_like(leaf.data), "zero_grad")
        out.append(c)
    return out


# ---------------------------------------------------------------------------
# parameter vectors


class ParamVector:
    """Flat view of all model parameters: ordered (name, tensor) segments.

    Segment order is fixed at construction and preserved by every
    operation, so flatten/unflatten round-trips exactly.
    """

    __slots__ = ("segments",)

    def __init__(self, segments):
        self.segments = list(segments)

    @classmethod
    def from_arrays(cls, named_arrays):
        return cls((n, constant(a, n)) for n, a in named_arrays)

    @property
    def dim(self) -> int:
        return sum(t.data.size for _, t in self.segments)

    def names(self):
        return [n for n, _ in self.segments]

    def tensors(self):
        return [t for _, t in self.segments]

    def arrays(self):
        return [t.data for _, t in self.segments]

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for _, t in self.segments])

    def unflatten(self, flat: np.ndarray) -> "ParamVector":
        """New ParamVector with this vector's segment structure and `flat`'s values."""
        flat = np.asarray(flat, dtype=_DTYPE)
        if flat.shape != (self.dim,):
            raise ConfigError(
                f"flat vector has dim {flat.shape}, expected ({self.dim},)"
            )
        segs, k = [], 0
        for name, t in self.segments:
            size = t.data.size
            segs.append((name, constant(flat[k : k + size].reshape(t.data.shape), name)))
            k += size
        return ParamVector(segs)

    def map(self, fn) -> "ParamVector":
        return ParamVector(
            (n, constant(fn(t.data), n)) for n, t in self.segments
        )

    def add(self, other: "ParamVector", alpha: float = 1.0) -> "ParamVector":
        return ParamVector(
            (n, constant(a.data + alpha * b.data, n))
            for (n, a), (_, b) in zip(self.segments, other.segments)
        )

    def scaled(self, c: float) -> "ParamVector":
        return self.map(lambda a: a * c)

    def dot(self, other: "ParamVector") -> float:
        return float(
            sum(
                np.dot(a.data.ravel(), b.data.ravel())
                for (_, a), (_, b) in zip(self.segments, other.segments)
            )
        )

    def norm2(self) -> float:
        return float(np.linalg.norm(self.flatten()))

    def zeros_like(self) -> "ParamVector":
        return self.map(np.zeros_like)

    def allclose(self, other: "ParamVector", tol: float = 0.0) -> bool:
        if tol == 0.0:
            return all(
                np.array_equal(a.data, b.data)
                for (_, a), (_, b) in zip(self.segments, other.segments)
            )
        return bool(np.allclose(self.flatten(), other.flatten(), atol=tol, rtol=0))


# ---------------------------------------------------------------------------
# model-facing entry points; a model is anything with .loss(params, batch) -> Tensor


def loss_value(model, params: ParamVector, batch) -> float:
    return model.loss(params, batch).item()


def grad(model, params: ParamVector, batch) -> ParamVector:
    """Gradient of the mean per-example loss over `batch` at `params`."""
    leaves = params.tensors()
    loss = model.loss(params, batch)
    cots = vjp_backward(loss, leaves)
    return ParamVector(
        (name, constant(c.data.copy(), name))
        for (name, _), c in zip(params.segments, cots)
    )


def hvp(model, params: ParamVector, batch, v: ParamVector) -> ParamVector:
    """Hessian-vector product H v of the batch loss at `params`.

    Realized as the gradient of <grad(w), v>, i.e. a second backward pass
    over the gradient graph.
    """
    if v.dim != params.dim:
        raise ConfigError(f"hvp direction dim {v.dim} != param dim {params.dim}")
    leaves = params.tensors()
    loss = model.loss(params, batch)
    g = vjp_backward(loss, leaves)
    gv = None
    for g_seg, (_, v_seg) in zip(g, v.segments):
        term = sum_all(cmul(g_seg, v_seg.data))
        gv = term if gv is None else add(gv, term)
    h = vjp_backward(gv, leaves)
    return ParamVector(
        (name, constant(c.data.copy(), name))
        for (name, _), c in zip(params.segments, h)
    )
