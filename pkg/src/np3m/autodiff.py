"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation records a pullback expressed in terms of the same public
operations, so differentiating through a gradient (needed for the force term
of the training loss) works by running backward with create_graph=True.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_EPS_NORM = 1e-24  # floor under squared norms before sqrt
LAYER_NORM_EPS = 1e-5


class AutodiffError(RuntimeError):
    pass


_grad_enabled = True
_id_counter = 0


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array participating in the differentiation tape."""

    __slots__ = ("data", "requires_grad", "grad", "_id", "_parents", "_vjp", "_done")

    def __init__(self, data, requires_grad: bool = False):
        global _id_counter
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Tensor | None = None
        _id_counter += 1
        self._id = _id_counter
        self._parents: tuple = ()
        self._vjp: Callable | None = None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], vjp: Callable | None) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    extra = len(g.shape) - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(mul(g, -1.0), b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(div(g, b), a.shape),
            _unbroadcast(mul(mul(g, -1.0), div(a, mul(b, b))), b.shape),
        ),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise AutodiffError("matmul supports 2D operands only")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise AutodiffError("transpose supports 2D operands only")
    return _make(a.data.T, (a,), lambda g: (transpose(g),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, old),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(
        np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),)
    )


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (broadcast_to(reshape(g, (1,) * len(shape)), shape),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        if not keepdims:
            kept = [1 if i in axes else n for i, n in enumerate(shape)]
            g = reshape(g, tuple(kept))
        return (broadcast_to(g, shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    total = sum_(a, axis=axis, keepdims=keepdims)
    return mul(total, total.data.size / a.data.size if axis is None else _mean_scale(a.shape, axis))


def _mean_scale(shape, axis) -> float:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    n = 1
    for ax in axes:
        n *= shape[ax % len(shape)]
    return 1.0 / n


def concatenate(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]

    def vjp(g):
        grads, start = [], 0
        for n in sizes:
            grads.append(narrow(g, axis, start, n))
            start += n
        return tuple(grads)

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, vjp)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = as_tensor(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    shape = a.shape

    def vjp(g):
        pad = Tensor(np.zeros(shape))
        return (_slice_assign(pad, index, g),)

    return _make(a.data[index].copy(), (a,), vjp)


def _slice_assign(zeros: Tensor, index, g) -> Tensor:
    # helper for narrow's pullback; zeros is a fresh constant buffer
    g = as_tensor(g)

    def vjp(gg):
        return (Tensor(np.zeros(zeros.shape)), narrow_index(gg, index))

    data = zeros.data.copy()
    data[index] = g.data
    return _make(data, (zeros, g), vjp)


def narrow_index(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        pad = Tensor(np.zeros(shape))
        return (_slice_assign(pad, index, g),)

    return _make(a.data[index].copy(), (a,), vjp)


def gather(a, idx) -> Tensor:
    """Select rows of a (first axis) by an integer index array."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise AutodiffError("gather index out of range")
    n_rows = a.shape[0]
    return _make(a.data[idx], (a,), lambda g: (scatter_add(g, idx, n_rows),))


def scatter_add(values, idx, n_rows: int) -> Tensor:
    """Sum rows of `values` into an (n_rows, ...) array at positions idx."""
    values = as_tensor(values)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n_rows,) + values.shape[1:])
    np.add.at(out, idx, values.data)
    return _make(out, (values,), lambda g: (gather(g, idx),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.exp(a.data), (a,), None)
    out._vjp = lambda g: (mul(g, out),)
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.sqrt(a.data), (a,), None)
    out._vjp = lambda g: (div(mul(g, 0.5), out),)
    return out


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (mul(g, cos(a)),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (mul(g, mul(sin(a), -1.0)),))


def clip_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > floor).astype(np.float64)
    return _make(np.maximum(a.data, floor), (a,), lambda g: (mul(g, mask),))


def permute_axis(a, idx, axis: int) -> Tensor:
    """Reorder one axis by a permutation; the pullback applies the inverse."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    inv = np.argsort(idx)
    return _make(
        np.take(a.data, idx, axis=axis), (a,), lambda g: (permute_axis(g, inv, axis),)
    )


def fft_pair(x, axes: tuple) -> Tensor:
    """Forward DFT of a real-pair tensor x with shape (2, ...) = (real, imag).

    `axes` index into the underlying complex array x[0]. The pullback is the
    unnormalized inverse transform, since the DFT matrix is symmetric.
    """
    x = as_tensor(x)
    z = np.fft.fftn(x.data[0] + 1j * x.data[1], axes=axes)
    scale = float(np.prod([x.shape[ax + 1] for ax in axes]))
    return _make(
        np.stack([z.real, z.imag]), (x,), lambda g: (mul(ifft_pair(g, axes), scale),)
    )


def ifft_pair(x, axes: tuple) -> Tensor:
    """Inverse DFT (1/M normalized) of a real-pair tensor; adjoint of fft_pair."""
    x = as_tensor(x)
    z = np.fft.ifftn(x.data[0] + 1j * x.data[1], axes=axes)
    scale = float(np.prod([x.shape[ax + 1] for ax in axes]))
    return _make(
        np.stack([z.real, z.imag]), (x,), lambda g: (mul(fft_pair(g, axes), 1.0 / scale),)
    )


# ---------------------------------------------------------------------------
# composites


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    return div(1.0, add(1.0, exp(mul(a, -1.0))))


def silu(a) -> Tensor:
    a = as_tensor(a)
    return mul(a, sigmoid(a))


def square(a) -> Tensor:
    a = as_tensor(a)
    return mul(a, a)


def l2_norm(a) -> Tensor:
    """Euclidean norm over the last axis; zero rows get zero gradient."""
    return sqrt(clip_min(sum_(square(a), axis=-1), _EPS_NORM))


def layer_norm(a, scale, offset, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis with learnable scale/offset.

    Rows that are exactly zero stay zero (the mesh branch feeds all-zero rows
    when a mesh point has no neighbors).
    """
    a = as_tensor(a)
    nonzero = (np.abs(a.data).sum(axis=-1, keepdims=True) > 0).astype(np.float64)
    mu = mean_(a, axis=-1, keepdims=True)
    centered = sub(a, mu)
    var = mean_(square(centered), axis=-1, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    return mul(add(mul(normed, scale), offset), nonzero)


# ---------------------------------------------------------------------------
# backward


def backward(out: Tensor, wrt: Sequence[Tensor] | None = None, create_graph: bool = False):
    """Reverse-mode gradients of a scalar output.

    Returns a dict mapping id(tensor) -> gradient Tensor for the requested
    tensors (all requires-grad leaves when wrt is None); also stores gradients
    in each requested tensor's .grad slot. A second backward through the same
    output node is an error unless the graph was retained with create_graph.
    """
    if out.size != 1:
        raise AutodiffError("backward requires a scalar output")
    if out._done and not create_graph:
        raise AutodiffError("backward already ran for this output; rebuild the graph")
    out._done = True

    # reachable subgraph, reverse-topological by construction id
    seen = {}
    stack = [out]
    while stack:
        node = stack.pop()
        if node._id in seen or not node.requires_grad:
            continue
        seen[node._id] = node
        stack.extend(node._parents)
    order = sorted(seen.values(), key=lambda t: t._id, reverse=True)

    grads: dict[int, Tensor] = {out._id: Tensor(np.ones(out.shape))}
    wanted = None if wrt is None else {id(t) for t in wrt}
    result: dict[int, Tensor] = {}

    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for node in order:
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._vjp is None:
                if wanted is None or id(node) in wanted:
                    node.grad = g if node.grad is None else add(node.grad, g)
                    result[id(node)] = node.grad
                continue
            if wanted is not None and id(node) in wanted:
                node.grad = g if node.grad is None else add(node.grad, g)
                result[id(node)] = node.grad
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if not parent.requires_grad or pg is None:
                    continue
                if parent._id in grads:
                    grads[parent._id] = add(grads[parent._id], pg)
                else:
                    grads[parent._id] = as_tensor(pg)
    return result


def zero_grads(tensors: Iterable[Tensor]):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# optimizer: decoupled weight decay, adaptive moments, warmup + plateau decay


class AdamW:
    """Adam with decoupled weight decay, linear warmup, and plateau LR decay."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        warmup_steps: int = 0,
        plateau_patience: int = 10,
        decay_factor: float = 0.8,
    ):
        self.params = list(params)
        self.base_lr = lr
        self.lr_scale = 1.0
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.plateau_patience = plateau_patience
        self.decay_factor = decay_factor
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.best_metric = np.inf
        self.bad_epochs = 0
        self.decay_events = 0

    @property
    def lr(self) -> float:
        warm = 1.0
        if self.warmup_steps > 0:
            warm = min(1.0, self.step_count / self.warmup_steps)
        return self.base_lr * self.lr_scale * warm

    def step(self, grads: Sequence[np.ndarray] | None = None):
        self.step_count += 1
        b1, b2 = self.betas
        lr = self.lr
        for i, p in enumerate(self.params):
            if grads is not None:
                g = grads[i]
            elif p.grad is not None:
                g = p.grad.data
            else:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1**self.step_count)
            v_hat = self.v[i] / (1 - b2**self.step_count)
            p.data = p.data - lr * (
                m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
            )

    def epoch_end(self, metric: float) -> bool:
        """Record a validation metric; returns True if the LR decayed."""
        if metric < self.best_metric - 1e-12:
            self.best_metric = metric
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.plateau_patience:
            self.lr_scale *= self.decay_factor
            self.bad_epochs = 0
            self.decay_events += 1
            return True
        return False

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "lr_scale": self.lr_scale,
            "m": [a.copy() for a in self.m],
            "v": [a.copy() for a in self.v],
            "best_metric": self.best_metric,
            "bad_epochs": self.bad_epochs,
            "decay_events": self.decay_events,
        }

    def load_state_dict(self, state: dict):
        self.step_count = int(state["step_count"])
        self.lr_scale = float(state["lr_scale"])
        self.m = [np.array(a) for a in state["m"]]
        self.v = [np.array(a) for a in state["v"]]
        self.best_metric = float(state["best_metric"])
        self.bad_epochs = int(state["bad_epochs"])
        self.decay_events = int(state["decay_events"])
