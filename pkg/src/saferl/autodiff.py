"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps a float64 ``np.ndarray`` and records the operations applied
to it on a tape (a DAG of parent links plus per-node backward closures).
Calling :meth:`Tensor.backward` on a scalar output runs the tape in reverse
topological order and accumulates ``.grad`` on every tensor that requires
gradients.

The op set is intentionally small: exactly what feedforward policies/critics,
squashed-Gaussian log-probabilities and the safety-layer losses need. Custom
nodes (e.g. the QP filter) are added with :func:`custom_node`.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "tensor", "concat", "minimum", "maximum", "where",
           "custom_node", "Adam", "gradcheck"]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    # sum over leading broadcast axes
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    # sum over axes that were size 1 in the original
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward = backward

    # ------------------------------------------------------------------ infra

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def _accumulate(self, g: np.ndarray):
        g = _unbroadcast(np.asarray(g, dtype=np.float64), self.data.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self, grad=None):
        """Reverse pass from this tensor; scalar outputs may omit `grad`."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar output")
            grad = np.ones_like(self.data)
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen or not t.requires_grad:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        self._accumulate(grad)
        for t in reversed(topo):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    def zero_grad(self):
        self.grad = None

    # ------------------------------------------------------------- arithmetic

    def __add__(self, other):
        other = tensor(other)
        req = self.requires_grad or other.requires_grad
        out = Tensor(self.data + other.data, req, (self, other))

        def bw(g):
            if self.requires_grad:
                self._accumulate(g)
            if other.requires_grad:
                other._accumulate(g)
        out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, self.requires_grad, (self,))

        def bw(g):
            if self.requires_grad:
                self._accumulate(-g)
        out._backward = bw
        return out

    def __sub__(self, other):
        return self + (-tensor(other))

    def __rsub__(self, other):
        return tensor(other) + (-self)

    def __mul__(self, other):
        other = tensor(other)
        req = self.requires_grad or other.requires_grad
        out = Tensor(self.data * other.data, req, (self, other))

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * other.data)
            if other.requires_grad:
                other._accumulate(g * self.data)
        out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = tensor(other)
        req = self.requires_grad or other.requires_grad
        out = Tensor(self.data / other.data, req, (self, other))

        def bw(g):
            if self.requires_grad:
                self._accumulate(g / other.data)
            if other.requires_grad:
                other._accumulate(-g * self.data / (other.data ** 2))
        out._backward = bw
        return out

    def __rtruediv__(self, other):
        return tensor(other) / self

    def __pow__(self, p):
        assert np.isscalar(p), "only scalar exponents supported"
        out = Tensor(self.data ** p, self.requires_grad, (self,))

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * p * self.data ** (p - 1))
        out._backward = bw
        return out

    def __matmul__(self, other):
        other = tensor(other)
        req = self.requires_grad or other.requires_grad
        out = Tensor(self.data @ other.data, req, (self, other))

        def bw(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)
        out._backward = bw
        return out

    # ------------------------------------------------------------ elementwise

    def exp(self):
        out = Tensor(np.exp(self.data), self.requires_grad, (self,))

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * out.data)
        out._backward = bw
        return out

    def log(self):
        out = Tensor(np.log(self.data), self.requires_grad, (self,))

        def bw(g):
            if self.requires_grad:
                self._accumulate(g / self.data)
        out._backward = bw
        return out

    def tanh(self):
        out = Tensor(np.tanh(self.data), self.requires_grad, (self,))

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * (1.0 - out.data ** 2))
        out._backward = bw
        return out

    def relu(self):
        out = Tensor(np.maximum(self.data, 0.0), self.requires_grad, (self,))

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * (self.data > 0))
        out._backward = bw
        return out

    def softplus(self):
        # stable: max(x,0) + log1p(exp(-|x|))
        out = Tensor(np.maximum(self.data, 0.0) + np.log1p(np.exp(-np.abs(self.data))),
                     self.requires_grad, (self,))

        def bw(g):
            if self.requires_grad:
                self._accumulate(g / (1.0 + np.exp(-self.data)))
        out._backward = bw
        return out

    def sqrt(self):
        out = Tensor(np.sqrt(self.data), self.requires_grad, (self,))

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * 0.5 / out.data)
        out._backward = bw
        return out

    def clamp(self, lo, hi):
        """Gradient is passed inside [lo, hi] (boundary included), zero outside."""
        out = Tensor(np.clip(self.data, lo, hi), self.requires_grad, (self,))
        mask = (self.data >= lo) & (self.data <= hi)

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * mask)
        out._backward = bw
        return out

    # -------------------------------------------------------------- reshaping

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), self.requires_grad, (self,))

        def bw(g):
            if self.requires_grad:
                self._accumulate(g.reshape(self.data.shape))
        out._backward = bw
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], self.requires_grad, (self,))

        def bw(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                np.add.at(full, idx, g)
                self._accumulate(full)
        out._backward = bw
        return out

    # -------------------------------------------------------------- reduction

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims),
                     self.requires_grad, (self,))

        def bw(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(gg, self.data.shape))
        out._backward = bw
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def item(self) -> float:
        return float(self.data)


def tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [tensor(t) for t in tensors]
    req = any(t.requires_grad for t in tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 req, tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])
    out._backward = bw
    return out


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; on ties the gradient goes to `a` (deterministic)."""
    a, b = tensor(a), tensor(b)
    take_a = a.data <= b.data
    out = Tensor(np.where(take_a, a.data, b.data),
                 a.requires_grad or b.requires_grad, (a, b))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * take_a)
        if b.requires_grad:
            b._accumulate(g * ~take_a)
    out._backward = bw
    return out


def maximum(a: Tensor, b: Tensor) -> Tensor:
    a, b = tensor(a), tensor(b)
    take_a = a.data >= b.data
    out = Tensor(np.where(take_a, a.data, b.data),
                 a.requires_grad or b.requires_grad, (a, b))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * take_a)
        if b.requires_grad:
            b._accumulate(g * ~take_a)
    out._backward = bw
    return out


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    a, b = tensor(a), tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = Tensor(np.where(cond, a.data, b.data),
                 a.requires_grad or b.requires_grad, (a, b))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * cond)
        if b.requires_grad:
            b._accumulate(g * ~cond)
    out._backward = bw
    return out


def custom_node(inputs, forward_value, vjp) -> Tensor:
    """Insert an opaque differentiable node into the tape.

    Parameters
    ----------
    inputs : list of Tensor
        Tensors the node depends on.
    forward_value : np.ndarray
        Precomputed output value.
    vjp : callable
        ``vjp(upstream_grad) -> list of grads`` aligned with `inputs`;
        entries for non-grad inputs may be None.
    """
    inputs = [tensor(t) for t in inputs]
    req = any(t.requires_grad for t in inputs)
    out = Tensor(forward_value, req, tuple(inputs))

    def bw(g):
        grads = vjp(g)
        for t, gi in zip(inputs, grads):
            if t.requires_grad and gi is not None:
                t._accumulate(gi)
    out._backward = bw
    return out


class Adam:
    """Adam with bias correction over a list of parameter Tensors."""

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": [m.copy() for m in self.m],
                "v": [v.copy() for v in self.v], "lr": self.lr}

    def load_state_dict(self, state):
        self.t = int(state["t"])
        self.m = [np.array(m) for m in state["m"]]
        self.v = [np.array(v) for v in state["v"]]
        self.lr = float(state["lr"])


def gradcheck(f, params, eps=1e-6, rtol=1e-4, atol=1e-7):
    """Compare reverse-mode gradients of scalar f(params) to central differences.

    Returns (ok, worst_rel_err, report) where report lists offending blocks.
    """
    for p in params:
        p.zero_grad()
    out = f()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    worst = 0.0
    report = []
    for k, p in enumerate(params):
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * eps)
        denom = np.maximum(np.abs(num), np.abs(analytic[k]))
        err = np.abs(num - analytic[k]) / np.maximum(denom, atol / rtol)
        block_worst = float(err.max()) if err.size else 0.0
        worst = max(worst, block_worst)
        if block_worst > rtol:
            report.append((k, block_worst))
    return (len(report) == 0), worst, report
