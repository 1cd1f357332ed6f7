"""Reverse-mode automatic differentiation over numpy arrays.

A small tape: every operation returns a `Tensor` that records its parents
and a closure producing parent gradients.  `backward()` walks the graph in
reverse topological order and accumulates into `.grad`.  Everything runs
in float64; gradient correctness is enforced by the central
finite-difference harness in `gradcheck`.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "concat", "relu", "softmax", "gradcheck"]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over axes that were added or broadcast to reach its shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # -- graph bookkeeping ----------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for parent, pgrad in zip(node._parents, node._backward(node.grad)):
                if not parent.requires_grad or pgrad is None:
                    continue
                if parent.grad is None:
                    parent.grad = pgrad.copy()
                else:
                    parent.grad += pgrad

    # -- elementwise arithmetic -------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = Tensor._lift(other)
        out_data = self.data + other.data
        return Tensor(
            out_data,
            _parents=(self, other),
            _backward=lambda g: (
                _unbroadcast(g, self.data.shape),
                _unbroadcast(g, other.data.shape),
            ),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, _parents=(self,), _backward=lambda g: (-g,))

    def __sub__(self, other):
        return self + (-Tensor._lift(other))

    def __rsub__(self, other):
        return Tensor._lift(other) + (-self)

    def __mul__(self, other):
        other = Tensor._lift(other)
        out_data = self.data * other.data
        return Tensor(
            out_data,
            _parents=(self, other),
            _backward=lambda g: (
                _unbroadcast(g * other.data, self.data.shape),
                _unbroadcast(g * self.data, other.data.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        out_data = self.data / other.data
        return Tensor(
            out_data,
            _parents=(self, other),
            _backward=lambda g: (
                _unbroadcast(g / other.data, self.data.shape),
                _unbroadcast(-g * self.data / (other.data * other.data), other.data.shape),
            ),
        )

    def __rtruediv__(self, other):
        return Tensor._lift(other) / self

    def __pow__(self, exponent: float):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        out_data = self.data**exponent
        return Tensor(
            out_data,
            _parents=(self,),
            _backward=lambda g: (g * exponent * self.data ** (exponent - 1),),
        )

    def __matmul__(self, other):
        other = Tensor._lift(other)
        out_data = self.data @ other.data

        def backward(g):
            ga = g @ np.swapaxes(other.data, -1, -2)
            gb = np.swapaxes(self.data, -1, -2) @ g
            return (
                _unbroadcast(ga, self.data.shape),
                _unbroadcast(gb, other.data.shape),
            )

        return Tensor(out_data, _parents=(self, other), _backward=backward)

    # -- nonlinearities / reductions ---------------------------------------

    def exp(self):
        out_data = np.exp(self.data)
        return Tensor(out_data, _parents=(self,), _backward=lambda g: (g * out_data,))

    def log(self):
        return Tensor(
            np.log(self.data), _parents=(self,), _backward=lambda g: (g / self.data,)
        )

    def sqrt(self):
        out_data = np.sqrt(self.data)
        return Tensor(
            out_data, _parents=(self,), _backward=lambda g: (g * 0.5 / out_data,)
        )

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, self.data.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, self.data.shape).copy(),)

        return Tensor(out_data, _parents=(self,), _backward=backward)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)
        src = self.data.shape
        return Tensor(
            out_data, _parents=(self,), _backward=lambda g: (g.reshape(src),)
        )

    def swapaxes(self, a: int, b: int):
        return Tensor(
            np.swapaxes(self.data, a, b),
            _parents=(self,),
            _backward=lambda g: (np.swapaxes(g, a, b),),
        )

    def broadcast_to(self, shape: tuple[int, ...]):
        src = self.data.shape
        return Tensor(
            np.broadcast_to(self.data, shape).copy(),
            _parents=(self,),
            _backward=lambda g: (_unbroadcast(g, src),),
        )

    def __getitem__(self, idx):
        out_data = self.data[idx]

        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor(out_data, _parents=(self,), _backward=backward)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out_data, _parents=tuple(tensors), _backward=backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return Tensor(
        x.data * mask, _parents=(x,), _backward=lambda g: (g * mask,)
    )


def softmax(x: Tensor, axis: int = -1, additive_mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax; `additive_mask` (constant) is added to the
    logits before normalization (use large negatives to disable entries)."""
    if additive_mask is not None:
        x = x + Tensor(additive_mask)
    shift = Tensor(x.data.max(axis=axis, keepdims=True))  # constant shift
    e = (x - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def gradcheck(
    fn,
    params: dict[str, Tensor],
    step: float = 1e-5,
    rel_tol: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of scalar `fn()` against central differences.

    Checks every entry of every parameter (or a random subset of
    `max_entries` per parameter).  Returns the worst relative error,
    raising AssertionError when it exceeds `rel_tol`.
    """
    for p in params.values():
        p.zero_grad()
    out = fn()
    out.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idxs = range(flat.size)
        if max_entries is not None and flat.size > max_entries:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(flat.size, size=max_entries, replace=False)
        base = p.data.copy()
        for i in idxs:
            flat[i] = base.reshape(-1)[i] + step
            f_plus = float(fn().data)
            flat[i] = base.reshape(-1)[i] - step
            f_minus = float(fn().data)
            flat[i] = base.reshape(-1)[i]
            fd = (f_plus - f_minus) / (2.0 * step)
            an = float(analytic[name].reshape(-1)[i])
            err = abs(fd - an) / max(abs(fd), abs(an), 1.0)
            if err > worst:
                worst = err
            if err > rel_tol:
                raise AssertionError(
                    f"gradient mismatch at {name}[{i}]: analytic {an:.8g}, "
                    f"finite-difference {fd:.8g}, rel err {err:.3g}"
                )
    return worst
