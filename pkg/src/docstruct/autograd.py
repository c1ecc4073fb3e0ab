"""Minimal reverse-mode automatic differentiation on 64-bit numpy arrays.

Every learned quantity in the package is a ``Tensor``. The computation
graph is rebuilt dynamically on each forward pass (documents have variable
segment/token counts), and ``backward()`` on a scalar loss populates
``grad`` on every reachable tensor that requires gradients. Gradients
accumulate across backward calls until explicitly zeroed.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

Array = np.ndarray


def _as_array(data) -> Array:
    arr = np.asarray(data, dtype=np.float64)
    return arr


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """N-dimensional float64 array with gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = (
            np.zeros_like(self.data) if self.requires_grad else None
        )
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None

    # -- graph construction -------------------------------------------------

    @classmethod
    def _from_op(
        cls,
        data: Array,
        parents: Sequence["Tensor"],
        backward: Callable[[Array], None],
    ) -> "Tensor":
        """Build a graph node. `backward(g)` must add into each parent's grad."""
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.grad = np.zeros_like(out.data)
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> Array:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        """A gradient-stopped view of this tensor's value."""
        return Tensor(self.data)

    # -- backward pass -------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode pass from a scalar; accumulates into `.grad` fields."""
        if self.size != 1:
            raise ContractError(f"backward() requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        # intermediates restart from zero each pass; leaves keep accumulating
        for node in topo:
            if node._backward is not None:
                node.grad.fill(0.0)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += 1.0
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic ----------------------------------------------

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self, other

        def backward(g: Array) -> None:
            if a.requires_grad:
                a.grad += _unbroadcast(g, a.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(g, b.shape)

        return Tensor._from_op(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self, other

        def backward(g: Array) -> None:
            if a.requires_grad:
                a.grad += _unbroadcast(g, a.shape)
            if b.requires_grad:
                b.grad -= _unbroadcast(g, b.shape)

        return Tensor._from_op(a.data - b.data, (a, b), backward)

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other).__sub__(self)

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self, other

        def backward(g: Array) -> None:
            if a.requires_grad:
                a.grad += _unbroadcast(g * b.data, a.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(g * a.data, b.shape)

        return Tensor._from_op(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self, other

        def backward(g: Array) -> None:
            if a.requires_grad:
                a.grad += _unbroadcast(g / b.data, a.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(-g * a.data / (b.data * b.data), b.shape)

        return Tensor._from_op(a.data / b.data, (a, b), backward)

    def __rtruediv__(self, other) -> "Tensor":
        return self._coerce(other).__truediv__(self)

    def __neg__(self) -> "Tensor":
        a = self

        def backward(g: Array) -> None:
            if a.requires_grad:
                a.grad -= g

        return Tensor._from_op(-a.data, (a,), backward)

    def __pow__(self, exponent: float) -> "Tensor":
        a = self
        e = float(exponent)

        def backward(g: Array) -> None:
            if a.requires_grad:
                a.grad += g * e * np.power(a.data, e - 1.0)

        return Tensor._from_op(np.power(a.data, e), (a,), backward)

    # -- matrix product --------------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        other = self._coerce(other)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2:
            raise DimensionError(
                f"matmul expects 2-D operands, got {a.shape} and {b.shape}"
            )
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

        def backward(g: Array) -> None:
            if a.requires_grad:
                a.grad += g @ b.data.T
            if b.requires_grad:
                b.grad += a.data.T @ g

        return Tensor._from_op(a.data @ b.data, (a, b), backward)

    __matmul__ = matmul

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def backward(g: Array) -> None:
            if not a.requires_grad:
                return
            if axis is None:
                a.grad += g  # g is scalar-shaped; broadcasts
            elif keepdims:
                a.grad += g
            else:
                a.grad += np.expand_dims(g, axis)

        return Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        count = a.size if axis is None else a.shape[axis]

        def backward(g: Array) -> None:
            if not a.requires_grad:
                return
            scaled = g / count
            if axis is None or keepdims:
                a.grad += scaled
            else:
                a.grad += np.expand_dims(scaled, axis)

        return Tensor._from_op(
            a.data.mean(axis=axis, keepdims=keepdims), (a,), backward
        )

    def max(self, axis: int, keepdims: bool = False) -> "Tensor":
        """Max along one axis; ties route gradient to the first maximum."""
        a = self
        idx = np.argmax(a.data, axis=axis)
        out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)

        def backward(g: Array) -> None:
            if not a.requires_grad:
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            scatter = np.zeros_like(a.data)
            np.put_along_axis(scatter, np.expand_dims(idx, axis), g, axis=axis)
            a.grad += scatter

        data = out if keepdims else np.squeeze(out, axis=axis)
        return Tensor._from_op(data, (a,), backward)

    # -- elementwise functions ---------------------------------------------------

    def exp(self) -> "Tensor":
        a = self
        out_data = np.exp(a.data)

        def backward(g: Array) -> None:
            if a.requires_grad:
                a.grad += g * out_data

        return Tensor._from_op(out_data, (a,), backward)

    def log(self) -> "Tensor":
        a = self

        def backward(g: Array) -> None:
            if a.requires_grad:
                a.grad += g / a.data

        return Tensor._from_op(np.log(a.data), (a,), backward)

    def sqrt(self) -> "Tensor":
        a = self
        out_data = np.sqrt(a.data)

        def backward(g: Array) -> None:
            if a.requires_grad:
                a.grad += g * 0.5 / out_data

        return Tensor._from_op(out_data, (a,), backward)

    def tanh(self) -> "Tensor":
        a = self
        out_data = np.tanh(a.data)

        def backward(g: Array) -> None:
            if a.requires_grad:
                a.grad += g * (1.0 - out_data * out_data)

        return Tensor._from_op(out_data, (a,), backward)

    def sigmoid(self) -> "Tensor":
        a = self
        out_data = np.where(
            a.data >= 0,
            1.0 / (1.0 + np.exp(-np.abs(a.data))),
            np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))),
        )

        def backward(g: Array) -> None:
            if a.requires_grad:
                a.grad += g * out_data * (1.0 - out_data)

        return Tensor._from_op(out_data, (a,), backward)

    def relu(self) -> "Tensor":
        a = self
        mask = a.data > 0

        def backward(g: Array) -> None:
            if a.requires_grad:
                a.grad += g * mask

        return Tensor._from_op(a.data * mask, (a,), backward)

    def softplus(self) -> "Tensor":
        """log(1 + exp(x)), numerically stable; gradient is sigmoid(x)."""
        a = self
        out_data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

        def backward(g: Array) -> None:
            if a.requires_grad:
                sig = np.where(
                    a.data >= 0,
                    1.0 / (1.0 + np.exp(-np.abs(a.data))),
                    np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))),
                )
                a.grad += g * sig

        return Tensor._from_op(out_data, (a,), backward)

    def huber(self) -> "Tensor":
        """Smooth-L1 per element: 0.5x^2 for |x|<1, |x|-0.5 otherwise."""
        a = self
        absx = np.abs(a.data)
        small = absx < 1.0
        out_data = np.where(small, 0.5 * a.data * a.data, absx - 0.5)

        def backward(g: Array) -> None:
            if a.requires_grad:
                a.grad += g * np.clip(a.data, -1.0, 1.0)

        return Tensor._from_op(out_data, (a,), backward)

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = a.shape

        def backward(g: Array) -> None:
            if a.requires_grad:
                a.grad += g.reshape(orig)

        return Tensor._from_op(a.data.reshape(shape), (a,), backward)

    def transpose(self, axes: tuple[int, ...] | None = None) -> "Tensor":
        a = self
        fwd_axes = axes if axes is not None else tuple(reversed(range(a.ndim)))
        inv_axes = tuple(np.argsort(fwd_axes))

        def backward(g: Array) -> None:
            if a.requires_grad:
                a.grad += g.transpose(inv_axes)

        return Tensor._from_op(a.data.transpose(fwd_axes), (a,), backward)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, key) -> "Tensor":
        """Basic (non-repeating) indexing with gradient scatter."""
        a = self

        def backward(g: Array) -> None:
            if a.requires_grad:
                a.grad[key] += g

        return Tensor._from_op(a.data[key], (a,), backward)

    # -- softmax family ----------------------------------------------------------

    def softmax(self, axis: int = -1) -> "Tensor":
        a = self
        if not np.all(np.isfinite(a.data)):
            raise NumericError("softmax input contains non-finite values")
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def backward(g: Array) -> None:
            if a.requires_grad:
                dot = (g * out_data).sum(axis=axis, keepdims=True)
                a.grad += (g - dot) * out_data

        return Tensor._from_op(out_data, (a,), backward)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        a = self
        if not np.all(np.isfinite(a.data)):
            raise NumericError("log_softmax input contains non-finite values")
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        logsum = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out_data = shifted - logsum

        def backward(g: Array) -> None:
            if a.requires_grad:
                soft = np.exp(out_data)
                a.grad += g - soft * g.sum(axis=axis, keepdims=True)

        return Tensor._from_op(out_data, (a,), backward)


# -- free functions over tensors ---------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along `axis`; gradient splits back to each input."""
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty sequence")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array) -> None:
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(start, stop)
                t.grad += g[tuple(index)]

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._from_op(data, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("stack of an empty sequence")

    def backward(g: Array) -> None:
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t.grad += np.take(g, i, axis=axis)

    data = np.stack([t.data for t in tensors], axis=axis)
    return Tensor._from_op(data, tensors, backward)


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows of a 2-D tensor by integer index (repeats allowed)."""
    idx = np.asarray(indices, dtype=np.intp)
    a = x

    def backward(g: Array) -> None:
        if a.requires_grad:
            np.add.at(a.grad, idx, g)

    return Tensor._from_op(a.data[idx], (a,), backward)


def take_pairs(x: Tensor, rows, cols) -> Tensor:
    """Gather x[rows[i], cols[i]] into a 1-D tensor."""
    r = np.asarray(rows, dtype=np.intp)
    c = np.asarray(cols, dtype=np.intp)
    a = x

    def backward(g: Array) -> None:
        if a.requires_grad:
            np.add.at(a.grad, (r, c), g)

    return Tensor._from_op(a.data[r, c], (a,), backward)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """log(sum(exp(x))) with a detached max shift; gradients stay exact."""
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    out = (x - shift).exp().sum(axis=axis, keepdims=True).log() + shift
    if not keepdims:
        out = out.reshape(tuple(np.delete(out.shape, axis)))
    return out


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of x[C_in,H,W] with weight[C_out,C_in,k,k].

    im2col forward; input gradient is computed as a full correlation of the
    dilated output gradient with the spatially flipped kernel, so both
    directions run on BLAS matmuls.
    """
    if x.ndim != 3 or weight.ndim != 4:
        raise DimensionError(
            f"conv2d expects x[C,H,W], w[O,C,k,k]; got {x.shape}, {weight.shape}"
        )
    c_in, h_in, w_in = x.shape
    c_out, c_in_w, kh, kw = weight.shape
    if c_in != c_in_w:
        raise DimensionError(f"conv2d channel mismatch: {c_in} vs {c_in_w}")
    if kh != kw:
        raise DimensionError("conv2d supports square kernels only")
    k, s, p = kh, stride, padding
    h_out = (h_in + 2 * p - k) // s + 1
    w_out = (w_in + 2 * p - k) // s + 1
    if h_out <= 0 or w_out <= 0:
        raise DimensionError(f"conv2d output would be empty for input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    cols = (
        windows[:, ::s, ::s]
        .transpose(1, 2, 0, 3, 4)
        .reshape(h_out * w_out, c_in * k * k)
    )
    w_mat = weight.data.reshape(c_out, c_in * k * k)
    out = (cols @ w_mat.T).T.reshape(c_out, h_out, w_out)
    if bias is not None:
        out = out + bias.data[:, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: Array) -> None:
        g2 = g.reshape(c_out, h_out * w_out)
        if weight.requires_grad:
            weight.grad += (g2 @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            bias.grad += g2.sum(axis=1)
        if x.requires_grad:
            # dilate by stride, pad by k-1, full-correlate with flipped kernel;
            # extra trailing zeros cover input rows no window ever touched
            hd, wd = (h_out - 1) * s + 1, (w_out - 1) * s + 1
            hp, wp = h_in + 2 * p, w_in + 2 * p
            extra_h = hp - (hd + k - 1)
            extra_w = wp - (wd + k - 1)
            gd = np.zeros(
                (c_out, hd + 2 * (k - 1) + extra_h, wd + 2 * (k - 1) + extra_w)
            )
            gd[:, k - 1 : k - 1 + hd : s, k - 1 : k - 1 + wd : s] = g
            gwin = np.lib.stride_tricks.sliding_window_view(gd, (k, k), axis=(1, 2))
            gcols = gwin[:, :hp, :wp].transpose(1, 2, 0, 3, 4).reshape(
                hp * wp, c_out * k * k
            )
            w_flip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx_p = (gcols @ w_flip.reshape(c_in, c_out * k * k).T).T.reshape(
                c_in, hp, wp
            )
            x.grad += gx_p[:, p : p + h_in, p : p + w_in] if p else gx_p

    return Tensor._from_op(out, parents, backward)
