"""Small reverse-mode autodiff engine on float64 numpy arrays.

Every differentiable value is a :class:`Tensor`. Operations record their
inputs and a backward rule on the output node; calling ``backward()`` on a
scalar output walks the recorded graph once in reverse topological order and
accumulates gradients into every reachable tensor with ``requires_grad``.

The engine is deliberately small: float64 only, CPU only, single threaded.
Any op that produces a NaN or Inf raises :class:`NonFiniteError` immediately
instead of letting the bad value propagate.
"""

from __future__ import annotations

import numpy as np


class NonFiniteError(ArithmeticError):
    """Raised when a forward op produces NaN or Inf."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense float64 array with an optional gradient slot.

    A tensor is a leaf (created directly, optionally with
    ``requires_grad=True``) or the output of an op. Non-leaf tensors keep
    references to their parents and a closure implementing the chain rule;
    together these form the implicit computation tape.
    """

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._backward_called = False

    # -- construction -----------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents, backward):
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("op produced a non-finite value")
        out = Tensor(data)
        live = tuple(p for p in parents if p.requires_grad)
        if live:
            out.requires_grad = True
            out._parents = live
            out._backward = backward
        return out

    # -- basic properties --------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's data, cut off from the tape."""
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        data = self.data + other.data

        def backward(g):
            self._accumulate(_unbroadcast(g, self.data.shape))
            other._accumulate(_unbroadcast(g, other.data.shape))

        return Tensor._make(data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            self._accumulate(-g)

        return Tensor._make(-self.data, (self,), backward)

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        data = self.data * other.data

        def backward(g):
            self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return Tensor._make(data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        data = self.data / other.data

        def backward(g):
            self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            other._accumulate(
                _unbroadcast(-g * self.data / other.data**2, other.data.shape)
            )

        return Tensor._make(data, (self, other), backward)

    def __rtruediv__(self, other):
        return Tensor(other) / self

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        data = self.data**exponent

        def backward(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1))

        return Tensor._make(data, (self,), backward)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- elementwise functions ----------------------------------------------

    def exp(self):
        data = np.exp(self.data)

        def backward(g):
            self._accumulate(g * data)

        return Tensor._make(data, (self,), backward)

    def log(self):
        data = np.log(self.data)

        def backward(g):
            self._accumulate(g / self.data)

        return Tensor._make(data, (self,), backward)

    def sqrt(self):
        data = np.sqrt(self.data)

        def backward(g):
            self._accumulate(g * 0.5 / data)

        return Tensor._make(data, (self,), backward)

    def abs(self):
        # Subgradient at 0 is 0: deterministic and bounded.
        sign = np.sign(self.data)

        def backward(g):
            self._accumulate(g * sign)

        return Tensor._make(np.abs(self.data), (self,), backward)

    def relu(self):
        mask = self.data > 0

        def backward(g):
            self._accumulate(g * mask)

        return Tensor._make(self.data * mask, (self,), backward)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape).copy())

        return Tensor._make(data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def cumsum(self, axis: int = -1):
        data = np.cumsum(self.data, axis=axis)

        def backward(g):
            rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
            self._accumulate(rev)

        return Tensor._make(data, (self,), backward)

    # -- shape manipulation ----------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)

        def backward(g):
            self._accumulate(g.reshape(self.data.shape))

        return Tensor._make(data, (self,), backward)

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.data.ndim)))
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = np.argsort(axes)

        def backward(g):
            self._accumulate(g.transpose(inverse))

        return Tensor._make(self.data.transpose(axes), (self,), backward)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.data.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(*axes)

    def __getitem__(self, idx):
        data = self.data[idx]

        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accumulate(full)

        return Tensor._make(data, (self,), backward)

    # -- autodiff -----------------------------------------------------------

    def backward(self):
        """Backpropagate from this scalar through the recorded graph.

        Gradients of every reachable ``requires_grad`` tensor are populated
        exactly once per call. Calling backward a second time on the same
        output without rebuilding the graph is an error.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        if self._backward_called:
            raise RuntimeError("backward() already called on this output")
        if self._backward is None and not self.requires_grad:
            raise RuntimeError("output is not attached to any computation tape")
        self._backward_called = True

        topo: list[Tensor] = []
        seen = set()
        stack = [(self, iter(self._parents))]
        seen.add(id(self))
        while stack:
            node, it = stack[-1]
            advanced = False
            for parent in it:
                if id(parent) not in seen:
                    seen.add(id(parent))
                    stack.append((parent, iter(parent._parents)))
                    advanced = True
                    break
            if not advanced:
                topo.append(node)
                stack.pop()

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)


# -- free functions ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with batched broadcasting over leading dims.

    Backward follows the standard rules dA = dC @ B^T and dB = A^T @ dC,
    summed over broadcast batch dims. Operands must be at least 2-D.
    """
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"inner dims disagree: {a.data.shape} @ {b.data.shape}"
        )
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        a._accumulate(_unbroadcast(ga, a.data.shape))
        b._accumulate(_unbroadcast(gb, b.data.shape))

    return Tensor._make(data, (a, b), backward)


def softmax(z: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature softmax along ``axis`` with max-subtraction for stability.

    Rows sum to 1 and the argmax of the input is preserved for any
    temperature > 0.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = z if isinstance(z, Tensor) else Tensor(z)
    scaled = z * (1.0 / temperature)
    shift = np.max(scaled.data, axis=axis, keepdims=True)  # constant wrt grad
    e = (scaled - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def concatenate(tensors, axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accumulate(g[tuple(idx)])

    return Tensor._make(data, tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    return concatenate([t.reshape(t.shape[:axis] + (1,) + t.shape[axis:])
                        for t in tensors], axis=axis)


def _conv_geometry(h, w, kh, kw, stride, padding):
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError("conv2d output would be empty for this geometry")
    return oh, ow


def _im2col(xp, kh, kw, stride, oh, ow):
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride,
                                  j : j + stride * ow : stride]
    return cols.reshape(b, c * kh * kw, oh * ow)


def conv2d(x: Tensor, w: Tensor, bias: Tensor = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of (B, Cin, H, W) with (Cout, Cin, kh, kw).

    Zero padding, integer stride, differentiable wrt both input and weights.
    Implemented as im2col + matmul so batches stay in BLAS.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    w = w if isinstance(w, Tensor) else Tensor(w)
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} or padding={padding}")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    b, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input {cin} vs weight {cin_w}")
    oh, ow = _conv_geometry(h, wd, kh, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, oh, ow)  # (B, K, L)
    w2 = w.data.reshape(cout, -1)
    out = np.matmul(w2, cols).reshape(b, cout, oh, ow)

    def backward(g):
        g2 = g.reshape(b, cout, oh * ow)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
        w._accumulate(dw.reshape(w.data.shape))
        dcols = np.matmul(w2.T, g2).reshape(b, cin, kh, kw, oh, ow)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * oh : stride,
                    j : j + stride * ow : stride] += dcols[:, :, i, j]
        x._accumulate(dxp[:, :, padding : padding + h, padding : padding + wd])

    out = Tensor._make(out, (x, w), backward)
    if bias is not None:
        out = out + bias.reshape(1, cout, 1, 1)
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of (B, C, H, W)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    b, c, h, w = x.data.shape
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        x._accumulate(g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))

    return Tensor._make(data, (x,), backward)


# -- forward-only spectral helpers --------------------------------------------
#
# The FFT pair is applied only to frozen feature vectors, so it carries no
# backward rule; feeding it anything on the tape is a contract violation and
# raises.


def _check_fft_input(v):
    if isinstance(v, Tensor):
        if v.requires_grad or v._parents:
            raise ValueError("rfft/irfft are forward-only; detach() first")
        return v.data
    return _as_array(v)


def rfft(v) -> np.ndarray:
    """Real-input discrete Fourier transform (any length, mixed radix)."""
    data = _check_fft_input(v)
    if data.shape[-1] < 1:
        raise ValueError("rfft needs at least one element")
    return np.fft.rfft(data, axis=-1)


def irfft(spectrum: np.ndarray, n: int) -> np.ndarray:
    """Inverse of :func:`rfft`; ``n`` is the original signal length."""
    return np.fft.irfft(spectrum, n=n, axis=-1)
