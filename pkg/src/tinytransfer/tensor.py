"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is dynamic: every operation records its inputs and a backward
closure on the output tensor, and ``backward()`` replays the closures in
reverse topological order. Gradients accumulate additively, so calling
``backward()`` twice without ``zero_grad()`` doubles every gradient.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, DimensionError, ConfigurationError


class Tensor:
    """A numpy array plus an optional gradient accumulator.

    ``grad`` stays ``None`` until a backward pass deposits something; it
    always matches ``data`` in shape once allocated.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def backward(self, seed=None):
        """Propagate gradients from this tensor toward the graph leaves.

        ``seed`` defaults to all-ones (the usual scalar-loss case). Each
        pass deposits exactly one seed's worth of gradient, so repeated
        passes without ``zero_grad`` accumulate additively.
        """
        if seed is None:
            seed = np.ones_like(self.data)
        flows = {id(self): np.asarray(seed, dtype=np.float64)}
        for node in reversed(topo_order(self)):
            g = flows.pop(id(node), None)
            if g is None:
                continue
            node.accumulate_grad(g)
            if node._backward is None:
                continue
            for parent, contribution in node._backward(g):
                key = id(parent)
                if key in flows:
                    flows[key] = flows[key] + contribution
                else:
                    flows[key] = contribution


def topo_order(root):
    """Topologically ordered node list for the graph rooted at ``root``.

    Iterative DFS; each node appears exactly once, parents before children.
    """
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _needs_grad(*tensors):
    return any(t.requires_grad for t in tensors)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting rules."""
    try:
        out_data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    out = Tensor(out_data, requires_grad=_needs_grad(a, b), _parents=(a, b), op="add")

    def _backward(g):
        contribs = []
        if a.requires_grad:
            contribs.append((a, _unbroadcast(g, a.shape)))
        if b.requires_grad:
            contribs.append((b, _unbroadcast(g, b.shape)))
        return contribs

    out._backward = _backward
    return out


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar."""
    factor = float(factor)
    out = Tensor(a.data * factor, requires_grad=a.requires_grad, _parents=(a,), op="scale")

    def _backward(g):
        return [(a, g * factor)] if a.requires_grad else []

    out._backward = _backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an m-by-k and a k-by-n tensor."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=_needs_grad(a, b), _parents=(a, b), op="matmul")

    def _backward(g):
        contribs = []
        if a.requires_grad:
            contribs.append((a, g @ b.data.T))
        if b.requires_grad:
            contribs.append((b, a.data.T @ g))
        return contribs

    out._backward = _backward
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), requires_grad=a.requires_grad, _parents=(a,), op="relu")

    def _backward(g):
        return [(a, g * (a.data > 0.0))] if a.requires_grad else []

    out._backward = _backward
    return out


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    n = a.shape[0]
    out = Tensor(a.data.reshape(n, -1), requires_grad=a.requires_grad, _parents=(a,), op="flatten")

    def _backward(g):
        return [(a, g.reshape(a.shape))] if a.requires_grad else []

    out._backward = _backward
    return out


def _conv_out_dim(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _im2col(x, kh, kw, stride, padding):
    """Extract conv patches: returns (cols, padded shape).

    ``cols`` has shape (N*H'*W', C*kh*kw) with patches in row-major
    output order, matching a reshaped kernel matrix.
    """
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # windows: N, C, H', W', kh, kw -> N, H', W', C, kh, kw
    oh, ow = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols), x.shape


def _col2im(dcols, padded_shape, kh, kw, stride, padding, oh, ow):
    """Scatter-add column gradients back to the (unpadded) input."""
    n, c = padded_shape[0], padded_shape[1]
    dx_pad = np.zeros(padded_shape)
    d = dcols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            dx_pad[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += d[:, :, i, j]
    if padding:
        return dx_pad[:, :, padding:-padding, padding:-padding]
    return dx_pad


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of N,C,H,W input with F,C,kh,kw kernels."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input/kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise DimensionError(f"conv2d: input channels {c} != kernel channels {ck}")
    if stride < 1:
        raise ConfigurationError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ConfigurationError(
            f"conv2d: kernel {kh}x{kw} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")
    oh = _conv_out_dim(h, kh, stride, padding)
    ow = _conv_out_dim(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ConfigurationError(f"conv2d: non-positive output dims {oh}x{ow}")

    cols, padded_shape = _im2col(x.data, kh, kw, stride, padding)
    kmat = kernel.data.reshape(f, c * kh * kw)
    out_data = (cols @ kmat.T).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    out = Tensor(out_data, requires_grad=_needs_grad(x, kernel), _parents=(x, kernel), op="conv2d")

    def _backward(g):
        contribs = []
        gmat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, f)
        if kernel.requires_grad:
            contribs.append((kernel, (gmat.T @ cols).reshape(kernel.shape)))
        if x.requires_grad:
            dcols = gmat @ kmat
            contribs.append((x, _col2im(dcols, padded_shape, kh, kw, stride, padding, oh, ow)))
        return contribs

    out._backward = _backward
    return out


def _pool_windows(x, kh, kw, stride):
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ConfigurationError(f"pool: window {kh}x{kw} too large for input {h}x{w}")
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return windows.reshape(n, c, oh, ow, kh * kw), oh, ow


def maxpool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Max pooling; backward routes the gradient to the first (row-major) argmax."""
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d: expected 4-d input, got {x.shape}")
    stride = kernel if stride is None else stride
    windows, oh, ow = _pool_windows(x.data, kernel, kernel, stride)
    argmax = windows.argmax(axis=-1)  # first max wins ties in row-major window order
    out_data = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    out = Tensor(out_data, requires_grad=x.requires_grad, _parents=(x,), op="maxpool2d")

    def _backward(g):
        if not x.requires_grad:
            return []
        n, c, h, w = x.shape
        dx = np.zeros_like(x.data)
        ki, kj = np.divmod(argmax, kernel)
        oi = np.arange(oh)[None, None, :, None] * stride
        oj = np.arange(ow)[None, None, None, :] * stride
        rows = np.broadcast_to(oi + ki, argmax.shape).ravel()
        cols_ = np.broadcast_to(oj + kj, argmax.shape).ravel()
        ni = np.repeat(np.arange(n), c * oh * ow)
        ci = np.tile(np.repeat(np.arange(c), oh * ow), n)
        np.add.at(dx, (ni, ci, rows, cols_), g.ravel())
        return [(x, dx)]

    out._backward = _backward
    return out


def avgpool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Average pooling; backward spreads 1/(k*k) of the gradient over each window."""
    if x.data.ndim != 4:
        raise DimensionError(f"avgpool2d: expected 4-d input, got {x.shape}")
    stride = kernel if stride is None else stride
    windows, oh, ow = _pool_windows(x.data, kernel, kernel, stride)
    out = Tensor(windows.mean(axis=-1), requires_grad=x.requires_grad, _parents=(x,), op="avgpool2d")

    def _backward(g):
        if not x.requires_grad:
            return []
        dx = np.zeros_like(x.data)
        share = g / (kernel * kernel)
        for i in range(kernel):
            for j in range(kernel):
                dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += share
        return [(x, dx)]

    out._backward = _backward
    return out


def global_avgpool(x: Tensor) -> Tensor:
    """Average pool over the full spatial extent (N,C,H,W -> N,C)."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_avgpool: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)), requires_grad=x.requires_grad,
                 _parents=(x,), op="global_avgpool")

    def _backward(g):
        if not x.requires_grad:
            return []
        return [(x, np.broadcast_to(g[:, :, None, None], x.shape) / (h * w))]

    out._backward = _backward
    return out


def log_softmax(scores: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax with max subtraction (plain array helper)."""
    shifted = scores - scores.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax probabilities (plain array helper)."""
    return np.exp(log_softmax(scores))


def softmax_cross_entropy(scores: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    labels = np.asarray(labels)
    n, k = scores.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch size {n}")
    bad = (labels < 0) | (labels >= k)
    if bad.any():
        idx = int(np.argmax(bad))
        raise DataError(f"label {labels[idx]} out of range [0, {k}) at sample {idx}")
    logp = log_softmax(scores.data)
    loss = -logp[np.arange(n), labels].sum() / n
    out = Tensor(loss, requires_grad=scores.requires_grad, _parents=(scores,), op="softmax_xent")

    def _backward(g):
        if not scores.requires_grad:
            return []
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return [(scores, grad * (float(g) / n))]

    out._backward = _backward
    return out


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean, running_var,
                momentum: float, eps: float, training: bool, update_stats: bool = True) -> Tensor:
    """Per-channel batch normalization over an N,C,H,W tensor.

    Training mode normalizes by batch statistics (biased variance) and,
    when ``update_stats``, folds them into the running estimates in place.
    Eval mode depends only on the running statistics.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm2d: expected 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm2d: affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    axes = (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = Tensor(out_data, requires_grad=_needs_grad(x, gamma, beta),
                 _parents=(x, gamma, beta), op="batchnorm2d")

    def _backward(g):
        contribs = []
        if gamma.requires_grad:
            contribs.append((gamma, (g * xhat).sum(axis=axes)))
        if beta.requires_grad:
            contribs.append((beta, g.sum(axis=axes)))
        if x.requires_grad:
            gi = gamma.data[None, :, None, None] * inv_std[None, :, None, None]
            if training:
                m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
                g_sum = g.sum(axis=axes)[None, :, None, None]
                gx_sum = (g * xhat).sum(axis=axes)[None, :, None, None]
                contribs.append((x, gi * (g - g_sum / m - xhat * gx_sum / m)))
            else:
                contribs.append((x, gi * g))
        return contribs

    out._backward = _backward
    return out
