# tensor_ops.py
"""
Numerical substrate: dense float tensors (numpy arrays, N x C x H x W layout), the
layer kernels the network composes, and their vector-Jacobian products.

Every differentiable kernel is written as a forward function returning
``(output, vjp)`` where ``vjp(upstream)`` returns one gradient per positional
argument (``None`` for arguments without a gradient). The ``kernel`` decorator
records calls whose inputs are tracked ``Node`` objects so that ``Node.backward``
can replay them in reverse. Keyword arguments are static configuration and never
receive gradients.
"""
import functools
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import NumericError, ShapeError

Tensor = np.ndarray
GELU_COEF = 0.7978845608  # sqrt(2 / pi)
GELU_CUBIC = 0.044715
BN_EPS = 1e-5
PADDING_MODES = ("zero", "replicate")


# --------------------------------------------------------------------
# Recording
# --------------------------------------------------------------------
class Node:
    """A tensor value plus the information needed to push gradients to its inputs."""
    __slots__ = ("value", "grad", "name", "requires_grad", "_parents", "_vjp")

    def __init__(self, value, parents: Tuple["Node", ...] = (), vjp: Optional[Callable] = None,
                 name: Optional[str] = None, requires_grad: Optional[bool] = None):
        self.value = value
        self.grad = None
        self.name = name
        self._parents = parents
        self._vjp = vjp
        self.requires_grad = bool(parents) if requires_grad is None else requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Node{label}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def backward(self, upstream: Optional[Tensor] = None):
        if not self.requires_grad:
            return
        if upstream is None:
            upstream = np.ones_like(self.value)
        self.grad = np.asarray(upstream, dtype=self.value.dtype)
        for node in reversed(_topological_order(self)):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def _topological_order(root: Node):
    order, visited = [], set()
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
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def parameter(value, name: Optional[str] = None) -> Node:
    return Node(np.asarray(value), name=name, requires_grad=True)


def constant(value) -> Node:
    return Node(np.asarray(value), requires_grad=False)


def stop_gradient(x: Union[Node, Tensor]) -> Node:
    return Node(value_of(x), requires_grad=False)


def value_of(x):
    return x.value if isinstance(x, Node) else x


def check_finite(out: Tensor, op_name: str):
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op_name} produced non-finite values")


def kernel(fn):
    """Record ``fn`` on the graph whenever one of its positional inputs is tracked."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        values = [a.value if isinstance(a, Node) else a for a in args]
        out, vjp = fn(*values, **kwargs)
        check_finite(out, fn.__name__)
        tracked = [i for i, a in enumerate(args) if isinstance(a, Node) and a.requires_grad]
        if not tracked:
            return Node(out, requires_grad=False) if any(isinstance(a, Node) for a in args) else out
        parents = tuple(args[i] for i in tracked)

        def node_vjp(g):
            grads = vjp(g)
            return [grads[i] for i in tracked]

        return Node(out, parents, node_vjp)

    wrapper.raw = fn
    return wrapper


@dataclass
class GradientPair:
    value: Tensor
    grads: Dict[str, Tensor] = field(default_factory=dict)


def gradient_of(kernel_op: Callable, inputs: Mapping[str, Tensor], upstream: Optional[Tensor] = None,
                **static) -> GradientPair:
    """Analytic vector-Jacobian product of ``kernel_op`` w.r.t. each named input.

    Inputs reached only through stop-gradient steps get an all-zero gradient.
    """
    nodes = {name: parameter(np.asarray(v), name) for name, v in inputs.items()}
    out = kernel_op(*nodes.values(), **static)
    if not isinstance(out, Node):
        out = constant(out)
    out.backward(upstream)
    grads = {name: (n.grad if n.grad is not None else np.zeros_like(n.value)) for name, n in nodes.items()}
    return GradientPair(out.value, grads)


def _unbroadcast(g: Tensor, shape) -> Tensor:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------
# Elementwise and structural kernels
# --------------------------------------------------------------------
@kernel
def add(a, b):
    a_shape, b_shape = np.shape(a), np.shape(b)
    return a + b, lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape))


@kernel
def mul(a, b):
    def vjp(g):
        return _unbroadcast(g * b, np.shape(a)), _unbroadcast(g * a, np.shape(b))
    return a * b, vjp


@kernel
def reshape(x, *, shape):
    return x.reshape(shape), lambda g: (g.reshape(x.shape),)


@kernel
def transpose(x, *, axes):
    inverse = np.argsort(axes)
    return x.transpose(axes), lambda g: (g.transpose(inverse),)


@kernel
def broadcast_to(x, *, shape):
    return np.broadcast_to(x, shape).copy(), lambda g: (_unbroadcast(g, x.shape),)


@kernel
def mean(x, *, axis, keepdims=False):
    out = x.mean(axis=axis, keepdims=keepdims)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % x.ndim for a in axes)
    count = int(np.prod([x.shape[a] for a in axes]))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape) / count,)
    return out, vjp


@kernel
def concat(*xs, axis=0):
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))
    return np.concatenate(xs, axis=axis), vjp


@kernel
def take(x, *, index, axis=0):
    """Gather ``x`` along ``axis`` at integer ``index`` (repeats allowed)."""
    index = np.asarray(index, dtype=np.int64)

    def vjp(g):
        gx = np.zeros_like(x)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (gx,)
    return np.take(x, index, axis=axis), vjp


@kernel
def linear(x, w, b=None):
    """``x @ w.T + b`` over the last axis of ``x``."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} does not match weight {w.shape}")
    out = x @ w.T
    if b is not None:
        out = out + b

    def vjp(g):
        g2 = g.reshape(-1, w.shape[0])
        gw = g2.T @ x.reshape(-1, w.shape[1])
        gb = g2.sum(axis=0) if b is not None else None
        return g @ w, gw, gb
    return out, vjp


@kernel
def grouped_linear(x, w):
    """Per-group projection: x [B, K, L, I], w [K, O, I] -> [B, K, L, O]."""
    if x.ndim != 4 or w.ndim != 3 or x.shape[1] != w.shape[0] or x.shape[3] != w.shape[2]:
        raise ShapeError(f"grouped_linear: incompatible shapes {x.shape} and {w.shape}")
    out = np.einsum("bkli,koi->bklo", x, w, optimize=True)

    def vjp(g):
        return (np.einsum("bklo,koi->bkli", g, w, optimize=True),
                np.einsum("bklo,bkli->koi", g, x, optimize=True))
    return out, vjp


# --------------------------------------------------------------------
# Activations
# --------------------------------------------------------------------
@kernel
def relu(x):
    mask = x > 0
    return x * mask, lambda g: (g * mask,)


@kernel
def gelu(x):
    """Tanh approximation: 0.5 x (1 + tanh(0.7978845608 (x + 0.044715 x^3)))."""
    t = np.tanh(GELU_COEF * (x + GELU_CUBIC * x ** 3))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dt = (1.0 - t * t) * GELU_COEF * (1.0 + 3.0 * GELU_CUBIC * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)
    return out, vjp


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


@kernel
def sigmoid(x):
    s = _sigmoid(x)
    return s, lambda g: (g * s * (1.0 - s),)


# --------------------------------------------------------------------
# Convolution and normalization
# --------------------------------------------------------------------
def _pad(x, p, mode):
    if p == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    if mode == "zero":
        return np.pad(x, widths)
    return np.pad(x, widths, mode="edge")


def _fold_edges(g, p, axis):
    g = np.moveaxis(g, axis, -1)
    core = g[..., p:-p].copy()
    core[..., 0] += g[..., :p].sum(axis=-1)
    core[..., -1] += g[..., -p:].sum(axis=-1)
    return np.moveaxis(core, -1, axis)


def unpad_gradient(gp, p, mode):
    """Gradient w.r.t. the unpadded tensor given the gradient w.r.t. its padded copy."""
    if p == 0:
        return gp
    if mode == "zero":
        return gp[..., p:-p, p:-p]
    return _fold_edges(_fold_edges(gp, p, gp.ndim - 2), p, gp.ndim - 1)


def pad(x, p: int, mode: str = "zero"):
    if mode not in PADDING_MODES:
        raise ShapeError(f"unknown padding mode {mode!r}")
    return _pad(x, p, mode)


@kernel
def conv2d(x, w, b=None, *, stride=1, padding="zero", pad_width=None):
    """Cross-correlation of x [N, C_in, H, W] with w [C_out, C_in, k, k].

    Output size floor((H + 2 pad - k) / stride) + 1, pad defaulting to k // 2.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    k = w.shape[2]
    if w.shape[3] != k or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {w.shape[2:]}")
    if padding not in PADDING_MODES:
        raise ShapeError(f"unknown padding mode {padding!r}")
    p = k // 2 if pad_width is None else pad_width
    xp = _pad(x, p, padding)
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("nchwij,ocij->nohw", cols, w, optimize=True)
    if b is not None:
        out = out + b[None, :, None, None]

    def vjp(g):
        gw = np.einsum("nohw,nchwij->ocij", g, cols, optimize=True)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        ho, wo = g.shape[2], g.shape[3]
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.einsum(
                    "nohw,oc->nchw", g, w[:, :, i, j], optimize=True)
        return unpad_gradient(gxp, p, padding), gw, gb
    return out, vjp


@dataclass
class RunningStats:
    mean: Tensor
    var: Tensor
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


@kernel
def batch_norm(x, gamma, beta, *, stats: Optional[RunningStats] = None, training: bool = True,
               eps: float = BN_EPS):
    """Per-channel normalization of x [N, C, H, W].

    Training mode uses batch statistics and, when ``stats`` is given, folds them into
    the running estimates; eval mode reads the running estimates only.
    """
    if x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batch_norm: {x.shape[1]} channels but gamma has {gamma.shape[0]}")
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        if stats is not None:
            count = x.size // x.shape[1]
            unbiased = var * count / max(count - 1, 1)
            m = stats.momentum
            stats.mean = ((1 - m) * stats.mean + m * mu).astype(stats.mean.dtype)
            stats.var = ((1 - m) * stats.var + m * unbiased).astype(stats.var.dtype)
    else:
        if stats is None:
            raise ShapeError("batch_norm in eval mode needs running statistics")
        mu, var = stats.mean.astype(x.dtype), stats.var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)

    def vjp(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.reshape(shape)
        if not training:
            return gxhat * inv_std.reshape(shape), ggamma, gbeta
        count = x.size // x.shape[1]
        gx = (inv_std.reshape(shape) / count) * (
            count * gxhat
            - gxhat.sum(axis=axes, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, ggamma, gbeta
    return out, vjp


@kernel
def layer_norm(x, gamma, beta, *, eps: float = BN_EPS):
    """Normalization over the channel axis of x [N, C, H, W], per pixel."""
    shape = (1, -1, 1, 1)
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)

    def vjp(g):
        gxhat = g * gamma.reshape(shape)
        gx = inv_std * (gxhat - gxhat.mean(axis=1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    return out, vjp


# --------------------------------------------------------------------
# Bilinear resampling
# --------------------------------------------------------------------
RESIZE_MODES = ("half_pixel", "asymmetric")


def interp_matrix(n_in: int, n_out: int, dtype=np.float32, mode: str = "half_pixel") -> Tensor:
    """Row i holds the weights of output sample i, source coordinate clamped to the input.

    ``half_pixel`` is align-corners=false: (i + 0.5) * scale - 0.5. ``asymmetric`` maps
    output i to i * scale, so input cell k sits at output k / scale, matching the grid
    a zero-padded stride-s convolution samples.
    """
    if mode not in RESIZE_MODES:
        raise ShapeError(f"unknown resize mode {mode!r}")
    scale = n_in / n_out
    offset = 0.5 if mode == "half_pixel" else 0.0
    src = np.clip((np.arange(n_out) + offset) * scale - offset, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    np.add.at(mat, (np.arange(n_out), i0), 1.0 - w1)
    np.add.at(mat, (np.arange(n_out), i1), w1)
    return mat.astype(dtype)


@kernel
def bilinear_upsample(x, *, out_h: int, out_w: int, mode: str = "half_pixel"):
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear_upsample: output size must be >= 1")
    ry = interp_matrix(x.shape[-2], out_h, x.dtype, mode)
    rx = interp_matrix(x.shape[-1], out_w, x.dtype, mode)
    out = np.einsum("yh,...hw,xw->...yx", ry, x, rx, optimize=True)
    return out, lambda g: (np.einsum("yh,...yx,xw->...hw", ry, g, rx, optimize=True),)


def bilinear_corners(points, h: int, w: int):
    """Corner indices and weights for continuous (x, y) points clamped to the grid box."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x = np.clip(points[:, 0], 0, w - 1)
    y = np.clip(points[:, 1], 0, h - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx, wy = x - x0, y - y0
    corners = ((y0, x0), (y0, x1), (y1, x0), (y1, x1))
    weights = ((1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy)
    return corners, weights


@kernel
def sample_points(feature, *, points, batch_index=None):
    """Bilinear samples of feature [N, C, H, W] at (x, y) points -> [P, C].

    Point ``p`` reads image ``batch_index[p]`` (all zeros when omitted). Positions are
    static: no gradient flows to them.
    """
    n, c, h, w = feature.shape
    corners, weights = bilinear_corners(points, h, w)
    b = np.zeros(len(weights[0]), dtype=np.int64) if batch_index is None else np.asarray(batch_index, np.int64)
    ft = feature.transpose(0, 2, 3, 1)
    out = np.zeros((len(b), c), dtype=feature.dtype)
    for (yy, xx), wt in zip(corners, weights):
        out += ft[b, yy, xx] * wt[:, None].astype(feature.dtype)

    def vjp(g):
        gt = np.zeros_like(ft)
        for (yy, xx), wt in zip(corners, weights):
            np.add.at(gt, (b, yy, xx), g * wt[:, None].astype(feature.dtype))
        return (gt.transpose(0, 3, 1, 2),)
    return out, vjp


def bilinear_sample(feature, p):
    """Interp(F, p) for a single point on feature [C, H, W] -> [C]."""
    if isinstance(feature, Node):
        batch = reshape(feature, shape=(1,) + feature.shape)
    else:
        batch = np.asarray(feature)[None]
    out = sample_points(batch, points=np.asarray(p, dtype=np.float64).reshape(1, 2))
    return reshape(out, shape=(out.shape[-1],)) if isinstance(out, Node) else out[0]


def sample_grid_field(field: Tensor, points: Sequence) -> Tensor:
    """Non-differentiable bilinear read of a [K, H, W] field at (x, y) points -> [P, K]."""
    return sample_points.raw(np.asarray(field)[None], points=points)[0]


# --------------------------------------------------------------------
# Conv + batch-norm layer
# --------------------------------------------------------------------
@dataclass
class ConvBN:
    w: Node  # [C_out, C_in, k, k]
    gamma: Node
    beta: Node
    stats: RunningStats
    b: Optional[Node] = None

    @classmethod
    def from_store(cls, store: Mapping[str, Node], stats: Mapping[str, RunningStats], prefix: str) -> "ConvBN":
        return cls(store[f"{prefix}.w"], store[f"{prefix}.gamma"], store[f"{prefix}.beta"],
                   stats[prefix], store.get(f"{prefix}.b"))


def conv_bn(x, layer: ConvBN, *, training: bool, stride: int = 1, padding: str = "zero"):
    h = conv2d(x, layer.w, layer.b, stride=stride, padding=padding)
    return batch_norm(h, layer.gamma, layer.beta, stats=layer.stats, training=training)
