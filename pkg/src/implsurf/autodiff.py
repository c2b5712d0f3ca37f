"""Minimal reverse-mode autodiff over numpy arrays.

Provides exactly the operators the occupancy model needs: 3x3x3
convolution, batch norm, 2x max pooling, pointwise (1x1) layers, trilinear
grid sampling, the two classification losses, and Adam. Graphs are built
define-by-run; ``backward`` walks a topologically ordered tape once.

Training runs in float32; gradient checks build the same graphs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InvalidArgument

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """An ndarray with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def needs_grad(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _result(data, parents, backward) -> Tensor:
    """Wrap an op output, recording the graph only when grads are on."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.needs_grad() for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


@dataclass
class Tape:
    """Topologically ordered node list ending at the root tensor."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every tracked tensor."""
    if loss.size != 1:
        raise InvalidArgument(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise InvalidArgument("backward called twice on the same graph without reset")
    loss._consumed = True
    tape = Tape.from_root(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)

    def back(g):
        if x.needs_grad():
            x.accumulate(g * (x.data > 0))

    return _result(y, (x,), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise InvalidArgument(f"add shape mismatch: {a.shape} vs {b.shape}")

    def back(g):
        if a.needs_grad():
            a.accumulate(g)
        if b.needs_grad():
            b.accumulate(g)

    return _result(a.data + b.data, (a, b), back)


def scale(x: Tensor, s: float) -> Tensor:
    def back(g):
        if x.needs_grad():
            x.accumulate(g * s)

    return _result(x.data * s, (x,), back)


def concat_channels(parts: list[Tensor]) -> Tensor:
    """Concatenate (N, C_i, ...) tensors along axis 1."""
    data = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.shape[1] for p in parts]

    def back(g):
        start = 0
        for p, c in zip(parts, sizes):
            if p.needs_grad():
                p.accumulate(g[:, start:start + c])
            start += c

    return _result(data, tuple(parts), back)


# ---------------------------------------------------------------------------
# network layers
# ---------------------------------------------------------------------------

def conv3d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3x3 cross-correlation, stride 1, zero padding 1.

    x (N,C,D,H,W), w (K,C,3,3,3), b (K) -> (N,K,D,H,W).
    """
    if x.data.ndim != 5 or w.data.ndim != 5 or w.shape[2:] != (3, 3, 3):
        raise InvalidArgument(f"conv3d expects x (N,C,D,H,W) and w (K,C,3,3,3), got {x.shape}, {w.shape}")
    if w.shape[1] != x.shape[1] or b.shape != (w.shape[0],):
        raise InvalidArgument(f"conv3d channel mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    y = kernels.conv3d_forward(x.data, w.data, b.data)

    def back(g):
        g = np.ascontiguousarray(g)
        if x.needs_grad():
            # correlation with the flipped, transposed kernel
            wt = np.ascontiguousarray(w.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            zeros = np.zeros(x.shape[1], dtype=x.data.dtype)
            x.accumulate(kernels.conv3d_forward(g, wt, zeros))
        if w.needs_grad():
            w.accumulate(kernels.conv3d_grad_weight(x.data, g))
        if b.needs_grad():
            b.accumulate(g.sum(axis=(0, 2, 3, 4)))

    return _result(y, (x, w, b), back)


@dataclass
class BNState:
    """Per-layer running statistics (not part of the autodiff graph)."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def initial(cls, channels: int, dtype=np.float32) -> "BNState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def copy(self) -> "BNState":
        return BNState(self.mean.copy(), self.var.copy())


def batchnorm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BNState,
    mode: str,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over batch and spatial axes.

    Train mode normalizes with batch statistics (population variance) and
    updates ``state`` in place; eval mode uses the running statistics.
    """
    if mode not in ("train", "eval"):
        raise InvalidArgument(f"mode must be 'train' or 'eval', got {mode!r}")
    N, C, D, H, W = x.shape
    axes = (0, 2, 3, 4)
    m = N * D * H * W
    if mode == "train":
        if m < 2:
            raise InvalidArgument("batchnorm train mode needs at least 2 samples per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.mean[:] = (1 - momentum) * state.mean + momentum * mu
        state.var[:] = (1 - momentum) * state.var + momentum * var
    else:
        mu = state.mean.astype(x.dtype)
        var = state.var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    bshape = (1, C, 1, 1, 1)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    y = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def back(g):
        if gamma.needs_grad():
            gamma.accumulate((g * xhat).sum(axis=axes))
        if beta.needs_grad():
            beta.accumulate(g.sum(axis=axes))
        if x.needs_grad():
            scale_ = (gamma.data * inv).reshape(bshape)
            if mode == "train":
                gsum = g.sum(axis=axes).reshape(bshape)
                gxhat = (g * xhat).sum(axis=axes).reshape(bshape)
                x.accumulate(scale_ * (g - gsum / m - xhat * gxhat / m))
            else:
                x.accumulate(scale_ * g)

    return _result(y, (x, gamma, beta), back)


def maxpool3d(x: Tensor) -> Tensor:
    """2x2x2 max pooling, stride 2; gradient routes to the first max."""
    N, C, D, H, W = x.shape
    if D % 2 or H % 2 or W % 2:
        raise InvalidArgument(f"maxpool3d requires even spatial dims, got {(D, H, W)}")
    D2, H2, W2 = D // 2, H // 2, W // 2
    windows = (
        x.data.reshape(N, C, D2, 2, H2, 2, W2, 2)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(N, C, D2, H2, W2, 8)
    )
    arg = windows.argmax(axis=-1)  # first index on ties = lowest flat index
    y = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def back(g):
        if x.needs_grad():
            gw = np.zeros_like(windows)
            np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
            gx = (
                gw.reshape(N, C, D2, H2, W2, 2, 2, 2)
                .transpose(0, 1, 2, 5, 3, 6, 4, 7)
                .reshape(N, C, D, H, W)
            )
            x.accumulate(gx)

    return _result(y, (x,), back)


def pointwise_layer(x: Tensor, w: Tensor, b: Tensor, activation: str = "none") -> Tensor:
    """Shared per-point affine map (1x1 convolution over the point axis).

    x (N,F,P), w (G,F), b (G) -> (N,G,P), optionally ReLU-activated.
    """
    if activation not in ("relu", "none"):
        raise InvalidArgument(f"unknown activation {activation!r}")
    if x.data.ndim != 3 or w.data.ndim != 2 or w.shape[1] != x.shape[1] or b.shape != (w.shape[0],):
        raise InvalidArgument(f"pointwise shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    z = np.matmul(w.data, x.data) + b.data[None, :, None]
    y = np.maximum(z, 0) if activation == "relu" else z

    def back(g):
        gz = g * (z > 0) if activation == "relu" else g
        if x.needs_grad():
            x.accumulate(np.matmul(w.data.T, gz))
        if w.needs_grad():
            w.accumulate(np.einsum("ngp,nfp->gf", gz, x.data))
        if b.needs_grad():
            b.accumulate(gz.sum(axis=(0, 2)))

    return _result(y, (x, w, b), back)


def trilinear_sample(grid: Tensor, points: np.ndarray) -> Tensor:
    """Sample (N,C,D,H,W) feature grids at (N,P,3) normalized points.

    Voxel-center convention with clamp-to-edge borders; differentiable with
    respect to the grid values only (query points are never optimized).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 3 or pts.shape[0] != grid.shape[0] or pts.shape[2] != 3:
        raise InvalidArgument(f"points must be (N,P,3) matching grid batch, got {pts.shape}")
    if not np.isfinite(pts).all():
        raise InvalidArgument("query points must be finite")
    N, C = grid.shape[0], grid.shape[1]
    out = np.empty((N, C, pts.shape[1]), dtype=grid.dtype)
    for n in range(N):
        out[n] = kernels.trilinear_gather(grid.data[n], pts[n])

    def back(g):
        if grid.needs_grad():
            gg = np.zeros_like(grid.data)
            for n in range(N):
                kernels.trilinear_scatter_add(gg[n], pts[n], np.ascontiguousarray(g[n]))
            grid.accumulate(gg)

    return _result(out, (grid,), back)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on logits, in the stable log-sum-exp form."""
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    y = y.astype(logits.dtype)
    if y.shape != logits.shape:
        raise InvalidArgument(f"bce shape mismatch: {logits.shape} vs {y.shape}")
    x = logits.data
    per = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    loss = per.mean(dtype=np.float64).astype(logits.dtype)

    def back(g):
        if logits.needs_grad():
            sig = 1.0 / (1.0 + np.exp(-x))
            logits.accumulate((sig - y) * (g / x.size))

    return _result(np.asarray(loss), (logits,), back)


def cross_entropy(logits: Tensor, class_ids: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; logits (N, C, P), class ids (N, P)."""
    ids = np.asarray(class_ids)
    x = logits.data
    if x.ndim != 3 or ids.shape != (x.shape[0], x.shape[2]):
        raise InvalidArgument(f"cross_entropy expects logits (N,C,P) and ids (N,P), got {x.shape}, {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[1]):
        raise InvalidArgument(f"class id out of range [0, {x.shape[1]})")
    m = x.max(axis=1, keepdims=True)
    ex = np.exp(x - m)
    lse = m[:, 0, :] + np.log(ex.sum(axis=1))
    picked = np.take_along_axis(x, ids[:, None, :], axis=1)[:, 0, :]
    count = ids.size
    loss = (lse - picked).sum(dtype=np.float64) / count

    def back(g):
        if logits.needs_grad():
            soft = ex / ex.sum(axis=1, keepdims=True)
            onehot = np.zeros_like(soft)
            np.put_along_axis(onehot, ids[:, None, :], 1.0, axis=1)
            logits.accumulate((soft - onehot) * (g / count))

    return _result(np.asarray(loss, dtype=x.dtype), (logits,), back)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment buffers aligned with a fixed parameter order."""

    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def initial(cls, params: list[Tensor]) -> "AdamState":
        return cls(
            0,
            [np.zeros_like(p.data) for p in params],
            [np.zeros_like(p.data) for p in params],
        )


def adam_step(
    params: list[Tensor],
    state: AdamState,
    lr: float = 1e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One bias-corrected Adam update; weight decay is an additive L2 term."""
    if len(state.m) != len(params):
        raise InvalidArgument("optimizer state does not match parameter list")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if weight_decay:
            g = g + weight_decay * p.data
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray, axis: int) -> np.ndarray:
    ex = np.exp(x - x.max(axis=axis, keepdims=True))
    return ex / ex.sum(axis=axis, keepdims=True)
