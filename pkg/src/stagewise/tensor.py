"""Dense float64 tensor ops with hand-written backward passes.

The layer vocabulary is fixed: dense, same-padded 3x3 and 1x1 convolution,
2x2 max pooling, adaptive average pooling, batch normalization, relu, flatten
and a softmax cross-entropy loss. Forward calls optionally record onto a
GradTape; `backward` replays the tape in reverse and returns exact gradients
for every recorded parameter plus the module input. `grad_check` is the
independent central-difference oracle the test suite and the `gradcheck` CLI
command run against the analytic gradients.

Tensors are plain numpy float64 arrays (row-major); `as_tensor()` is the
validating constructor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateBatchError,
    NonFiniteError,
    ShapeError,
    StateError,
    ValidationError,
)

BN_EPS = 1e-5


def as_tensor(data, shape=None) -> np.ndarray:
    """Build a float64 array, optionally reshaped, rejecting NaN/Inf."""
    arr = np.asarray(data, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    check_finite(arr, "tensor")
    return arr


def check_finite(arr, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains non-finite entries")


@dataclass(eq=False)  # identity hash: gradients are keyed by the object
class LayerParams:
    """Learnable arrays for one layer.

    Dense: weights (in, out), bias (out,). Conv: weights (C_out, C_in, k, k),
    bias (C_out,). Batchnorm: weights=scale (C,), bias=shift (C,) plus running
    statistics updated in training mode.
    """

    weights: np.ndarray
    bias: np.ndarray
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    momentum: float = 0.1

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        return [("weights", self.weights), ("bias", self.bias)]


class GradTape:
    """Ordered record of executed ops; consumed by a single backward pass."""

    def __init__(self):
        self._nodes = []
        self._spent = False

    def record(self, node) -> None:
        if self._spent:
            # a spent tape must not silently keep recording
            raise StateError("tape already consumed by backward; use a fresh GradTape")
        self._nodes.append(node)

    def __len__(self):
        return len(self._nodes)


@dataclass
class BackwardResult:
    input_grad: np.ndarray | None = None
    param_grads: dict = field(default_factory=dict)

    def _add(self, params: LayerParams, name: str, grad: np.ndarray) -> None:
        slot = self.param_grads.setdefault(params, {})
        if name in slot:
            slot[name] = slot[name] + grad
        else:
            slot[name] = grad

    def grad(self, params: LayerParams, name: str) -> np.ndarray:
        return self.param_grads[params][name]


def backward(tape: GradTape, loss_grad=1.0) -> BackwardResult:
    """Reverse-replay the tape; returns input gradient and parameter gradients.

    The tape is consumed: a second call without a fresh forward raises
    StateError.
    """
    if tape._spent:
        raise StateError("backward called twice on the same tape")
    if not tape._nodes:
        raise StateError("backward on an empty tape: no forward was recorded")
    tape._spent = True
    result = BackwardResult()
    g = loss_grad
    for node in reversed(tape._nodes):
        g = node.backward(g, result)
    tape._nodes.clear()
    result.input_grad = g
    return result


# -- op nodes ---------------------------------------------------------------


class _DenseNode:
    __slots__ = ("x", "p")

    def __init__(self, x, p):
        self.x, self.p = x, p

    def backward(self, g, res):
        res._add(self.p, "weights", self.x.T @ g)
        res._add(self.p, "bias", g.sum(axis=0))
        return g @ self.p.weights.T


class _ConvNode:
    __slots__ = ("cols", "p", "ksize", "in_shape")

    def __init__(self, cols, p, ksize, in_shape):
        self.cols, self.p, self.ksize = cols, p, ksize
        self.in_shape = in_shape

    def backward(self, g, res):
        W = self.p.weights
        b, c, h, w = self.in_shape
        o = W.shape[0]
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        res._add(self.p, "bias", gmat.sum(axis=0))
        if self.ksize == 1:
            # cols is the raw input as (B*H*W, C)
            res._add(self.p, "weights", (gmat.T @ self.cols)[:, :, None, None])
            gx = gmat @ W[:, :, 0, 0]
            return gx.reshape(b, h, w, c).transpose(0, 3, 1, 2)
        res._add(self.p, "weights", (gmat.T @ self.cols).reshape(W.shape))
        gcols = (gmat @ W.reshape(o, -1)).reshape(b, h, w, c, 3, 3)
        gxp = np.zeros((b, c, h + 2, w + 2))
        for i in range(3):
            for j in range(3):
                gxp[:, :, i:i + h, j:j + w] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gxp[:, :, 1:1 + h, 1:1 + w]


class _MaxPoolNode:
    __slots__ = ("idx", "shape")

    def __init__(self, idx, shape):
        self.idx, self.shape = idx, shape

    def backward(self, g, res):
        b, c, h, w = self.shape
        buf = np.zeros((b, c, h // 2, w // 2, 4))
        np.put_along_axis(buf, self.idx[..., None], g[..., None], axis=-1)
        return (buf.reshape(b, c, h // 2, w // 2, 2, 2)
                   .transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w))


class _AvgPoolNode:
    __slots__ = ("shape", "hb", "wb")

    def __init__(self, shape, hb, wb):
        self.shape, self.hb, self.wb = shape, hb, wb

    def backward(self, g, res):
        gx = np.zeros(self.shape)
        for i in range(len(self.hb) - 1):
            for j in range(len(self.wb) - 1):
                h0, h1 = self.hb[i], self.hb[i + 1]
                w0, w1 = self.wb[j], self.wb[j + 1]
                gx[:, :, h0:h1, w0:w1] += (g[:, :, i:i + 1, j:j + 1]
                                           / ((h1 - h0) * (w1 - w0)))
        return gx


class _BatchNormNode:
    __slots__ = ("xhat", "inv", "p", "axes", "count", "training")

    def __init__(self, xhat, inv, p, axes, count, training):
        self.xhat, self.inv, self.p = xhat, inv, p
        self.axes, self.count, self.training = axes, count, training

    def backward(self, g, res):
        shape = self.inv.shape  # broadcast shape for per-channel values
        gamma = self.p.weights.reshape(shape)
        res._add(self.p, "weights", (g * self.xhat).sum(axis=self.axes))
        res._add(self.p, "bias", g.sum(axis=self.axes))
        gxhat = g * gamma
        if not self.training:
            return gxhat * self.inv
        n = self.count
        s1 = gxhat.sum(axis=self.axes, keepdims=True)
        s2 = (gxhat * self.xhat).sum(axis=self.axes, keepdims=True)
        return self.inv * (gxhat - s1 / n - self.xhat * s2 / n)


class _ReluNode:
    __slots__ = ("mask",)

    def __init__(self, mask):
        self.mask = mask

    def backward(self, g, res):
        return g * self.mask


class _FlattenNode:
    __slots__ = ("shape",)

    def __init__(self, shape):
        self.shape = shape

    def backward(self, g, res):
        return g.reshape(self.shape)


class _SoftmaxXentNode:
    __slots__ = ("probs", "labels")

    def __init__(self, probs, labels):
        self.probs, self.labels = probs, labels

    def backward(self, g, res):
        b = self.probs.shape[0]
        gz = self.probs.copy()
        gz[np.arange(b), self.labels] -= 1.0
        return gz * (g / b)


# -- forward ops ------------------------------------------------------------


def dense(x, p: LayerParams, tape: GradTape | None = None) -> np.ndarray:
    if x.ndim != 2:
        raise ShapeError(f"dense expects a 2-d batch, got shape {x.shape}")
    if x.shape[1] != p.weights.shape[0]:
        raise ShapeError(
            f"dense: input shape {x.shape} incompatible with weights "
            f"{p.weights.shape}")
    out = x @ p.weights + p.bias
    if tape is not None:
        tape.record(_DenseNode(x, p))
    return out


def _conv_common(x, p, ksize):
    if x.ndim != 4:
        raise ShapeError(f"conv expects (batch, C, H, W), got shape {x.shape}")
    if p.weights.shape[2:] != (ksize, ksize):
        raise ShapeError(
            f"conv{ksize}x{ksize}: kernel shape {p.weights.shape} "
            f"is not {ksize}x{ksize}")
    if x.shape[1] != p.weights.shape[1]:
        raise ShapeError(
            f"conv: input shape {x.shape} has {x.shape[1]} channels, kernel "
            f"{p.weights.shape} expects {p.weights.shape[1]}")


def conv2d_3x3(x, p: LayerParams, tape: GradTape | None = None) -> np.ndarray:
    """Shape-preserving 3x3 cross-correlation (padding 1 on each side).

    Implemented as im2col + matrix multiply; the column matrix is cached on
    the tape and reused by both backward products.
    """
    _conv_common(x, p, 3)
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b * h * w, c * 9)
    o = p.weights.shape[0]
    out = cols @ p.weights.reshape(o, -1).T + p.bias
    out = out.reshape(b, h, w, o).transpose(0, 3, 1, 2)
    if tape is not None:
        tape.record(_ConvNode(cols, p, 3, x.shape))
    return np.ascontiguousarray(out)


def conv2d_1x1(x, p: LayerParams, tape: GradTape | None = None) -> np.ndarray:
    """Pointwise convolution (channel mixing, spatial dims preserved)."""
    _conv_common(x, p, 1)
    b, c, h, w = x.shape
    cols = np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(-1, c)
    out = cols @ p.weights[:, :, 0, 0].T + p.bias
    out = out.reshape(b, h, w, -1).transpose(0, 3, 1, 2)
    if tape is not None:
        tape.record(_ConvNode(cols, p, 1, x.shape))
    return np.ascontiguousarray(out)


def maxpool2x2(x, tape: GradTape | None = None) -> np.ndarray:
    """2x2 max pooling; backward routes the gradient to the first argmax in
    row-major window order."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2x2 expects (batch, C, H, W), got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    win4 = (x.reshape(b, c, h // 2, 2, w // 2, 2)
             .transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4))
    idx = win4.argmax(axis=-1)
    out = np.take_along_axis(win4, idx[..., None], axis=-1)[..., 0]
    if tape is not None:
        tape.record(_MaxPoolNode(idx, x.shape))
    return out


def _pool_bounds(size: int, target: int) -> list[int]:
    # contiguous, covering windows of size ceil/floor(size/target)
    return [(i * size) // target for i in range(target + 1)]


def avgpool_to(x, target_h: int, target_w: int,
               tape: GradTape | None = None, strict: bool = False) -> np.ndarray:
    """Average pooling to a fixed output resolution.

    Divisible inputs use exact uniform windows; otherwise adaptive ceil/floor
    windows partition each axis (rejected instead when strict=True).
    """
    if x.ndim != 4:
        raise ShapeError(f"avgpool_to expects (batch, C, H, W), got {x.shape}")
    b, c, h, w = x.shape
    if target_h < 1 or target_w < 1 or target_h > h or target_w > w:
        raise ShapeError(
            f"avgpool_to: target {target_h}x{target_w} invalid for input {h}x{w}")
    if strict and (h % target_h or w % target_w):
        raise ShapeError(
            f"avgpool_to strict mode: {h}x{w} not divisible by "
            f"{target_h}x{target_w}")
    hb = _pool_bounds(h, target_h)
    wb = _pool_bounds(w, target_w)
    if h % target_h == 0 and w % target_w == 0:
        kh, kw = h // target_h, w // target_w
        out = x.reshape(b, c, target_h, kh, target_w, kw).mean(axis=(3, 5))
    else:
        out = np.empty((b, c, target_h, target_w))
        for i in range(target_h):
            for j in range(target_w):
                out[:, :, i, j] = x[:, :, hb[i]:hb[i + 1],
                                    wb[j]:wb[j + 1]].mean(axis=(2, 3))
    if tape is not None:
        tape.record(_AvgPoolNode(x.shape, hb, wb))
    return out


def batchnorm(x, p: LayerParams, training: bool,
              tape: GradTape | None = None, update_stats: bool | None = None) -> np.ndarray:
    """Per-channel standardization with affine scale/shift.

    Training mode normalizes by batch statistics and (unless update_stats is
    False) folds them into the running estimates; eval mode uses the running
    statistics.
    """
    if x.ndim == 4:
        axes, shape = (0, 2, 3), (1, -1, 1, 1)
    elif x.ndim == 2:
        axes, shape = (0,), (1, -1)
    else:
        raise ShapeError(f"batchnorm expects 2-d or 4-d input, got {x.shape}")
    channels = x.shape[1]
    if p.weights.shape != (channels,):
        raise ShapeError(
            f"batchnorm: input shape {x.shape} has {channels} channels, "
            f"scale has shape {p.weights.shape}")
    if update_stats is None:
        update_stats = training
    gamma = p.weights.reshape(shape)
    beta = p.bias.reshape(shape)
    if training:
        if x.shape[0] < 2:
            raise DegenerateBatchError(
                f"batchnorm training needs batch >= 2, got {x.shape[0]}")
        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        if update_stats:
            m = p.momentum
            p.running_mean *= 1.0 - m
            p.running_mean += m * mean.reshape(-1)
            p.running_var *= 1.0 - m
            p.running_var += m * var.reshape(-1)
    else:
        mean = p.running_mean.reshape(shape)
        var = p.running_var.reshape(shape)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv
    out = gamma * xhat + beta
    if tape is not None:
        count = x.size // channels
        tape.record(_BatchNormNode(xhat, inv, p, axes, count, training))
    return out


def relu(x, tape: GradTape | None = None) -> np.ndarray:
    out = np.maximum(x, 0.0)
    if tape is not None:
        tape.record(_ReluNode(x > 0))
    return out


def flatten(x, tape: GradTape | None = None) -> np.ndarray:
    out = x.reshape(x.shape[0], -1)
    if tape is not None:
        tape.record(_FlattenNode(x.shape))
    return out


def softmax_xent(logits, labels, tape: GradTape | None = None) -> float:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Stabilized by max-subtraction; backward seeds (softmax - onehot) / batch.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_xent expects (batch, classes) logits, "
                         f"got {logits.shape}")
    labels = np.asarray(labels)
    b, classes = logits.shape
    if labels.shape != (b,):
        raise ShapeError(
            f"softmax_xent: {b} logit rows but labels shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= classes:
        raise ValidationError(
            f"labels must lie in [0, {classes}), got range "
            f"[{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    lse = np.log(ez.sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(b), labels]))
    check_finite(np.asarray(loss), "softmax_xent loss")
    if tape is not None:
        tape.record(_SoftmaxXentNode(probs, labels))
    return loss


# -- finite-difference oracle -----------------------------------------------


def grad_check(forward, x, epsilon: float, params=(), floor: float = 1e-8) -> float:
    """Central-difference check of analytic gradients.

    `forward(x, tape)` must return a scalar loss and be pure in its inputs
    (batchnorm running-stat updates are tolerated: they do not affect the
    training-mode output). Every entry of `x` and of each LayerParams in
    `params` is perturbed by +/-epsilon; returns the worst relative error
    against the tape gradients, with an absolute floor in the denominator.
    Directions with an exactly-zero true gradient (e.g. a conv bias feeding
    batchnorm) need a floor above the FD roundoff noise of ~|loss|*1e-11.
    """
    if epsilon <= 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    tape = GradTape()
    forward(x, tape)
    res = backward(tape)
    checks = [(x, res.input_grad)]
    for p in params:
        for name, arr in p.arrays():
            checks.append((arr, res.grad(p, name)))
    worst = 0.0
    for arr, analytic in checks:
        flat = arr.ravel()
        an = np.asarray(analytic).ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = forward(x, None)
            flat[i] = orig - epsilon
            fm = forward(x, None)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * epsilon)
            err = abs(fd - an[i]) / max(abs(fd), abs(an[i]), floor)
            if err > worst:
                worst = err
    return worst
