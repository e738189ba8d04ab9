"""Dense float32 tensor math with hand-written backward rules.

Everything in this package runs on plain numpy arrays in 32-bit floats.
The helpers here are the only place forward/backward arithmetic for the
weighted ops lives; the layer graph in :mod:`spikequant.model` and the
fine-tuning proxy both call into them so the two paths cannot drift.

Determinism matters more than speed: the conversion oracle compares two
pipelines down to quantizer-level decisions, so every op uses a fixed
accumulation order (numpy reductions / BLAS on fixed-shape buffers) and
re-running an op on identical inputs yields bit-identical output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

REAL = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(FloatingPointError):
    """A buffer that must stay finite picked up a NaN or infinity."""


def as_real(x) -> np.ndarray:
    """Return ``x`` as a contiguous float32 array (no copy if already one)."""
    return np.ascontiguousarray(x, dtype=REAL)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


def rng_for(seed: int) -> np.random.Generator:
    """Single entry point for randomness so runs are reproducible by seed."""
    return np.random.default_rng(seed)


def he_normal(gen: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Fan-in scaled normal init, std = sqrt(2 / fan_in)."""
    return as_real(gen.normal(0.0, float(np.sqrt(2.0 / fan_in)), size=shape))


# ---------------------------------------------------------------------------
# fully connected


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Standard matrix product of two rank-2 float32 arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    return np.matmul(as_real(a), as_real(b))


def fc_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """y = x @ W^T + b with x (N, in), W (out, in), b (out,)."""
    y = matmul(x, as_real(weight).T)
    return (y + as_real(bias)).astype(REAL, copy=False)

def fc_backward(x, weight, grad_out):
    """Returns (grad_x, grad_w, grad_b) for fc_forward."""
    grad_w = matmul(as_real(grad_out).T, as_real(x))
    grad_b = as_real(grad_out).sum(axis=0, dtype=REAL)
    grad_x = matmul(grad_out, weight)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# 2-d convolution (cross-correlation, no kernel flip)


def conv_out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - kernel
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"conv output size ({size} + 2*{pad} - {kernel}) / {stride} + 1 "
            "is not a positive integer"
        )
    return span // stride + 1


def _windows(x_padded: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, OH, OW, kh, kw) view, no copy
    win = sliding_window_view(x_padded, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: np.ndarray, weight: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlate x (C,H,W) or (N,C,H,W) with kernels (O,C,kh,kw).

    Output spatial size is (H + 2*pad - kh) / stride + 1 and must come out
    a positive integer, otherwise a ShapeError is raised.
    """
    x = as_real(x)
    weight = as_real(weight)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects (N,C,H,W) x (O,C,kh,kw), got {x.shape} x {weight.shape}")
    n, c, h, w = x.shape
    o, cin, kh, kw = weight.shape
    if cin != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {cin}")
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _windows(xp, kh, kw, stride)
    y = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3]))  # (N, OH, OW, O)
    y = np.ascontiguousarray(np.moveaxis(y, 3, 1), dtype=REAL)
    assert y.shape == (n, o, oh, ow)
    return y[0] if single else y


def conv2d_backward(x, weight, grad_out, stride: int = 1, pad: int = 0):
    """Returns (grad_x, grad_w) for conv2d; grad_b is grad_out summed over N,H,W."""
    x = as_real(x)
    weight = as_real(weight)
    grad_out = as_real(grad_out)
    single = x.ndim == 3
    if single:
        x = x[None]
        grad_out = grad_out[None]
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    _, _, oh, ow = grad_out.shape

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _windows(xp, kh, kw, stride)
    grad_w = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))  # (O,C,kh,kw)
    grad_w = np.ascontiguousarray(grad_w, dtype=REAL)

    # scatter-add one kernel offset at a time; 9 iterations for a 3x3 kernel
    grad_xp = np.zeros_like(xp)
    for a in range(kh):
        for b in range(kw):
            contrib = np.tensordot(grad_out, weight[:, :, a, b], axes=([1], [0]))
            contrib = np.moveaxis(contrib, 3, 1)  # (N, C, OH, OW)
            grad_xp[:, :, a : a + oh * stride : stride, b : b + ow * stride : stride] += contrib
    grad_x = grad_xp[:, :, pad : pad + h, pad : pad + w] if pad else grad_xp
    grad_x = np.ascontiguousarray(grad_x, dtype=REAL)
    if single:
        return grad_x[0], grad_w
    return grad_x, grad_w


# ---------------------------------------------------------------------------
# average pooling (window == stride, no padding)


def avgpool2d(x: np.ndarray, size: int) -> np.ndarray:
    x = as_real(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"avgpool window {size} does not divide input {h}x{w}")
    y = x.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5), dtype=REAL)
    return y[0] if single else y


def avgpool2d_backward(grad_out: np.ndarray, size: int) -> np.ndarray:
    g = as_real(grad_out) * REAL(1.0 / (size * size))
    g = np.repeat(np.repeat(g, size, axis=-2), size, axis=-1)
    return np.ascontiguousarray(g, dtype=REAL)


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch.

    Returns (loss, grad_logits); the gradient already carries the 1/N factor.
    """
    logits = as_real(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted, dtype=REAL)
    probs = exp / exp.sum(axis=1, keepdims=True, dtype=REAL)
    n = logits.shape[0]
    picked = probs[np.arange(n), labels]
    loss = float(-np.log(np.maximum(picked, np.finfo(REAL).tiny)).mean())
    grad = probs.copy()
    grad[np.arange(n), labels] -= REAL(1.0)
    grad /= REAL(n)
    return loss, grad


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class SgdConfig:
    """Plain SGD with classical momentum and decoupled-from-nothing weight decay.

    The update is
        v     <- momentum * v + grad + weight_decay * param
        param <- param - lr * v
    so weight decay enters the velocity like an extra gradient term.
    ``lr_schedule`` maps epoch -> multiplier; multipliers compound from the
    epoch they fire at onward (e.g. {30: 0.1, 45: 0.1} divides by 10 twice).
    """

    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    lr_schedule: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.learning_rate > 0):
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for at, mult in sorted(self.lr_schedule.items()):
            if epoch >= int(at):
                lr *= mult
        return lr


def sgd_step(params: dict, grads: dict, state: dict, cfg: SgdConfig,
             lr: float | None = None, no_decay: frozenset | set = frozenset()):
    """One SGD update over a dict of parameter buffers, in place.

    ``state`` holds one velocity buffer per key and is created lazily.
    Keys listed in ``no_decay`` skip the weight-decay term (biases, norm
    parameters and quantizer clips are trained without decay).
    """
    step_lr = REAL(cfg.learning_rate if lr is None else lr)
    mom = REAL(cfg.momentum)
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            continue
        # np.asarray, not as_real: 0-d params (quantizer clips) must keep
        # their shape and ascontiguousarray would promote them to (1,)
        g = np.asarray(g, dtype=REAL)
        if cfg.weight_decay and key not in no_decay:
            g = g + REAL(cfg.weight_decay) * p
        v = state.get(key)
        if v is None:
            v = np.zeros_like(p)
            state[key] = v
        v *= mom
        v += g
        p -= step_lr * v
    return params, state
