"""Dense NCHW layer kernels, loss, optimizer and gradient checking.

Every function here works on plain ``numpy.ndarray`` values in float32, laid
out as (batch, channels, height, width). Forward kernels are pure; backward
kernels take the upstream gradient and whatever the forward pass produced.
"""

from __future__ import annotations

import contextlib
import logging
import sys
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

DTYPE = np.float32
PROB_EPS = 1e-7

# upper bound for one im2col buffer; larger batches are processed in chunks
_COL_BUDGET_BYTES = 96 * 2**20


@contextlib.contextmanager
def precision(dtype):
    """Temporarily run every engine module at ``dtype``.

    Training and inference use float32. Finite-difference gradient checks
    of deep stacks need float64, where rounding noise in the loss no longer
    swamps the difference quotient. Parameters must be cast separately.
    """
    mods = [m for name, m in list(sys.modules.items())
            if name.startswith(__package__ + ".") and hasattr(m, "DTYPE")]
    saved = [m.DTYPE for m in mods]
    try:
        for m in mods:
            m.DTYPE = dtype
        yield
    finally:
        for m, d in zip(mods, saved):
            m.DTYPE = d


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _check4(name, x):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W), got shape {x.shape}")


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def deconv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + k


def _conv_valid(x, w):
    """Stride-1, unpadded cross-correlation; x already padded."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = h - kh + 1, wd - kw + 1
    wmat = w.reshape(o, -1).T
    out = np.empty((n, o, ho, wo), dtype=DTYPE)
    per_item = ho * wo * c * kh * kw * x.itemsize
    step = max(1, _COL_BUDGET_BYTES // max(per_item, 1))
    for s in range(0, n, step):
        xs = x[s:s + step]
        if kh == 1 and kw == 1:
            cols = xs.transpose(0, 2, 3, 1).reshape(-1, c)
        else:
            win = sliding_window_view(xs, (kh, kw), axis=(2, 3))
            cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, c * kh * kw)
        res = cols @ wmat
        out[s:s + step] = res.reshape(xs.shape[0], ho, wo, o).transpose(0, 3, 1, 2)
    return out


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
           stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlate ``x`` (N, C, H, W) with ``w`` (O, C, kH, kW)."""
    _check4("input", x)
    _check4("weights", w)
    if w.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} vs weights {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"need stride >= 1 and pad >= 0, got {stride}, {pad}")
    kh, kw = w.shape[2:]
    ho = conv_out_size(x.shape[2], kh, stride, pad)
    wo = conv_out_size(x.shape[3], kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {w.shape} larger than padded input {x.shape}")
    x = np.asarray(x, dtype=DTYPE)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = _conv_valid(x, np.asarray(w, dtype=DTYPE))
    if stride > 1:
        out = np.ascontiguousarray(out[:, :, ::stride, ::stride][:, :, :ho, :wo])
    if b is not None:
        out += np.asarray(b, dtype=DTYPE).reshape(1, -1, 1, 1)
    return out


def _dilate(y, stride):
    if stride == 1:
        return y
    n, c, h, w = y.shape
    out = np.zeros((n, c, (h - 1) * stride + 1, (w - 1) * stride + 1), dtype=DTYPE)
    out[:, :, ::stride, ::stride] = y
    return out


def deconv2d(y: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
             stride: int = 1, pad: int = 0,
             out_hw: Tuple[int, int] | None = None) -> np.ndarray:
    """Transposed convolution of ``y`` (N, I, H, W) with ``w`` (I, O, kH, kW).

    This is the exact adjoint of ``conv2d`` with the same kernel, stride and
    padding. ``out_hw`` may request a larger output (as needed when the
    forward convolution dropped trailing rows).
    """
    _check4("input", y)
    _check4("weights", w)
    if w.shape[0] != y.shape[1]:
        raise ShapeError(
            f"deconv2d channel mismatch: input {y.shape} vs weights {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"need stride >= 1 and pad >= 0, got {stride}, {pad}")
    kh, kw = w.shape[2:]
    ho = deconv_out_size(y.shape[2], kh, stride, pad)
    wo = deconv_out_size(y.shape[3], kw, stride, pad)
    if out_hw is not None:
        extra_h, extra_w = out_hw[0] - ho, out_hw[1] - wo
        if not (0 <= extra_h < stride and 0 <= extra_w < stride):
            raise ShapeError(f"cannot produce {out_hw} from {y.shape} with {w.shape}")
    else:
        extra_h = extra_w = 0
    if ho < 1 or wo < 1:
        raise ShapeError(f"deconv2d output empty for input {y.shape}, weights {w.shape}")
    yd = _dilate(np.asarray(y, dtype=DTYPE), stride)
    # full correlation with the flipped, channel-swapped kernel, then crop
    ph, pw = kh - 1, kw - 1
    yd = np.pad(yd, ((0, 0), (0, 0), (ph, ph + extra_h), (pw, pw + extra_w)))
    wf = np.ascontiguousarray(np.asarray(w, dtype=DTYPE).transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    full = _conv_valid(yd, wf)
    out = full[:, :, pad:pad + ho + extra_h, pad:pad + wo + extra_w]
    out = np.ascontiguousarray(out)
    if b is not None:
        out += np.asarray(b, dtype=DTYPE).reshape(1, -1, 1, 1)
    return out


def conv2d_weight_grad(x: np.ndarray, dy: np.ndarray, kshape: Tuple[int, int],
                       stride: int = 1, pad: int = 0) -> np.ndarray:
    """dL/dw for ``conv2d(x, w)`` given dL/dout; returns (O, C, kH, kW)."""
    kh, kw = kshape
    n, c = x.shape[:2]
    o, ho, wo = dy.shape[1:]
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    grad = np.zeros((o, c * kh * kw), dtype=DTYPE)
    per_item = ho * wo * c * kh * kw * x.itemsize
    step = max(1, _COL_BUDGET_BYTES // max(per_item, 1))
    for s in range(0, n, step):
        win = sliding_window_view(x[s:s + step], (kh, kw), axis=(2, 3))
        win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, c * kh * kw)
        d = dy[s:s + step].transpose(0, 2, 3, 1).reshape(-1, o)
        grad += d.T @ cols
    return grad.reshape(o, c, kh, kw)


def conv2d_backward(dout, x, w, stride=1, pad=0):
    """Gradients (dx, dw, db) of ``conv2d(x, w, b, stride, pad)``."""
    dx = deconv2d(dout, w, None, stride, pad, out_hw=x.shape[2:])
    dw = conv2d_weight_grad(x, dout, w.shape[2:], stride, pad)
    db = dout.sum(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE)
    return dx, dw, db


def deconv2d_backward(dout, y, w, stride=1, pad=0):
    """Gradients (dy, dw, db) of ``deconv2d(y, w, b, stride, pad)``."""
    dy = conv2d(dout, w, None, stride, pad)
    dy = dy[:, :, :y.shape[2], :y.shape[3]]
    # the deconv weight gradient is the conv weight gradient with roles swapped
    dw = conv2d_weight_grad(dout, y, w.shape[2:], stride, pad)
    db = dout.sum(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE)
    return np.ascontiguousarray(dy), dw, db


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PoolIndices:
    """Argmax locations recorded by :func:`maxpool2x2`.

    ``flat`` has the pooled shape (N, C, H/2, W/2); each entry is the row-major
    index ``row * W + col`` of the winning cell inside its (H, W) input plane.
    """

    flat: np.ndarray
    input_shape: Tuple[int, int, int, int]

    @property
    def pooled_shape(self):
        return self.flat.shape

    def window_codes(self) -> np.ndarray:
        """Position of each argmax inside its 2x2 window, in 0..3 (row-major)."""
        _, _, h, w = self.input_shape
        ph, pw = self.flat.shape[2:]
        rows, cols = np.divmod(self.flat, w)
        di = rows - 2 * np.arange(ph).reshape(1, 1, -1, 1)
        dj = cols - 2 * np.arange(pw).reshape(1, 1, 1, -1)
        if (np.any(di < 0) or np.any(di > 1) or np.any(dj < 0) or np.any(dj > 1)
                or np.any(rows >= h)):
            raise ValueError("corrupt pooling indices: index outside its 2x2 window")
        return (di * 2 + dj).astype(np.intp)


def maxpool2x2(x: np.ndarray) -> Tuple[np.ndarray, PoolIndices]:
    """2x2/stride-2 max pooling; ties go to the smallest flat index."""
    _check4("input", x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {x.shape}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    code = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, code[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(h // 2).reshape(1, 1, -1, 1) + code // 2
    cols = 2 * np.arange(w // 2).reshape(1, 1, 1, -1) + code % 2
    return np.ascontiguousarray(out), PoolIndices(rows * w + cols, (n, c, h, w))


def unpool2x2(x: np.ndarray, indices: PoolIndices) -> np.ndarray:
    """Place each value at its recorded argmax; every other cell is zero."""
    _check4("input", x)
    n = x.shape[0]
    pooled = indices.pooled_shape
    if x.shape[1:] != tuple(pooled[1:]) or (pooled[0] != n and pooled[0] != 1):
        raise ShapeError(f"unpool input {x.shape} does not match indices {pooled}")
    code = indices.window_codes()
    if pooled[0] != n:
        code = np.broadcast_to(code, x.shape)
    _, c, h, w = indices.input_shape
    buf = np.zeros(x.shape + (4,), dtype=DTYPE)
    np.put_along_axis(buf, code[..., None], x[..., None], axis=-1)
    buf = buf.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(buf.reshape(n, c, h, w))


def gather2x2(x: np.ndarray, indices: PoolIndices) -> np.ndarray:
    """Read ``x`` (full resolution) at the recorded argmax cells.

    This is the adjoint of :func:`unpool2x2` and the input gradient of
    :func:`maxpool2x2`'s forward.
    """
    n, c, h, w = x.shape
    code = indices.window_codes()
    if code.shape[0] != n:
        code = np.broadcast_to(code, (n,) + code.shape[1:])
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    return np.ascontiguousarray(np.take_along_axis(win, code[..., None], axis=-1)[..., 0])


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(x):
    return np.maximum(x, 0, dtype=DTYPE)


def relu_backward(dout, out):
    return np.where(out > 0, dout, 0).astype(DTYPE)


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability ``rate``, else 1/(1-rate)."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0:
        return np.ones(shape, dtype=DTYPE)
    keep = rng.random(shape, dtype=np.float32) >= rate
    return keep.astype(DTYPE) / DTYPE(1 - rate)


def softmax_channels(z):
    """Softmax over axis 1."""
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).astype(DTYPE)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    """Class weights of the weighted binary cross-entropy."""

    boundary: float = 1.0
    background: float = 0.1

    def __post_init__(self):
        if self.boundary <= 0 or self.background <= 0:
            raise ValueError(f"loss weights must be positive, got {self}")


def weighted_bce_loss(pred: np.ndarray, target: np.ndarray,
                      weights: LossWeights = LossWeights(),
                      eps: float = PROB_EPS) -> Tuple[float, np.ndarray]:
    """Mean weighted binary cross-entropy and its gradient w.r.t. ``pred``.

    ``pred`` is clamped to [eps, 1 - eps] before the logs; the returned
    gradient is that of the clamped expression, so it vanishes wherever the
    clamp is active.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"loss shape mismatch: pred {pred.shape} vs target {target.shape}")
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    n = p.size
    pc = np.clip(p, eps, 1 - eps)
    lw1, lw2 = weights.boundary, weights.background
    loss = -(lw1 * y * np.log(pc) + lw2 * (1 - y) * np.log1p(-pc)).sum() / n
    grad = -(lw1 * y / pc - lw2 * (1 - y) / (1 - pc)) / n
    grad[(p < eps) | (p > 1 - eps)] = 0.0
    return float(max(loss, 0.0)), grad.astype(DTYPE)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class ParamStore:
    """Named parameters plus Adam moment estimates and the step counter."""

    params: Dict[str, np.ndarray]
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p, dtype=DTYPE))
            self.v.setdefault(name, np.zeros_like(p, dtype=DTYPE))

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return list(self.params)

    def snapshot(self) -> "ParamStore":
        cp = {k: v.copy() for k, v in self.params.items()}
        return ParamStore(cp, {k: v.copy() for k, v in self.m.items()},
                          {k: v.copy() for k, v in self.v.items()}, self.t)


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(store: ParamStore, grads: Mapping[str, np.ndarray], lr: float = 1e-4,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> ParamStore:
    """One in-place Adam update of ``store``.

    A parameter whose gradient is identically zero (or absent) keeps its
    value; only its moments decay. Frozen blocks therefore never drift.
    """
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        log.error("adam step rejected: non-finite gradient in %s", bad)
        raise FloatingPointError(f"non-finite gradient in {bad}")
    for k, g in grads.items():
        if k not in store.params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if g.shape != store.params[k].shape:
            raise ShapeError(f"gradient {k!r} has shape {g.shape}, "
                             f"parameter has {store.params[k].shape}")
    store.t += 1
    t = store.t
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for k, p in store.params.items():
        g = grads.get(k)
        m, v = store.m[k], store.v[k]
        if g is None or not np.any(g):
            m *= beta1
            v *= beta2
            continue
        g = g.astype(DTYPE, copy=False)
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p -= step.astype(DTYPE)
    return store


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: Dict[str, float]
    tolerance: float

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self):
        return self.max_error < self.tolerance

    def __str__(self):
        lines = [f"{k}: {e:.3e}" for k, e in self.errors.items()]
        return "\n".join(lines + [f"max {self.max_error:.3e} (tol {self.tolerance:g})"])


def grad_check(loss_and_grads: Callable[[Dict[str, np.ndarray]], Tuple[float, Dict[str, np.ndarray]]],
               params: Dict[str, np.ndarray], tolerance: float = 1e-3, h: float = 1e-3,
               max_entries: int | None = 20,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_and_grads(params)`` must be deterministic. For every parameter
    block the error is ``max|analytic - numeric| / max(max|analytic|,
    max|numeric|)`` over the probed entries. Blocks larger than
    ``max_entries`` are probed at a random subset of entries.
    """
    rng = rng or np.random.default_rng(0)
    _, analytic = loss_and_grads(params)
    errors = {}
    for name, p in params.items():
        flat = p.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            probe = np.arange(flat.size)
        else:
            probe = rng.choice(flat.size, size=max_entries, replace=False)
        num = np.empty(len(probe))
        ana = analytic[name].reshape(-1)[probe].astype(np.float64)
        for n, i in enumerate(probe):
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = loss_and_grads(params)
            flat[i] = orig - h
            lm, _ = loss_and_grads(params)
            flat[i] = orig
            # the perturbation actually applied, after rounding to the parameter dtype
            step = float(p.dtype.type(orig + h)) - float(p.dtype.type(orig - h))
            num[n] = (lp - lm) / step
        scale = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0))
        errors[name] = float(np.abs(ana - num).max(initial=0.0) / scale) if scale > 0 else 0.0
    return GradCheckReport(errors, tolerance)
