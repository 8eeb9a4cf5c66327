"""Neural-network primitives: convolutions, pooling, dense, activations,
dropout, the MSE loss, the Adam optimizer and early stopping.

Convolutions use stride-1 spatial cross-correlation implemented with
sliding-window views plus BLAS matmuls; the 3-d variant additionally
supports a strided temporal axis (windows gathered per temporal offset, so
the input gradient needs no scatter-add kernel).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import NumericsError, ShapeError, Tensor, _wrap, sigmoid


# -- 2-d convolution (stride 1) ------------------------------------------


def _corr2d(x: np.ndarray, w: np.ndarray, pad: tuple[int, int]) -> np.ndarray:
    """Cross-correlation of x[B,C,H,W] with w[F,C,kh,kw], stride 1."""
    ph, pw = pad
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    kh, kw = w.shape[2], w.shape[3]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # [B,C,Ho,Wo,kh,kw]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    y = cols @ w.reshape(w.shape[0], -1).T
    return y.reshape(b, ho, wo, w.shape[0]).transpose(0, 3, 1, 2)


def _corr2d_dw(x, dy, kshape, pad):
    """Kernel gradient for _corr2d."""
    ph, pw = pad
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    f, c, kh, kw = kshape
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    b, _, ho, wo = dy.shape
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    dyf = dy.transpose(0, 2, 3, 1).reshape(b * ho * wo, f)
    return (dyf.T @ cols).reshape(f, c, kh, kw)


def _corr2d_dx(dy, w, pad, hw):
    """Input gradient for _corr2d: full correlation with the flipped kernel."""
    ph, pw = pad
    kh, kw = w.shape[2], w.shape[3]
    wf = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # [C,F,kh,kw]
    dx = _corr2d(dy, np.ascontiguousarray(wf), (kh - 1 - ph, kw - 1 - pw))
    h, wdt = hw
    if dx.shape[2] != h or dx.shape[3] != wdt:
        raise ShapeError(
            f"conv2d backward produced {dx.shape[2:]} for input plane {hw}"
        )
    return dx


def _same_pad(k: int) -> int:
    if k % 2 == 0:
        raise ShapeError(f"same padding needs an odd kernel size, got {k}")
    return (k - 1) // 2


def conv2d(x, w, b, padding: str = "same") -> Tensor:
    """2-d convolution (cross-correlation) with bias, stride 1.

    x: [B,C,H,W] or [C,H,W]; w: [F,C,kh,kw]; b: [F].
    """
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d got input {x.shape} and kernel {w.shape}")
    if xd.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {xd.shape[1]}, "
            f"kernel expects {w.shape[1]}"
        )
    kh, kw = w.shape[2], w.shape[3]
    if padding == "same":
        pad = (_same_pad(kh), _same_pad(kw))
    elif padding == "valid":
        pad = (0, 0)
    else:
        raise ValueError(f"unknown padding mode {padding!r}")
    y = _corr2d(xd, w.data, pad) + b.data[None, :, None, None]
    hw = (xd.shape[2], xd.shape[3])

    def backward(g):
        if squeeze:
            g = g[None]
        if w.requires_grad:
            w.accumulate(_corr2d_dw(xd, g, w.shape, pad))
        if b.requires_grad:
            b.accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dx = _corr2d_dx(g, w.data, pad, hw)
            x.accumulate(dx[0] if squeeze else dx)

    if squeeze:
        y = y[0]
    return Tensor._compose(y, (x, w, b), backward)


# -- 3-d convolution (temporal stride, spatial stride 1) -----------------


def _time_windows(t: int, kt: int, st: int) -> int:
    if kt > t:
        raise ShapeError(f"temporal kernel {kt} exceeds input length {t}")
    return (t - kt) // st + 1


def conv3d(x, w, b, temporal_stride: int = 1, padding: str = "same") -> Tensor:
    """3-d convolution over [B,C,T,H,W] with kernel [F,C,kt,kh,kw].

    Temporal axis: no padding, stride ``temporal_stride``.  Spatial axes:
    stride 1 with ``same`` or ``valid`` zero padding.
    """
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    squeeze = x.ndim == 4
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d got input {x.shape} and kernel {w.shape}")
    if xd.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv3d channel mismatch: input has {xd.shape[1]}, "
            f"kernel expects {w.shape[1]}"
        )
    bsz, c, t, h, wd = xd.shape
    f, _, kt, kh, kw = w.shape
    st = int(temporal_stride)
    tout = _time_windows(t, kt, st)
    if padding == "same":
        pad = (_same_pad(kh), _same_pad(kw))
    elif padding == "valid":
        pad = (0, 0)
    else:
        raise ValueError(f"unknown padding mode {padding!r}")

    # Gather temporal windows and fold (channel, temporal-offset) into one
    # channel axis, reducing to the 2-d stride-1 core.
    tw = sliding_window_view(xd, kt, axis=2)[:, :, ::st]  # [B,C,Tout,H,W,kt]
    x2 = tw.transpose(0, 2, 1, 5, 3, 4).reshape(bsz * tout, c * kt, h, wd)
    x2 = np.ascontiguousarray(x2)
    w2 = w.data.reshape(f, c * kt, kh, kw)
    y = _corr2d(x2, w2, pad) + b.data[None, :, None, None]
    ho, wo = y.shape[2], y.shape[3]
    y = y.reshape(bsz, tout, f, ho, wo).transpose(0, 2, 1, 3, 4)

    def backward(g):
        if squeeze:
            g = g[None]
        g2 = g.transpose(0, 2, 1, 3, 4).reshape(bsz * tout, f, ho, wo)
        if w.requires_grad:
            dw2 = _corr2d_dw(x2, g2, (f, c * kt, kh, kw), pad)
            w.accumulate(dw2.reshape(w.shape))
        if b.requires_grad:
            b.accumulate(g2.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dx2 = _corr2d_dx(g2, w2, pad, (h, wd))
            dxw = dx2.reshape(bsz, tout, c, kt, h, wd)
            dx = np.zeros_like(xd)
            starts = st * np.arange(tout)
            for j in range(kt):
                # Per fixed offset j the window time indices are distinct,
                # so a fancy-indexed += is a well-defined accumulation.
                dx[:, :, starts + j] += dxw[:, :, :, j].transpose(0, 2, 1, 3, 4)
            x.accumulate(dx[0] if squeeze else dx)

    if squeeze:
        y = y[0]
    return Tensor._compose(y, (x, w, b), backward)


# -- max pooling ---------------------------------------------------------


def maxpool2d(x) -> Tensor:
    """2x2 max pooling with stride 2; spatial dims must be even.

    On ties the lowest flat index inside each window receives the gradient.
    """
    x = _wrap(x)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"maxpool2d expects [B,C,H,W], got {x.shape}")
    b, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    win = xd.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h // 2, w // 2, 4)
    am = np.argmax(win, axis=-1)  # first max wins, row-major window order
    y = np.take_along_axis(win, am[..., None], axis=-1)[..., 0]

    def backward(g):
        if squeeze:
            g = g[None]
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, am[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(b, c, h // 2, w // 2, 2, 2)
        dx = dx.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        x.accumulate(dx[0] if squeeze else dx)

    if squeeze:
        y = y[0]
    return Tensor._compose(y, (x,), backward)


def maxpool2d_time(x) -> Tensor:
    """Spatial 2x2/2 pooling of [B,C,T,H,W], time folded into the batch."""
    from .autodiff import reshape, transpose

    x = _wrap(x)
    if x.ndim != 5:
        raise ShapeError(f"maxpool2d_time expects [B,C,T,H,W], got {x.shape}")
    b, c, t, h, w = x.shape
    flat = reshape(x, (b * c * t, 1, h, w))
    pooled = maxpool2d(flat)
    return reshape(pooled, (b, c, t, h // 2, w // 2))


# -- dense / activations / dropout / loss --------------------------------


def dense(x, w, b) -> Tensor:
    """Affine layer: x[B,n] @ w[n,m] + b[m] (accepts a bare [n] vector)."""
    from .autodiff import add, matmul, reshape

    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.ndim == 1:
        return reshape(add(matmul(reshape(x, (1, -1)), w), b), (-1,))
    return add(matmul(x, w), b)


def swish(x) -> Tensor:
    """x * sigmoid(x)."""
    from .autodiff import mul

    x = _wrap(x)
    return mul(x, sigmoid(x))


def dropout(x, p: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: train mode scales kept units by 1/(1-p)."""
    from .autodiff import mul

    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout mode must be train or eval, got {mode!r}")
    x = _wrap(x)
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an RNG")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, Tensor(mask))


def mse_loss(pred, target) -> Tensor:
    """Mean of squared differences over all elements."""
    pred, target = _wrap(pred), _wrap(target)
    if pred.shape != target.shape:
        raise ShapeError(
            f"mse_loss shape mismatch: {pred.shape} vs {target.shape}"
        )
    diff = pred.data - target.data
    n = diff.size
    data = np.asarray((diff * diff).mean())

    def backward(g):
        scaled = (2.0 / n) * g * diff
        pred.accumulate(scaled)
        target.accumulate(-scaled)

    return Tensor._compose(data, (pred, target), backward)


# -- optimizer -----------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter first/second moments and the shared step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` data."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = np.asarray(grads[name])
        if not np.isfinite(g).all():
            raise NumericsError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        mhat = m / (1.0 - state.beta1**t)
        vhat = v / (1.0 - state.beta2**t)
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(
            p.data.dtype, copy=False
        )


# -- early stopping ------------------------------------------------------


class EarlyStopper:
    """Halt after ``patience`` consecutive epochs without strict improvement,
    remembering a snapshot of the best parameters."""

    def __init__(self, patience: int = 5, min_delta: float = 0.0):
        self.patience = int(patience)
        self.min_delta = float(min_delta)
        self.best_loss = np.inf
        self.best_params: dict | None = None
        self.bad_epochs = 0

    def update(self, val_loss: float, params: dict) -> bool:
        """Record one epoch; returns True while training should continue."""
        if val_loss < self.best_loss - self.min_delta:
            self.best_loss = float(val_loss)
            self.best_params = {k: p.data.copy() for k, p in params.items()}
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return self.bad_epochs < self.patience

    def restore(self, params: dict) -> None:
        if self.best_params is None:
            return
        for k, p in params.items():
            p.data = self.best_params[k].copy()
