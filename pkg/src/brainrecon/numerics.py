"""Minimal differentiable-layer kit: dense, 2-D convolution, LSTM cell,
softmax/cross-entropy, Pearson correlation, a finite-difference gradient
checker, and deterministic optimizers.

All math is float64. Every layer has a hand-written backward pass that is
expected to match central finite differences to < 1e-6 relative error.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


# --------------------------------------------------------------------------
# Deterministic, splittable randomness
# --------------------------------------------------------------------------

class RngStream:
    """Counter-based RNG addressed by (seed, label path).

    Identical (seed, path) pairs yield identical draw sequences on any
    platform; `child` derives independent sub-streams without consuming
    state from the parent.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(str(p) for p in path)
        digest = hashlib.sha256(
            ("%d\x00%s" % (self.seed, "/".join(self.path))).encode()
        ).digest()
        key = int.from_bytes(digest[:16], "little")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, *labels) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(str(l) for l in labels))

    def normal(self, size=None, loc=0.0, scale=1.0):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)


# --------------------------------------------------------------------------
# Parameter containers
# --------------------------------------------------------------------------

@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = np.asarray(self.grad, dtype=np.float64)
        if self.grad.shape != self.value.shape:
            raise ValueError("grad shape %s != value shape %s"
                             % (self.grad.shape, self.value.shape))


class ParamSet:
    """Named (value, gradient) pairs; names unique, grads shaped like values."""

    def __init__(self):
        self._entries: dict[str, Param] = {}

    def add(self, name: str, value) -> Param:
        if name in self._entries:
            raise ValueError("duplicate parameter name: %r" % name)
        p = Param(np.asarray(value, dtype=np.float64))
        self._entries[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def zero_grads(self) -> None:
        for p in self._entries.values():
            p.grad[...] = 0.0

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self._entries.items()}

    def copy_grads(self) -> dict[str, np.ndarray]:
        return {k: p.grad.copy() for k, p in self._entries.items()}


# --------------------------------------------------------------------------
# Elementwise helpers
# --------------------------------------------------------------------------

def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    return np.maximum(x, 0.0)


# --------------------------------------------------------------------------
# Dense layer
# --------------------------------------------------------------------------

def dense_forward(x, w, b):
    """x: (B, din) or (din,); w: (din, dout); b: (dout,)."""
    y = x @ w + b
    return y, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    if x.ndim == 1:
        dw = np.outer(x, dout)
        db = dout.copy()
    else:
        dw = x.T @ dout
        db = dout.sum(axis=0)
    dx = dout @ w.T
    return dx, dw, db


# --------------------------------------------------------------------------
# 2-D convolution (channels-last)
# --------------------------------------------------------------------------

def _conv_prepare(x, kernel, padding, stride):
    kh, kw, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ValueError(
            "conv2d: input has %d channels but kernel expects %d "
            "(input %s, kernel %s)" % (x.shape[-1], cin, x.shape, kernel.shape))
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("conv2d: `same` padding requires odd kernel dims")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError("conv2d: unknown padding %r" % padding)
    return kh, kw, cout, ph, pw


def conv2d_batch(x, kernel, padding="same", stride=1):
    """Convolve a batch.  x: (B, H, W, Cin); kernel: (kh, kw, Cin, Cout).

    Returns (y, cache) with y: (B, Ho, Wo, Cout).
    """
    kh, kw, cout, ph, pw = _conv_prepare(x, kernel, padding, stride)
    b, h, w, cin = x.shape
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    y = np.zeros((b, ho, wo, cout))
    for u in range(kh):
        for v in range(kw):
            sl = xp[:, u:u + ho * stride:stride, v:v + wo * stride:stride, :]
            y += sl @ kernel[u, v]
    return y, (xp, kernel, padding, stride, (b, h, w, cin))


def conv2d_batch_backward(dout, cache):
    xp, kernel, padding, stride, xshape = cache
    kh, kw, cin, cout = kernel.shape
    b, h, w, _ = xshape
    ho, wo = dout.shape[1], dout.shape[2]
    ph = (xp.shape[1] - h) // 2
    pw = (xp.shape[2] - w) // 2
    dk = np.zeros_like(kernel)
    dxp = np.zeros_like(xp)
    for u in range(kh):
        for v in range(kw):
            sl = xp[:, u:u + ho * stride:stride, v:v + wo * stride:stride, :]
            dk[u, v] = np.einsum("bijc,bijo->co", sl, dout)
            dxp[:, u:u + ho * stride:stride, v:v + wo * stride:stride, :] += \
                dout @ kernel[u, v].T
    dx = dxp[:, ph:ph + h, pw:pw + w, :]
    return dx, dk


def conv2d(x, kernel, padding="same"):
    """Single-image convolution per the module contract.

    x: (H, W, Cin); kernel: (kh, kw, Cin, Cout) -> (Ho, Wo, Cout).
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    y, _ = conv2d_batch(x[None], kernel, padding=padding)
    return y[0]


# --------------------------------------------------------------------------
# LSTM cell (gate order i, f, o, g)
# --------------------------------------------------------------------------

def lstm_step(x, h_prev, c_prev, wx, wh, b):
    """One LSTM step.  x: (B, d) or (d,); wx: (d, 4h); wh: (h, 4h); b: (4h,).

    Returns (h, c, cache).
    """
    single = x.ndim == 1
    if single:
        x, h_prev, c_prev = x[None], h_prev[None], c_prev[None]
    hdim = wh.shape[0]
    if x.shape[1] != wx.shape[0] or h_prev.shape[1] != hdim:
        raise ValueError("lstm_step: dimension mismatch (x %s, h %s, wx %s, wh %s)"
                         % (x.shape, h_prev.shape, wx.shape, wh.shape))
    a = x @ wx + h_prev @ wh + b
    i = sigmoid(a[:, :hdim])
    f = sigmoid(a[:, hdim:2 * hdim])
    o = sigmoid(a[:, 2 * hdim:3 * hdim])
    g = np.tanh(a[:, 3 * hdim:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    cache = (x, h_prev, c_prev, wx, wh, i, f, o, g, tc, single)
    if single:
        return h[0], c[0], cache
    return h, c, cache


def lstm_step_backward(dh, dc, cache):
    """Backward for lstm_step.  Returns (dx, dh_prev, dc_prev, dwx, dwh, db)."""
    x, h_prev, c_prev, wx, wh, i, f, o, g, tc, single = cache
    if single:
        dh = dh[None]
        dc = dc[None]
    dc_total = dc + dh * o * (1.0 - tc * tc)
    do = dh * tc
    di = dc_total * g
    df = dc_total * c_prev
    dg = dc_total * i
    dc_prev = dc_total * f
    da = np.concatenate([
        di * i * (1.0 - i),
        df * f * (1.0 - f),
        do * o * (1.0 - o),
        dg * (1.0 - g * g),
    ], axis=1)
    dx = da @ wx.T
    dh_prev = da @ wh.T
    dwx = x.T @ da
    dwh = h_prev.T @ da
    db = da.sum(axis=0)
    if single:
        return dx[0], dh_prev[0], dc_prev[0], dwx, dwh, db
    return dx, dh_prev, dc_prev, dwx, dwh, db


# --------------------------------------------------------------------------
# Softmax + cross-entropy
# --------------------------------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, true_index):
    """Stabilized softmax cross-entropy for one sample.

    Returns (loss, probs); the gradient w.r.t. logits is
    probs - one_hot(true_index).
    """
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[-1]
    if not (0 <= true_index < n):
        raise ValueError("softmax_xent: true_index %d out of range [0, %d)"
                         % (true_index, n))
    z = logits - logits.max()
    loge = z - np.log(np.exp(z).sum())
    probs = np.exp(loge)
    loss = -loge[true_index]
    return loss, probs


# --------------------------------------------------------------------------
# Pearson correlation
# --------------------------------------------------------------------------

def pearson(x, y, return_degenerate=False):
    """Pearson correlation of two equal-length vectors (n >= 2).

    Zero variance in either argument is degenerate: the value is 0 and,
    with return_degenerate=True, a flag is raised alongside.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError("pearson: length mismatch %d vs %d" % (x.size, y.size))
    if x.size < 2:
        raise ValueError("pearson: need n >= 2, got %d" % x.size)
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt((xc * xc).sum())
    sy = np.sqrt((yc * yc).sum())
    if sx == 0.0 or sy == 0.0:
        return (0.0, True) if return_degenerate else 0.0
    r = float((xc * yc).sum() / (sx * sy))
    r = min(1.0, max(-1.0, r))
    return (r, False) if return_degenerate else r


def pearson_columns(pred, true):
    """Column-wise Pearson for (B, n) arrays; degenerate columns -> 0."""
    pc = pred - pred.mean(axis=0)
    tc = true - true.mean(axis=0)
    sp = np.sqrt((pc * pc).sum(axis=0))
    st = np.sqrt((tc * tc).sum(axis=0))
    denom = sp * st
    ok = denom > 0.0
    r = np.zeros(pred.shape[1])
    r[ok] = (pc * tc).sum(axis=0)[ok] / denom[ok]
    return np.clip(r, -1.0, 1.0), ok


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------

def grad_check(fn, params: ParamSet, step: float = 1e-5) -> float:
    """Compare analytic gradients against central finite differences.

    `fn(params)` must return a scalar loss and leave the analytic gradient
    of every entry in `params` populated.  Returns the maximum relative
    error over all parameter entries, with denominator
    max(|analytic|, |numeric|, 1e-12).
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    params.zero_grads()
    loss = fn(params)
    if not np.isfinite(loss):
        raise ValueError("grad_check: non-finite loss %r" % loss)
    analytic = params.copy_grads()
    max_err = 0.0
    for name, p in params.items():
        flat = p.value.reshape(-1)
        a = analytic[name].reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            lp = fn(params)
            flat[idx] = orig - step
            lm = fn(params)
            flat[idx] = orig
            num = (lp - lm) / (2.0 * step)
            denom = max(abs(a[idx]), abs(num), 1e-12)
            max_err = max(max_err, abs(a[idx] - num) / denom)
    # restore analytic grads for the caller
    params.zero_grads()
    fn(params)
    return max_err


# --------------------------------------------------------------------------
# Optimizers
# --------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    kind: str = "adam"          # "sgd" | "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Optimizer:
    """Deterministic SGD / Adam over a ParamSet."""

    def __init__(self, config: OptimizerConfig):
        if config.lr <= 0:
            raise ValueError("optimizer: lr must be positive")
        if config.kind not in ("sgd", "adam"):
            raise ValueError("optimizer: unknown kind %r" % config.kind)
        self.config = config
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, params: ParamSet) -> None:
        cfg = self.config
        if cfg.kind == "sgd":
            for _, p in params.items():
                p.value -= cfg.lr * p.grad
            return
        self._t += 1
        t = self._t
        for name, p in params.items():
            if name not in self._m:
                self._m[name] = np.zeros_like(p.value)
                self._v[name] = np.zeros_like(p.value)
            m = self._m[name]
            v = self._v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * p.grad
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * p.grad * p.grad
            mhat = m / (1.0 - cfg.beta1 ** t)
            vhat = v / (1.0 - cfg.beta2 ** t)
            p.value -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)


def optimizer_step(params: ParamSet, config: OptimizerConfig) -> ParamSet:
    """One-shot update; for repeated Adam steps keep an Optimizer instance."""
    Optimizer(config).step(params)
    return params
