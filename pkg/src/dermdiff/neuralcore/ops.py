"""Layer primitives: paired forward/backward kernels over float64 arrays.

Every primitive is a pure function of its inputs and parameters.  The forward
pass returns (output, context); feeding the context and an upstream gradient
to `primitive_backward` yields the exact Jacobian-transpose products for all
inputs and parameters.  Shape rules are asserted, never broadcast silently,
and non-finite values anywhere are a hard error.

Data layout is NCHW for all spatial ops.  Parameter order conventions:
  linear            (w[Din,Dout], b[Dout])
  conv2d            (w[Co,Ci,kh,kw], b[Co])        attrs: stride, pad
  transposed-conv2d (w[Ci,Co,kh,kw], b[Co])        attrs: stride, pad
  group-norm        (gamma[C], beta[C])            attrs: groups, eps
"""

from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    """A primitive was fed operands whose shapes violate its shape rule."""


def _as_f64(x, op: str, what: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if not np.isfinite(a).all():
        raise ValueError(f"{op}: non-finite values in {what}")
    return a


def _require(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise ShapeError(f"{op}: {msg}")


class Context:
    """Opaque saved-forward state consumed by primitive_backward."""

    __slots__ = ("op", "out_shape", "data")

    def __init__(self, op: str, out_shape: tuple, data: dict):
        self.op = op
        self.out_shape = out_shape
        self.data = data


# ---------------------------------------------------------------------------
# dense / elementwise


def _linear_fwd(inputs, params, attrs):
    (x,) = inputs
    w, b = params
    _require(x.ndim == 2, "linear", f"input must be 2-d (batch, features), got {x.shape}")
    _require(w.ndim == 2 and b.ndim == 1, "linear", f"weight/bias must be 2-d/1-d, got {w.shape}/{b.shape}")
    _require(x.shape[1] == w.shape[0], "linear", f"input features {x.shape[1]} != weight rows {w.shape[0]}")
    _require(b.shape[0] == w.shape[1], "linear", f"bias size {b.shape[0]} != weight cols {w.shape[1]}")
    y = x @ w + b
    return y, {"x": x, "w": w}


def _linear_bwd(ctx, gy):
    x, w = ctx["x"], ctx["w"]
    return [gy @ w.T], [x.T @ gy, gy.sum(axis=0)]


def _relu_fwd(inputs, params, attrs):
    (x,) = inputs
    return np.maximum(x, 0.0), {"mask": x > 0.0}


def _relu_bwd(ctx, gy):
    return [gy * ctx["mask"]], []


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _sigmoid_fwd(inputs, params, attrs):
    (x,) = inputs
    y = _sigmoid(x)
    return y, {"y": y}


def _sigmoid_bwd(ctx, gy):
    y = ctx["y"]
    return [gy * y * (1.0 - y)], []


def _silu_fwd(inputs, params, attrs):
    (x,) = inputs
    s = _sigmoid(x)
    return x * s, {"x": x, "s": s}


def _silu_bwd(ctx, gy):
    x, s = ctx["x"], ctx["s"]
    return [gy * (s * (1.0 + x * (1.0 - s)))], []


def _softmax_fwd(inputs, params, attrs):
    (x,) = inputs
    axis = attrs.get("axis", -1)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return y, {"y": y, "axis": axis}


def _softmax_bwd(ctx, gy):
    y, axis = ctx["y"], ctx["axis"]
    return [y * (gy - (gy * y).sum(axis=axis, keepdims=True))], []


def _add_fwd(inputs, params, attrs):
    a, b = inputs
    mode = attrs.get("mode", "same")
    if mode == "same":
        _require(a.shape == b.shape, "add", f"shapes differ: {a.shape} vs {b.shape}")
        return a + b, {"mode": mode}
    if mode == "channel":
        _require(a.ndim == 4 and b.ndim == 2, "add", f"channel mode needs (N,C,H,W)+(N,C), got {a.shape}+{b.shape}")
        _require(a.shape[:2] == b.shape, "add", f"(N,C) mismatch: {a.shape[:2]} vs {b.shape}")
        return a + b[:, :, None, None], {"mode": mode}
    raise ValueError(f"add: unknown mode {mode!r}")


def _add_bwd(ctx, gy):
    if ctx["mode"] == "same":
        return [gy, gy.copy()], []
    return [gy, gy.sum(axis=(2, 3))], []


def _concat_fwd(inputs, params, attrs):
    _require(len(inputs) >= 2, "concat-channels", "needs at least two inputs")
    ref = inputs[0]
    _require(ref.ndim == 4, "concat-channels", f"inputs must be 4-d, got {ref.shape}")
    for x in inputs[1:]:
        _require(
            x.ndim == 4 and x.shape[0] == ref.shape[0] and x.shape[2:] == ref.shape[2:],
            "concat-channels",
            f"non-channel dims differ: {ref.shape} vs {x.shape}",
        )
    y = np.concatenate(inputs, axis=1)
    return y, {"splits": [x.shape[1] for x in inputs]}


def _concat_bwd(ctx, gy):
    grads = []
    at = 0
    for c in ctx["splits"]:
        grads.append(gy[:, at : at + c])
        at += c
    return grads, []


# ---------------------------------------------------------------------------
# convolutions


def _conv_out(extent: int, k: int, s: int, p: int) -> int:
    return (extent + 2 * p - k) // s + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int) -> np.ndarray:
    """Strided windows of padded input as an (N*Ho*Wo, Ci*kh*kw) matrix."""
    if kh == 1 and kw == 1:
        sub = xp[:, :, ::s, ::s]
        n, ci, ho, wo = sub.shape
        return sub.transpose(0, 2, 3, 1).reshape(n * ho * wo, ci), (ho, wo)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    n, ci, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, ci * kh * kw), (ho, wo)


def _col2im(g_col: np.ndarray, xp_shape: tuple, kh: int, kw: int, s: int,
            ho: int, wo: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add the column gradients back.

    The accumulator lives in NHWC so each offset's scatter hits a contiguous
    channel vector per pixel; one transpose at the end restores NCHW.
    """
    n, ci = xp_shape[0], xp_shape[1]
    hp, wp = xp_shape[2], xp_shape[3]
    gxp = np.zeros((n, hp, wp, ci))
    g6 = g_col.reshape(n, ho, wo, ci, kh, kw)
    for ki in range(kh):
        for kj in range(kw):
            gxp[:, ki : ki + s * (ho - 1) + 1 : s, kj : kj + s * (wo - 1) + 1 : s, :] += (
                g6[:, :, :, :, ki, kj]
            )
    return gxp.transpose(0, 3, 1, 2)


def _conv2d_fwd(inputs, params, attrs):
    (x,) = inputs
    w, b = params
    s = int(attrs.get("stride", 1))
    p = int(attrs.get("pad", 0))
    _require(s in (1, 2), "conv2d", f"stride must be 1 or 2, got {s}")
    _require(x.ndim == 4, "conv2d", f"input must be (N,C,H,W), got {x.shape}")
    _require(w.ndim == 4, "conv2d", f"weight must be (Co,Ci,kh,kw), got {w.shape}")
    N, Ci, H, W = x.shape
    Co, Ciw, kh, kw = w.shape
    _require(Ci == Ciw, "conv2d", f"input channels {Ci} != weight channels {Ciw}")
    _require(b.shape == (Co,), "conv2d", f"bias shape {b.shape} != ({Co},)")
    Ho, Wo = _conv_out(H, kh, s, p), _conv_out(W, kw, s, p)
    _require(Ho >= 1 and Wo >= 1, "conv2d", f"kernel {kh}x{kw} too large for {H}x{W} with pad {p}")
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    col, (ho, wo) = _im2col(xp, kh, kw, s)
    y = (col @ w.reshape(Co, -1).T).reshape(N, Ho, Wo, Co).transpose(0, 3, 1, 2)
    y = y + b[None, :, None, None]
    return y, {"col": col, "w": w, "s": s, "p": p, "xshape": x.shape,
               "xp_shape": xp.shape, "out_hw": (Ho, Wo)}


def _conv2d_bwd(ctx, gy):
    col, w, s, p = ctx["col"], ctx["w"], ctx["s"], ctx["p"]
    N, Ci, H, W = ctx["xshape"]
    Co, _, kh, kw = w.shape
    Ho, Wo = ctx["out_hw"]
    g2 = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(-1, Co)
    gb = gy.sum(axis=(0, 2, 3))
    gw = (g2.T @ col).reshape(w.shape)
    g_col = g2 @ w.reshape(Co, -1)
    gxp = _col2im(g_col, ctx["xp_shape"], kh, kw, s, Ho, Wo)
    gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
    return [gx], [gw, gb]


def _tconv2d_fwd(inputs, params, attrs):
    (x,) = inputs
    w, b = params
    s = int(attrs.get("stride", 1))
    p = int(attrs.get("pad", 0))
    _require(s in (1, 2), "transposed-conv2d", f"stride must be 1 or 2, got {s}")
    _require(x.ndim == 4, "transposed-conv2d", f"input must be (N,C,H,W), got {x.shape}")
    _require(w.ndim == 4, "transposed-conv2d", f"weight must be (Ci,Co,kh,kw), got {w.shape}")
    N, Ci, H, W = x.shape
    Ciw, Co, kh, kw = w.shape
    _require(Ci == Ciw, "transposed-conv2d", f"input channels {Ci} != weight channels {Ciw}")
    _require(b.shape == (Co,), "transposed-conv2d", f"bias shape {b.shape} != ({Co},)")
    Ho = s * (H - 1) + kh - 2 * p
    Wo = s * (W - 1) + kw - 2 * p
    _require(Ho >= 1 and Wo >= 1, "transposed-conv2d", f"output {Ho}x{Wo} collapses for input {H}x{W}")
    x2 = np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(-1, Ci)
    # One GEMM producing per-offset contributions, then scatter (the adjoint
    # of conv2d's im2col gather).
    g_col = x2 @ w.reshape(Ci, -1)  # (N*H*W, Co*kh*kw)
    yp = _col2im(g_col, (N, Co, Ho + 2 * p, Wo + 2 * p), kh, kw, s, H, W)
    y = yp[:, :, p : p + Ho, p : p + Wo] if p else yp
    y = y + b[None, :, None, None]
    return y, {"x2": x2, "w": w, "s": s, "p": p, "xshape": x.shape, "out_hw": (Ho, Wo)}


def _tconv2d_bwd(ctx, gy):
    x2, w, s, p = ctx["x2"], ctx["w"], ctx["s"], ctx["p"]
    N, Ci, H, W = ctx["xshape"]
    _, Co, kh, kw = w.shape
    gb = gy.sum(axis=(0, 2, 3))
    gyp = np.pad(gy, ((0, 0), (0, 0), (p, p), (p, p))) if p else gy
    col, _ = _im2col(gyp, kh, kw, s)  # (N*H*W, Co*kh*kw)
    gx = (col @ w.reshape(Ci, -1).T).reshape(N, H, W, Ci).transpose(0, 3, 1, 2)
    gw = (x2.T @ col).reshape(w.shape)
    return [gx], [gw, gb]


# ---------------------------------------------------------------------------
# normalization / resampling


def _groupnorm_fwd(inputs, params, attrs):
    (x,) = inputs
    gamma, beta = params
    _require(x.ndim == 4, "group-norm", f"input must be (N,C,H,W), got {x.shape}")
    N, C, H, W = x.shape
    if "groups" in attrs:
        g = int(attrs["groups"])
    else:
        # default min(8, C), backed off to the nearest divisor of C
        g = min(8, C)
        while C % g:
            g -= 1
    eps = float(attrs.get("eps", 1e-5))
    _require(g >= 1 and C % g == 0, "group-norm", f"channels {C} not divisible by groups {g}")
    _require(gamma.shape == (C,) and beta.shape == (C,), "group-norm",
             f"gamma/beta must be ({C},), got {gamma.shape}/{beta.shape}")
    m = (C // g) * H * W
    xr = x.reshape(N, g, m)
    mu = xr.mean(axis=2, keepdims=True)
    var = xr.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xr - mu) * inv_std).reshape(N, C, H, W)
    y = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return y, {"xhat": xhat, "inv_std": inv_std, "gamma": gamma, "g": g}


def _groupnorm_bwd(ctx, gy):
    xhat, inv_std, gamma, g = ctx["xhat"], ctx["inv_std"], ctx["gamma"], ctx["g"]
    N, C, H, W = xhat.shape
    m = (C // g) * H * W
    ggamma = (gy * xhat).sum(axis=(0, 2, 3))
    gbeta = gy.sum(axis=(0, 2, 3))
    d = (gy * gamma[None, :, None, None]).reshape(N, g, m)
    xh = xhat.reshape(N, g, m)
    gx = inv_std * (d - d.mean(axis=2, keepdims=True) - xh * (d * xh).mean(axis=2, keepdims=True))
    return [gx.reshape(N, C, H, W)], [ggamma, gbeta]


def _avgpool_fwd(inputs, params, attrs):
    (x,) = inputs
    k = int(attrs.get("kernel", 2))
    _require(x.ndim == 4, "avg-pool2d", f"input must be (N,C,H,W), got {x.shape}")
    N, C, H, W = x.shape
    _require(k >= 1 and H % k == 0 and W % k == 0, "avg-pool2d",
             f"spatial dims {H}x{W} not divisible by kernel {k}")
    y = x.reshape(N, C, H // k, k, W // k, k).mean(axis=(3, 5))
    return y, {"k": k}


def _avgpool_bwd(ctx, gy):
    k = ctx["k"]
    gx = np.repeat(np.repeat(gy, k, axis=2), k, axis=3) / (k * k)
    return [gx], []


def _upsample_fwd(inputs, params, attrs):
    (x,) = inputs
    f = int(attrs.get("factor", 2))
    _require(x.ndim == 4, "nearest-upsample", f"input must be (N,C,H,W), got {x.shape}")
    _require(f >= 1, "nearest-upsample", f"factor must be >= 1, got {f}")
    y = np.repeat(np.repeat(x, f, axis=2), f, axis=3)
    return y, {"f": f, "xshape": x.shape}


def _upsample_bwd(ctx, gy):
    f = ctx["f"]
    N, C, H, W = ctx["xshape"]
    gx = gy.reshape(N, C, H, f, W, f).sum(axis=(3, 5))
    return [gx], []


def _timeembed_fwd(inputs, params, attrs):
    (t,) = inputs
    dim = int(attrs.get("dim", 64))
    _require(t.ndim == 1, "sinusoidal-time-embed", f"input must be 1-d (batch,), got {t.shape}")
    _require(dim >= 2 and dim % 2 == 0, "sinusoidal-time-embed", f"dim must be even and >= 2, got {dim}")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / (half - 1))
    ang = t[:, None] * freqs[None, :]
    y = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return y, {"ang": ang, "freqs": freqs, "half": half}


def _timeembed_bwd(ctx, gy):
    ang, freqs, half = ctx["ang"], ctx["freqs"], ctx["half"]
    gt = (gy[:, :half] * np.cos(ang) * freqs).sum(axis=1)
    gt -= (gy[:, half:] * np.sin(ang) * freqs).sum(axis=1)
    return [gt], []


# ---------------------------------------------------------------------------
# registry and public entry points

_REGISTRY = {
    "linear": (_linear_fwd, _linear_bwd, 1, 2),
    "conv2d": (_conv2d_fwd, _conv2d_bwd, 1, 2),
    "transposed-conv2d": (_tconv2d_fwd, _tconv2d_bwd, 1, 2),
    "relu": (_relu_fwd, _relu_bwd, 1, 0),
    "silu": (_silu_fwd, _silu_bwd, 1, 0),
    "sigmoid": (_sigmoid_fwd, _sigmoid_bwd, 1, 0),
    "softmax": (_softmax_fwd, _softmax_bwd, 1, 0),
    "group-norm": (_groupnorm_fwd, _groupnorm_bwd, 1, 2),
    "avg-pool2d": (_avgpool_fwd, _avgpool_bwd, 1, 0),
    "nearest-upsample": (_upsample_fwd, _upsample_bwd, 1, 0),
    "add": (_add_fwd, _add_bwd, 2, 0),
    "concat-channels": (_concat_fwd, _concat_bwd, None, 0),
    "sinusoidal-time-embed": (_timeembed_fwd, _timeembed_bwd, 1, 0),
}

PRIMITIVE_IDS = frozenset(_REGISTRY)


def primitive_forward(op: str, inputs, params=None, **attrs):
    """Run primitive `op`; returns (output, context) for the backward pass."""
    if op not in _REGISTRY:
        raise ValueError(f"unknown primitive {op!r}; valid: {sorted(_REGISTRY)}")
    fwd, _, n_in, n_par = _REGISTRY[op]
    if isinstance(inputs, np.ndarray):
        inputs = [inputs]
    inputs = [_as_f64(x, op, f"input {i}") for i, x in enumerate(inputs)]
    if n_in is not None and len(inputs) != n_in:
        raise ShapeError(f"{op}: expected {n_in} input(s), got {len(inputs)}")
    params = [] if params is None else [_as_f64(p, op, f"param {i}") for i, p in enumerate(params)]
    if len(params) != n_par:
        raise ShapeError(f"{op}: expected {n_par} parameter(s), got {len(params)}")
    out, data = fwd(inputs, params, attrs)
    if not np.isfinite(out).all():
        raise ValueError(f"{op}: non-finite values in output")
    return out, Context(op, out.shape, data)


def primitive_backward(op: str, ctx: Context, upstream):
    """Jacobian-transpose products: returns ([input grads], [param grads])."""
    if not isinstance(ctx, Context) or ctx.op != op:
        raise ValueError(f"{op}: missing or mismatched forward context")
    gy = np.asarray(upstream, dtype=np.float64)
    if gy.shape != ctx.out_shape:
        raise ShapeError(f"{op}: upstream gradient shape {gy.shape} != output shape {ctx.out_shape}")
    _, bwd, _, _ = _REGISTRY[op]
    return bwd(ctx.data, gy)
