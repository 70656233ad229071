"""Differentiable operations on :class:`~caduf.tensor.Tensor`.

Image tensors are laid out as (batch, channel, height, width). Convolutions
are cross-correlations, as in every CNN framework.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from . import _backend
from .tensor import Tensor, as_tensor, make

_PAD_MODES = ("zero", "replicate", "valid")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        k = float(b)
        return make(a.data * k, (a,), lambda g: (g * k,))
    ad, bd = a.data, b.data
    return make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make(xd * xd, (x,), lambda g: (2.0 * xd * g,))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    xd = x.data
    mask = xd >= 0
    return make(np.where(mask, xd, slope * xd), (x,), lambda g: (np.where(mask, g, slope * g),))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return make(y, (x,), lambda g: (g * y * (1.0 - y),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return make(ad @ bd, (a, b), backward)


def bilinear_map(x: Tensor, left: np.ndarray, right: np.ndarray) -> Tensor:
    """Apply ``left @ X @ right.T`` to every (height, width) plane of ``x``."""
    if x.shape[-2] != left.shape[1] or x.shape[-1] != right.shape[1]:
        raise ValueError(f"bilinear_map: plane {x.shape[-2:]} vs {left.shape}, {right.shape}")
    out = np.matmul(np.matmul(left, x.data), right.T)
    return make(out, (x,), lambda g: (np.matmul(np.matmul(left.T, g), right),))


def charbonnier(u, v, eps: float = 1e-3) -> Tensor:
    """Sum over all elements of ``sqrt((u - v)^2 + eps^2)``."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise ValueError(f"charbonnier: shape mismatch {u.shape} vs {v.shape}")
    d = u.data - v.data
    root = np.sqrt(d * d + eps * eps)

    def backward(g):
        gd = g * d / root
        return gd, -gd

    return make(np.asarray(root.sum()), (u, v), backward)


# --------------------------------------------------------------------- padding


def _pad_array(x, pads, mode):
    t, b, l, r = pads
    widths = [(0, 0)] * (x.ndim - 2) + [(t, b), (l, r)]
    if mode == "replicate":
        return np.pad(x, widths, mode="edge")
    return np.pad(x, widths, mode="constant")


def _pad_adjoint(g, pads, mode):
    t, b, l, r = pads
    H = g.shape[-2] - t - b
    W = g.shape[-1] - l - r
    if mode == "replicate":
        g = g.copy()
        if l:
            g[..., l] += g[..., :l].sum(axis=-1)
        if r:
            g[..., l + W - 1] += g[..., l + W:].sum(axis=-1)
        if t:
            g[..., t, :] += g[..., :t, :].sum(axis=-2)
        if b:
            g[..., t + H - 1, :] += g[..., t + H:, :].sum(axis=-2)
    return g[..., t:t + H, l:l + W]


def pad2d(x: Tensor, pads, mode: str = "replicate") -> Tensor:
    """Pad the last two axes by ``(top, bottom, left, right)``."""
    if mode not in ("zero", "replicate"):
        raise ValueError(f"unknown pad mode {mode!r}")
    return make(_pad_array(x.data, pads, mode), (x,), lambda g: (_pad_adjoint(g, pads, mode),))


# ----------------------------------------------------------------- convolution


def _im2col(xp, kh, kw, stride, dilation):
    eh, ew = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    win = sliding_window_view(xp, (eh, ew), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]
    N, C, Ho, Wo = win.shape[:4]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(C * kh * kw, N * Ho * Wo)
    return cols, Ho, Wo


def conv2d(x, weight, bias=None, stride: int = 1, dilation: int = 1, padding: str = "zero") -> Tensor:
    """2-D cross-correlation of ``x`` (N, Cin, H, W) with ``weight`` (Cout, Cin, kh, kw).

    ``padding`` is ``"zero"`` or ``"replicate"`` (same-size output at stride 1)
    or ``"valid"`` (no padding).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    N, C, H, W = x.shape
    Co, Ci, kh, kw = weight.shape
    if Ci != C:
        raise ValueError(f"conv2d: input has {C} channels, weight expects {Ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel sides must be odd, got {kh}x{kw}")
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be >= 1")
    if padding not in _PAD_MODES:
        raise ValueError(f"unknown padding {padding!r}")
    if padding == "valid":
        pads = (0, 0, 0, 0)
        xp = x.data
    else:
        ph, pw = dilation * (kh // 2), dilation * (kw // 2)
        pads = (ph, ph, pw, pw)
        xp = _pad_array(x.data, pads, padding)
    if xp.shape[2] < dilation * (kh - 1) + 1 or xp.shape[3] < dilation * (kw - 1) + 1:
        raise ValueError("conv2d: input smaller than the dilated kernel")
    cols, Ho, Wo = _im2col(xp, kh, kw, stride, dilation)
    w2 = weight.data.reshape(Co, -1)
    out = (w2 @ cols).reshape(Co, N, Ho, Wo).transpose(1, 0, 2, 3)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (Co,):
            raise ValueError(f"conv2d: bias shape {bias.shape} != ({Co},)")
        out = out + bias.data[:, None, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)
    xp_shape = xp.shape

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(Co, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(C, kh, kw, N, Ho, Wo)
            gxp = np.zeros(xp_shape)
            he, we = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
            for ky in range(kh):
                for kx in range(kw):
                    oy, ox = ky * dilation, kx * dilation
                    gxp[:, :, oy:oy + he:stride, ox:ox + we:stride] += gcols[:, ky, kx].transpose(1, 0, 2, 3)
            gx = _pad_adjoint(gxp, pads, padding) if padding != "valid" else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    return make(out, parents, backward)


# ------------------------------------------------------------- rearrangements


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """(N, C*s*s, H, W) -> (N, C, s*H, s*W); channel ``c*s*s + i*s + j`` lands at offset (i, j)."""
    N, Cs, H, W = x.shape
    if Cs % (s * s):
        raise ValueError(f"pixel_shuffle: {Cs} channels not divisible by {s * s}")
    C = Cs // (s * s)
    out = x.data.reshape(N, C, s, s, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(N, C, H * s, W * s)

    def backward(g):
        return (g.reshape(N, C, H, s, W, s).transpose(0, 1, 3, 5, 2, 4).reshape(N, Cs, H, W),)

    return make(out, (x,), backward)


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    N, C, Hs, Ws = x.shape
    if Hs % s or Ws % s:
        raise ValueError(f"pixel_unshuffle: spatial dims {Hs}x{Ws} not divisible by {s}")
    H, W = Hs // s, Ws // s
    out = x.data.reshape(N, C, H, s, W, s).transpose(0, 1, 3, 5, 2, 4).reshape(N, C * s * s, H, W)

    def backward(g):
        return (g.reshape(N, C, s, s, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(N, C, Hs, Ws),)

    return make(out, (x,), backward)


def upsample_nearest(x: Tensor, s: int) -> Tensor:
    N, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, s, axis=2), s, axis=3)
    return make(out, (x,), lambda g: (g.reshape(N, C, H, s, W, s).sum(axis=(3, 5)),))


# ----------------------------------------------------------- sampling kernels


def bilinear_sample(x: Tensor, coords) -> Tensor:
    """Sample ``x`` at real-valued (row, col) positions, clamped to the image.

    ``coords`` has shape (N, Ho, Wo, 2); the result is (N, C, Ho, Wo).
    """
    coords = as_tensor(coords)
    if not np.all(np.isfinite(coords.data)):
        raise ValueError("bilinear_sample: non-finite coordinates")
    if coords.ndim != 4 or coords.shape[-1] != 2 or coords.shape[0] != x.shape[0]:
        raise ValueError(f"bilinear_sample: coords shape {coords.shape}")
    py = coords.data[None, ..., 0].transpose(1, 0, 2, 3)
    px = coords.data[None, ..., 1].transpose(1, 0, 2, 3)
    out = _backend.bilinear_gather(x.data, py, px)[:, :, 0]

    def backward(g):
        gin, gpy, gpx = _backend.bilinear_scatter(g[:, :, None], x.data, py, px)
        gc = np.stack([gpy[:, 0], gpx[:, 0]], axis=-1) if coords.requires_grad else None
        return gin, gc

    return make(out, (x, coords), backward)


def deformable_conv2d(x, weight, bias, offsets, modulation, dilation: int = 1) -> Tensor:
    """Modulated deformable convolution.

    For output site m and kernel tap o the input is sampled at
    ``m + o*dilation + offsets[m, o]`` (bilinear, clamped to the image) and
    scaled by ``modulation[m, o]``. ``offsets`` is (N, 2*O, H, W) with the row
    offset of tap o in channel 2o and the column offset in 2o+1; ``modulation``
    is (N, O, H, W). With zero offsets and unit modulation this equals
    ``conv2d(..., padding="replicate")``.
    """
    x, weight, offsets, modulation = map(as_tensor, (x, weight, offsets, modulation))
    N, C, H, W = x.shape
    Co, Ci, kh, kw = weight.shape
    if Ci != C:
        raise ValueError(f"deformable_conv2d: input has {C} channels, weight expects {Ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("deformable_conv2d: kernel sides must be odd")
    O = kh * kw
    if offsets.shape != (N, 2 * O, H, W):
        raise ValueError(f"offsets shape {offsets.shape} != {(N, 2 * O, H, W)}")
    if modulation.shape != (N, O, H, W):
        raise ValueError(f"modulation shape {modulation.shape} != {(N, O, H, W)}")
    ky, kx = np.meshgrid(np.arange(kh) - kh // 2, np.arange(kw) - kw // 2, indexing="ij")
    base_y = (ky.ravel() * dilation)[None, :, None, None] + np.arange(H)[None, None, :, None]
    base_x = (kx.ravel() * dilation)[None, :, None, None] + np.arange(W)[None, None, None, :]
    py = base_y + offsets.data[:, 0::2]
    px = base_x + offsets.data[:, 1::2]
    samp = _backend.bilinear_gather(x.data, py, px)  # (N, C, O, H, W)
    a = modulation.data
    val = samp * a[:, None]
    cols = val.transpose(1, 2, 0, 3, 4).reshape(C * O, N * H * W)
    w2 = weight.data.reshape(Co, -1)
    out = (w2 @ cols).reshape(Co, N, H, W).transpose(1, 0, 2, 3)
    parents = [x, weight, offsets, modulation]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(Co, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gval = (w2.T @ g2).reshape(C, O, N, H, W).transpose(2, 0, 1, 3, 4)
        gmod = (gval * samp).sum(axis=1) if modulation.requires_grad else None
        gx = goff = None
        if x.requires_grad or offsets.requires_grad:
            gx, gpy, gpx = _backend.bilinear_scatter(gval * a[:, None], x.data, py, px)
            if offsets.requires_grad:
                goff = np.empty(offsets.shape)
                goff[:, 0::2] = gpy
                goff[:, 1::2] = gpx
        grads = [gx if x.requires_grad else None, gw, goff, gmod]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    return make(out, parents, backward)


def dynamic_local_filter(z, c, r=None, p: int = 2, s: int = 1) -> Tensor:
    """Per-site filtering: ``out[i,j] = r[i,j] + sum_t c[t,i,j] * z[nbhd_t(i//s, j//s)]``.

    ``z`` is (N, C, h, w); ``c`` is (N, (2p+1)^2, s*h, s*w) and the same filter
    is applied to every channel of ``z``. Borders replicate.
    """
    z, c = as_tensor(z), as_tensor(c)
    N, C, h, w = z.shape
    taps = (2 * p + 1) ** 2
    if c.ndim != 4 or c.shape[0] != N or c.shape[1] != taps:
        raise ValueError(f"dynamic_local_filter: need {taps} coefficients per site, got {c.shape}")
    H, W = c.shape[2:]
    if H % s or W % s or H // s != h or W // s != w:
        raise ValueError(f"dynamic_local_filter: filter grid {H}x{W} is not {s}x the input {h}x{w}")
    out = _backend.dynamic_filter_forward(z.data, c.data, p, s)
    parents = [z, c]
    if r is not None:
        r = as_tensor(r)
        if r.shape != (N, C, H, W):
            raise ValueError(f"dynamic_local_filter: residual shape {r.shape} != {(N, C, H, W)}")
        out = out + r.data
        parents.append(r)

    def backward(g):
        gz, gc = _backend.dynamic_filter_backward(g, z.data, c.data, p, s)
        grads = [gz if z.requires_grad else None, gc if c.requires_grad else None]
        if r is not None:
            grads.append(g)
        return tuple(grads)

    return make(out, parents, backward)
