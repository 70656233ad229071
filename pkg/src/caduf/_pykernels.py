"""Pure numpy implementations of the compiled kernels.

These are the reference semantics for ``_ckernels.pyx``; the two must agree
to rounding error.

Bilinear sampling clamps coordinates to ``[0, n-1]`` per axis. The gradient
with respect to a coordinate is zero wherever the clamp was active. A sample at
the last row/column uses the cell below it (``i0 = n-2``, fraction 1) so the
gradient there is well defined.

Dynamic filtering reads, for output site ``(i, j)``, the ``(2p+1)^2``
neighbourhood of ``z`` centred at ``(i // s, j // s)`` with replicate borders.
Tap ``t = l*(2p+1) + m`` addresses row offset ``l-p`` and column offset ``m-p``.
"""

import numpy as np


def _cells(p, n):
    inside = ((p >= 0.0) & (p <= n - 1)).astype(np.float64)
    q = np.clip(p, 0.0, n - 1)
    i0 = np.floor(q).astype(np.intp)
    np.minimum(i0, n - 2, out=i0)
    np.maximum(i0, 0, out=i0)
    i1 = i0 + 1 if n > 1 else i0
    return i0, i1, q - i0, inside


def bilinear_gather(inp, py, px):
    N, C, H, W = inp.shape
    y0, y1, fy, _ = _cells(py, H)
    x0, x1, fx, _ = _cells(px, W)
    flat = inp.reshape(N, C, H * W)
    out = np.empty((N, C) + py.shape[1:])
    for n in range(N):
        f = flat[n]
        v00 = f[:, y0[n] * W + x0[n]]
        v01 = f[:, y0[n] * W + x1[n]]
        v10 = f[:, y1[n] * W + x0[n]]
        v11 = f[:, y1[n] * W + x1[n]]
        a, b = fy[n], fx[n]
        out[n] = (1.0 - a) * ((1.0 - b) * v00 + b * v01) + a * ((1.0 - b) * v10 + b * v11)
    return out


def bilinear_scatter(grad, inp, py, px):
    N, C, H, W = inp.shape
    y0, y1, fy, iny = _cells(py, H)
    x0, x1, fx, inx = _cells(px, W)
    flat = inp.reshape(N, C, H * W)
    gin = np.zeros((N, C, H * W))
    gpy = np.zeros(py.shape)
    gpx = np.zeros(px.shape)
    offs = (np.arange(C) * (H * W))[:, None]
    for n in range(N):
        g = grad[n].reshape(C, -1)
        a, b = fy[n].ravel(), fx[n].ravel()
        i00 = (y0[n] * W + x0[n]).ravel()
        i01 = (y0[n] * W + x1[n]).ravel()
        i10 = (y1[n] * W + x0[n]).ravel()
        i11 = (y1[n] * W + x1[n]).ravel()
        idx = np.concatenate([offs + i00, offs + i01, offs + i10, offs + i11], axis=1)
        wts = np.concatenate(
            [g * ((1 - a) * (1 - b)), g * ((1 - a) * b), g * (a * (1 - b)), g * (a * b)], axis=1
        )
        gin[n] = np.bincount(idx.ravel(), weights=wts.ravel(), minlength=C * H * W).reshape(C, H * W)
        f = flat[n]
        v00, v01, v10, v11 = f[:, i00], f[:, i01], f[:, i10], f[:, i11]
        dy = (1 - b) * (v10 - v00) + b * (v11 - v01)
        dx = (1 - a) * (v01 - v00) + a * (v11 - v10)
        gpy[n] = ((g * dy).sum(axis=0) * iny[n].ravel()).reshape(py.shape[1:])
        gpx[n] = ((g * dx).sum(axis=0) * inx[n].ravel()).reshape(px.shape[1:])
    return gin.reshape(N, C, H, W), gpy, gpx


def _neighbour_index(n_lr, n_hr, s, p):
    base = np.arange(n_hr) // s
    return [np.clip(base + d - p, 0, n_lr - 1) for d in range(2 * p + 1)]


def dynamic_filter_forward(z, c, p, s):
    N, C, h, w = z.shape
    H, W = c.shape[2:]
    side = 2 * p + 1
    rows = _neighbour_index(h, H, s, p)
    cols = _neighbour_index(w, W, s, p)
    out = np.zeros((N, C, H, W))
    for l in range(side):
        zr = z[:, :, rows[l], :]
        for m in range(side):
            out += c[:, None, l * side + m] * zr[:, :, :, cols[m]]
    return out


def dynamic_filter_backward(g, z, c, p, s):
    N, C, h, w = z.shape
    H, W = c.shape[2:]
    side = 2 * p + 1
    rows = _neighbour_index(h, H, s, p)
    cols = _neighbour_index(w, W, s, p)
    gz = np.zeros(N * C * h * w)
    gc = np.zeros((N, side * side, H, W))
    plane = (np.arange(N * C) * (h * w))[:, None]
    for l in range(side):
        zr = z[:, :, rows[l], :]
        for m in range(side):
            t = l * side + m
            gc[:, t] = (g * zr[:, :, :, cols[m]]).sum(axis=1)
            contrib = (c[:, None, t] * g).reshape(N * C, H * W)
            idx = plane + (rows[l][:, None] * w + cols[m][None, :]).ravel()
            gz += np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=gz.size)
    return gz.reshape(N, C, h, w), gc
