"""The downsampling operator A, its pseudoinverses, and LR-space kernel fitting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal
from scipy.linalg import solve_triangular

from . import functional as F
from .degradation import bicubic_downsample, blur, cubic, dead_leaves, gaussian_kernel, ANCHOR_SIGMA
from .nn import Conv2d, Linear, Module, lrelu
from .optim import Adam
from .tensor import Tensor, as_tensor


def bicubic_taps(s):
    """1-D antialiased Keys taps of an integer-factor downsample and the offset of the first tap.

    Output sample ``i`` equals ``sum_t taps[t] * x[s*i + first + t]``.
    """
    if s == 1:
        return np.ones(1), 0
    centre = (s - 1) / 2.0
    first = int(math.floor(centre - 2 * s)) + 1
    pos = np.arange(first, int(math.ceil(centre + 2 * s)))
    w = cubic((pos - centre) / s) / s
    nz = np.nonzero(w)[0]
    pos, w = pos[nz[0]:nz[-1] + 1], w[nz[0]:nz[-1] + 1]
    return w / w.sum(), int(pos[0])


class DownsampleOperator:
    """``x -> bicubic_downsample(blur(x, k_D), s)`` realised as one strided convolution.

    The composite kernel is ``k_D`` convolved with the bicubic taps, zero-padded
    to odd sides; borders replicate the input once, so the realisation agrees
    with the two-stage definition away from the image edge.
    """

    def __init__(self, s, kD=None):
        self.s = int(s)
        if kD is None:
            kD = gaussian_kernel(ANCHOR_SIGMA[s]) if s in ANCHOR_SIGMA else np.ones((1, 1))
        self.kD = np.asarray(kD, dtype=np.float64)
        taps, first = bicubic_taps(self.s)
        kernel = signal.convolve2d(np.outer(taps, taps), self.kD[::-1, ::-1])
        r = self.kD.shape[0] // 2, self.kD.shape[1] // 2
        self.offset = (first - r[0], first - r[1])
        if kernel.shape[0] % 2 == 0:
            kernel = np.pad(kernel, ((0, 1), (0, 0)))
        if kernel.shape[1] % 2 == 0:
            kernel = np.pad(kernel, ((0, 0), (0, 1)))
        self.kernel = kernel
        # separable factors, used for exact pseudoinverses
        u, sv, vt = np.linalg.svd(self.kD)
        self.separable = sv.size == 1 or sv[1] <= 1e-12 * sv[0]
        if self.separable:
            ky = u[:, 0] * np.sqrt(sv[0])
            kx = vt[0] * np.sqrt(sv[0])
            if ky.sum() < 0:
                ky, kx = -ky, -kx
            self.k1 = (np.convolve(taps, ky[::-1]), np.convolve(taps, kx[::-1]))

    def lr_shape(self, hw):
        h, w = hw
        if h % self.s or w % self.s:
            raise ValueError(f"HR dims {h}x{w} not divisible by {self.s}")
        return h // self.s, w // self.s

    def _pads(self, hw):
        h, w = self.lr_shape(hw)
        kh, kw = self.kernel.shape
        top, left = -self.offset[0], -self.offset[1]
        bottom = self.s * (h - 1) + self.offset[0] + kh - 1 - (hw[0] - 1)
        right = self.s * (w - 1) + self.offset[1] + kw - 1 - (hw[1] - 1)
        return top, bottom, left, right

    def apply(self, x):
        """Apply A to a Tensor or array shaped (N, C, H, W); returns the same kind."""
        is_tensor = isinstance(x, Tensor)
        x = as_tensor(x)
        n, c, hh, ww = x.shape
        pads = self._pads((hh, ww))
        if min(pads) < 0:
            raise ValueError("image too small for the operator kernel")
        z = F.reshape(x, (n * c, 1, hh, ww))
        z = F.pad2d(z, pads, "replicate")
        z = F.conv2d(z, Tensor(self.kernel[None, None]), None, stride=self.s, padding="valid")
        h, w = self.lr_shape((hh, ww))
        out = F.reshape(z, (n, c, h, w))
        return out if is_tensor else out.data

    __call__ = apply

    def reference(self, x):
        """Two-stage definition: replicate-border blur followed by bicubic downsampling."""
        return bicubic_downsample(blur(x, self.kD), self.s)

    def axis_matrix(self, n_hr, axis):
        """Dense 1-D factor along ``axis`` (0 rows, 1 cols) for a separable ``k_D``."""
        if not self.separable:
            raise ValueError("k_D is not separable")
        return _axis_matrix(self.k1[axis].tobytes(), self.offset[axis], self.s, int(n_hr))

    def matrix(self, hw):
        """Dense matrix of A on one channel of size ``hw`` (row-major flattening)."""
        h, w = hw
        if h * w > 64 * 64:
            raise ValueError(f"dense operator limited to 64x64 images, got {h}x{w}")
        basis = np.eye(h * w).reshape(h * w, 1, h, w)
        cols = self.apply(basis)
        return cols.reshape(h * w, -1).T


@lru_cache(maxsize=32)
def _axis_matrix(k_bytes, offset, s, n_hr):
    k = np.frombuffer(k_bytes)
    n_lr = n_hr // s
    m = np.zeros((n_lr, n_hr))
    for i in range(n_lr):
        idx = np.clip(s * i + offset + np.arange(k.size), 0, n_hr - 1)
        np.add.at(m[i], idx, k)
    m.setflags(write=False)
    return m


class ExactPinv:
    """Moore-Penrose pseudoinverse of A from SVDs.

    ``dense=True`` inverts the full operator matrix (images up to 64x64);
    otherwise the separable factors are inverted, ``A+ = Ay+ (x) Ax+``, which
    is exact for any size when ``k_D`` is separable.
    """

    kind = "exact"

    def __init__(self, op: DownsampleOperator, dense=False, rcond=1e-12):
        self.op = op
        self.dense = dense
        self.rcond = rcond
        self._cache = {}

    def _factors(self, lr_hw):
        key = tuple(lr_hw)
        if key not in self._cache:
            s = self.op.s
            hr = (lr_hw[0] * s, lr_hw[1] * s)
            if self.dense:
                self._cache[key] = np.linalg.pinv(self.op.matrix(hr), rcond=self.rcond)
            else:
                py = np.linalg.pinv(self.op.axis_matrix(hr[0], 0), rcond=self.rcond)
                px = np.linalg.pinv(self.op.axis_matrix(hr[1], 1), rcond=self.rcond)
                self._cache[key] = (py, px)
        return self._cache[key]

    def apply(self, y):
        is_tensor = isinstance(y, Tensor)
        y = as_tensor(y)
        n, c, h, w = y.shape
        s = self.op.s
        fac = self._factors((h, w))
        if self.dense:
            flat = F.reshape(y, (n * c, h * w))
            out = F.reshape(F.matmul(flat, Tensor(fac.T)), (n, c, h * s, w * s))
        else:
            out = F.bilinear_map(y, fac[0], fac[1])
        return out if is_tensor else out.data

    __call__ = apply

    def matrix(self, lr_hw):
        fac = self._factors(lr_hw)
        return fac if self.dense else np.kron(fac[0], fac[1])


class PinvNet(Module):
    """Learned A+: conv 7x7 -> 32, conv 5x5 -> 32, conv 3x3 -> 3 s^2, pixel shuffle."""

    kind = "learned"

    def __init__(self, s, rng, width=32, channels=3):
        self.s = s
        self.c1 = Conv2d(channels, width, 7, rng)
        self.c2 = Conv2d(width, width, 5, rng)
        self.c3 = Conv2d(width, channels * s * s, 3, rng)
        self.residual = None

    def __call__(self, y):
        is_tensor = isinstance(y, Tensor)
        h = lrelu(self.c1(as_tensor(y)))
        h = lrelu(self.c2(h))
        out = F.pixel_shuffle(self.c3(h), self.s)
        return out if is_tensor else out.data

    apply = __call__


@dataclass
class PinvFitReport:
    steps: int
    loss: float
    converged: bool
    history: list = field(default_factory=list)


def pinv_loss(op, net, x):
    """Both penalties of the pseudoinverse objective, as mean squared errors."""
    ax = op(x)
    y = ax
    t1 = F.mean(F.square(ax - op(net(ax))))
    ay = net(y)
    t2 = F.mean(F.square(ay - net(op(ay))))
    return t1 + t2


def fit_pinv_net(op, images, rng, threshold=1e-7, max_steps=20000, batch=4, patch=32, lr=1e-3,
                 net=None, log_every=0, lr_decay_every=2000):
    """Train a :class:`PinvNet` until the objective drops below ``threshold``.

    ``images`` is a list of (C, H, W) arrays; random ``patch`` crops feed each step.
    Returns ``(net, report)``; the final loss is stored on ``net.residual``.
    """
    if len(images) == 0:
        raise ValueError("need at least one training image")
    channels = images[0].shape[0]
    net = net or PinvNet(op.s, rng, channels=channels)
    opt = Adam(net.parameters(), lr=lr, weight_decay=0.0)
    p = patch - patch % op.s
    history = []
    loss_val = float("inf")
    step = 0
    for step in range(1, max_steps + 1):
        crops = []
        for _ in range(batch):
            img = images[rng.integers(len(images))]
            i = rng.integers(img.shape[1] - p + 1)
            j = rng.integers(img.shape[2] - p + 1)
            crops.append(img[:, i:i + p, j:j + p])
        x = Tensor(np.stack(crops))
        opt.zero_grad()
        loss = pinv_loss(op, net, x)
        loss.backward()
        opt.step()
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            break
        history.append(loss_val)
        if log_every and step % log_every == 0:
            print(f"pinv step {step} loss {loss_val:.3e}")
        if lr_decay_every and step % lr_decay_every == 0:
            opt.lr *= 0.5
        if loss_val < threshold:
            break
    net.residual = loss_val
    return net, PinvFitReport(step, loss_val, loss_val < threshold, history)


def project(x_p, y_D, op, pinv):
    """``x_p + A+(y_D - A x_p)``: the component of ``x_p`` in the null space of A plus ``A+ y_D``."""
    is_tensor = isinstance(x_p, Tensor) or isinstance(y_D, Tensor)
    x_p, y_D = as_tensor(x_p), as_tensor(y_D)
    lr = op.lr_shape(x_p.shape[-2:])
    if tuple(y_D.shape[-2:]) != lr or y_D.shape[:2] != x_p.shape[:2]:
        raise ValueError(f"y_D shape {y_D.shape} does not match x_p {x_p.shape}")
    out = x_p + pinv(y_D - op(x_p))
    return out if is_tensor else out.data


# --------------------------------------------------------------- k^L fitting


@lru_cache(maxsize=4)
def default_patches(n=8, size=192, seed=7):
    rng = np.random.default_rng(seed)
    return tuple(dead_leaves(rng, size) for _ in range(n))


def klow_support(k, s):
    side = int(math.ceil(max(np.shape(k)) / s))
    side += 1 - side % 2
    return side + 2


def _windows(a, m, margin):
    """Rows of flipped m x m neighbourhoods of ``a`` at sites ``margin`` away from the border."""
    h, w = a.shape
    r = m // 2
    win = sliding_window_view(a, (m, m))  # win[i, j] is a[i:i+m, j:j+m], centred at (i+r, j+r)
    sub = win[margin - r:h - margin - r, margin - r:w - margin - r]
    return sub[..., ::-1, ::-1].reshape(-1, m * m)


def _margin(k, s, m):
    return int(math.ceil((max(np.shape(k)) // 2 + 2 * s) / s)) + m // 2 + 1


@dataclass
class KLowSystem:
    """Triangular factor ``R`` of the stacked design ``[X | t]`` over all patch rows.

    Keeping ``R`` instead of the normal equations makes residuals exact: for any
    candidate ``kL``, ``||X kL - t|| = ||R [kL; -1]||``.
    """

    R: np.ndarray
    rows: int
    m: int

    @property
    def gram(self):
        a = self.R[:, :-1]
        return a.T @ a

    @property
    def rhs(self):
        return self.R[:, :-1].T @ self.R[:, -1]

    @property
    def bb(self):
        return float(self.R[:, -1] @ self.R[:, -1])


def klow_system(k, s, patches=None, support=None, margin=None):
    """Least-squares system of ``min sum ||[x * k] down_s - (x down_s) * kL||^2`` over patches."""
    patches = default_patches() if patches is None else patches
    m = support or klow_support(k, s)
    margin = margin if margin is not None else _margin(k, s, m)
    R = np.zeros((0, m * m + 1))
    rows = 0
    for p in patches:
        p = np.asarray(p, dtype=np.float64)
        planes = p if p.ndim == 3 else p[None]
        for plane in planes:
            h, w = plane.shape
            plane = plane[: h - h % s, : w - w % s]
            b = bicubic_downsample(blur(plane, k), s)
            a = bicubic_downsample(plane, s)
            if min(a.shape) <= 2 * margin:
                raise ValueError("patch too small for the kernel support")
            X = _windows(a, m, margin)
            t = b[margin:b.shape[0] - margin, margin:b.shape[1] - margin].ravel()
            R = np.linalg.qr(np.vstack([R, np.column_stack([X, t])]), mode="r")
            rows += t.size
    return KLowSystem(R, rows, m)


def solve_klow(system):
    n = system.m * system.m
    R11, r12 = system.R[:n, :n], system.R[:n, n]
    d = np.abs(np.diag(R11))
    if R11.shape[0] == n and d.min() > 1e-7 * d.max():
        return solve_triangular(R11, r12)
    # near-singular design, e.g. flat patches: ridge on the normal equations
    return np.linalg.solve(system.gram + 1e-10 * np.eye(n), system.rhs)


def klow_residual(system, kl_flat):
    """Per-pixel RMS residual of a candidate ``kL`` under ``system``."""
    v = np.append(np.asarray(kl_flat, dtype=np.float64).ravel(), -1.0)
    return float(np.linalg.norm(system.R @ v) / math.sqrt(system.rows))


def fit_klow(k, s, patches=None, support=None, margin=None):
    """Least-squares LR-space kernel. Returns ``(kL, rms_residual)``."""
    system = klow_system(k, s, patches, support, margin)
    sol = solve_klow(system)
    return sol.reshape(system.m, system.m), klow_residual(system, sol)


class KLowMLP(Module):
    """One-hidden-layer map from a flattened kernel to flattened LR-space taps."""

    def __init__(self, in_side, out_side, rng, hidden=2048):
        self.in_side, self.out_side = in_side, out_side
        self.l1 = Linear(in_side * in_side, hidden, rng)
        self.l2 = Linear(hidden, out_side * out_side, rng)
        # per-feature standardization of the kernel taps, set from the training family
        self.in_mean = np.zeros(in_side * in_side)
        self.in_scale = np.ones(in_side * in_side)
        # the output layer predicts coordinates in a fixed basis around a fixed offset
        self.out_mean = np.zeros(out_side * out_side)
        self.out_basis = np.eye(out_side * out_side)

    def standardize(self, inputs, targets, gram=None, floor=1e-10):
        """Fix input statistics and the output frame from a kernel family.

        With ``gram`` the output basis whitens the quadratic objective, so every
        output coordinate carries unit curvature. The output layer is zeroed and
        the map starts exactly at the mean target.
        """
        self.in_mean = inputs.mean(axis=0)
        std = inputs.std(axis=0)
        self.in_scale = 1.0 / np.where(std > 1e-12, std, 1.0)
        self.out_mean = targets.mean(axis=0)
        if gram is not None:
            lam, vec = np.linalg.eigh(gram)
            lam = np.maximum(lam, lam.max() * floor)
            self.out_basis = (vec / np.sqrt(lam)).T
        self.l2.weight.data = np.zeros_like(self.l2.weight.data)
        self.l2.bias.data = np.zeros_like(self.l2.bias.data)

    def __call__(self, kflat):
        z = (np.asarray(kflat) - self.in_mean) * self.in_scale
        u = self.l2(F.leaky_relu(self.l1(Tensor(z)), 0.2))
        return F.matmul(u, Tensor(self.out_basis)) + Tensor(self.out_mean)

    def predict(self, k):
        k = pad_kernel(k, self.in_side)
        return self(k.reshape(1, -1)).data.reshape(self.out_side, self.out_side)


def pad_kernel(k, side):
    k = np.asarray(k, dtype=np.float64)
    if k.shape[0] > side or k.shape[1] > side:
        raise ValueError(f"kernel {k.shape} exceeds {side}")
    py, px = (side - k.shape[0]) // 2, (side - k.shape[1]) // 2
    return np.pad(k, ((py, side - k.shape[0] - py), (px, side - k.shape[1] - px)))


@dataclass
class KLowFit:
    backend: str
    model: object
    residuals: list
    lsq_residuals: list
    history: list = field(default_factory=list)


def fit_klow_mlp(kernels, s, patches=None, rng=None, epochs=60, lr=1e-4, wd=1e-4, hidden=2048,
                 batches_per_epoch=50, batch=16, support=None, log_every=0):
    """Fit one MLP over a kernel family against the same objective as :func:`fit_klow`.

    The objective of each kernel is quadratic in ``kL``; it is evaluated through
    its normal equations, so a training step costs no convolutions.
    """
    if len(kernels) < 2:
        raise ValueError("need at least two kernels")
    rng = rng or np.random.default_rng(0)
    patches = default_patches() if patches is None else patches
    in_side = max(max(k.shape) for k in kernels)
    in_side += 1 - in_side % 2
    m = support or max(klow_support(k, s) for k in kernels)
    margin = max(_margin(k, s, m) for k in kernels)
    systems = [klow_system(k, s, patches, m, margin) for k in kernels]
    targets = np.stack([solve_klow(sy) for sy in systems])
    lsq = [klow_residual(sy, t) for sy, t in zip(systems, targets)]
    # the Gram matrix depends only on the patches, so it is shared
    gram = systems[0].gram / systems[0].rows
    inputs = np.stack([pad_kernel(k, in_side).ravel() for k in kernels])
    net = KLowMLP(in_side, m, rng, hidden)
    net.standardize(inputs, targets, gram)
    opt = Adam(net.parameters(), lr=lr, weight_decay=wd)
    G = Tensor(gram)
    history = []
    for epoch in range(epochs):
        total = 0.0
        for _ in range(batches_per_epoch):
            idx = rng.integers(len(kernels), size=min(batch, len(kernels)))
            d = net(inputs[idx]) - Tensor(targets[idx])
            loss = F.sum(F.matmul(d, G) * d) * (1.0 / len(idx))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
        history.append(total / batches_per_epoch)
        if not np.isfinite(history[-1]):
            raise FloatingPointError(f"k^L MLP diverged at epoch {epoch}")
        if log_every and (epoch + 1) % log_every == 0:
            print(f"klow epoch {epoch + 1} excess {history[-1]:.3e}")
    preds = net(inputs).data
    res = [klow_residual(sy, p) for sy, p in zip(systems, preds)]
    return KLowFit("mlp", net, res, lsq, history)
