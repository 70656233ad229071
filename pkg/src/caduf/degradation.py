"""Blur kernels, bicubic resampling and synthesis of training pairs.

Images are float64 arrays laid out as (C, H, W) or (H, W); kernels are 2-D
arrays with odd sides, non-negative taps and unit sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import ndimage, signal

MAX_KERNEL_SIDE = 45
ANCHOR_SIGMA = {2: 0.8, 4: 1.8}

# family -> scale -> sampling ranges
FAMILIES = {
    "GaussianSM": {
        2: {"sigma": (0.2, 2.0), "length": (1.0, 9.0), "noise": 0.0},
        4: {"sigma": (0.2, 4.0), "length": (1.0, 15.0), "noise": 0.0},
    },
    "GaussianCM": {
        2: {"sigma": (0.2, 1.0), "max_length": 16.0, "noise": 0.01},
        4: {"sigma": (0.2, 2.0), "max_length": 32.0, "noise": 0.01},
    },
}


class KernelError(ValueError):
    pass


def validate_kernel(k, name="kernel"):
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2:
        raise KernelError(f"{name} must be 2-D, got shape {k.shape}")
    h, w = k.shape
    if h % 2 == 0 or w % 2 == 0:
        raise KernelError(f"{name} sides must be odd, got {h}x{w}")
    if not np.all(np.isfinite(k)):
        raise KernelError(f"{name} has non-finite taps")
    if np.any(k < 0):
        raise KernelError(f"{name} has negative taps")
    total = k.sum()
    if abs(total - 1.0) > 1e-8:
        raise KernelError(f"{name} sums to {total!r}, expected 1")
    return k


def delta_kernel(size=1):
    if size % 2 == 0:
        raise KernelError("size must be odd")
    k = np.zeros((size, size))
    k[size // 2, size // 2] = 1.0
    return k


def _normalize(k):
    return k / k.sum()


def _trim(k, max_side=MAX_KERNEL_SIDE):
    """Crop zero margins symmetrically (keeping the centre) and cap each side at ``max_side``."""
    h, w = k.shape
    rows = np.nonzero(k.any(axis=1))[0]
    cols = np.nonzero(k.any(axis=0))[0]
    ry = max(h // 2 - rows.min(), rows.max() - h // 2)
    rx = max(w // 2 - cols.min(), cols.max() - w // 2)
    ry = min(ry, max_side // 2)
    rx = min(rx, max_side // 2)
    return k[h // 2 - ry:h // 2 + ry + 1, w // 2 - rx:w // 2 + rx + 1]


def gaussian_kernel(sigma, size=None):
    """Sampled isotropic Gaussian; ``size`` defaults to ``2*ceil(3*sigma)+1``."""
    if not sigma > 0:
        raise KernelError(f"sigma must be positive, got {sigma}")
    if size is None:
        size = 2 * math.ceil(3 * sigma) + 1
    if size % 2 == 0 or size < 1:
        raise KernelError(f"size must be odd and positive, got {size}")
    r = np.arange(size) - size // 2
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return _normalize(np.outer(g, g))


def _splat(points, weights=None):
    """Bilinearly accumulate (row, col) points onto a grid centred on the origin."""
    points = np.round(np.asarray(points, dtype=np.float64), 12)
    if weights is None:
        weights = np.ones(len(points))
    half = int(np.ceil(np.abs(points).max())) + 1
    side = 2 * half + 1
    grid = np.zeros((side, side))
    p = points + half
    i0 = np.floor(p).astype(np.int64)
    f = p - i0
    for dy, wy in ((0, 1 - f[:, 0]), (1, f[:, 0])):
        for dx, wx in ((0, 1 - f[:, 1]), (1, f[:, 1])):
            np.add.at(grid, (i0[:, 0] + dy, i0[:, 1] + dx), weights * wy * wx)
    grid[grid < 1e-14 * grid.max()] = 0.0
    return grid


def linear_motion_kernel(angle, length):
    """Anti-aliased segment of ``length`` taps through the centre, at ``angle`` degrees."""
    if not 0.0 <= angle < 180.0:
        raise KernelError(f"angle must lie in [0, 180), got {angle}")
    if not length >= 1.0:
        raise KernelError(f"length must be >= 1, got {length}")
    half = (length - 1.0) / 2.0
    if half == 0.0:
        return delta_kernel(1)
    n = max(2, int(np.ceil(32 * length)))
    t = np.linspace(-half, half, n)
    theta = np.deg2rad(angle)
    # rows grow downwards, so a positive angle tilts the streak up-right
    pts = np.stack([-t * np.sin(theta), t * np.cos(theta)], axis=1)
    return _normalize(_trim(_splat(pts)))


def trajectory_kernel(rng, T=0.8, anxiety=None, n_steps=2000, max_length=16.0):
    """Camera-shake kernel from a random-acceleration walk of constant speed.

    ``max_length`` is the path length over a full exposure; only the first
    ``T`` fraction of the path is integrated. With ``anxiety`` unset it is drawn
    as ``10**R / 1000`` with ``R ~ U[0, 1]``. Sides are clamped to [11, 45].
    """
    if anxiety is None:
        anxiety = 10.0 ** rng.uniform(0.0, 1.0) / 1000.0
    momentum = 0.7 * rng.uniform()
    gauss = 10.0 * rng.uniform()
    shakes = 0.2 * rng.uniform()
    step = max_length / (n_steps - 1)
    angle = 2 * np.pi * rng.uniform()
    u = rng.uniform(size=n_steps)
    turn = rng.uniform(size=n_steps) - 0.5
    noise = gauss * rng.standard_normal((n_steps, 2))
    vx, vy = step * math.cos(angle), step * math.sin(angle)
    traj = np.zeros((n_steps, 2))
    x, y = 0.0, 0.0
    for i in range(1, n_steps):
        jx = jy = 0.0
        if u[i] < shakes * anxiety:
            r = math.hypot(vx, vy)
            a = math.atan2(vy, vx) + math.pi + turn[i]
            jx, jy = 2 * r * math.cos(a), 2 * r * math.sin(a)
        vx += jx + anxiety * (noise[i, 0] - momentum * x) * step
        vy += jy + anxiety * (noise[i, 1] - momentum * y) * step
        norm = step / math.hypot(vx, vy)
        vx, vy = vx * norm, vy * norm
        x, y = x + vx, y + vy
        traj[i] = x, y
    used = traj[: max(2, int(round(T * n_steps)))]
    used = used - 0.5 * (used.min(axis=0) + used.max(axis=0))
    k = _trim(_splat(used[:, ::-1]))
    h, w = k.shape
    ph, pw = max(0, (11 - h) // 2), max(0, (11 - w) // 2)
    k = np.pad(k, ((ph, ph), (pw, pw)))
    return _normalize(k)


def compose_kernels(a, b):
    """Full discrete convolution of two kernels, renormalised, sides capped at 45."""
    k = signal.convolve(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64), mode="full")
    k = np.clip(k, 0.0, None)
    k[k < 1e-300] = 0.0
    return _normalize(_trim(k))


_MODES = {"replicate": "nearest", "circular": "wrap"}


def blur(x, k, mode="replicate"):
    """Convolve each channel of ``x`` with ``k`` under ``mode`` in {replicate, circular}."""
    if mode not in _MODES:
        raise ValueError(f"unknown boundary mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if k.shape[0] > x.shape[-2] or k.shape[1] > x.shape[-1]:
        raise ValueError(f"kernel {k.shape} larger than image {x.shape[-2:]}")
    kk = k.reshape((1,) * (x.ndim - 2) + k.shape)
    return ndimage.convolve(x, kk, mode=_MODES[mode])


def cubic(x, a=-0.5):
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    return np.where(
        x <= 1,
        (a + 2) * x3 - (a + 3) * x2 + 1,
        np.where(x < 2, a * x3 - 5 * a * x2 + 8 * a * x - 4 * a, 0.0),
    )


@lru_cache(maxsize=64)
def _resize_matrix(n_in, n_out):
    """Row i holds the taps producing output sample i; borders replicate."""
    scale = n_out / n_in
    width = 4.0 if scale >= 1 else 4.0 / scale
    u = (np.arange(n_out) + 0.5) / scale - 0.5
    left = np.floor(u - width / 2).astype(np.int64)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    d = u[:, None] - idx
    w = cubic(d * scale) * scale if scale < 1 else cubic(d)
    w /= w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, n_in - 1)
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.repeat(np.arange(n_out), taps), idx.ravel()), w.ravel())
    m.setflags(write=False)
    return m


def resize_matrix(n_in, n_out):
    return _resize_matrix(int(n_in), int(n_out))


def resize(x, out_hw):
    """Separable Keys-cubic resize (antialiased when shrinking) to ``out_hw``."""
    x = np.asarray(x, dtype=np.float64)
    ry = resize_matrix(x.shape[-2], out_hw[0])
    rx = resize_matrix(x.shape[-1], out_hw[1])
    return ry @ x @ rx.T


def bicubic_downsample(x, s):
    h, w = np.shape(x)[-2:]
    if h % s or w % s:
        raise ValueError(f"image dims {h}x{w} not divisible by {s}")
    if s == 1:
        return np.array(x, dtype=np.float64)
    return resize(x, (h // s, w // s))


def bicubic_upsample(x, s):
    h, w = np.shape(x)[-2:]
    return resize(x, (h * s, w * s))


@dataclass(frozen=True)
class DegradationSpec:
    """Recipe for one degradation.

    ``motion`` is ``("none",)``, ``("linear", angle, length)`` or
    ``("trajectory", seed, T, R, max_length)``.
    """

    scale: int
    sigma: float
    motion: tuple = ("none",)
    noise: float = 0.0
    seed: int = 0
    family: str | None = None

    def validate(self):
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {self.scale}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.noise >= 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")
        kind = self.motion[0]
        if kind == "linear":
            _, angle, length = self.motion
            if not 0 <= angle < 180 or not length >= 1:
                raise ValueError(f"bad linear motion {self.motion}")
        elif kind == "trajectory":
            _, _, T, R, max_length = self.motion
            if not 0 < T <= 1 or not 0 <= R <= 1 or not max_length > 0:
                raise ValueError(f"bad trajectory motion {self.motion}")
        elif kind != "none":
            raise ValueError(f"unknown motion kind {kind!r}")
        if self.family is not None:
            lo, hi = FAMILIES[self.family][self.scale]["sigma"]
            if not lo <= self.sigma <= hi:
                raise ValueError(f"sigma {self.sigma} outside [{lo}, {hi}] for {self.family}")
        return self

    def motion_kernel(self):
        kind = self.motion[0]
        if kind == "linear":
            return linear_motion_kernel(self.motion[1], self.motion[2])
        if kind == "trajectory":
            _, seed, T, R, max_length = self.motion
            rng = np.random.default_rng(seed)
            return trajectory_kernel(rng, T=T, anxiety=10.0 ** R / 1000.0, max_length=max_length)
        return delta_kernel(1)

    def kernel(self):
        return compose_kernels(gaussian_kernel(self.sigma), self.motion_kernel())

    def anchor_kernel(self):
        return gaussian_kernel(ANCHOR_SIGMA[self.scale])


def sample_spec(rng, family, s):
    """Draw a spec uniformly from the family's ranges for scale ``s``."""
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    if s not in FAMILIES[family]:
        raise ValueError(f"unsupported scale {s}")
    ranges = FAMILIES[family][s]
    sigma = float(rng.uniform(*ranges["sigma"]))
    if family == "GaussianSM":
        motion = ("linear", float(rng.uniform(0.0, 180.0)), float(rng.uniform(*ranges["length"])))
    else:
        motion = ("trajectory", int(rng.integers(2**63 - 1)), 0.8, float(rng.uniform()), ranges["max_length"])
    seed = int(rng.integers(2**63 - 1))
    return DegradationSpec(s, sigma, motion, ranges["noise"], seed, family).validate()


@dataclass
class SamplePair:
    x: np.ndarray
    y: np.ndarray
    k: np.ndarray
    klow: np.ndarray
    y_anchor: np.ndarray
    spec: DegradationSpec = field(repr=False)


def degrade(x, k, s, noise=0.0, rng=None):
    """Blur with ``k`` (replicate borders), bicubic-downsample by ``s``, add AWGN."""
    y = bicubic_downsample(blur(x, k), s)
    if noise > 0:
        y = y + noise * rng.standard_normal(y.shape)
    return y


def synthesize(x, spec: DegradationSpec, klow_fitter=None):
    """Build a training tuple from HR image ``x`` (C, H, W) in [0, 1].

    ``klow_fitter(k, s)`` returns the LR-space kernel; it defaults to the
    least-squares fit on the built-in patch set.
    """
    spec.validate()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {x.shape}")
    s = spec.scale
    if x.shape[1] % s or x.shape[2] % s:
        raise ValueError(f"image dims {x.shape[1:]} not divisible by {s}")
    if x.min() < 0 or x.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    k = validate_kernel(spec.kernel())
    rng = np.random.default_rng([spec.seed, 1])
    y = degrade(x, k, s, spec.noise, rng)
    y_anchor = bicubic_downsample(blur(x, spec.anchor_kernel()), s)
    if klow_fitter is None:
        from .operators import fit_klow

        klow_fitter = lambda kern, scale: fit_klow(kern, scale)[0]
    klow = np.asarray(klow_fitter(k, s), dtype=np.float64)
    return SamplePair(x, y, k, klow, y_anchor, spec)


def with_noise(spec, noise):
    return replace(spec, noise=noise)


def dead_leaves(rng, size, channels=1, n_discs=3000, rmin=1.0, rmax=None):
    """Occluding random discs with power-law radii, a cheap stand-in for natural texture."""
    h, w = (size, size) if np.isscalar(size) else size
    rmax = rmax or max(h, w) / 4
    img = np.full((channels, h, w), np.nan)
    yy, xx = np.mgrid[0:h, 0:w]
    # radii follow a 1/r^3 density, sampled by inverting its CDF
    u = rng.uniform(size=n_discs)
    radii = 1.0 / np.sqrt(u / rmax ** 2 + (1 - u) / rmin ** 2)
    for r in radii:
        cy, cx = rng.uniform(-r, h + r), rng.uniform(-r, w + r)
        color = rng.uniform(size=(channels, 1))
        y0, y1 = max(0, int(cy - r)), min(h, int(cy + r) + 1)
        x0, x1 = max(0, int(cx - r)), min(w, int(cx + r) + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        sub = img[:, y0:y1, x0:x1]
        mask = ((yy[y0:y1, x0:x1] - cy) ** 2 + (xx[y0:y1, x0:x1] - cx) ** 2 <= r * r) & np.isnan(sub[0])
        sub[:, mask] = color
        if not np.isnan(img[0]).any():
            break
    img[np.isnan(img)] = 0.5
    return img if channels > 1 else img[0]
