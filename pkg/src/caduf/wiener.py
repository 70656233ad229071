"""FFT Wiener deconvolution and the rule that picks its regulariser."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_FLOOR = 1e-8
EPS_CAP = 1e-3


class WienerError(ValueError):
    pass


@dataclass(frozen=True)
class WienerConfig:
    eps: float = EPS_CAP
    mode: str = "padded"
    margin: int | None = None


def psf2otf(k, shape):
    """Transfer function of ``k`` zero-padded to ``shape`` with its centre moved to (0, 0)."""
    k = np.asarray(k, dtype=np.float64)
    kh, kw = k.shape
    if kh > shape[0] or kw > shape[1]:
        raise WienerError(f"kernel {k.shape} does not fit in {shape}")
    pad = np.zeros(shape)
    pad[:kh, :kw] = k
    pad = np.roll(pad, (-(kh // 2), -(kw // 2)), axis=(0, 1))
    return np.fft.fft2(pad)


def _deconv(y, K, eps):
    den = np.abs(K) ** 2 + eps
    if np.any(den == 0):
        raise WienerError("zero in the Wiener denominator: kernel spectrum vanishes and eps is 0")
    out = np.fft.ifft2(np.conj(K) * np.fft.fft2(y, axes=(-2, -1)) / den, axes=(-2, -1))
    scale = max(np.abs(out.real).max(), 1.0)
    if np.abs(out.imag).max() > 1e-10 * scale:
        raise WienerError("non-negligible imaginary residue after inverse FFT")
    return out.real


def wiener(y, k, eps=EPS_CAP, mode="padded", margin=None):
    """Deconvolve each channel of ``y`` by ``k``.

    ``padded`` replicate-pads by ``margin`` (default: kernel radius + 8),
    deconvolves circularly and crops; ``circular`` works on ``y`` directly.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    y = np.asarray(y, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if mode == "circular":
        return _deconv(y, psf2otf(k, y.shape[-2:]), eps)
    if mode != "padded":
        raise ValueError(f"unknown mode {mode!r}")
    if margin is None:
        margin = max(k.shape) // 2 + 8
    pads = [(0, 0)] * (y.ndim - 2) + [(margin, margin), (margin, margin)]
    yp = np.pad(y, pads, mode="edge")
    out = _deconv(yp, psf2otf(k, yp.shape[-2:]), eps)
    return out[..., margin:margin + y.shape[-2], margin:margin + y.shape[-1]]


def wiener_epsilon(noise_std):
    if noise_std < 0:
        raise ValueError("noise estimate must be >= 0")
    return max(EPS_FLOOR, min(EPS_CAP, float(noise_std)))


def estimate_noise_std(y):
    """Median absolute horizontal difference, scaled to a Gaussian std."""
    y = np.asarray(y, dtype=np.float64)
    d = np.diff(y, axis=-1)
    return float(np.median(np.abs(d)) / (0.6745 * np.sqrt(2.0)))


def amplification(k, shape, eps):
    """Largest gain of the Wiener filter, ``max |K| / (|K|^2 + eps)``."""
    K = np.abs(psf2otf(k, shape))
    return float((K / (K ** 2 + eps)).max())
