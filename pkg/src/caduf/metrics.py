"""PSNR, SSIM and an analytic multiply-accumulate counter."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0


def _check(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {v.shape}")
    return u, v


def psnr(u, v, peak=1.0):
    u, v = _check(u, v)
    mse = np.mean((u - v) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def _gauss_window(size=11, sigma=1.5):
    r = np.arange(size) - size // 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x, g):
    r = g.size // 2
    out = correlate1d(correlate1d(x, g, axis=-2, mode="constant"), g, axis=-1, mode="constant")
    return out[..., r:x.shape[-2] - r, r:x.shape[-1] - r]


def ssim(u, v, data_range=1.0, win=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean structural similarity over channels and all window positions fully inside the image.

    Accepts (H, W) or (C, H, W).
    """
    u, v = _check(u, v)
    if min(u.shape[-2:]) < win:
        raise ValueError(f"image smaller than the {win}x{win} window")
    g = _gauss_window(win, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_u, mu_v = _filter_valid(u, g), _filter_valid(v, g)
    uu = _filter_valid(u * u, g) - mu_u ** 2
    vv = _filter_valid(v * v, g) - mu_v ** 2
    uv = _filter_valid(u * v, g) - mu_u * mu_v
    num = (2 * mu_u * mu_v + c1) * (2 * uv + c2)
    den = (mu_u ** 2 + mu_v ** 2 + c1) * (uu + vv + c2)
    return float(np.mean(num / den))


def fft_macs(n):
    return 5.0 * n * math.log2(n) if n > 1 else 0.0


def layer_macs(layer):
    kind = layer["kind"]
    if kind == "conv":
        return layer["cout"] * layer["h"] * layer["w"] * layer["cin"] * layer["k"] ** 2
    if kind == "deform":
        taps = layer["k"] ** 2
        sites = layer["h"] * layer["w"]
        return layer["cout"] * sites * layer["cin"] * taps + 4 * layer["cin"] * taps * sites
    if kind == "dlf":
        return layer["channels"] * layer["h"] * layer["w"] * layer["taps"]
    if kind == "project":
        # strided conv for A, then the two factors of the separable pseudoinverse
        h, w, s = layer["h"], layer["w"], layer["s"]
        a = h * w * layer["k"] ** 2
        pinv = s * h * h * w + s * h * w * s * w
        return layer["channels"] * (a + pinv)
    if kind == "wiener":
        # forward and inverse transform per channel plus the kernel transform
        return (2 * layer["channels"] + 1) * fft_macs(layer["h"] * layer["w"])
    raise ValueError(f"unknown layer kind {kind!r}")


def mac_count(config, lr_hw, by_module=False):
    """Multiply-accumulates of one forward pass on an LR input of ``lr_hw``."""
    from .cascade import layer_plan

    totals = {}
    for layer in layer_plan(config, lr_hw):
        totals[layer["tag"]] = totals.get(layer["tag"], 0) + layer_macs(layer)
    return totals if by_module else sum(totals.values())


@dataclass
class MetricsReport:
    header: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)

    def add(self, id, psnr, ssim, macs=None, **extra):
        self.rows.append(dict(id=id, psnr=psnr, ssim=ssim, macs=macs, **extra))

    def summary(self, method=None):
        rows = [r for r in self.rows if method is None or r.get("method") == method]
        if not rows:
            return {"summary": True, "count": 0}
        out = {
            "summary": True,
            "count": len(rows),
            "psnr": float(np.mean([r["psnr"] for r in rows])),
            "ssim": float(np.mean([r["ssim"] for r in rows])),
        }
        macs = [r["macs"] for r in rows if r.get("macs") is not None]
        if macs:
            out["macs"] = float(np.mean(macs))
        if method is not None:
            out["method"] = method
        return out

    def lines(self):
        out = []
        if self.header:
            out.append(json.dumps(dict(header=True, **self.header)))
        out.extend(json.dumps(r) for r in self.rows)
        methods = sorted({r.get("method") for r in self.rows if r.get("method")})
        if methods:
            out.extend(json.dumps(self.summary(m)) for m in methods)
        else:
            out.append(json.dumps(self.summary()))
        return out

    def write(self, path):
        with open(path, "w") as f:
            f.write("\n".join(self.lines()) + "\n")
