"""Extractor E, deblurring D, upsampling U and fusion F, chained into one model.

All trunk features live at LR resolution. Only the dynamic-filter coefficients
``c`` and residual ``r`` of the U and F heads are lifted to HR by pixel shuffle.
Each head starts as the identity: ``c`` is a centre delta and ``r`` is zero.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import functional as F
from .nn import Conv2d, Module, lrelu
from .operators import DownsampleOperator, ExactPinv, project
from .tensor import Tensor, as_tensor
from .wiener import estimate_noise_std, wiener, wiener_epsilon

R_MID = 8  # channels of the residual head before its last conv


@dataclass(frozen=True)
class CascadeConfig:
    scale: int = 4
    width: int = 64
    nb_d: int = 8
    nb_u: int = 16
    nb_f: int = 4
    dilation: int = 2
    p: int = 2
    e_widths: tuple = (64, 32, 32)
    use_wiener_input: bool = True
    use_E: bool = True
    use_PI_anchor: bool = True
    use_projection: bool = True
    propagate_features: bool = True
    use_D: bool = True
    use_F: bool = True
    feed_y: bool = False
    freeze_alignment: bool = False

    def validate(self):
        if self.width < 8:
            raise ValueError("width must be >= 8")
        if self.scale < 1:
            raise ValueError("scale must be >= 1")
        if self.nb_u < 1 or (self.use_D and self.nb_d < 1) or (self.use_F and self.nb_f < 1):
            raise ValueError("block counts of active modules must be >= 1")
        if len(self.e_widths) != 3 or min(self.e_widths) < 1:
            raise ValueError("e_widths needs three positive entries")
        if not self.propagate_features and self.use_E:
            raise ValueError("the image-only cascade has no feature extractor; set use_E=False")
        return self

    @property
    def taps(self):
        return (2 * self.p + 1) ** 2

    def to_dict(self):
        d = asdict(self)
        d["e_widths"] = list(self.e_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "e_widths" in d:
            d["e_widths"] = tuple(int(v) for v in d["e_widths"])
        return cls(**d)


def paper_config(scale=4):
    return CascadeConfig(scale=scale)


def desk_config(scale=2):
    return CascadeConfig(scale=scale, width=32, nb_d=4, nb_u=8, nb_f=2, e_widths=(32, 16, 16))


VARIANTS = (
    "P(y)",
    "P(y_w)",
    "PD(y_w)-no-PI",
    "PD(y_w)",
    "FUD(y_w)",
    "FUD(y,y_w)",
    "CNN-Cascade",
    "CADUF",
)


def variant(name, base: CascadeConfig):
    """Ablation variant ``name`` with the same total block count as ``base``."""
    total = base.nb_d + base.nb_u + base.nb_f
    full = dict(
        use_wiener_input=True, use_E=True, use_PI_anchor=True, use_projection=True,
        propagate_features=True, use_D=True, use_F=True, feed_y=False,
    )
    off = dict(use_E=False, use_projection=False, use_F=False)
    table = {
        "P(y)": dict(off, use_wiener_input=False, use_D=False, nb_u=total),
        "P(y_w)": dict(off, use_D=False, nb_u=total),
        "PD(y_w)-no-PI": dict(off, use_PI_anchor=False, nb_u=total - base.nb_d),
        "PD(y_w)": dict(off, nb_u=total - base.nb_d),
        "FUD(y_w)": dict(use_E=False),
        "FUD(y,y_w)": dict(use_E=False, feed_y=True),
        "CNN-Cascade": dict(use_E=False, propagate_features=False),
        "CADUF": {},
    }
    if name not in table:
        raise KeyError(f"unknown variant {name!r}; choose from {VARIANTS}")
    return replace(base, **dict(full, **table[name])).validate()


def variant_name(cfg: CascadeConfig):
    """Name of the variant ``cfg`` belongs to, or "custom"."""
    for name in VARIANTS:
        v = variant(name, cfg)
        flags = lambda c: {k: v for k, v in c.to_dict().items() if k not in ("nb_d", "nb_u", "nb_f")}
        if flags(v) == flags(cfg):
            return name
    return "custom"


# ------------------------------------------------------------------ blocks


class Stem(Module):
    """Two 3x3 convs lifting an image to trunk features."""

    def __init__(self, cin, width, rng):
        self.c1 = Conv2d(cin, width, 3, rng)
        self.c2 = Conv2d(width, width, 3, rng)

    def __call__(self, x):
        return lrelu(self.c2(lrelu(self.c1(x))))


class ResBlock(Module):
    def __init__(self, width, dilation, rng):
        self.c1 = Conv2d(width, width, 3, rng, dilation=dilation)
        self.c2 = Conv2d(width, width, 3, rng)

    def __call__(self, h):
        return h + self.c2(lrelu(self.c1(h)))


class Head(Module):
    """Dynamic-filter head producing ``c`` (taps per site) and residual ``r``, lifted by ``s``.

    Starts at the identity: zero weights, centre-delta bias for ``c`` and a
    zero final conv for ``r``.
    """

    def __init__(self, width, s, taps, rng, with_c=True, out_channels=3):
        self.s, self.taps = s, taps
        if with_c:
            self.c = Conv2d(width, taps * s * s, 3, rng, zero_init=True)
            bias = np.zeros((taps, s * s))
            bias[taps // 2] = 1.0
            self.c.bias.data = bias.reshape(-1)
        self.r1 = Conv2d(width, R_MID * s * s, 3, rng)
        self.r2 = Conv2d(R_MID, out_channels, 3, rng, zero_init=True)

    def coefficients(self, h):
        return F.pixel_shuffle(self.c(h), self.s)

    def residual(self, h):
        return self.r2(F.pixel_shuffle(lrelu(self.r1(h)), self.s))


class Extractor(Module):
    """Multi-scale, weight-shared branches for ``y`` and ``y_w`` plus deformable alignment."""

    def __init__(self, width, widths, rng, cin=3):
        w1, w2, w4 = widths
        self.first = Conv2d(cin, w1, 5, rng)
        self.down2 = Conv2d(w1, w2, 3, rng, stride=2)
        self.conv2 = Conv2d(w2, w2, 3, rng)
        self.down4 = Conv2d(w2, w4, 3, rng, stride=2)
        self.conv4 = Conv2d(w4, w4, 3, rng)
        self.up4 = Conv2d(w4, w2 * 4, 3, rng)
        self.up2 = Conv2d(w2, w1 * 4, 3, rng)
        self.tail1 = Conv2d(w1, w1, 3, rng)
        self.tail2 = Conv2d(w1, w1, 3, rng)
        self.offsets = Conv2d(2 * w1, 18, 3, rng, zero_init=True)
        self.modulation = Conv2d(2 * w1, 9, 3, rng, zero_init=True)
        self.align = Conv2d(w1, w1, 3, rng)
        self.fuse = Conv2d(2 * w1, width, 1, rng)

    def branch(self, x):
        f1 = lrelu(self.first(x))
        f2 = lrelu(self.conv2(lrelu(self.down2(f1))))
        f4 = lrelu(self.conv4(lrelu(self.down4(f2))))
        f2 = f2 + lrelu(F.pixel_shuffle(self.up4(f4), 2))
        f1 = f1 + lrelu(F.pixel_shuffle(self.up2(f2), 2))
        return lrelu(self.tail2(lrelu(self.tail1(f1))))

    def __call__(self, y, y_w, freeze=False):
        if y.shape != y_w.shape:
            raise ValueError(f"y {y.shape} and y_w {y_w.shape} differ")
        if y.shape[2] % 4 or y.shape[3] % 4:
            raise ValueError("LR dims must be divisible by 4 for the extractor pyramid")
        b_y, b_w = self.branch(y), self.branch(y_w)
        n, _, h, w = b_y.shape
        if freeze:
            off = Tensor(np.zeros((n, 18, h, w)))
            mod = Tensor(np.ones((n, 9, h, w)))
        else:
            both = F.concat([b_y, b_w], axis=1)
            off = self.offsets(both)
            mod = F.sigmoid(self.modulation(both))
        aligned = lrelu(F.deformable_conv2d(b_y, self.align.weight, self.align.bias, off, mod))
        return lrelu(self.fuse(F.concat([aligned, b_w], axis=1)))


@dataclass
class CascadeOutput:
    h_E: Tensor
    h_D: Tensor | None
    h_U: Tensor | None
    y_D: Tensor
    x_U: Tensor
    x_hat: Tensor
    y_w: Tensor


class Cascade(Module):
    """The full model. ``pinv`` defaults to the exact separable pseudoinverse of A."""

    def __init__(self, config: CascadeConfig, rng, pinv=None):
        cfg = config.validate()
        self.config = cfg
        s, w, taps = cfg.scale, cfg.width, cfg.taps
        self.op = DownsampleOperator(s)
        self._pinv = pinv if pinv is not None else ExactPinv(self.op)
        cin = 6 if cfg.feed_y else 3
        if cfg.propagate_features:
            if cfg.use_E:
                self.E = Extractor(w, cfg.e_widths, rng)
            else:
                self.stem = Stem(cin, w, rng)
            if cfg.use_D:
                self.D_blocks = [ResBlock(w, cfg.dilation, rng) for _ in range(cfg.nb_d)]
                self.D_head = Head(w, 1, taps, rng)
            n_in = 2 if cfg.use_D else 1
            self.U_fuse = Conv2d(n_in * w, w, 1, rng)
            self.U_conv = Conv2d(w, w, 3, rng)
            self.U_blocks = [ResBlock(w, cfg.dilation, rng) for _ in range(cfg.nb_u)]
            self.U_head = Head(w, s, taps, rng)
            if cfg.use_F:
                self.F_fuse = Conv2d((n_in + 1) * w, w, 1, rng)
                self.F_conv = Conv2d(w, w, 3, rng)
                self.F_blocks = [ResBlock(w, cfg.dilation, rng) for _ in range(cfg.nb_f)]
                self.F_head = Head(w, s, taps, rng)
        else:
            if cfg.use_D:
                self.D_stem = Stem(cin, w, rng)
                self.D_blocks = [ResBlock(w, cfg.dilation, rng) for _ in range(cfg.nb_d)]
                self.D_head = Head(w, 1, taps, rng, with_c=False)
            self.U_stem = Stem(3 if cfg.use_D else cin, w, rng)
            self.U_blocks = [ResBlock(w, cfg.dilation, rng) for _ in range(cfg.nb_u)]
            self.U_head = Head(w, s, taps, rng, with_c=False)
            if cfg.use_F:
                self.F_stem = Stem(3 * s * s, w, rng)
                self.F_blocks = [ResBlock(w, cfg.dilation, rng) for _ in range(cfg.nb_f)]
                self.F_head = Head(w, s, taps, rng, with_c=False)

    @property
    def pinv(self):
        return self._pinv

    # -------------------------------------------------------------- helpers

    @staticmethod
    def _blocks(blocks, h):
        for b in blocks:
            h = b(h)
        return h

    def prefilter(self, y, klow, eps=None):
        """Wiener anchor ``y_w`` of a (N, 3, h, w) array, with the noise-driven eps rule."""
        y = np.asarray(y, dtype=np.float64)
        out = np.empty_like(y)
        for i in range(y.shape[0]):
            e = wiener_epsilon(estimate_noise_std(y[i])) if eps is None else eps
            out[i] = wiener(y[i], klow, e)
        return out

    # -------------------------------------------------------------- forward

    def forward(self, y, y_w=None, klow=None):
        """Run the cascade on LR input ``y`` (N, 3, h, w).

        ``y_w`` may be passed precomputed; otherwise it is the Wiener output for ``klow``.
        """
        cfg = self.config
        y = as_tensor(y)
        if y.ndim != 4:
            raise ValueError(f"expected (N, C, h, w) input, got {y.shape}")
        if y_w is None:
            if klow is None:
                raise ValueError("need either y_w or klow")
            y_w = self.prefilter(y.data, klow)
        y_w = as_tensor(y_w)
        if y_w.shape != y.shape:
            raise ValueError(f"y_w shape {y_w.shape} does not match y {y.shape}")
        z0 = y_w if cfg.use_wiener_input else y
        stem_in = F.concat([y, y_w], axis=1) if cfg.feed_y else z0
        if cfg.propagate_features:
            return self._forward_features(y, y_w, z0, stem_in)
        return self._forward_images(y_w, z0, stem_in)

    __call__ = forward

    def _project(self, x_p, y_D):
        return project(x_p, y_D, self.op, self.pinv) if self.config.use_projection else x_p

    def _forward_features(self, y, y_w, z0, stem_in):
        cfg = self.config
        if cfg.use_E:
            h_E = self.E(y, y_w if cfg.use_wiener_input else y, freeze=cfg.freeze_alignment)
        else:
            h_E = self.stem(stem_in)
        feats = [h_E]
        h_D = None
        y_D = z0
        if cfg.use_D:
            h_D = self._blocks(self.D_blocks, h_E)
            y_D = F.dynamic_local_filter(z0, self.D_head.coefficients(h_D), self.D_head.residual(h_D), cfg.p, 1)
            feats.append(h_D)
        h = lrelu(self.U_fuse(F.concat(feats, axis=1) if len(feats) > 1 else h_E))
        h = lrelu(self.U_conv(h))
        h_U = self._blocks(self.U_blocks, h)
        c = self.U_head.coefficients(h_U)
        x_p = F.dynamic_local_filter(y_D, c, self.U_head.residual(h_U), cfg.p, cfg.scale)
        x_U = self._project(x_p, y_D)
        x_hat = x_U
        if cfg.use_F:
            h = lrelu(self.F_fuse(F.concat(feats + [h_U], axis=1)))
            h = lrelu(self.F_conv(h))
            h = self._blocks(self.F_blocks, h)
            x_hat = F.dynamic_local_filter(x_U, self.F_head.coefficients(h), self.F_head.residual(h), cfg.p, 1)
        return CascadeOutput(h_E, h_D, h_U, y_D, x_U, x_hat, y_w)

    def _forward_images(self, y_w, z0, stem_in):
        cfg = self.config
        s = cfg.scale
        y_D = z0
        h_E = h_D = None
        u_in = stem_in
        if cfg.use_D:
            h_D = self._blocks(self.D_blocks, self.D_stem(stem_in))
            y_D = z0 + self.D_head.residual(h_D)
            u_in = y_D
        h_U = self._blocks(self.U_blocks, self.U_stem(u_in))
        x_p = F.upsample_nearest(y_D, s) + self.U_head.residual(h_U)
        x_U = self._project(x_p, y_D)
        x_hat = x_U
        if cfg.use_F:
            h = self._blocks(self.F_blocks, self.F_stem(F.pixel_unshuffle(x_U, s)))
            x_hat = x_U + self.F_head.residual(h)
        return CascadeOutput(h_E, h_D, h_U, y_D, x_U, x_hat, y_w)


# ------------------------------------------------------------------ losses


def loss_weights(alpha, beta, cfg: CascadeConfig | None = None):
    """Weights of the D, U and F terms; disabled terms fold into the last active one."""
    if not (alpha > 0 and beta > 0 and alpha + beta < 1):
        raise ValueError(f"need alpha, beta > 0 and alpha + beta < 1, got {alpha}, {beta}")
    wd, wu, wf = alpha, beta, 1.0 - alpha - beta
    if cfg is not None:
        if not cfg.use_F:
            wu, wf = wu + wf, 0.0
        if not cfg.use_D:
            if cfg.use_F:
                wf += wd
            else:
                wu += wd
            wd = 0.0
    return wd, wu, wf


def charbonnier_batch(u, v, eps=1e-3):
    """Charbonnier sum per image, averaged over the batch."""
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {v.shape}")
    return F.charbonnier(u, v, eps) * (1.0 / u.shape[0])


def caduf_loss(out: CascadeOutput, y_target, x, alpha, beta, cfg: CascadeConfig | None = None):
    """Weighted sum of the D, U and F Charbonnier terms.

    Returns ``(total, parts)``; ``parts`` holds the unweighted terms divided by
    the per-image element count, for logging.
    """
    wd, wu, wf = loss_weights(alpha, beta, cfg)
    y_target, x = as_tensor(y_target), as_tensor(x)
    terms = {
        "L_D": (wd, out.y_D, y_target),
        "L_U": (wu, out.x_U, x),
        "L_F": (wf, out.x_hat, x),
    }
    active = {
        "L_D": cfg is None or cfg.use_D,
        "L_U": True,
        "L_F": cfg is None or cfg.use_F,
    }
    total = None
    parts = {}
    for key, (weight, pred, target) in terms.items():
        if not active[key]:
            parts[key] = float("nan")
            continue
        term = charbonnier_batch(pred, target)
        parts[key] = term.item() / (pred.size / pred.shape[0])
        if weight:
            total = term * weight if total is None else total + term * weight
    return total, parts


# --------------------------------------------------------- analytic counts


def layer_plan(cfg: CascadeConfig, lr_hw):
    """Every layer of ``cfg`` on an LR input of ``lr_hw`` as dicts.

    Kinds: conv (cin, cout, k, h, w), deform (same), dlf (channels, taps, h, w),
    wiener (h, w, channels), project (channels, h, w, s, k) for A and the
    separable exact pseudoinverse.
    """
    cfg.validate()
    h, w = lr_hw
    s, W, T = cfg.scale, cfg.width, cfg.taps
    plan = []

    def conv(cin, cout, k, hh, ww, tag, shared=False):
        plan.append(dict(kind="conv", cin=cin, cout=cout, k=k, h=hh, w=ww, tag=tag, shared=shared))

    def stem(cin, tag):
        conv(cin, W, 3, h, w, tag)
        conv(W, W, 3, h, w, tag)

    def blocks(n, tag):
        for _ in range(n):
            conv(W, W, 3, h, w, tag)
            conv(W, W, 3, h, w, tag)

    def head(ss, tag, with_c=True):
        if with_c:
            conv(W, T * ss * ss, 3, h, w, tag)
        conv(W, R_MID * ss * ss, 3, h, w, tag)
        conv(R_MID, 3, 3, h * ss, w * ss, tag)

    def project_step():
        if cfg.use_projection:
            k = DownsampleOperator(s).kernel.shape[0]
            plan.append(dict(kind="project", channels=3, h=h, w=w, s=s, k=k, tag="U"))

    if cfg.use_wiener_input or cfg.feed_y or cfg.use_E:
        plan.append(dict(kind="wiener", h=h, w=w, channels=3, tag="W"))
    cin = 6 if cfg.feed_y else 3
    if cfg.propagate_features:
        if cfg.use_E:
            w1, w2, w4 = cfg.e_widths
            for branch in range(2):
                # the y_w branch reuses the weights of the y branch
                sh = branch == 1
                conv(3, w1, 5, h, w, "E", sh)
                conv(w1, w2, 3, h // 2, w // 2, "E", sh)
                conv(w2, w2, 3, h // 2, w // 2, "E", sh)
                conv(w2, w4, 3, h // 4, w // 4, "E", sh)
                conv(w4, w4, 3, h // 4, w // 4, "E", sh)
                conv(w4, w2 * 4, 3, h // 4, w // 4, "E", sh)
                conv(w2, w1 * 4, 3, h // 2, w // 2, "E", sh)
                conv(w1, w1, 3, h, w, "E", sh)
                conv(w1, w1, 3, h, w, "E", sh)
            if not cfg.freeze_alignment:
                conv(2 * w1, 18, 3, h, w, "E")
                conv(2 * w1, 9, 3, h, w, "E")
            plan.append(dict(kind="deform", cin=w1, cout=w1, k=3, h=h, w=w, tag="E"))
            conv(2 * w1, W, 1, h, w, "E")
        else:
            stem(cin, "E")
        n_in = 1
        if cfg.use_D:
            blocks(cfg.nb_d, "D")
            head(1, "D")
            plan.append(dict(kind="dlf", channels=3, taps=T, h=h, w=w, tag="D"))
            n_in = 2
        conv(n_in * W, W, 1, h, w, "U")
        conv(W, W, 3, h, w, "U")
        blocks(cfg.nb_u, "U")
        head(s, "U")
        plan.append(dict(kind="dlf", channels=3, taps=T, h=h * s, w=w * s, tag="U"))
        project_step()
        if cfg.use_F:
            conv((n_in + 1) * W, W, 1, h, w, "F")
            conv(W, W, 3, h, w, "F")
            blocks(cfg.nb_f, "F")
            head(s, "F")
            plan.append(dict(kind="dlf", channels=3, taps=T, h=h * s, w=w * s, tag="F"))
    else:
        if cfg.use_D:
            stem(cin, "D")
            blocks(cfg.nb_d, "D")
            head(1, "D", with_c=False)
        stem(3 if cfg.use_D else cin, "U")
        blocks(cfg.nb_u, "U")
        head(s, "U", with_c=False)
        project_step()
        if cfg.use_F:
            stem(3 * s * s, "F")
            blocks(cfg.nb_f, "F")
            head(s, "F", with_c=False)
    return plan


def param_count(cfg: CascadeConfig):
    """Number of trainable parameters implied by :func:`layer_plan`."""
    total = 0
    for layer in layer_plan(cfg, (4, 4)):
        if layer["kind"] in ("conv", "deform") and not layer.get("shared"):
            total += layer["cout"] * layer["cin"] * layer["k"] ** 2 + layer["cout"]
    return total
