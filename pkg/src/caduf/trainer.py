"""Batch synthesis, augmentation and two-phase training of the cascade."""

from __future__ import annotations

import math
import multiprocessing as mp
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import functional as F
from .cascade import Cascade, CascadeConfig, caduf_loss, desk_config, loss_weights, paper_config
from .degradation import bicubic_downsample, bicubic_upsample, resize, sample_spec, synthesize
from .metrics import psnr
from .optim import Adam
from .tensor import Tensor
from .wiener import estimate_noise_std, wiener, wiener_epsilon

PAPER_BATCH = 64
PAPER_BATCHES_PER_EPOCH = 3000
PAPER_PATCH_LR = 48


@dataclass(frozen=True)
class Phase:
    name: str
    epochs: int
    lr: float
    alpha: float
    beta: float
    drop_at: int | None = None  # epoch (within the phase) where lr becomes drop_lr
    drop_lr: float | None = None

    def lr_at(self, epoch):
        if self.drop_at is not None and epoch >= self.drop_at:
            return self.drop_lr
        return self.lr


PAPER_PHASES = (
    Phase("A", 20, 1e-4, 0.6, 0.3),
    Phase("B", 120, 1e-4, 0.1, 0.1, drop_at=90, drop_lr=1e-5),
)
DESK_PHASES = (
    Phase("A", 4, 1e-4, 0.6, 0.3),
    Phase("B", 16, 1e-4, 0.1, 0.1, drop_at=12, drop_lr=1e-5),
)


@dataclass(frozen=True)
class TrainConfig:
    model: CascadeConfig = field(default_factory=paper_config)
    phases: tuple = PAPER_PHASES
    batch_size: int = PAPER_BATCH
    batches_per_epoch: int = PAPER_BATCHES_PER_EPOCH
    patch: int | None = None  # HR side, defaults to 48 * scale
    family: str = "GaussianSM"
    flips: bool = True
    rotations: bool = True
    rescale: bool = True
    seed: int = 0
    dataset_size: int | None = None  # pre-synthesised pool size; None synthesises every batch
    workers: int = 1
    n_val: int = 4
    max_steps: int | None = None
    weight_decay: float = 1e-4

    @property
    def hr_patch(self):
        return self.patch or PAPER_PATCH_LR * self.model.scale

    def validate(self):
        self.model.validate()
        for ph in self.phases:
            loss_weights(ph.alpha, ph.beta)
        if self.hr_patch % self.model.scale:
            raise ValueError("patch side must be divisible by the scale")
        if (self.hr_patch // self.model.scale) % 4 and self.model.use_E:
            raise ValueError("LR patch side must be divisible by 4")
        return self


def paper_profile(scale=4, **kw):
    return TrainConfig(model=paper_config(scale), **kw).validate()


def desk_profile(scale=2, **kw):
    base = dict(
        model=desk_config(scale), phases=DESK_PHASES, batch_size=4, batches_per_epoch=100,
        patch=24 * scale, dataset_size=64,
    )
    base.update(kw)
    return TrainConfig(**base).validate()


def describe_schedule(cfg: TrainConfig):
    lines = []
    for ph in cfg.phases:
        text = f"phase {ph.name}: {ph.epochs} epochs, lr {ph.lr:g}, alpha {ph.alpha:g}, beta {ph.beta:g}"
        if ph.drop_at is not None:
            text += f", lr -> {ph.drop_lr:g} at epoch {ph.drop_at}"
        lines.append(text)
    total = sum(ph.epochs for ph in cfg.phases)
    lines.append(
        f"total {total} epochs x {cfg.batches_per_epoch} batches of {cfg.batch_size}, "
        f"HR patch {cfg.hr_patch}"
    )
    return "\n".join(lines)


# ------------------------------------------------------------ augmentation


def draw_scale(rng, lo=0.5, hi=1.25):
    return float(rng.uniform(lo, hi))


def flip(x, axis):
    return np.flip(x, axis=axis).copy()


def augment(x, rng, patch=None, flips=True, rotations=True, rescale=True, max_tries=10):
    """Random h/v flips, a rot90 multiple and a bicubic rescale of (C, H, W) image ``x``.

    A rescale factor that would shrink the image below ``patch`` is redrawn;
    after ``max_tries`` failures the image keeps its size.
    """
    if flips:
        if rng.uniform() < 0.5:
            x = flip(x, -1)
        if rng.uniform() < 0.5:
            x = flip(x, -2)
    if rotations:
        x = np.rot90(x, int(rng.integers(4)), axes=(-2, -1)).copy()
    if rescale:
        for _ in range(max_tries):
            f = draw_scale(rng)
            h, w = int(round(x.shape[-2] * f)), int(round(x.shape[-1] * f))
            if patch is None or min(h, w) >= patch:
                x = np.clip(resize(x, (h, w)), 0.0, 1.0)
                break
    return x


def crop(x, rng, side, multiple=1):
    h, w = x.shape[-2:]
    if h < side or w < side:
        raise ValueError(f"image {h}x{w} smaller than patch {side}")
    i = int(rng.integers((h - side) // multiple + 1)) * multiple
    j = int(rng.integers((w - side) // multiple + 1)) * multiple
    return x[..., i:i + side, j:j + side]


# --------------------------------------------------------------- batches


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    y_w: np.ndarray
    y_anchor: np.ndarray
    x_down: np.ndarray
    specs: list = field(default_factory=list)

    def __len__(self):
        return self.x.shape[0]

    def target(self, cfg: CascadeConfig):
        """Target of the D term: the anchor image, or plain bicubic of x without privileged information."""
        return self.y_anchor if cfg.use_PI_anchor else self.x_down


def anchor_input(y, klow, eps=None):
    """Wiener output of ``y`` with eps from the noise-estimate rule unless given."""
    e = wiener_epsilon(estimate_noise_std(y)) if eps is None else eps
    return wiener(y, klow, e)


def prepare(pair):
    """Arrays needed for one training sample of a :class:`~caduf.degradation.SamplePair`."""
    return dict(
        x=pair.x,
        y=pair.y,
        y_w=anchor_input(pair.y, pair.klow),
        y_anchor=pair.y_anchor,
        x_down=bicubic_downsample(pair.x, pair.spec.scale),
        spec=pair.spec,
    )


def stack(samples):
    return Batch(
        np.stack([s["x"] for s in samples]),
        np.stack([s["y"] for s in samples]),
        np.stack([s["y_w"] for s in samples]),
        np.stack([s["y_anchor"] for s in samples]),
        np.stack([s["x_down"] for s in samples]),
        [s.get("spec") for s in samples],
    )


def synth_sample(corpus, cfg: TrainConfig, index):
    """Sample ``index`` of the stream: its rng depends only on (seed, index)."""
    rng = np.random.default_rng([cfg.seed, index])
    img = corpus[int(rng.integers(len(corpus)))]
    img = augment(img, rng, cfg.hr_patch, cfg.flips, cfg.rotations, cfg.rescale)
    x = crop(img, rng, cfg.hr_patch)
    spec = sample_spec(rng, cfg.family, cfg.model.scale)
    return prepare(synthesize(x, spec))


_POOL_STATE = {}


def _pool_worker(index):
    return synth_sample(_POOL_STATE["corpus"], _POOL_STATE["cfg"], index)


def synth_samples(corpus, cfg: TrainConfig, indices, workers=None):
    workers = cfg.workers if workers is None else workers
    if workers <= 1:
        return [synth_sample(corpus, cfg, i) for i in indices]
    _POOL_STATE.update(corpus=corpus, cfg=cfg)
    try:
        with mp.get_context("fork").Pool(workers) as pool:
            return pool.map(_pool_worker, list(indices))
    finally:
        _POOL_STATE.clear()


def make_batch(corpus, cfg: TrainConfig, batch_index, workers=None):
    """Batch ``batch_index`` of the synthetic stream; independent of the worker count."""
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    start = batch_index * cfg.batch_size
    return stack(synth_samples(corpus, cfg, range(start, start + cfg.batch_size), workers))


class Pool:
    """Fixed set of prepared samples; batches are random aligned crops with flips and rotations."""

    def __init__(self, samples, scale):
        self.samples = list(samples)
        self.s = scale
        if not self.samples:
            raise ValueError("empty sample pool")

    def draw(self, rng, size, hr_side, flips=True, rotations=True):
        s = self.s
        lr_side = hr_side // s
        out = []
        for _ in range(size):
            smp = self.samples[int(rng.integers(len(self.samples)))]
            h, w = smp["y"].shape[-2:]
            i = int(rng.integers(h - lr_side + 1))
            j = int(rng.integers(w - lr_side + 1))
            lr = lambda a: a[..., i:i + lr_side, j:j + lr_side]
            hr = lambda a: a[..., s * i:s * i + hr_side, s * j:s * j + hr_side]
            item = dict(x=hr(smp["x"]), y=lr(smp["y"]), y_w=lr(smp["y_w"]),
                        y_anchor=lr(smp["y_anchor"]), x_down=lr(smp["x_down"]), spec=smp.get("spec"))
            ops = []
            if flips:
                ops += [("h", rng.uniform() < 0.5), ("v", rng.uniform() < 0.5)]
            if rotations:
                ops.append(("r", int(rng.integers(4))))
            for key in ("x", "y", "y_w", "y_anchor", "x_down"):
                a = item[key]
                for op, val in ops:
                    if op == "h" and val:
                        a = a[..., ::-1]
                    elif op == "v" and val:
                        a = a[..., ::-1, :]
                    elif op == "r":
                        a = np.rot90(a, val, axes=(-2, -1))
                item[key] = np.ascontiguousarray(a)
            out.append(item)
        return stack(out)


# ----------------------------------------------------------------- training


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: Cascade
    log: list
    val: list
    steps: int
    seconds: float


LOG_HEADER = ("step", "phase", "lr", "L_D", "L_U", "L_F", "total", "grad_norm")


def format_log(rows):
    lines = [",".join(LOG_HEADER)]
    for r in rows:
        lines.append(",".join(str(r[k]) if isinstance(r[k], (str, int)) else repr(float(r[k])) for k in LOG_HEADER))
    return "\n".join(lines) + "\n"


def evaluate(model, batch: Batch):
    """Mean PSNR of x_hat and of the bicubic baseline over ``batch``."""
    out = model(batch.y, batch.y_w)
    ours = [psnr(np.clip(out.x_hat.data[i], 0, 1), batch.x[i]) for i in range(len(batch))]
    base = [
        psnr(np.clip(bicubic_upsample(batch.y[i], model.config.scale), 0, 1), batch.x[i])
        for i in range(len(batch))
    ]
    return float(np.mean(ours)), float(np.mean(base))


def train_step(model, opt, batch: Batch, phase: Phase):
    out = model(batch.y, batch.y_w)
    loss, parts = caduf_loss(out, batch.target(model.config), batch.x, phase.alpha, phase.beta, model.config)
    opt.zero_grad()
    loss.backward()
    grads = [p.grad for p in opt.params if p.grad is not None]
    gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    value = loss.item()
    if not (np.isfinite(value) and np.isfinite(gnorm)):
        raise TrainingAborted(f"non-finite loss ({value}) or gradient norm ({gnorm}); parts {parts}")
    opt.step()
    return value, parts, gnorm


def train(corpus=None, cfg: TrainConfig | None = None, pool: Pool | None = None, val: Batch | None = None,
          model: Cascade | None = None, pinv=None, log_fn=None):
    """Two-phase training.

    Batches come from ``pool`` when given; otherwise from a pool of
    ``cfg.dataset_size`` samples synthesised from ``corpus``, or fresh samples
    every step when ``dataset_size`` is None. Optimiser moments persist across
    phases and the lr drop.
    """
    cfg = (cfg or desk_profile()).validate()
    rng = np.random.default_rng([cfg.seed, 2**32 - 1])
    model = model or Cascade(cfg.model, np.random.default_rng(cfg.seed), pinv=pinv)
    if pool is None and cfg.dataset_size is not None:
        if corpus is None:
            raise ValueError("need a corpus or a pool")
        pool = Pool(synth_samples(corpus, cfg, range(cfg.dataset_size)), cfg.model.scale)
    if val is None and corpus is not None and cfg.n_val:
        # held-out stream indices far from the training ones
        fixed = replace(cfg, flips=False, rotations=False, rescale=False, seed=cfg.seed + 7919)
        val = stack(synth_samples(corpus, fixed, range(cfg.n_val)))
    opt = Adam(model.parameters(), lr=cfg.phases[0].lr, weight_decay=cfg.weight_decay)
    log, val_log = [], []
    step = 0
    t0 = time.time()
    stop = False
    for phase in cfg.phases:
        for epoch in range(phase.epochs):
            opt.lr = phase.lr_at(epoch)
            for _ in range(cfg.batches_per_epoch):
                if pool is not None:
                    batch = pool.draw(rng, cfg.batch_size, cfg.hr_patch, cfg.flips, cfg.rotations)
                else:
                    batch = make_batch(corpus, cfg, step)
                value, parts, gnorm = train_step(model, opt, batch, phase)
                step += 1
                row = dict(step=step, phase=phase.name, lr=opt.lr, total=value, grad_norm=gnorm, **parts)
                log.append(row)
                if log_fn:
                    log_fn(row)
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    stop = True
                    break
            if val is not None:
                ours, base = evaluate(model, val)
                val_log.append(dict(step=step, phase=phase.name, epoch=epoch, psnr=ours, bicubic=base))
            if stop:
                break
        if stop:
            break
    return TrainResult(model, log, val_log, step, time.time() - t0)
