"""Command-line front end: ``caduf synth | train | infer | eval``.

Exit codes: 0 success, 2 input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import glob
import multiprocessing as mp
import os
import sys
from dataclasses import replace

import numpy as np

from .cascade import CascadeConfig, variant, variant_name
from .degradation import (
    ANCHOR_SIGMA,
    KernelError,
    bicubic_downsample,
    bicubic_upsample,
    blur,
    gaussian_kernel,
    sample_spec,
    synthesize,
    validate_kernel,
)
from .io import (
    FormatError,
    ManifestEntry,
    dataclass_defaults,
    load_checkpoint,
    parse_config,
    read_kernel,
    read_manifest,
    read_png,
    save_checkpoint,
    write_kernel,
    write_manifest,
    write_png,
)
from .metrics import MetricsReport, mac_count, psnr, ssim
from .operators import fit_klow
from .trainer import (
    Pool,
    TrainConfig,
    TrainingAborted,
    anchor_input,
    desk_profile,
    describe_schedule,
    format_log,
    paper_profile,
    train,
)
from .wiener import WienerError

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
FAMILY_NAMES = {"sm": "GaussianSM", "cm": "GaussianCM"}
# train-config keys a --config file may set besides the model flags
TRAIN_KEYS = ("batch_size", "batches_per_epoch", "patch", "flips", "rotations", "seed", "max_steps",
              "weight_decay", "n_val")


class InputError(Exception):
    pass


# ------------------------------------------------------------------ synth


def read_corpus(directory):
    paths = sorted(glob.glob(os.path.join(directory, "*.png")))
    if not paths:
        raise InputError(f"no PNG images in {directory}")
    images = []
    for p in paths:
        try:
            images.append(read_png(p))
        except (OSError, FormatError) as e:
            raise InputError(f"cannot read {p}: {e}") from e
    return images


def synth_entry(corpus, index, family, s, seed, patch):
    """Degraded pair ``index`` of the dataset; depends only on (seed, index)."""
    rng = np.random.default_rng([seed, index])
    img = corpus[int(rng.integers(len(corpus)))]
    m = 4 * s  # keeps LR sides divisible by 4 for the extractor pyramid
    h, w = img.shape[1] - img.shape[1] % m, img.shape[2] - img.shape[2] % m
    if patch:
        if min(h, w) < patch:
            raise InputError(f"corpus image {img.shape[1:]} smaller than patch {patch}")
        h = w = patch
    if h == 0 or w == 0:
        raise InputError(f"corpus image {img.shape[1:]} smaller than {m}x{m}")
    i = int(rng.integers(img.shape[1] - h + 1))
    j = int(rng.integers(img.shape[2] - w + 1))
    x = img[:, i:i + h, j:j + w]
    return synthesize(x, sample_spec(rng, family, s))


_STATE = {}


def _synth_worker(index):
    return synth_entry(_STATE["corpus"], index, *_STATE["args"])


def cmd_synth(args):
    corpus = read_corpus(args.corpus)
    if args.count < 1:
        raise InputError("--count must be positive")
    if args.patch and args.patch % (4 * args.scale):
        raise InputError(f"--patch must be a multiple of {4 * args.scale}")
    family = FAMILY_NAMES[args.family]
    extra = (family, args.scale, args.seed, args.patch)
    indices = list(range(args.count))
    if args.workers > 1:
        _STATE.update(corpus=corpus, args=extra)
        try:
            with mp.get_context("fork").Pool(args.workers) as pool:
                pairs = pool.map(_synth_worker, indices)
        finally:
            _STATE.clear()
    else:
        pairs = [synth_entry(corpus, i, *extra) for i in indices]
    for sub in ("hr", "lr", "kernel", "klow"):
        os.makedirs(os.path.join(args.out, sub), exist_ok=True)
    entries = []
    for i, pair in zip(indices, pairs):
        name = f"{i:05d}"
        rel = dict(hr=f"hr/{name}.png", lr=f"lr/{name}.png", kernel=f"kernel/{name}.txt", klow=f"klow/{name}.txt")
        write_png(os.path.join(args.out, rel["hr"]), pair.x)
        write_png(os.path.join(args.out, rel["lr"]), pair.y)
        write_kernel(os.path.join(args.out, rel["kernel"]), pair.k)
        write_kernel(os.path.join(args.out, rel["klow"]), pair.klow)
        entries.append(ManifestEntry(name, scale=args.scale, noise=pair.spec.noise, seed=pair.spec.seed, **rel))
    write_manifest(os.path.join(args.out, "manifest.csv"), entries)
    print(f"wrote {len(entries)} pairs to {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ train


def load_config(path, base_model: CascadeConfig, base_train: TrainConfig):
    """Apply a key=value file: model fields, a few training fields, or ``variant=NAME``."""
    if not path:
        return base_model, base_train
    with open(path) as f:
        text = f.read()
    defaults = dataclass_defaults(CascadeConfig)
    defaults.update({k: getattr(base_train, k) for k in TRAIN_KEYS})
    defaults["max_steps"] = 0
    defaults["patch"] = 0
    defaults["variant"] = ""
    values = parse_config(text, defaults)
    name = values.pop("variant", "")
    train_kw = {k: values.pop(k) for k in TRAIN_KEYS if k in values}
    model = replace(base_model, **values)
    if name:
        model = variant(name, model)
    for key in ("max_steps", "patch"):
        if key in train_kw and train_kw[key] == 0:
            train_kw[key] = None
    return model.validate(), replace(base_train, model=model, **train_kw)


def manifest_samples(entries, check_scale=None):
    """Training samples (x, y, y_w, y_anchor, x_down) from manifest pairs."""
    samples = []
    for e in entries:
        if check_scale is not None and e.scale != check_scale:
            raise InputError(f"{e.id}: manifest scale {e.scale} differs from {check_scale}")
        x, y = read_png(e.hr), read_png(e.lr)
        s = e.scale
        if x.shape[1] != s * y.shape[1] or x.shape[2] != s * y.shape[2]:
            raise InputError(f"{e.id}: HR {x.shape[1:]} is not {s}x LR {y.shape[1:]}")
        klow = read_kernel(e.klow)  # least-squares taps may be negative
        samples.append(dict(
            x=x, y=y, y_w=anchor_input(y, klow),
            y_anchor=bicubic_downsample(blur(x, gaussian_kernel(ANCHOR_SIGMA[s])), s),
            x_down=bicubic_downsample(x, s),
        ))
    return samples


def cmd_train(args):
    entries = read_manifest(args.manifest)
    if not entries:
        raise InputError("manifest has no entries")
    s = entries[0].scale
    base = paper_profile(s) if args.profile == "paper" else desk_profile(s)
    model_cfg, cfg = load_config(args.config, base.model, base)
    if model_cfg.scale != s:
        raise InputError(f"config scale {model_cfg.scale} differs from manifest scale {s}")
    if args.max_steps is not None:
        cfg = replace(cfg, max_steps=args.max_steps)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    try:
        cfg = cfg.validate()
    except ValueError as e:
        raise InputError(str(e)) from e
    if args.profile == "paper" or args.dry_run:
        print(describe_schedule(cfg), flush=True)
    if args.dry_run:
        return EXIT_OK
    samples = manifest_samples(entries, s)
    side = min(min(smp["y"].shape[-2:]) for smp in samples) * s
    if side < cfg.hr_patch:
        raise InputError(f"smallest HR image side {side} is below the training patch {cfg.hr_patch}")
    log_path = args.log or args.out + ".log.csv"
    rows = []
    try:
        res = train(cfg=cfg, pool=Pool(samples, s), log_fn=rows.append)
    finally:
        with open(log_path, "w") as f:
            f.write(format_log(rows))
    save_checkpoint(args.out, res.model, {"steps": res.steps, "variant": variant_name(res.model.config)})
    print(f"trained {res.steps} steps in {res.seconds:.1f}s; checkpoint {args.out}, log {log_path}")
    return EXIT_OK


# ------------------------------------------------------------------ infer


def super_resolve(model, y, klow):
    """x_hat for a (3, h, w) LR image; replicate-pads to the extractor's multiple of 4."""
    h, w = y.shape[1:]
    m = 4 if model.config.use_E else 1
    ph, pw = (-h) % m, (-w) % m
    yp = np.pad(y, ((0, 0), (0, ph), (0, pw)), mode="edge")
    y_w = anchor_input(yp, klow)
    out = model(yp[None], y_w[None]).x_hat.data[0]
    s = model.config.scale
    return out[:, : h * s, : w * s]


def read_klow(args_klow, kernel, s):
    if args_klow:
        return read_kernel(args_klow)
    return fit_klow(kernel, s)[0]


def cmd_infer(args):
    model, _ = load_checkpoint(args.ckpt)
    if args.scale != model.config.scale:
        raise InputError(f"--scale {args.scale} differs from the checkpoint scale {model.config.scale}")
    y = read_png(args.lr)
    k = validate_kernel(read_kernel(args.kernel))
    klow = read_klow(args.klow, k, args.scale)
    x = super_resolve(model, y, klow)
    write_png(args.out, x)
    print(f"wrote {args.out} ({x.shape[1]}x{x.shape[2]})")
    return EXIT_OK


# ------------------------------------------------------------------- eval


def cmd_eval(args):
    model, meta = load_checkpoint(args.ckpt)
    entries = read_manifest(args.manifest)
    cfg = model.config
    report = MetricsReport(header=dict(
        variant=variant_name(cfg), scale=cfg.scale, pinv=meta.get("pinv", "exact"),
        checkpoint=os.path.basename(args.ckpt), images=len(entries),
    ))
    for e in entries:
        if e.scale != cfg.scale:
            raise InputError(f"{e.id}: scale {e.scale} differs from the checkpoint scale {cfg.scale}")
        x, y = read_png(e.hr), read_png(e.lr)
        if x.shape[1:] != (y.shape[1] * cfg.scale, y.shape[2] * cfg.scale):
            raise InputError(f"{e.id}: HR {x.shape[1:]} is not {cfg.scale}x LR {y.shape[1:]}")
        x_hat = np.clip(super_resolve(model, y, read_kernel(e.klow)), 0.0, 1.0)
        base = np.clip(bicubic_upsample(y, cfg.scale), 0.0, 1.0)
        macs = mac_count(cfg, y.shape[1:])
        report.add(e.id, psnr(x_hat, x), ssim(x_hat, x), macs, method="ours")
        report.add(e.id, psnr(base, x), ssim(base, x), method="bicubic")
    report.write(args.out)
    for line in report.lines():
        if '"summary"' in line:
            print(line)
    return EXIT_OK


# ------------------------------------------------------------------- main


def build_parser():
    p = argparse.ArgumentParser(prog="caduf", description="Cascade super-resolution for blurred, noisy images.")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("synth", help="synthesise a degraded dataset with a manifest")
    q.add_argument("--corpus", required=True, help="directory of 8-bit RGB PNG images")
    q.add_argument("--family", choices=sorted(FAMILY_NAMES), default="sm")
    q.add_argument("--scale", type=int, choices=(2, 4), default=2)
    q.add_argument("--count", type=int, required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.add_argument("--patch", type=int, default=0, help="HR crop side; 0 keeps whole images")
    q.add_argument("--workers", type=int, default=1)
    q.set_defaults(func=cmd_synth)

    q = sub.add_parser("train", help="train a cascade on a manifest")
    q.add_argument("--manifest", required=True)
    q.add_argument("--profile", choices=("paper", "desk"), default="desk")
    q.add_argument("--config", help="key=value file of model flags and training overrides")
    q.add_argument("--out", required=True, help="checkpoint path")
    q.add_argument("--log", help="CSV loss log (default: <out>.log.csv)")
    q.add_argument("--max-steps", type=int)
    q.add_argument("--seed", type=int)
    q.add_argument("--dry-run", action="store_true", help="print the schedule and exit")
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("infer", help="super-resolve one LR image")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--lr", required=True)
    q.add_argument("--kernel", required=True)
    q.add_argument("--klow", help="LR-space kernel; fitted by least squares when absent")
    q.add_argument("--scale", type=int, choices=(2, 4), required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_infer)

    q = sub.add_parser("eval", help="PSNR/SSIM/MAC report with bicubic baseline rows")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--manifest", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (TrainingAborted, WienerError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"caduf {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, FormatError, KernelError, OSError, KeyError, ValueError) as e:
        print(f"caduf {args.command}: error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
