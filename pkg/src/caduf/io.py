"""File formats: kernel text, checkpoint container, PNG images, manifests and key=value configs."""

from __future__ import annotations

import csv
import json
import os
import struct
import zlib
from dataclasses import dataclass, fields

import numpy as np
from PIL import Image

MAGIC = b"CADUF1"


class FormatError(ValueError):
    pass


# ------------------------------------------------------------ kernel text


def format_kernel(k):
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2:
        raise FormatError("kernel must be 2-D")
    lines = ["KERNEL 1", f"{k.shape[0]} {k.shape[1]}"]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in k]
    return "\n".join(lines) + "\n"


def parse_kernel(text):
    if not text.endswith("\n"):
        raise FormatError("kernel file must end with a newline")
    lines = text[:-1].split("\n")
    if len(lines) < 2 or lines[0].strip() != "KERNEL 1":
        raise FormatError("missing 'KERNEL 1' header")
    try:
        h, w = (int(t) for t in lines[1].split())
    except ValueError as e:
        raise FormatError(f"bad size line {lines[1]!r}") from e
    if h < 1 or w < 1 or len(lines) != 2 + h:
        raise FormatError(f"expected {h} rows, found {len(lines) - 2}")
    try:
        rows = [[float(t) for t in line.split()] for line in lines[2:]]
    except ValueError as e:
        raise FormatError("non-numeric kernel tap") from e
    if any(len(r) != w for r in rows):
        raise FormatError(f"every row must have {w} values")
    k = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(k)):
        raise FormatError("non-finite kernel tap")
    return k


def write_kernel(path, k):
    with open(path, "w", newline="\n") as f:
        f.write(format_kernel(k))


def read_kernel(path):
    with open(path, newline="") as f:
        return parse_kernel(f.read())


# ----------------------------------------------------------- checkpoints


def encode_checkpoint(entries):
    """Serialise an ordered mapping of name -> array."""
    parts = [struct.pack("<Q", len(entries))]
    for name, arr in entries.items():
        arr = np.array(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<Q", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    payload = b"".join(parts)
    return MAGIC + payload + struct.pack("<I", zlib.crc32(payload))


def decode_checkpoint(blob):
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    if len(blob) < len(MAGIC) + 12:
        raise FormatError("truncated checkpoint")
    payload, crc = blob[len(MAGIC):-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(payload) != crc:
        raise FormatError("checkpoint CRC mismatch")
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(payload):
            raise FormatError("truncated checkpoint entry")
        out = payload[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<Q", take(8))
    entries = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        if name in entries:
            raise FormatError(f"duplicate entry {name!r}")
        (rank,) = struct.unpack("<Q", take(8))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(dims)) if rank else 1
        entries[name] = np.reshape(np.frombuffer(take(8 * size), dtype="<f8"), dims).astype(np.float64)
    if pos != len(payload):
        raise FormatError("trailing bytes in checkpoint")
    return entries


def _json_entry(obj):
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _json_value(arr):
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8"))


def save_checkpoint(path, model, extra=None):
    """Write ``model`` (a :class:`~caduf.cascade.Cascade`) with its config and pinv choice."""
    meta = {"config": model.config.to_dict(), "pinv": getattr(model.pinv, "kind", "exact")}
    meta.update(extra or {})
    entries = {"__config__": _json_entry(meta)}
    entries.update(model.state_dict())
    if meta["pinv"] == "learned":
        entries.update({f"__pinv__.{k}": v for k, v in model.pinv.state_dict().items()})
    blob = encode_checkpoint(entries)
    with open(path, "wb") as f:
        f.write(blob)
    return blob


def load_checkpoint(path, rng=None):
    """Rebuild a cascade from ``path``; returns ``(model, meta)``."""
    from .cascade import Cascade, CascadeConfig
    from .operators import PinvNet

    with open(path, "rb") as f:
        entries = decode_checkpoint(f.read())
    if "__config__" not in entries:
        raise FormatError("checkpoint has no __config__ entry")
    meta = _json_value(entries.pop("__config__"))
    cfg = CascadeConfig.from_dict(meta["config"])
    rng = rng or np.random.default_rng(0)
    pinv = None
    pinv_state = {k[len("__pinv__."):]: entries.pop(k) for k in list(entries) if k.startswith("__pinv__.")}
    if meta.get("pinv") == "learned":
        pinv = PinvNet(cfg.scale, rng)
        pinv.load_state_dict(pinv_state)
    model = Cascade(cfg, rng, pinv=pinv)
    model.load_state_dict(entries)
    return model, meta


# ----------------------------------------------------------------- images


def read_png(path):
    """8-bit PNG -> float64 (3, H, W) in [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("RGB", "RGBA", "L", "P"):
            raise FormatError(f"{path}: unsupported PNG mode {im.mode}")
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


def write_png(path, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = np.repeat(x[None], 3, axis=0)
    u8 = np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(u8, "RGB").save(path, format="PNG")


# --------------------------------------------------------------- manifests

MANIFEST_FIELDS = ("id", "hr", "lr", "kernel", "klow", "scale", "noise", "seed")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    hr: str
    lr: str
    kernel: str
    klow: str
    scale: int
    noise: float
    seed: int


def write_manifest(path, entries):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for e in entries:
            w.writerow([e.id, e.hr, e.lr, e.kernel, e.klow, e.scale, repr(float(e.noise)), e.seed])


def read_manifest(path, check_files=True):
    """Entries with paths resolved against the manifest directory.

    Raises :class:`FormatError` listing every missing file.
    """
    root = os.path.dirname(os.path.abspath(path))
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != MANIFEST_FIELDS:
        raise FormatError(f"manifest header must be {','.join(MANIFEST_FIELDS)}")
    entries, seen, missing = [], set(), []
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(MANIFEST_FIELDS):
            raise FormatError(f"line {i}: expected {len(MANIFEST_FIELDS)} fields")
        rec = dict(zip(MANIFEST_FIELDS, row))
        if rec["id"] in seen:
            raise FormatError(f"duplicate id {rec['id']!r}")
        seen.add(rec["id"])
        try:
            scale, noise, seed = int(rec["scale"]), float(rec["noise"]), int(rec["seed"])
        except ValueError as e:
            raise FormatError(f"line {i}: {e}") from e
        if scale not in (2, 4):
            raise FormatError(f"line {i}: scale must be 2 or 4")
        paths = {k: os.path.join(root, rec[k]) for k in ("hr", "lr", "kernel", "klow")}
        if check_files:
            missing += [p for p in paths.values() if not os.path.exists(p)]
        entries.append(ManifestEntry(rec["id"], scale=scale, noise=noise, seed=seed, **paths))
    if missing:
        raise FormatError("missing files: " + ", ".join(missing))
    return entries


# ----------------------------------------------------------------- configs


def _convert(text, default):
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(t) for t in text.split(","))
    return text


def parse_config(text, defaults):
    """Parse ``key=value`` lines against ``defaults`` (name -> default value).

    Blank lines and ``#`` comments are skipped; unknown keys raise.
    """
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {n}: expected key=value")
        key, value = (t.strip() for t in line.split("=", 1))
        if key not in defaults:
            raise FormatError(f"line {n}: unknown key {key!r}")
        try:
            out[key] = _convert(value, defaults[key])
        except ValueError as e:
            raise FormatError(f"line {n}: {e}") from e
    return out


def dataclass_defaults(cls):
    return {f.name: f.default for f in fields(cls)}
