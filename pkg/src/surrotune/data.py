"""Synthetic clean/noisy image pairs, deterministic splits and on-disk datasets."""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import rng as rngmod

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


@dataclass
class Pair:
    id: str
    clean: np.ndarray
    noisy: np.ndarray
    sigma: float
    split: Optional[str] = None


@dataclass
class Dataset:
    pairs: list
    seed: int = 0
    height: int = 0
    width: int = 0
    noise_levels: tuple = ()
    path: Optional[str] = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.pairs)

    def subset(self, split: str) -> list:
        return [p for p in self.pairs if p.split == split]

    def counts(self) -> dict:
        return {s: len(self.subset(s)) for s in SPLITS}


# -- generators -------------------------------------------------------------

def _smooth_field(rng, h, w):
    img = np.empty((h, w, 3))
    scale = rng.uniform(1.0, 3.0)
    for c in range(3):
        f = gaussian_filter(rng.standard_normal((h, w)), scale, mode="wrap")
        f = (f - f.mean()) / (f.std() + 1e-12)
        img[..., c] = 0.5 + rng.uniform(0.12, 0.2) * f
    return img


def _gradient(rng, h, w):
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    t = np.cos(angle) * xx / max(w - 1, 1) + np.sin(angle) * yy / max(h - 1, 1)
    t = (t - t.min()) / (t.max() - t.min() + 1e-12)
    a, b = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    return a + t[..., None] * (b - a)


def _checkerboard(rng, h, w):
    cell = int(rng.integers(4, 17))
    yy, xx = np.mgrid[0:h, 0:w]
    mask = ((yy // cell + xx // cell) % 2).astype(bool)
    a, b = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    return np.where(mask[..., None], a, b)


def _cells(rng, h, w):
    n = int(rng.integers(6, 21))
    seeds = rng.uniform(0, 1, (n, 2)) * (h, w)
    colors = rng.uniform(0.1, 0.9, (n, 3))
    yy, xx = np.mgrid[0:h, 0:w]
    d = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
    return colors[np.argmin(d, axis=-1)]


GENERATORS = (_smooth_field, _gradient, _checkerboard, _cells)


def add_gaussian_noise(clean: np.ndarray, sigma: float, rng: np.random.Generator, clamp: bool = True):
    noisy = clean + rng.normal(0.0, sigma, clean.shape) if sigma > 0 else clean.astype(np.float64)
    if clamp:
        noisy = np.clip(noisy, 0.0, 1.0)
    return noisy.astype(np.float32)


def gen_synthetic(count: int, height: int, width: int, noise_levels: Sequence[float], seed: int) -> Dataset:
    """Deterministic clean/noisy pairs.

    Clean images cycle through the four generators; the noise level advances
    once per generator cycle so every generator sees every level.
    """
    if height % 4 or width % 4 or height <= 0 or width <= 0:
        raise DatasetError(f"height and width must be positive multiples of 4, got {height}x{width}")
    if count < 3:
        raise DatasetError(f"count must be >= 3, got {count}")
    levels = tuple(float(s) for s in noise_levels)
    if not levels or any(s < 0 for s in levels):
        raise DatasetError(f"noise levels must be non-negative, got {levels}")
    pairs = []
    for i in range(count):
        r = rngmod.make_rng(seed, rngmod.DATASET, i)
        gen = GENERATORS[i % len(GENERATORS)]
        sigma = levels[(i // len(GENERATORS)) % len(levels)]
        clean = np.clip(gen(r, height, width), 0.0, 1.0).astype(np.float32)
        noisy = add_gaussian_noise(clean, sigma, r)
        pairs.append(Pair(f"p{i:05d}", clean, noisy, sigma))
    return Dataset(pairs, seed=seed, height=height, width=width, noise_levels=levels)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(dataset: Dataset, test_fraction: float = 0.25, val_fraction: float = 0.125, seed: Optional[int] = None) -> Dataset:
    """Seeded shuffle, then contiguous train | val | test assignment.

    ``val_fraction`` is a share of the non-test (dev) pairs; counts round to
    nearest and the remainder goes to train.
    """
    if not (0 < test_fraction < 1 and 0 < val_fraction < 1):
        raise DatasetError("split fractions must lie in (0, 1)")
    n = len(dataset.pairs)
    n_test = _round_half_up(n * test_fraction)
    n_val = _round_half_up((n - n_test) * val_fraction)
    n_train = n - n_test - n_val
    if min(n_train, n_val, n_test) < 1:
        raise DatasetError(f"split too small: train={n_train} val={n_val} test={n_test}")
    perm = rngmod.make_rng(dataset.seed if seed is None else seed, rngmod.SPLIT).permutation(n)
    tags = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    pairs = list(dataset.pairs)
    out = [None] * n
    for slot, idx in enumerate(perm):
        out[idx] = replace(pairs[idx], split=tags[slot])
    meta = dict(dataset.meta, test_fraction=test_fraction, val_fraction=val_fraction)
    return replace(dataset, pairs=out, meta=meta)


def benchmark(seed: int = 0, count: int = 260, size: int = 64, test_count: int = 60,
              noise_levels: Sequence[float] = (0.05, 0.15)) -> Dataset:
    """Heterogeneous-noise benchmark: 200 dev + 60 test pairs of 64x64 by default."""
    ds = gen_synthetic(count, size, size, noise_levels, seed)
    return split(ds, test_fraction=test_count / count, seed=seed)


# -- image files ------------------------------------------------------------

def write_ppm(path, img: np.ndarray) -> None:
    q = np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)
    h, w, c = q.shape
    if c != 3:
        raise ValueError("P6 needs 3 channels")
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(q.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise DatasetError(f"{path}: not a binary P6 file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit P6 is supported")
    pos += 1
    raw = data[pos:pos + w * h * 3]
    if len(raw) != w * h * 3:
        raise DatasetError(f"{path}: truncated pixel data")
    return (np.frombuffer(raw, np.uint8).reshape(h, w, 3) / np.float32(255.0)).astype(np.float32)


def write_f32t(path, arr: np.ndarray) -> None:
    a = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(b"F32T")
        f.write(struct.pack("<I", a.ndim))
        f.write(struct.pack(f"<{a.ndim}I", *a.shape))
        f.write(a.tobytes())


def read_f32t(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != b"F32T":
        raise DatasetError(f"{path}: bad magic")
    (rank,) = struct.unpack_from("<I", data, 4)
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    off = 8 + 4 * rank
    n = int(np.prod(dims))
    if len(data) - off != 4 * n:
        raise DatasetError(f"{path}: truncated payload")
    return np.frombuffer(data, "<f4", count=n, offset=off).reshape(dims).astype(np.float32)


_WRITERS = {"f32t": (write_f32t, ".f32t"), "ppm": (write_ppm, ".ppm")}
_READERS = {"f32t": read_f32t, "ppm": read_ppm}


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def atomic_write_text(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def save_dataset(dataset: Dataset, directory, image_format: str = "f32t") -> Path:
    if image_format not in _WRITERS:
        raise DatasetError(f"unknown image format {image_format!r}")
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    write, ext = _WRITERS[image_format]
    entries = []
    for p in dataset.pairs:
        files = {}
        for kind in ("clean", "noisy"):
            name = f"{p.id}_{kind}{ext}"
            write(out / name, getattr(p, kind))
            files[kind] = name
        entries.append({
            "id": p.id,
            "split": p.split,
            "sigma": p.sigma,
            "clean": files["clean"],
            "noisy": files["noisy"],
            "sha256": {k: _sha256(out / v) for k, v in files.items()},
        })
    manifest = {
        "format_version": FORMAT_VERSION,
        "image_format": image_format,
        "seed": dataset.seed,
        "height": dataset.height,
        "width": dataset.width,
        "noise_levels": list(dataset.noise_levels),
        "meta": dataset.meta,
        "pairs": entries,
    }
    atomic_write_text(out / MANIFEST, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def _field(obj: dict, name: str, kind, where: str = "manifest"):
    if name not in obj:
        raise DatasetError(f"{where}: missing field {name!r}")
    val = obj[name]
    if not isinstance(val, kind) or isinstance(val, bool) and kind is not bool:
        raise DatasetError(f"{where}: field {name!r} has invalid value {val!r}")
    return val


def load_dataset(directory) -> Dataset:
    root = Path(directory)
    mpath = root / MANIFEST
    if not mpath.is_file():
        raise DatasetError(f"missing manifest in {root}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"manifest is not valid JSON: {exc}") from None
    if not isinstance(manifest, dict):
        raise DatasetError("manifest: top level must be an object")
    version = _field(manifest, "format_version", int)
    if version != FORMAT_VERSION:
        raise DatasetError(f"unknown format version {version}")
    fmt = _field(manifest, "image_format", str)
    if fmt not in _READERS:
        raise DatasetError(f"manifest: field 'image_format' has invalid value {fmt!r}")
    read = _READERS[fmt]
    seed = _field(manifest, "seed", int)
    pairs, seen = [], set()
    for i, e in enumerate(_field(manifest, "pairs", list)):
        where = f"manifest pairs[{i}]"
        if not isinstance(e, dict):
            raise DatasetError(f"{where}: entry must be an object")
        pid = _field(e, "id", str, where)
        if pid in seen:
            raise DatasetError(f"{where}: field 'id' duplicates {pid!r}")
        seen.add(pid)
        tag = e.get("split")
        if tag is not None and tag not in SPLITS:
            raise DatasetError(f"{where}: field 'split' has invalid value {tag!r}")
        sigma = float(_field(e, "sigma", (int, float), where))
        sums = _field(e, "sha256", dict, where)
        imgs = {}
        for kind in ("clean", "noisy"):
            fpath = root / _field(e, kind, str, where)
            if not fpath.is_file():
                raise DatasetError(f"pair {pid}: missing {kind} image file {fpath.name}")
            if sums.get(kind) != _sha256(fpath):
                raise DatasetError(f"pair {pid}: checksum mismatch for {fpath.name}")
            imgs[kind] = read(fpath)
        if imgs["clean"].shape != imgs["noisy"].shape:
            raise DatasetError(f"pair {pid}: clean/noisy shape mismatch")
        pairs.append(Pair(pid, imgs["clean"], imgs["noisy"], sigma, tag))
    return Dataset(
        pairs,
        seed=seed,
        height=int(manifest.get("height", 0)),
        width=int(manifest.get("width", 0)),
        noise_levels=tuple(manifest.get("noise_levels", ())),
        path=str(root),
        meta=manifest.get("meta", {}),
    )
