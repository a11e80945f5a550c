"""Image I/O, dataset ingestion with deterministic crop caching, and the
synthetic toy-image generator used for desk-scale runs.

Only PNG and PPM files are accepted.  Crops are cached as a single tensor
file keyed by the dataset parameters; the cache directory comes from
``DLF_CACHE_DIR`` (defaults to ``<root>/.dlf_cache``).
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .config import DatasetSpec

_ALLOWED_SUFFIXES = {".png", ".ppm"}


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write via a temp file + rename so failures never leave partial output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def atomic_torch_save(obj, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        torch.save(obj, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_image(path: str | Path) -> Tensor:
    """Read a PNG/PPM file as a float (3, H, W) tensor in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() not in _ALLOWED_SUFFIXES:
        raise ValueError(f"unsupported image format {path.suffix!r} (PNG/PPM only)")
    with Image.open(path) as img:
        arr = np.array(img.convert("RGB"), dtype=np.uint8)
    return torch.from_numpy(arr).permute(2, 0, 1).float() / 255.0


def save_image(pixels: Tensor, path: str | Path) -> None:
    """Write a float (3, H, W) tensor in [0, 1] as PNG or PPM."""
    path = Path(path)
    if path.suffix.lower() not in _ALLOWED_SUFFIXES:
        raise ValueError(f"unsupported image format {path.suffix!r} (PNG/PPM only)")
    arr = (pixels.clamp(0, 1) * 255.0).round().byte().permute(1, 2, 0).cpu().numpy()
    img = Image.fromarray(arr)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=path.suffix)
    os.close(fd)
    try:
        img.save(tmp, format="PNG" if path.suffix.lower() == ".png" else "PPM")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def synthetic_images(count: int, size: int, seed: int = 0) -> Tensor:
    """Procedural toy images: smooth gradients, solid shapes and soft texture.

    Returns uint8 (count, 3, size, size).  Content is compressible by design
    so small models can be trained on it in minutes.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / max(size - 1, 1)
    out = np.empty((count, 3, size, size), dtype=np.uint8)
    for i in range(count):
        base = np.empty((3, size, size), dtype=np.float32)
        for ch in range(3):
            a, bx, by, bxy = rng.uniform(-0.6, 0.6, size=4)
            base[ch] = 0.5 + a * 0.4 + bx * (xx - 0.5) + by * (yy - 0.5) + bxy * (xx - 0.5) * (yy - 0.5)
        # soft sinusoidal texture
        fx, fy = rng.uniform(1.0, 5.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        base += 0.06 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)[None]
        # a few solid shapes with ~1px antialiased edges
        edge = 1.5 / size
        for _ in range(rng.integers(2, 6)):
            color = rng.uniform(0.05, 0.95, size=3).astype(np.float32)
            cy, cx = rng.uniform(0.1, 0.9, size=2)
            ry, rx = rng.uniform(0.05, 0.3, size=2)
            if rng.random() < 0.5:
                d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) - 1.0
                d = d * min(ry, rx)
            else:
                d = np.maximum(np.abs(yy - cy) - ry, np.abs(xx - cx) - rx)
            m = np.clip(0.5 - d / edge, 0.0, 1.0)
            alpha = rng.uniform(0.6, 1.0) * m
            base = (1 - alpha[None]) * base + alpha[None] * color[:, None, None]
        base += rng.normal(0.0, 0.004, size=base.shape).astype(np.float32)
        out[i] = (np.clip(base, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    return torch.from_numpy(out)


def _parse_synthetic(root: str) -> tuple[int, int] | None:
    if not root.startswith("synthetic:"):
        return None
    parts = root.split(":")
    count = int(parts[1])
    size = int(parts[2]) if len(parts) > 2 else 256
    return count, size


def _cache_dir(root: Path) -> Path:
    env = os.environ.get("DLF_CACHE_DIR")
    return Path(env) if env else root / ".dlf_cache"


def _random_crop(img: Tensor, crop: int, rng: np.random.Generator) -> Tensor:
    c, h, w = img.shape
    if h < crop or w < crop:
        # Replicate-pad small sources up to the crop size.
        ph, pw = max(0, crop - h), max(0, crop - w)
        img = torch.nn.functional.pad(img.unsqueeze(0).float(), (0, pw, 0, ph), mode="replicate").squeeze(0).to(img.dtype)
        h, w = img.shape[1:]
    y = int(rng.integers(0, h - crop + 1))
    x = int(rng.integers(0, w - crop + 1))
    return img[:, y : y + crop, x : x + crop]


def build_crops(spec: DatasetSpec) -> Tensor:
    """Deterministic (by seed) uint8 crop stack (n, 3, crop, crop)."""
    synth = _parse_synthetic(spec.root)
    if synth is not None:
        count, size = synth
        if spec.max_images is not None:
            count = min(count, spec.max_images)
        if count == 0:
            raise ValueError("empty dataset")
        imgs = synthetic_images(count, max(size, spec.crop_size), spec.seed)
        rng = np.random.default_rng(spec.seed + 1)
        return torch.stack([_random_crop(img, spec.crop_size, rng) for img in imgs])

    root = Path(spec.root)
    if not root.is_dir():
        raise ValueError(f"dataset root {spec.root!r} is not a directory")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in _ALLOWED_SUFFIXES)
    if spec.max_images is not None:
        files = files[: spec.max_images]
    if not files:
        raise ValueError(f"no PNG/PPM images under {spec.root!r}")

    key = hashlib.sha256(
        repr((str(root.resolve()), spec.crop_size, spec.seed, spec.max_images,
              [f.name for f in files])).encode()
    ).hexdigest()[:16]
    cache = _cache_dir(root) / f"crops_{key}.pt"
    if cache.exists():
        return torch.load(cache, weights_only=True)

    rng = np.random.default_rng(spec.seed + 1)
    crops = []
    for f in files:
        img = (load_image(f) * 255.0).round().byte()
        crops.append(_random_crop(img, spec.crop_size, rng))
    stack = torch.stack(crops)
    atomic_torch_save(stack, cache)
    return stack


def split_indices(n: int, split: tuple[float, float, float], seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded train/val/test index split; every item lands in exactly one part."""
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(split[0] * n))
    n_val = int(round(split[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


def to_float(batch: Tensor) -> Tensor:
    """uint8 (…, 3, H, W) -> float [0, 1]."""
    return batch.float() / 255.0
