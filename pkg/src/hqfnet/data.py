"""Dataset scanning, loading, augmentation, and synthetic data generation.

Layout: ``root/{images,masks}/<stem>.png`` with 8-bit RGB images and 8-bit
index masks paired by filename stem. Pixel values are scaled to [0, 1];
masks resize with nearest-neighbour so class ids are never invented.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import _resize_matrix


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    image_path: Path
    mask_path: Path
    split: str = "train"

    @property
    def stem(self) -> str:
        return self.image_path.stem


def scan_dataset(root) -> list[SampleRecord]:
    root = Path(root)
    img_dir = root / "images"
    mask_dir = root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DataError(f"{root}: expected images/ and masks/ subdirectories")
    images = {p.stem: p for p in sorted(img_dir.glob("*.png"))}
    masks = {p.stem: p for p in sorted(mask_dir.glob("*.png"))}
    unpaired = sorted(set(images) ^ set(masks))
    if unpaired:
        raise DataError(f"unpaired samples (image or mask missing): {unpaired}")
    if not images:
        raise DataError(f"{root}: no samples found")
    return [SampleRecord(images[s], masks[s]) for s in sorted(images)]


def load_sample(rec: SampleRecord, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Returns (image [3,H,W] float64 in [0,1], mask [H,W] int64)."""
    img = np.asarray(Image.open(rec.image_path).convert("RGB"), dtype=np.float64) / 255.0
    mask = np.asarray(Image.open(rec.mask_path).convert("L"), dtype=np.int64)
    if img.shape[:2] != mask.shape:
        raise DataError(
            f"{rec.stem}: image {img.shape[:2]} vs mask {mask.shape} spatial mismatch"
        )
    if mask.max(initial=0) >= n_classes:
        raise DataError(f"{rec.mask_path}: class id {int(mask.max())} >= n_classes {n_classes}")
    return img.transpose(2, 0, 1), mask


def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of [3,H,W] to [3,size,size] (clamped borders)."""
    _, h, w = img.shape
    r = _resize_matrix(h, size) if size >= h else _shrink_matrix(h, size)
    c = _resize_matrix(w, size) if size >= w else _shrink_matrix(w, size)
    return np.einsum("Hh,chw,Ww->cHW", r, img, c)


def _shrink_matrix(src: int, dst: int) -> np.ndarray:
    # area-style rows for downscaling: average the source pixels whose
    # centers fall in each destination cell
    m = np.zeros((dst, src))
    bounds = np.linspace(0, src, dst + 1)
    for j in range(dst):
        lo, hi = int(math.floor(bounds[j])), int(math.ceil(bounds[j + 1]))
        hi = max(hi, lo + 1)
        m[j, lo:hi] = 1.0 / (hi - lo)
    return m


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize; output values are a subset of the input's."""
    h, w = mask.shape
    rows = np.clip(((np.arange(size) + 0.5) * h / size).astype(int), 0, h - 1)
    cols = np.clip(((np.arange(size) + 0.5) * w / size).astype(int), 0, w - 1)
    return mask[np.ix_(rows, cols)]


def random_crop(img: np.ndarray, mask: np.ndarray, size: int, rng: np.random.Generator):
    _, h, w = img.shape
    if h < size or w < size:
        raise DataError(f"crop {size} larger than sample {h}x{w}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return img[:, y:y + size, x:x + size], mask[y:y + size, x:x + size]


def epoch_batches(
    records: list[SampleRecord],
    batch: int,
    input_size: int,
    n_classes: int,
    seed: int,
    epoch: int,
    crop: int | None = None,
    resize: int | None = None,
    shuffle: bool = True,
):
    """Deterministic batch stream: (sample ids, images [B,3,S,S], masks [B,S,S]).

    All randomness (epoch ordering, crop positions) derives from (seed, epoch),
    so repeated runs see identical data.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    order = rng.permutation(len(records)) if shuffle else np.arange(len(records))
    for start in range(0, len(order), batch):
        chunk = [records[i] for i in order[start:start + batch]]
        imgs, masks, ids = [], [], []
        for rec in chunk:
            img, mask = load_sample(rec, n_classes)
            if crop is not None:
                if crop != input_size:
                    raise DataError(f"crop {crop} must equal network input {input_size}")
                img, mask = random_crop(img, mask, crop, rng)
            elif resize is not None:
                if resize != input_size:
                    raise DataError(f"resize {resize} must equal network input {input_size}")
                img, mask = resize_image(img, resize), resize_mask(mask, resize)
            elif img.shape[1:] != (input_size, input_size):
                raise DataError(
                    f"{rec.stem}: sample is {img.shape[1:]} but network input is "
                    f"{input_size}; set data.crop or data.resize"
                )
            imgs.append(img)
            masks.append(mask)
            ids.append(rec.stem)
        yield ids, np.stack(imgs), np.stack(masks)


# fixed high-contrast palette; classes beyond the table reuse hashed hues
_PALETTE = np.array(
    [
        (46, 89, 158),    # background blue
        (206, 66, 52),    # red
        (68, 176, 84),    # green
        (232, 198, 64),   # yellow
        (148, 72, 186),   # purple
        (64, 196, 196),   # cyan
        (220, 130, 50),   # orange
        (120, 120, 120),  # grey
    ],
    dtype=np.float64,
)


def _class_color(c: int) -> np.ndarray:
    if c < len(_PALETTE):
        return _PALETTE[c]
    rng = np.random.default_rng(c)
    return rng.uniform(30, 225, size=3)


def _stripe_mask(size: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    raw = rng.uniform(0.8, 1.6, size=classes)
    widths = raw / raw.sum()
    edges = np.concatenate([[0.0], np.cumsum(widths)]) * size
    mask = np.zeros((size, size), dtype=np.int64)
    horizontal = bool(rng.integers(2))
    for c in range(classes):
        lo, hi = int(round(edges[c])), int(round(edges[c + 1]))
        if horizontal:
            mask[lo:hi, :] = c
        else:
            mask[:, lo:hi] = c
    return mask


def _decorate(mask: np.ndarray, classes: int, rng: np.random.Generator) -> None:
    size = mask.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    for c in range(classes):
        # one small disk
        r = max(2, int(0.05 * size))
        cy, cx = rng.integers(r, size - r, size=2)
        mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = c
        # one small rectangle
        h = max(2, int(rng.uniform(0.04, 0.08) * size))
        w = max(2, int(rng.uniform(0.04, 0.08) * size))
        y0 = int(rng.integers(0, size - h))
        x0 = int(rng.integers(0, size - w))
        mask[y0:y0 + h, x0:x0 + w] = c


def synth_dataset(out_dir, n: int, size: int, classes: int, seed: int) -> list[SampleRecord]:
    """Seeded images of colored stripes/disks/rectangles with exact masks.

    Every class holds between 5% and 60% of the pixels of every image.
    """
    if classes < 2 or classes > 8:
        raise DataError(f"synthetic datasets support 2..8 classes, got {classes}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([seed, size, classes]))
    records = []
    for i in range(n):
        for _attempt in range(64):
            mask = _stripe_mask(size, classes, rng)
            _decorate(mask, classes, rng)
            shares = np.bincount(mask.ravel(), minlength=classes) / mask.size
            if shares.min() >= 0.05 and shares.max() <= 0.60:
                break
        else:
            raise DataError("could not satisfy class share bounds")
        colors = np.stack([_class_color(c) for c in range(classes)])
        img = colors[mask] + rng.normal(0, 10, size=(size, size, 3))
        img = np.clip(img, 0, 255).astype(np.uint8)
        stem = f"sample_{i:04d}"
        Image.fromarray(img, mode="RGB").save(out_dir / "images" / f"{stem}.png")
        Image.fromarray(mask.astype(np.uint8), mode="L").save(out_dir / "masks" / f"{stem}.png")
        records.append(SampleRecord(out_dir / "images" / f"{stem}.png",
                                    out_dir / "masks" / f"{stem}.png"))
    return records
