"""Image sources, the on-disk dataset layout, and real/synthetic mixing.

Dataset directory layout::

    root/
      index.txt          # one "relative/path label" line per image
      0/00000.pgm        # one subdirectory per class label
      1/00000.pgm
      ...

Images are 8-bit binary PGM (grey) or PPM (RGB) and are mapped to ``[-1, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ditmoe.pnm import chw_to_image, image_to_chw, read_pnm, write_pnm

INDEX_NAME = "index.txt"


@dataclass
class ImageSource:
    """An in-memory labelled image set, ``images`` ``[N, C, H, W]`` in ``[-1, 1]``."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images must be [N, C, H, W] with one label each")

    def __len__(self) -> int:
        return int(self.labels.shape[0])


# ---------------------------------------------------------------------------
# procedural toy data
# ---------------------------------------------------------------------------


def _pattern(label: int, size: int, rng: np.random.Generator, style: str) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi)
    period = size / 2.0
    kind = label % 4
    if kind == 0:
        img = np.cos(2 * np.pi * yy / period + phase)
    elif kind == 1:
        img = np.cos(2 * np.pi * xx / period + phase)
    elif kind == 2:
        img = np.cos(2 * np.pi * (xx + yy) / (period * 1.5) + phase)
    else:
        cy, cx = rng.uniform(size * 0.3, size * 0.7, size=2)
        r2 = (yy - cy) ** 2 + (xx - cx) ** 2
        img = 2.0 * np.exp(-r2 / (2 * (size / 5.0) ** 2)) - 1.0
    # labels beyond the four base patterns flip polarity every further group of four
    if (label // 4) % 2:
        img = -img
    if style == "synthetic":
        # stand-in for generated imagery: softer contrast, a brightness offset
        img = 0.7 * img + rng.uniform(-0.2, 0.2)
    img = img + 0.05 * rng.standard_normal(img.shape)
    return np.clip(img, -1.0, 1.0)


def toy_source(num_classes: int, per_class: int, size: int = 8, channels: int = 1, seed: int = 0,
               style: str = "real") -> ImageSource:
    """Class-dependent stripe/blob patterns, ``per_class`` images per label."""
    if style not in ("real", "synthetic"):
        raise ValueError("style must be 'real' or 'synthetic'")
    rng = np.random.default_rng(seed)
    imgs, labels = [], []
    for c in range(num_classes):
        for _ in range(per_class):
            img = _pattern(c, size, rng, style)
            imgs.append(np.repeat(img[None], channels, axis=0))
            labels.append(c)
    return ImageSource(np.stack(imgs), np.asarray(labels))


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------


def write_dataset(source: ImageSource, root) -> Path:
    """Write ``source`` as a class-per-subdirectory dataset with an index."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    counters: dict[int, int] = {}
    for img, label in zip(source.images, source.labels):
        label = int(label)
        k = counters.get(label, 0)
        counters[label] = k + 1
        ext = "ppm" if img.shape[0] == 3 else "pgm"
        rel = f"{label}/{k:05d}.{ext}"
        (root / str(label)).mkdir(exist_ok=True)
        write_pnm(root / rel, chw_to_image(img))
        lines.append(f"{rel} {label}\n")
    (root / INDEX_NAME).write_text("".join(lines))
    return root


def load_dataset(root) -> ImageSource:
    root = Path(root)
    index = root / INDEX_NAME
    if not index.is_file():
        raise FileNotFoundError(f"dataset index not found: {index}")
    imgs, labels = [], []
    for lineno, line in enumerate(index.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rel, label = line.rsplit(maxsplit=1)
            label = int(label)
        except ValueError:
            raise ValueError(f"{index}:{lineno}: expected 'path label'") from None
        if Path(rel).parts[0] != str(label):
            raise ValueError(f"{index}:{lineno}: {rel} is not under class directory {label}/")
        imgs.append(image_to_chw(read_pnm(root / rel)))
        labels.append(label)
    if not imgs:
        raise ValueError(f"dataset {root} is empty")
    return ImageSource(np.stack(imgs), np.asarray(labels))


# ---------------------------------------------------------------------------
# mixing
# ---------------------------------------------------------------------------


def hflip(images: np.ndarray) -> np.ndarray:
    """Mirror the last (width) axis."""
    return np.asarray(images)[..., ::-1].copy()


class MixedSampler:
    """Draw batches mixing a real and a synthetic source at ratio ``r:s``.

    Each item is taken from the real source with probability ``r / (r + s)``,
    a uniformly random index within its source, and horizontally flipped
    with probability 0.5. All randomness comes from ``rng``.
    """

    def __init__(self, real: ImageSource | None, synthetic: ImageSource | None, ratio=(1, 5),
                 rng: np.random.Generator | None = None, flip: bool = True):
        r, s = (float(v) for v in ratio)
        if r < 0 or s < 0 or r + s <= 0:
            raise ValueError(f"invalid mixing ratio {ratio}")
        if r > 0 and (real is None or len(real) == 0):
            raise ValueError("ratio requires a non-empty real source")
        if s > 0 and (synthetic is None or len(synthetic) == 0):
            raise ValueError("ratio requires a non-empty synthetic source")
        self.real, self.synthetic = real, synthetic
        self.p_real = r / (r + s)
        self.rng = rng if rng is not None else np.random.default_rng()
        self.flip = flip

    def draw(self, batch_size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(images, labels, from_real)`` for one batch."""
        rng = self.rng
        from_real = rng.random(batch_size) < self.p_real
        ref = self.real if self.real is not None else self.synthetic
        images = np.empty((batch_size,) + ref.images.shape[1:], dtype=np.float32)
        labels = np.empty(batch_size, dtype=np.int64)
        for i in range(batch_size):
            src = self.real if from_real[i] else self.synthetic
            j = int(rng.integers(len(src)))
            images[i] = src.images[j]
            labels[i] = src.labels[j]
        if self.flip:
            flips = rng.random(batch_size) < 0.5
            images[flips] = images[flips][..., ::-1]
        return images, labels, from_real

    def __iter__(self):
        return self

    def __next__(self):
        return self.draw(1)


def mixed_sampler(real_source, synth_source, ratio, rng, batch_size: int = 1):
    """Endless stream of ``(images, labels, from_real)`` batches."""
    sampler = MixedSampler(real_source, synth_source, ratio, rng)
    while True:
        yield sampler.draw(batch_size)
