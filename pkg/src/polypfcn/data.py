"""Image/mask ingestion, preprocessing, augmentation and batch assembly."""
import fnmatch
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .errors import DataError, ValidationError
from .imageio import read_image, read_mask, write_png
from .metrics import split_instances


@dataclass
class Sample:
    """One image with its per-polyp masks and an optional normalized depth channel."""
    image: np.ndarray          # (3, H, W) in [0, 1]
    masks: list                # per-polyp (H, W) uint8 in {0, 1}
    depth: Optional[np.ndarray] = None
    id: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValidationError(f"{self.id}: image must be (3, H, W), got {self.image.shape}")
        hw = self.image.shape[1:]
        masks = []
        for m in self.masks:
            m = np.asarray(m)
            if m.shape != hw:
                raise ValidationError(f"{self.id}: mask shape {m.shape} differs from image {hw}")
            if not np.isin(m, (0, 1)).all():
                raise ValidationError(f"{self.id}: masks must be strictly binary")
            masks.append(m.astype(np.uint8))
        self.masks = masks
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=np.float64)
            if self.depth.shape != hw:
                raise ValidationError(f"{self.id}: depth shape {self.depth.shape} differs from image {hw}")

    @property
    def shape(self):
        return self.image.shape[1:]

    @property
    def union(self):
        out = np.zeros(self.shape, dtype=np.uint8)
        for m in self.masks:
            out |= m
        return out

    def replace(self, image, masks, depth):
        return Sample(image, masks, depth, self.id)


# ---------------------------------------------------------------- loading

@dataclass
class Layout:
    """Where images, masks and (optionally) depth maps live under a dataset root.

    Masks pair with an image through ``mask_pattern``, in which ``{stem}`` is
    the image file name without extension; every match is one polyp mask.
    """
    image_dir: str = "images"
    mask_dir: str = "masks"
    image_glob: str = "*.png"
    mask_pattern: str = "{stem}*.png"
    depth_dir: Optional[str] = None
    depth_pattern: str = "{stem}.pgm"

    @classmethod
    def from_yaml(cls, path):
        raw = yaml.safe_load(Path(path).read_text()) or {}
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown layout keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class Record:
    id: str
    image: str
    masks: list
    depth: Optional[str] = None


@dataclass
class DatasetManifest:
    split: str
    records: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def counts(self):
        return {"pairs": len(self.records), "skipped": len(self.skipped)}

    def save(self, path):
        """Plain text, one tab-separated record per line: id, image, depth or '-', mask paths."""
        lines = [f"# split {self.split}"]
        for r in self.records:
            lines.append("\t".join([r.id, r.image, r.depth or "-", *r.masks]))
        for s in self.skipped:
            lines.append(f"# skipped {s}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        split, records, skipped = "", [], []
        for line in Path(path).read_text().splitlines():
            if line.startswith("# split "):
                split = line[8:]
            elif line.startswith("# skipped "):
                skipped.append(line[10:])
            elif line.strip():
                rid, image, depth, *masks = line.split("\t")
                records.append(Record(rid, image, masks, None if depth == "-" else depth))
        return cls(split, records, skipped)


def load_dataset(root, layout=None, split="all", check=True):
    """Pair images with their masks; unpaired images go to the skip report."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    layout = layout or Layout()
    image_dir, mask_dir = root / layout.image_dir, root / layout.mask_dir
    manifest = DatasetManifest(split)
    if not image_dir.is_dir():
        return manifest
    mask_names = sorted(p.name for p in mask_dir.iterdir()) if mask_dir.is_dir() else []
    seen = set()
    for path in sorted(image_dir.glob(layout.image_glob)):
        stem = path.stem
        if stem in seen:
            raise DataError(f"duplicate sample id {stem!r} ({path})")
        seen.add(stem)
        pattern = layout.mask_pattern.format(stem=stem)
        masks = [str(mask_dir / n) for n in fnmatch.filter(mask_names, pattern)]
        if not masks:
            manifest.skipped.append(f"{path}: no mask matching {pattern}")
            continue
        depth = None
        if layout.depth_dir:
            d = root / layout.depth_dir / layout.depth_pattern.format(stem=stem)
            depth = str(d) if d.exists() else None
        manifest.records.append(Record(stem, str(path), masks, depth))
    if check:
        for r in manifest.records:
            for p in [r.image, *r.masks]:
                read_image(p)
    return manifest


def load_sample(record):
    """Decode a manifest record; a single union mask is split into polyps by connectivity."""
    from .imageio import read_pgm16

    image = read_image(record.image)
    if image.ndim == 2:
        image = np.repeat(image[None], 3, axis=0)
    masks = [read_mask(p) for p in record.masks]
    if len(masks) == 1:
        masks = split_instances(masks[0])
    depth = None
    if record.depth:
        depth = read_pgm16(record.depth) / 65535.0 if record.depth.endswith(".pgm") else read_image(record.depth)
    return Sample(image, masks, depth, record.id)


def load_samples(manifest):
    return [load_sample(r) for r in manifest.records]


def write_samples(samples, root, layout=None):
    """Write samples as PNG images plus one PNG per polyp mask in the given layout."""
    from .imageio import write_pgm16

    root = Path(root)
    layout = layout or Layout()
    (root / layout.image_dir).mkdir(parents=True, exist_ok=True)
    (root / layout.mask_dir).mkdir(parents=True, exist_ok=True)
    if layout.depth_dir:
        (root / layout.depth_dir).mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_png(root / layout.image_dir / f"{s.id}.png", s.image)
        for k, m in enumerate(s.masks):
            write_png(root / layout.mask_dir / f"{s.id}_{k}.png", m)
        if layout.depth_dir and s.depth is not None:
            write_pgm16(root / layout.depth_dir / f"{s.id}.pgm", np.round(np.clip(s.depth, 0, 1) * 65535))


def filter_polyp_frames(items):
    """Keep samples (or manifest records) whose union mask has a positive pixel."""
    if isinstance(items, DatasetManifest):
        kept = [r for r in items.records if any(read_mask(p).any() for p in r.masks)]
        return DatasetManifest(items.split, kept, list(items.skipped))
    return [s for s in items if s.union.any()]


# ---------------------------------------------------------------- transforms

def _bilinear(a, out_h, out_w):
    """Bilinear resize of the last two axes with half-pixel centres and edge clamping."""
    h, w = a.shape[-2:]

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.minimum(np.floor(src).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis(h, out_h)
    c0, c1, fc = axis(w, out_w)
    rows = a[..., r0, :] * (1 - fr)[:, None] + a[..., r1, :] * fr[:, None]
    return rows[..., c0] * (1 - fc) + rows[..., c1] * fc


def _nearest(a, out_h, out_w):
    h, w = a.shape[-2:]
    r = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    c = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return a[..., r[:, None], c[None, :]]


def resize_sample(sample, size=500):
    """Resize to ``size`` x ``size``: bilinear for image and depth, nearest for masks."""
    out_h, out_w = (size, size) if np.isscalar(size) else size
    if sample.shape == (out_h, out_w):
        return sample.replace(sample.image.copy(), [m.copy() for m in sample.masks],
                              None if sample.depth is None else sample.depth.copy())
    depth = None if sample.depth is None else _bilinear(sample.depth, out_h, out_w)
    return sample.replace(_bilinear(sample.image, out_h, out_w),
                          [_nearest(m, out_h, out_w) for m in sample.masks], depth)


def _apply(sample, fn):
    depth = None if sample.depth is None else fn(sample.depth)
    return sample.replace(fn(sample.image), [fn(m) for m in sample.masks], depth)


def flip(sample, axis=-1):
    return _apply(sample, lambda a: np.ascontiguousarray(np.flip(a, axis=axis)))


def random_flip(sample, rng, vertical=False):
    """Horizontal flip with probability 0.5 (and an independent vertical one if enabled)."""
    if rng.random() < 0.5:
        sample = flip(sample, -1)
    if vertical and rng.random() < 0.5:
        sample = flip(sample, -2)
    return sample


def crop(sample, top, left, size):
    return _apply(sample, lambda a: a[..., top:top + size, left:left + size].copy())


def sample_patch(sample, size=224, rng=None):
    """Crop a ``size`` x ``size`` patch at a uniformly random top-left corner."""
    h, w = sample.shape
    if h < size or w < size:
        raise ValidationError(f"{sample.id}: {h}x{w} is smaller than the {size}x{size} patch")
    rng = rng if rng is not None else np.random.default_rng()
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return crop(sample, top, left, size)


def assemble_batch(samples, with_depth=False):
    """Stack samples into an (N, 3 or 4, H, W) input and (N, H, W) integer labels."""
    if not samples:
        raise ValidationError("cannot assemble an empty batch")
    shapes = {s.shape for s in samples}
    if len(shapes) != 1:
        raise ValidationError(f"batch mixes spatial sizes {sorted(shapes)}")
    images = []
    for s in samples:
        if with_depth:
            if s.depth is None:
                raise ValidationError(f"sample {s.id!r} has no depth channel")
            images.append(np.concatenate([s.image, s.depth[None]], axis=0))
        else:
            images.append(s.image)
    labels = np.stack([s.union for s in samples]).astype(np.int64)
    return np.stack(images), labels
