"""Synthetic endoscopy-like scenes: smooth tissue backgrounds with elliptical blobs.

Every scene carries a depth map in which polyps protrude toward the camera.
In ``ambiguous`` mode each scene also contains decoy blobs drawn from the
same colour/size distribution as the polyps but lying flat in depth, so only
the depth channel tells them apart.
"""
import numpy as np

from .data import Sample
from .sfs import depth_to_channel


def smooth_field(rng, size, cells=4):
    """Low-frequency random field in [0, 1] by bilinear upsampling of a coarse random grid."""
    coarse = rng.random((cells + 1, cells + 1))
    t = np.linspace(0, cells, size)
    i = np.minimum(t.astype(int), cells - 1)
    f = t - i
    rows = coarse[i] * (1 - f)[:, None] + coarse[i + 1] * f[:, None]
    return rows[:, i] * (1 - f)[None, :] + rows[:, i + 1] * f[None, :]


def _ellipse(size, cy, cx, ry, rx, angle):
    r, c = np.mgrid[0:size, 0:size].astype(float)
    dy, dx = r - cy, c - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = (ca * dx + sa * dy) / rx
    v = (-sa * dx + ca * dy) / ry
    return u * u + v * v


def _place(rng, size, radius_range, taken):
    for _ in range(200):
        ry, rx = rng.uniform(*radius_range, size=2)
        cy, cx = rng.uniform(max(ry, rx) + 1, size - max(ry, rx) - 1, size=2)
        if all(np.hypot(cy - y, cx - x) > max(ry, rx) + r + 2 for y, x, r in taken):
            taken.append((cy, cx, max(ry, rx)))
            return cy, cx, ry, rx, rng.uniform(0, np.pi)
    return None


def make_scene(rng, size=64, n_polyps=1, n_decoys=0, radius_range=(8.0, 14.0), sample_id="scene"):
    tint = np.array([0.75, 0.45, 0.40]) * rng.uniform(0.8, 1.1)
    shade = 0.55 + 0.35 * smooth_field(rng, size)
    image = shade[None] * tint[:, None, None]
    image = image + 0.03 * rng.normal(size=image.shape)

    depth = 3.0 + 1.0 * smooth_field(rng, size, cells=2)
    masks = []
    taken = []
    blobs = [(True, b) for b in range(n_polyps)] + [(False, b) for b in range(n_decoys)]
    order = rng.permutation(len(blobs))
    for k in order:
        is_polyp, _ = blobs[k]
        placed = _place(rng, size, radius_range, taken)
        if placed is None:
            continue
        cy, cx, ry, rx, ang = placed
        q = _ellipse(size, cy, cx, ry, rx, ang)
        inside = q <= 1.0
        dome = np.sqrt(np.clip(1.0 - q, 0.0, None))
        blob_tint = tint * rng.uniform(1.15, 1.3)
        image = np.where(inside[None], (0.55 + 0.35 * dome)[None] * blob_tint[:, None, None], image)
        if is_polyp:
            depth = depth - 0.8 * dome
            masks.append(inside.astype(np.uint8))
    image = np.clip(image + 0.02 * rng.normal(size=image.shape), 0.0, 1.0)
    return Sample(image, masks, depth_to_channel(np.log(depth)), sample_id)


def make_blob_dataset(n=20, size=64, seed=0, ambiguous=False, max_polyps=2):
    """``n`` scenes; polyps per scene uniform in [1, max_polyps], two decoys each when ambiguous."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        n_polyps = int(rng.integers(1, max_polyps + 1))
        samples.append(make_scene(rng, size, n_polyps, 2 if ambiguous else 0, sample_id=f"synth{i:04d}"))
    return samples
