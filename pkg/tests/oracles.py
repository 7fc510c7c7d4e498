"""Independent reference implementations used only by the tests.

Each one is deliberately written the slow, obvious way (explicit loops, no
shared helpers with the package) so that agreement is meaningful.
"""
import math
from collections import deque

import numpy as np


def loop_conv(x, kernel, bias=None, stride=1, padding=0):
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * kernel[o]) + (0 if bias is None else bias[o])
    return out


def dense_conv_matrix(kernel2d, h, w, stride):
    """Rows: output positions in raster order; columns: input pixels in raster order (no padding)."""
    kh, kw = kernel2d.shape
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    m = np.zeros((ho * wo, h * w))
    for i in range(ho):
        for j in range(wo):
            for a in range(kh):
                for b in range(kw):
                    m[i * wo + j, (i * stride + a) * w + (j * stride + b)] = kernel2d[a, b]
    return m


def tent(size):
    """1-D bilinear upsampling weights: 1 - |i/factor - centre|."""
    factor = (size + 1) // 2
    centre = factor - 1 if size % 2 == 1 else factor - 0.5
    return [1 - abs(i / factor - centre / factor) for i in range(size)]


def count_pixels(pred, gt):
    tp = fp = fn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p and g:
            tp += 1
        elif p and not g:
            fp += 1
        elif g and not p:
            fn += 1
    return tp, fp, fn


def flood_fill(mask):
    """8-connected components by breadth-first search; returns a list of pixel lists."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for r in range(h):
        for c in range(w):
            if mask[r, c] and not seen[r, c]:
                comp, queue = [], deque([(r, c)])
                seen[r, c] = True
                while queue:
                    i, j = queue.popleft()
                    comp.append((i, j))
                    for di in (-1, 0, 1):
                        for dj in (-1, 0, 1):
                            a, b = i + di, j + dj
                            if 0 <= a < h and 0 <= b < w and mask[a, b] and not seen[a, b]:
                                seen[a, b] = True
                                queue.append((a, b))
                comps.append(comp)
    return comps


def detection_by_rules(pred, polyps):
    """Apply the detection rules literally: blob centroid inside a polyp -> hit; one TP per polyp."""
    hits = [0] * len(polyps)
    fp = 0
    for comp in flood_fill(pred.astype(bool)):
        cr = sum(p[0] for p in comp) / len(comp)
        cc = sum(p[1] for p in comp) / len(comp)
        r, c = int(math.floor(cr + 0.5)), int(math.floor(cc + 0.5))
        owner = [k for k, m in enumerate(polyps) if m[r, c]]
        if owner:
            hits[owner[0]] += 1
        else:
            fp += 1
    tp = sum(1 for h in hits if h > 0)
    return tp, fp, len(polyps) - tp


def q_scalar(x, y, f, a, b, c):
    return (x + a) * (x + a) + (y + b) * (y + b) + (f + c) * (f + c)


def j_scalar(x, y, vx, vy, f, a, b, c):
    return ((x + a) * vx + (y + b) * vy + 1.0) / (f + c)
