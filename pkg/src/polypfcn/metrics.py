"""Pixel segmentation metrics and blob-level detection metrics."""
from dataclasses import dataclass, field
import numpy as np
from scipy import ndimage

from .errors import ValidationError

CONVENTIONS = (
    "rates with an empty denominator are undefined: skipped (and counted) in macro averages; "
    "in micro averages reported as 1 when TP=FP=FN=0, otherwise undefined"
)

EIGHT = np.ones((3, 3), dtype=int)


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def _rate(num, den):
    return num / den if den > 0 else None


def rates(counts):
    """(precision, recall, IU) per the usual formulas; None where the denominator is zero."""
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    return _rate(tp, tp + fp), _rate(tp, tp + fn), _rate(tp, tp + fp + fn)


def argmax_segmentation(scores):
    """Binary mask from a (1, 2, H, W) or (2, H, W) score map; ties go to background."""
    scores = np.asarray(scores)
    if scores.ndim == 4:
        if scores.shape[0] != 1:
            raise ValidationError("argmax_segmentation takes a single image")
        scores = scores[0]
    if scores.shape[0] != 2:
        raise ValidationError(f"expected 2 class channels, got {scores.shape[0]}")
    return (scores[1] > scores[0]).astype(np.uint8)


def pixel_metrics(pred, gt):
    """Returns (precision, recall, IU, ConfusionCounts) over pixels."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValidationError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    counts = ConfusionCounts(int(np.sum(pred & gt)), int(np.sum(pred & ~gt)), int(np.sum(~pred & gt)))
    return (*rates(counts), counts)


@dataclass
class Blob:
    pixels: np.ndarray  # (k, 2) row, col
    centroid: tuple

    @property
    def size(self):
        return len(self.pixels)


def connected_components(mask):
    """8-connected blobs, ordered by their first pixel in row-major scan order."""
    labels, n = ndimage.label(np.asarray(mask).astype(bool), structure=EIGHT)
    blobs = []
    for k in range(1, n + 1):
        pix = np.argwhere(labels == k)
        blobs.append(Blob(pix, tuple(pix.mean(axis=0))))
    return blobs


def split_instances(mask):
    """Per-blob binary masks of a union mask."""
    shape = np.shape(mask)
    out = []
    for blob in connected_components(mask):
        m = np.zeros(shape, dtype=np.uint8)
        m[blob.pixels[:, 0], blob.pixels[:, 1]] = 1
        out.append(m)
    return out


def _owner(blob, polyps, rule, min_overlap):
    """Index of the polyp a blob falls within, or None."""
    if rule == "centroid":
        # half-way centroids round toward larger indices
        r, c = (int(np.floor(v + 0.5)) for v in blob.centroid)
        for k, m in enumerate(polyps):
            if m[r, c]:
                return k
        return None
    if rule == "overlap":
        best, best_k = 0.0, None
        for k, m in enumerate(polyps):
            frac = m[blob.pixels[:, 0], blob.pixels[:, 1]].mean()
            if frac > best:
                best, best_k = frac, k
        return best_k if best >= min_overlap else None
    raise ValidationError(f"unknown detection rule {rule!r}")


def detection_metrics(pred, polyps, rule="centroid", min_overlap=0.5):
    """Detection precision/recall from predicted blobs against per-polyp masks.

    A blob falling within a polyp (its rounded centroid lies inside the mask,
    or with ``rule="overlap"`` at least ``min_overlap`` of its pixels do)
    detects that polyp; each polyp yields at most one TP however many blobs
    hit it.  Blobs falling within no polyp are FPs, undetected polyps FNs.
    Returns (precision, recall, ConfusionCounts).
    """
    pred = np.asarray(pred).astype(bool)
    polyps = [np.asarray(m).astype(bool) for m in polyps]
    for m in polyps:
        if m.shape != pred.shape:
            raise ValidationError(f"polyp mask shape {m.shape} differs from prediction {pred.shape}")
    if polyps and np.any(np.sum(polyps, axis=0) > 1):
        raise ValidationError("ground-truth polyp masks overlap")
    detected = set()
    fp = 0
    for blob in connected_components(pred):
        k = _owner(blob, polyps, rule, min_overlap)
        if k is None:
            fp += 1
        else:
            detected.add(k)
    counts = ConfusionCounts(len(detected), fp, len(polyps) - len(detected))
    precision, recall, _ = rates(counts)
    return precision, recall, counts


@dataclass
class ImageResult:
    id: str
    pixel: ConfusionCounts
    detection: ConfusionCounts

    @property
    def pixel_rates(self):
        return rates(self.pixel)

    @property
    def detection_rates(self):
        return rates(self.detection)[:2]


def evaluate_image(sample_id, pred, gt_union, polyps, rule="centroid"):
    *_, pc = pixel_metrics(pred, gt_union)
    *_, dc = detection_metrics(pred, polyps, rule)
    return ImageResult(sample_id, pc, dc)


def _mean_defined(values):
    defined = [v for v in values if v is not None]
    return (float(np.mean(defined)) if defined else None), len(values) - len(defined)


def _micro(counts):
    p, r, iu = rates(counts)
    if counts.tp == counts.fp == counts.fn == 0:
        return 1.0, 1.0, 1.0
    return p, r, iu


@dataclass
class MetricsReport:
    images: list
    macro: dict = field(default_factory=dict)
    micro: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)
    conventions: str = CONVENTIONS

    def summary(self, title="Evaluation"):
        """Summary block: segmentation prec/rec/IU and detection prec/rec in percent."""
        def pct(v):
            return "   n/a" if v is None else f"{100 * v:6.2f}"

        lines = [
            f"# {title}",
            f"# {self.conventions}",
            f"# images: {len(self.images)}",
            "            |     Segmentation     |   Detection",
            "            |   Prec    Rec     IU |   Prec    Rec",
        ]
        for mode, d in (("macro", self.macro), ("micro", self.micro)):
            lines.append(
                f"{mode:<11} | {pct(d['seg_precision'])} {pct(d['seg_recall'])} {pct(d['seg_iu'])} |"
                f" {pct(d['det_precision'])} {pct(d['det_recall'])}"
            )
        pc, dc = self.micro["pixel_counts"], self.micro["detection_counts"]
        lines.append(f"pixel counts TP={pc.tp} FP={pc.fp} FN={pc.fn}; detection counts TP={dc.tp} FP={dc.fp} FN={dc.fn}")
        if any(self.skipped.values()):
            lines.append("macro skips (undefined rates): " + ", ".join(f"{k}={v}" for k, v in self.skipped.items()))
        return "\n".join(lines)

    def rows(self):
        """Per-image CSV rows."""
        header = ["id", "TP", "FP", "FN", "prec", "rec", "IU", "det_TP", "det_FP", "det_FN", "det_prec", "det_rec"]
        out = [header]
        for r in self.images:
            p, rc, iu = r.pixel_rates
            dp, dr = r.detection_rates
            fmt = lambda v: "" if v is None else f"{v:.6f}"
            out.append([r.id, r.pixel.tp, r.pixel.fp, r.pixel.fn, fmt(p), fmt(rc), fmt(iu),
                        r.detection.tp, r.detection.fp, r.detection.fn, fmt(dp), fmt(dr)])
        return out


def aggregate_report(results):
    """Macro (mean of per-image rates, undefined ones skipped) and micro (summed counts) averages."""
    if not results:
        raise ValidationError("aggregate_report needs at least one image")
    macro, skipped = {}, {}
    seg = [r.pixel_rates for r in results]
    det = [r.detection_rates for r in results]
    for key, vals in (("seg_precision", [s[0] for s in seg]), ("seg_recall", [s[1] for s in seg]),
                      ("seg_iu", [s[2] for s in seg]), ("det_precision", [d[0] for d in det]),
                      ("det_recall", [d[1] for d in det])):
        macro[key], skipped[key] = _mean_defined(vals)
    pixel = sum((r.pixel for r in results), ConfusionCounts())
    detection = sum((r.detection for r in results), ConfusionCounts())
    sp, sr, siu = _micro(pixel)
    dp, dr, _ = _micro(detection)
    micro = {"seg_precision": sp, "seg_recall": sr, "seg_iu": siu, "det_precision": dp, "det_recall": dr,
             "pixel_counts": pixel, "detection_counts": detection}
    return MetricsReport(list(results), macro, micro, skipped)
