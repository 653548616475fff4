"""Binarization quality measures against a ground-truth mask.

Masks use 1 for foreground.  Distances are Euclidean, measured to the
nearest ground-truth contour pixel, where a contour pixel is a foreground
pixel with at least one 4-connected background neighbour (the area outside
the image does not count as background).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionError, UndefinedMetricError

PSNR_CAP = 99.0
DRD_BLOCK = 8


def _drd_weights():
    ii, jj = np.mgrid[-2:3, -2:3]
    dist = np.hypot(ii, jj)
    w = np.zeros((5, 5))
    w[dist > 0] = 1.0 / dist[dist > 0]
    return w / w.sum()


DRD_WEIGHTS = _drd_weights()


@dataclass(frozen=True)
class MetricsReport:
    fm: float
    pfm: float
    psnr: float
    drd: float
    mpm: float
    tp: int
    fp: int
    fn: int
    tn: int

    def as_dict(self):
        return asdict(self)


def _pair(pred, gt):
    p = np.asarray(getattr(pred, "mask", pred)).astype(bool)
    g = np.asarray(getattr(gt, "mask", gt)).astype(bool)
    if p.shape != g.shape:
        raise DimensionError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    return p, g


def confusion(pred, gt):
    p, g = _pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return tp, fp, fn, p.size - tp - fp - fn


def _harmonic(rc, pr):
    return 0.0 if rc + pr == 0 else 2.0 * rc * pr / (rc + pr)


def f_measure(pred, gt):
    """Return ``(fm, recall, precision)``."""
    tp, fp, fn, _ = confusion(pred, gt)
    if tp + fn == 0:
        raise UndefinedMetricError("ground truth has no foreground")
    rc = tp / (tp + fn)
    pr = tp / (tp + fp) if tp + fp else 0.0
    return _harmonic(rc, pr), rc, pr


def psnr(pred, gt):
    """PSNR in dB with peak difference 1; identical masks give `PSNR_CAP`."""
    p, g = _pair(pred, gt)
    mse = np.count_nonzero(p != g) / p.size
    if mse == 0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def contour(gt):
    g = np.asarray(getattr(gt, "mask", gt)).astype(bool)
    interior = ndimage.binary_erosion(g, structure=ndimage.generate_binary_structure(2, 1),
                                      border_value=1)
    return g & ~interior


def contour_distance(gt):
    """Distance of every pixel to the nearest ground-truth contour pixel."""
    edge = contour(gt)
    if not edge.any():
        raise UndefinedMetricError("ground truth has no foreground contour")
    return ndimage.distance_transform_edt(~edge)


def mpm(pred, gt):
    """Misclassification penalty: contour distances of FN and FP over 2D.

    D is the sum of contour distances over every pixel of the image.
    """
    p, g = _pair(pred, gt)
    d = contour_distance(g)
    scale = d.sum()
    if scale == 0:
        # every pixel lies on the contour, so every misclassification costs 0
        return 0.0
    wrong = p != g
    return float(d[wrong].sum() / (2.0 * scale))


def pseudo_f_measure(pred, gt):
    """F-measure with pixels weighted by ``1 + d`` (d = contour distance).

    Disagreements deep inside objects or far out in the background count
    more than ones on the object boundary.
    """
    p, g = _pair(pred, gt)
    if not g.any():
        raise UndefinedMetricError("ground truth has no foreground")
    w = 1.0 + contour_distance(g)
    hit = w[p & g].sum()
    rc = hit / w[g].sum()
    pr = hit / w[p].sum() if p.any() else 0.0
    return float(_harmonic(rc, pr))


def nubn(gt, block=DRD_BLOCK):
    """Number of non-uniform `block` x `block` tiles (edge tiles may be partial)."""
    g = np.asarray(getattr(gt, "mask", gt)).astype(bool)
    count = 0
    for i in range(0, g.shape[0], block):
        for j in range(0, g.shape[1], block):
            tile = g[i:i + block, j:j + block]
            if tile.any() and not tile.all():
                count += 1
    return count


def drd(pred, gt):
    """Distance-reciprocal distortion, normalized by the non-uniform block count.

    Each flipped pixel costs the weighted count of ground-truth pixels in its
    5x5 neighbourhood that disagree with its predicted value; neighbours
    outside the image are skipped.
    """
    p, g = _pair(pred, gt)
    blocks = nubn(g)
    if blocks == 0:
        raise UndefinedMetricError("ground truth is uniform (no non-uniform 8x8 blocks)")
    gf = g.astype(float)
    # weighted count of foreground / background GT neighbours around each pixel
    fg_near = ndimage.correlate(gf, DRD_WEIGHTS, mode="constant", cval=0.0)
    bg_near = ndimage.correlate(1.0 - gf, DRD_WEIGHTS, mode="constant", cval=0.0)
    flipped = p != g
    cost = np.where(p, bg_near, fg_near)
    return float(cost[flipped].sum() / blocks)


def evaluate(pred, gt, strict=True):
    """All five measures plus the confusion counts.

    With ``strict=False`` measures that are undefined for this ground truth
    come back as NaN instead of raising.
    """
    tp, fp, fn, tn = confusion(pred, gt)

    def attempt(fn_):
        try:
            return fn_(pred, gt)
        except UndefinedMetricError:
            if strict:
                raise
            return float("nan")

    fm = attempt(lambda a, b: f_measure(a, b)[0])
    return MetricsReport(fm, attempt(pseudo_f_measure), psnr(pred, gt), attempt(drd), attempt(mpm),
                         tp, fp, fn, tn)
