"""Background subtraction, gMDL global thresholding and baseline binarizers."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .background import BackgroundModel, HuberConfig, estimate_background
from .errors import DimensionError
from .image import BinaryImage, GrayImage, denormalize

log = logging.getLogger(__name__)

EXACT_CANDIDATE_CAP = 4096
QUANTILE_CANDIDATES = 1024


@dataclass(frozen=True)
class SubtractedImage:
    values: np.ndarray

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class GmdlEvaluation:
    tau: float
    rss: float
    fss: float
    p: int
    gmdl: float
    branch: str  # "first" or "null"


@dataclass(frozen=True)
class BinarizationResult:
    mask: BinaryImage
    tau: float
    background: np.ndarray
    subtracted: SubtractedImage
    gmdl_trace: tuple
    model: Optional[BackgroundModel] = None

    @property
    def threshold_surface(self):
        """Per-pixel threshold ``L + tau`` applied to the input image."""
        return self.background + self.tau


class DegenerateThresholdWarning(UserWarning):
    pass


def _values(x):
    if isinstance(x, SubtractedImage):
        return x.values
    return np.asarray(getattr(x, "pixels", x), dtype=float)


def subtract_background(Y, L):
    """``Y - L`` with no clamping.  `L` is a `BackgroundModel` or an array."""
    y = _values(Y)
    surface = L.surface() if isinstance(L, BackgroundModel) else np.asarray(L, dtype=float)
    if y.shape != surface.shape:
        raise DimensionError(f"image {y.shape} and background {surface.shape} differ in shape")
    return SubtractedImage(y - surface)


def _gmdl_scores(N, p, rss, fss):
    """Vectorized gMDL over candidates with retained counts `p` and residual sums `rss`.

    First form when ``rss / (N - p) <= fss / N``, null form otherwise; p = 0
    uses the null form and p = N or rss = 0 scores +inf.
    """
    p = np.asarray(p, dtype=float)
    rss = np.asarray(rss, dtype=float)
    null = N / 2.0 * np.log(fss / N) + 0.5 * np.log(N) if fss > 0 else -np.inf
    scores = np.full(p.shape, null)
    inf = (p >= N) | (rss <= 0)
    ok = (p > 0) & ~inf
    with np.errstate(divide="ignore", invalid="ignore"):
        first = ok & (rss / (N - p) <= fss / N)
        pf, rf = p[first], rss[first]
        scores[first] = (N / 2.0 * np.log(rf / (N - pf))
                         + pf / 2.0 * np.log((N - pf) * fss / (pf * rf))
                         + np.log(N))
    scores[inf] = np.inf
    return scores, first


def gmdl_score(tau, Yt):
    """gMDL of keeping every pixel with ``Yt <= tau`` as foreground."""
    y = _values(Yt).ravel()
    N = y.size
    if N < 2:
        raise DimensionError("gMDL needs at least two pixels")
    sq = y * y
    keep = y <= tau
    p = int(np.count_nonzero(keep))
    rss = float(np.sum(sq[~keep]))
    fss = float(np.sum(sq))
    score, first = _gmdl_scores(N, np.array([p]), np.array([rss]), fss)
    return GmdlEvaluation(float(tau), rss, fss, p, float(score[0]), "first" if first[0] else "null")


def threshold_candidates(sorted_values, cap=EXACT_CANDIDATE_CAP, n_quantiles=QUANTILE_CANDIDATES):
    """All unique values if there are at most `cap`, else quantile-spaced data values."""
    uniq = np.unique(sorted_values)
    if uniq.size <= cap:
        return uniq
    q = np.linspace(0.0, 1.0, n_quantiles)
    return np.unique(np.quantile(sorted_values, q, method="inverted_cdf"))


def select_threshold(Yt, cap=EXACT_CANDIDATE_CAP, n_quantiles=QUANTILE_CANDIDATES):
    """Pick the candidate tau with the lowest gMDL; ties go to the smaller tau.

    Returns
    -------
    tau : float
    trace : tuple of GmdlEvaluation
        One entry per candidate, in increasing tau.
    """
    y = np.sort(_values(Yt).ravel())
    N = y.size
    if N < 2:
        raise DimensionError("gMDL needs at least two pixels")
    sq = y * y
    # suffix sums avoid cancellation in FSS - prefix when RSS is small
    suffix = np.concatenate([np.cumsum(sq[::-1])[::-1], [0.0]])
    fss = float(suffix[0])
    cands = threshold_candidates(y, cap, n_quantiles)
    p = np.searchsorted(y, cands, side="right")
    rss = suffix[p]
    scores, first = _gmdl_scores(N, p, rss, fss)
    best = int(np.argmin(scores))
    trace = tuple(GmdlEvaluation(float(t), float(r), fss, int(k), float(s), "first" if f else "null")
                  for t, r, k, s, f in zip(cands, rss, p, scores, first))
    return float(cands[best]), trace


def binarize(Y, cfg: HuberConfig = HuberConfig(), cap=EXACT_CANDIDATE_CAP, model=None):
    """Full pipeline: robust background, subtraction, gMDL threshold, mask.

    `Y` must be unit-scale.  A precomputed `model` skips the background fit.
    """
    if isinstance(Y, GrayImage) and Y.scale != "unit":
        raise ValueError("binarize expects a normalized image; call normalize() first")
    if model is None:
        model = estimate_background(Y, cfg)
    sub = subtract_background(Y, model)
    tau, trace = select_threshold(sub, cap)
    mask = BinaryImage(sub.values <= tau)
    return BinarizationResult(mask, tau, model.surface(), sub, trace, model)


# -- baselines ---------------------------------------------------------------


def otsu(Y, bins=256):
    """Global Otsu threshold over a `bins`-bin histogram spanning the data range.

    Foreground is ``pixel <= tau`` with tau the upper edge of the last
    dark-class bin.  A constant image has
    no threshold: a `DegenerateThresholdWarning` is issued and the mask is
    empty (tau = -inf).
    """
    y = _values(Y)
    lo, hi = float(y.min()), float(y.max())
    if hi <= lo:
        warnings.warn("constant image: Otsu threshold undefined", DegenerateThresholdWarning, stacklevel=2)
        return -np.inf, BinaryImage(np.zeros(y.shape, dtype=bool))
    hist, edges = np.histogram(y, bins=bins, range=(lo, hi))
    prob = hist / hist.sum()
    centers = 0.5 * (edges[:-1] + edges[1:])
    omega = np.cumsum(prob)
    mu = np.cumsum(prob * centers)
    mu_total = mu[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_total * omega - mu) ** 2 / (omega * (1.0 - omega))
    between = np.nan_to_num(between[:-1], nan=-1.0, posinf=-1.0)
    k = int(np.argmax(between))
    tau = float(edges[k + 1])
    return tau, BinaryImage(y <= tau)


def _check_window(w):
    if int(w) != w or w < 3 or w % 2 == 0:
        raise ValueError(f"window must be an odd integer >= 3, got {w}")
    return int(w)


def _window_sums(x, w):
    """Sums of `x` and `x**2` over w x w windows with edge-replicated borders."""
    r = w // 2
    padded = np.pad(x, r, mode="edge")
    out = []
    for a in (padded, padded * padded):
        sat = np.zeros((a.shape[0] + 1, a.shape[1] + 1), dtype=a.dtype)
        sat[1:, 1:] = a.cumsum(0).cumsum(1)
        out.append(sat[w:, w:] - sat[:-w, w:] - sat[w:, :-w] + sat[:-w, :-w])
    return out


def local_stats(Y, w):
    """Windowed mean and (population) standard deviation via integral images.

    Integer-valued images are summed in int64, which keeps the statistics
    exact; others are shifted by their minimum first.
    """
    w = _check_window(w)
    y = _values(Y)
    n = w * w
    if np.all(y == np.rint(y)) and np.abs(y).max() < 2 ** 20:
        s1, s2 = _window_sums(y.astype(np.int64), w)
        mean = s1 / n
        var = (n * s2 - s1 * s1) / (n * n)
    else:
        ref = float(y.min())
        s1, s2 = _window_sums(y - ref, w)
        mean_shift = s1 / n
        var = np.maximum(s2 / n - mean_shift ** 2, 0.0)
        mean = mean_shift + ref
    return mean, np.sqrt(var)


def _raw_pixels(Y):
    if isinstance(Y, GrayImage):
        return denormalize(Y).pixels
    return np.asarray(Y, dtype=float)


def niblack_threshold(Y, w=25, k=-0.2):
    """Per-pixel Niblack threshold ``M + k S`` on the raw 0-255 scale."""
    mean, std = local_stats(_raw_pixels(Y), w)
    return mean + k * std


def niblack(Y, w=25, k=-0.2):
    """Niblack binarization; foreground is ``pixel <= M + k S``."""
    return BinaryImage(_raw_pixels(Y) <= niblack_threshold(Y, w, k))


def sauvola_threshold(Y, w=25, k=0.5, r=128.0, variant="quoted"):
    """Per-pixel Sauvola-style threshold on the raw 0-255 scale.

    ``variant="quoted"`` uses ``M (1 + k (1 - S / r))``, which raises the
    threshold above the mean in flat regions (a flat field comes out all
    foreground).  ``variant="original"`` uses ``M (1 + k (S / r - 1))``,
    which lowers it.
    """
    if variant not in ("quoted", "original"):
        raise ValueError(f"unknown Sauvola variant {variant!r}")
    mean, std = local_stats(_raw_pixels(Y), w)
    corr = 1.0 - std / r
    if variant == "original":
        corr = -corr
    return mean * (1.0 + k * corr)


def sauvola(Y, w=25, k=0.5, r=128.0, variant="quoted"):
    """Sauvola binarization; foreground is ``pixel <= threshold``."""
    return BinaryImage(_raw_pixels(Y) <= sauvola_threshold(Y, w, k, r, variant))
