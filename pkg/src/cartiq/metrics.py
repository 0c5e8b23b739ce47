"""Overlap and agreement statistics."""

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .errors import ConstantColumn, EmptyTruth, ZeroMeanPair
from .volume import check_grid_compatibility

LOA_Z = 1.96


def _bool(mask):
    return np.asarray(getattr(mask, "values", mask), dtype=bool)


def _overlap_counts(a, b):
    check_grid_compatibility(a, b)
    va, vb = _bool(a), _bool(b)
    inter = int(np.count_nonzero(va & vb))
    return inter, int(np.count_nonzero(va)), int(np.count_nonzero(vb))


def dice(a, b):
    """Volumetric Dice, 2|A∩B| / (|A| + |B|); 1.0 when both masks are empty."""
    inter, na, nb = _overlap_counts(a, b)
    if na + nb == 0:
        return 1.0
    return 2.0 * inter / (na + nb)


def jaccard(a, b):
    """Volumetric Jaccard index |A∩B| / |A∪B|; 1.0 when both masks are empty."""
    inter, na, nb = _overlap_counts(a, b)
    union = na + nb - inter
    if union == 0:
        return 1.0
    return inter / union


def jaccard_from_dice(d):
    return d / (2.0 - d)


def soft_dice(pm, truth, variant="symmetric"):
    """Differentiable Dice between probabilities and a binary truth mask.

    ``variant="symmetric"`` is the usual ``2 Σ p·y / (Σ p + Σ y)``.
    ``variant="truth_only"`` is ``2 Σ_{truth} p / (Σ_{truth} p + |truth|)``, which
    ignores probability mass outside the truth mask.
    """
    check_grid_compatibility(pm, truth)
    p = np.asarray(getattr(pm, "values", pm), dtype=np.float64)
    y = _bool(truth)
    inside = float(p[y].sum())
    if variant == "truth_only":
        n_truth = int(y.sum())
        if n_truth == 0:
            raise EmptyTruth("truth-only soft Dice is undefined for an empty truth mask")
        return 2.0 * inside / (inside + n_truth)
    if variant == "symmetric":
        denom = float(p.sum()) + float(y.sum())
        return 1.0 if denom == 0 else 2.0 * inside / denom
    raise ValueError(f"unknown soft Dice variant {variant!r}")


def _pairs(pairs):
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("pairs must be an (n, 2) array")
    if arr.shape[0] < 2:
        raise ValueError("need at least two pairs")
    if not np.all(np.isfinite(arr)):
        raise ValueError("pairs must be finite")
    return arr[:, 0], arr[:, 1]


def _corr(x, y):
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ConstantColumn("correlation is undefined for a constant column")
    dx = x - x.mean()
    dy = y - y.mean()
    r = float(np.dot(dx, dy) / math.sqrt(float(np.dot(dx, dx)) * float(np.dot(dy, dy))))
    return max(-1.0, min(1.0, r))


def pearson(pairs):
    x, y = _pairs(pairs)
    return _corr(x, y)


def spearman(pairs):
    """Pearson correlation of average-tie ranks."""
    x, y = _pairs(pairs)
    return _corr(stats.rankdata(x, method="average"), stats.rankdata(y, method="average"))


@dataclass(frozen=True)
class AgreementSummary:
    n: int
    spearman_rho: float
    pearson_r: float
    mae: float
    mae_sd: float
    bias: float
    sd_diff: float
    loa_lo: float
    loa_hi: float
    rms_cv: float
    bias_p_value: float

    def as_dict(self):
        return asdict(self)


def rms_cv(pairs):
    """Root-mean-square coefficient of variation in percent.

    Each pair's CV is its two-sample SD, ``|a - b| / sqrt(2)``, over its mean.
    """
    a, b = _pairs(pairs)
    mean = (a + b) / 2.0
    if np.any(mean == 0):
        raise ZeroMeanPair("coefficient of variation undefined where a + b == 0")
    cv = (np.abs(a - b) / math.sqrt(2.0)) / mean
    return 100.0 * math.sqrt(float(np.mean(cv * cv)))


def agreement_summary(pairs):
    """Bland-Altman style summary of ``a - b`` plus correlations and RMS-CV.

    Correlations are NaN when a column is constant. The bias p-value comes
    from a two-sided one-sample t-test of the differences against zero; with
    zero spread it is 1.0 for zero bias and 0.0 otherwise.
    """
    a, b = _pairs(pairs)
    d = a - b
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    absd = np.abs(d)
    if sd > 0:
        p_value = float(stats.ttest_1samp(d, 0.0).pvalue)
    else:
        p_value = 1.0 if bias == 0 else 0.0
    try:
        rho = spearman(np.column_stack([a, b]))
        r = pearson(np.column_stack([a, b]))
    except ConstantColumn:
        rho = r = float("nan")
    return AgreementSummary(
        n=int(d.size),
        spearman_rho=rho,
        pearson_r=r,
        mae=float(absd.mean()),
        mae_sd=float(absd.std(ddof=1)),
        bias=bias,
        sd_diff=sd,
        loa_lo=bias - LOA_Z * sd,
        loa_hi=bias + LOA_Z * sd,
        rms_cv=rms_cv(np.column_stack([a, b])),
        bias_p_value=p_value,
    )
