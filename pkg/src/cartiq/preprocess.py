"""Slice intensity normalisation and the training-time sampling rules.

Percentiles use linear interpolation between order statistics
(``numpy.percentile(..., method="linear")``).
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateIntensity, PolicyEchoOutOfRange


@dataclass(frozen=True)
class NormalizationParams:
    trim_lo_pct: float = 3.0
    trim_hi_pct: float = 97.0
    anchors_pct: tuple = (25.0, 50.0, 75.0)
    targets: tuple = (-1.0, 0.0, 1.0)

    def __post_init__(self):
        lo_a, mid_a, hi_a = self.anchors_pct
        if not (0 <= self.trim_lo_pct < lo_a < mid_a < hi_a < self.trim_hi_pct <= 100):
            raise ValueError("need trim_lo < 25th < 50th < 75th < trim_hi percentiles")
        t = self.targets
        if not (t[0] < t[1] < t[2]):
            raise ValueError("targets must be increasing")


@dataclass(frozen=True)
class EchoSamplingPolicy:
    """Probability of presenting each echo (0-based index) during training."""

    probabilities: tuple = (0.2, 0.6, 0.2)

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=float)
        if p.ndim != 1 or p.size == 0 or np.any(p < 0) or not np.isclose(p.sum(), 1.0, atol=1e-12):
            raise ValueError(f"probabilities must be nonnegative and sum to 1, got {self.probabilities}")
        object.__setattr__(self, "probabilities", tuple(float(x) for x in p))


def _bracket(sorted_vals, pct):
    n = sorted_vals.size
    h = (n - 1) * pct / 100.0
    k = int(np.floor(h))
    k1 = min(k + 1, n - 1)
    w = h - k
    q = sorted_vals[k] + w * (sorted_vals[k1] - sorted_vals[k])
    return k, k1, q


def normalize_slice(image, params=None):
    """Winsorise a 2D slice and map its quartiles onto (-1, 0, +1).

    Values are first clamped to the [3rd, 97th] percentile range, using the
    nearest order statistic on the inner side of each percentile. The
    clamped image is then passed through a monotone piecewise-linear map
    with slope ``1 / (q50 - q25)`` below the median and ``1 / (q75 - q50)``
    above it. Knots sit on the two order statistics bracketing each anchor
    percentile, with the map linear across each bracket, so the output's
    own 25th/50th/75th percentiles land exactly on -1, 0 and +1. Symmetric
    quartiles reduce the map to the plain affine ``(v - q50) / (q75 - q50)``.

    Raises
    ------
    DegenerateIntensity
        If two anchor percentiles coincide, leaving a scale undefined.
    """
    params = params or NormalizationParams()
    img = np.asarray(image, dtype=np.float64)
    flat = img.ravel()
    if flat.size < 2:
        raise DegenerateIntensity("need at least two voxels")
    ordered = np.sort(flat)
    # clamp at the order statistics just inside the trim percentiles, so the
    # plateaus they create are where a second pass puts its own percentiles
    lo = ordered[int(np.ceil((flat.size - 1) * params.trim_lo_pct / 100.0))]
    hi = ordered[int(np.floor((flat.size - 1) * params.trim_hi_pct / 100.0))]
    clamped = np.clip(flat, lo, hi)
    s = np.sort(clamped)

    brackets = [_bracket(s, p) for p in params.anchors_pct]
    (k25, k25b, q25), (k50, k50b, q50), (k75, k75b, q75) = brackets
    if not (q25 < q50 < q75):
        raise DegenerateIntensity(
            f"anchor percentiles not distinct: q25={q25}, q50={q50}, q75={q75}")
    t25, t50, t75 = params.targets
    slope_lo = (t50 - t25) / (q50 - q25)
    slope_hi = (t75 - t50) / (q75 - q50)
    slope_mid = min(slope_lo, slope_hi)

    xs, ys = [], []
    for (k, kb, q), t, slope in zip(brackets, params.targets, (slope_lo, slope_mid, slope_hi)):
        xs += [s[k], s[kb]]
        ys += [t - slope * (q - s[k]), t + slope * (s[kb] - q)]
    xs = [s[0]] + xs + [s[-1]]
    ys = [ys[0] - slope_lo * (xs[1] - s[0])] + ys + [ys[-1] + slope_hi * (s[-1] - xs[-2])]
    xs, ys = np.asarray(xs), np.asarray(ys)
    # identical knots (ties) carry identical targets; drop repeats for np.interp
    keep = np.concatenate([[True], np.diff(xs) > 0])
    out = np.interp(clamped, xs[keep], ys[keep])
    return out.reshape(img.shape)


def sample_training_echo(policy=None, rng=None, n_echoes=None):
    """Draw the echo index (0-based) shown to the network for one slice."""
    policy = policy or EchoSamplingPolicy()
    rng = rng if rng is not None else np.random.default_rng()
    p = np.asarray(policy.probabilities)
    if n_echoes is not None:
        used = np.flatnonzero(p > 0)
        if used.size and used.max() >= n_echoes:
            raise PolicyEchoOutOfRange(
                f"policy uses echo index {int(used.max())} but the volume has {n_echoes} echoes")
    return int(rng.choice(p.size, p=p))


def drop_empty_slices(mask, drop_fraction, rng=None):
    """Indices of slices kept for one training epoch.

    Slices with any cartilage are always kept; each cartilage-free slice is
    dropped independently with probability ``drop_fraction``.
    """
    if not 0 <= drop_fraction <= 1:
        raise ValueError(f"drop_fraction must lie in [0, 1], got {drop_fraction}")
    rng = rng if rng is not None else np.random.default_rng()
    values = getattr(mask, "values", mask)
    has_cartilage = np.asarray(values, bool).reshape(-1, values.shape[-1]).any(axis=0)
    keep_draw = rng.random(has_cartilage.size) >= drop_fraction
    return [int(k) for k in np.flatnonzero(has_cartilage | keep_draw)]
