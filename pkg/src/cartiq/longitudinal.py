"""Two-timepoint comparison of flattened plates.

Translations follow one convention throughout: ``(du, dv)`` means the
follow-up pixel ``[u + du, v + dv]`` corresponds to baseline pixel ``[u, v]``.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import EmptyPlate, NoOverlap, SelectorMismatch, ZeroPlateArea

_TIE = 1e-12


def _shift(arr, du, dv, fill):
    """``out[u + du, v + dv] = arr[u, v]``; vacated entries get ``fill``."""
    out = np.full_like(arr, fill)
    nu, nv = arr.shape[:2]
    src_u = slice(max(0, -du), min(nu, nu - du))
    src_v = slice(max(0, -dv), min(nv, nv - dv))
    dst_u = slice(max(0, du), min(nu, nu + du))
    dst_v = slice(max(0, dv), min(nv, nv + dv))
    if src_u.start < src_u.stop and src_v.start < src_v.stop:
        out[dst_u, dst_v] = arr[src_u, src_v]
    return out


def translate_plate(plate, shift):
    """Move every plate pixel by ``shift``; pixels pushed off the grid are lost."""
    du, dv = (int(s) for s in shift)
    return replace(
        plate,
        t2=_shift(plate.t2, du, dv, np.nan),
        counts=_shift(plate.counts, du, dv, 0.0),
        thickness_mm=_shift(plate.thickness_mm, du, dv, 0.0),
        column_count=_shift(plate.column_count, du, dv, 0),
    )


def _aligned(a, b, du, dv):
    """Views of ``a[u, v]`` and ``b[u + du, v + dv]`` over their common support."""
    nu = min(a.shape[0], b.shape[0] - du) - max(0, -du)
    nv = min(a.shape[1], b.shape[1] - dv) - max(0, -dv)
    if nu <= 0 or nv <= 0:
        return None, None
    ua, va = max(0, -du), max(0, -dv)
    return a[ua:ua + nu, va:va + nv], b[ua + du:ua + du + nu, va + dv:va + dv + nv]


def _ncc(x, y):
    dx = x - x.mean()
    dy = y - y.mean()
    den = np.sqrt(np.dot(dx, dx) * np.dot(dy, dy))
    return float(np.dot(dx, dy) / den) if den > 0 else 0.0


def register_plates(baseline, followup, window=10, min_overlap=0.5):
    """Integer translation of ``followup`` relative to ``baseline``.

    Every shift in the ``±window`` square whose overlap covers at least
    ``min_overlap`` of the smaller plate is scored by normalised
    cross-correlation of the layer-averaged T2 over the overlap. Ties go to
    the smaller ``|du| + |dv|``, then to the lexicographically smaller shift.
    """
    a = baseline.pixel_t2()
    b = followup.pixel_t2()
    occ_a, occ_b = np.isfinite(a), np.isfinite(b)
    if not occ_a.any() or not occ_b.any():
        raise EmptyPlate("registration needs two non-empty plates")
    need = min_overlap * min(occ_a.sum(), occ_b.sum())

    best = None
    for du in range(-window, window + 1):
        for dv in range(-window, window + 1):
            sa, sb = _aligned(a, b, du, dv)
            if sa is None:
                continue
            both = np.isfinite(sa) & np.isfinite(sb)
            n = int(both.sum())
            if n == 0 or n < need:
                continue
            score = _ncc(sa[both], sb[both])
            key = (abs(du) + abs(dv), du, dv)
            if best is None or score > best[0] + _TIE or (abs(score - best[0]) <= _TIE and key < best[1]):
                best = (score, key)
    if best is None:
        raise NoOverlap(f"no shift within ±{window} overlaps {min_overlap:.0%} of the smaller plate")
    return best[1][1], best[1][2]


@dataclass(frozen=True)
class ChangeMap:
    """Follow-up minus baseline on the baseline grid.

    ``delta`` is the per-pixel change (layer-averaged), NaN outside the
    overlap; ``delta_layers`` keeps the per-layer values. ``mean`` and ``sd``
    are the population mean and SD over the ``plate_area`` overlap pixels.
    """

    delta: np.ndarray
    delta_layers: np.ndarray
    translation: tuple
    plate_area: int
    mean: float
    sd: float

    @classmethod
    def from_delta(cls, delta, delta_layers=None, translation=(0, 0)):
        delta = np.asarray(delta, dtype=np.float64)
        if delta_layers is None:
            delta_layers = np.stack([delta, delta], axis=-1)
        vals = delta[np.isfinite(delta)]
        area = int(vals.size)
        mean = float(vals.mean()) if area else float("nan")
        sd = float(vals.std()) if area else float("nan")
        return cls(delta, delta_layers, tuple(translation), area, mean, sd)


def change_map(baseline, followup, translation=(0, 0)):
    du, dv = (int(s) for s in translation)
    moved = translate_plate(followup, (-du, -dv))
    both = (baseline.counts > 0) & (moved.counts > 0)
    layers = np.where(both, moved.t2 - baseline.t2, np.nan)
    n_layers = both.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        delta = np.where(n_layers > 0, np.where(both, layers, 0.0).sum(axis=-1) / n_layers, np.nan)
    return ChangeMap.from_delta(delta, layers, (du, dv))


@dataclass(frozen=True)
class Cluster:
    pixels: tuple
    area_fraction: float
    mean_delta: float

    @property
    def area(self):
        return len(self.pixels)

    def as_dict(self):
        return {"area_pixels": self.area, "area_fraction": self.area_fraction,
                "mean_delta_ms": self.mean_delta, "pixels": [list(p) for p in self.pixels]}


def _structure(connectivity):
    if connectivity == 8:
        return np.ones((3, 3), dtype=bool)
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    raise ValueError("connectivity must be 4 or 8")


def find_focal_clusters(cm, min_area_fraction=0.01, connectivity=8):
    """Connected groups of pixels whose change exceeds mean + 1 SD.

    Both cuts are strict: a pixel must have ``delta > mean + sd`` and a
    cluster must cover more than ``min_area_fraction`` of the plate. With
    zero spread nothing can exceed the threshold. Clusters come back largest
    first, ties ordered by their first pixel.
    """
    if cm.plate_area <= 0:
        raise ZeroPlateArea("change map has no overlapping pixels")
    threshold = cm.mean + cm.sd
    with np.errstate(invalid="ignore"):
        hot = np.isfinite(cm.delta) & (cm.delta > threshold)
    labels, n = ndimage.label(hot, structure=_structure(connectivity))
    clusters = []
    for k in range(1, n + 1):
        us, vs = np.nonzero(labels == k)
        frac = us.size / cm.plate_area
        if frac > min_area_fraction:
            pix = tuple((int(u), int(v)) for u, v in zip(us, vs))
            clusters.append(Cluster(pix, frac, float(cm.delta[us, vs].mean())))
    clusters.sort(key=lambda c: (-c.area, c.pixels[0]))
    return clusters


def lesion_area_percentage(clusters, plate_area):
    if plate_area <= 0:
        raise ZeroPlateArea("plate area must be positive")
    return 100.0 * sum(c.area for c in clusters) / plate_area


def region_change(baseline_report, followup_report):
    """Per-region ``followup - baseline`` mean T2, in baseline order."""
    if set(baseline_report) != set(followup_report):
        raise SelectorMismatch("reports cover different regions")
    return {k: followup_report[k].mean_t2_ms - baseline_report[k].mean_t2_ms for k in baseline_report}
