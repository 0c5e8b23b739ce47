"""Probability map to final cartilage mask.

Pipeline order: candidate threshold (``p > candidate_p``), T2 fit on the
candidates, physiological gate on T2, binarisation (``p >= binarize_p``),
then removal of slices holding fewer than ``min_voxels_per_slice`` voxels.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import EmptyValidationSet, GridMismatch
from .t2fit import FitOptions, compute_t2_map, filter_physiological
from .volume import SegmentationMask, check_grid_compatibility

DEFAULT_MIN_VOXEL_GRID = tuple(range(0, 1001, 25))
DEFAULT_BINARIZE_GRID = tuple(round(0.4 + 0.001 * i, 3) for i in range(301))


@dataclass(frozen=True)
class RefinementThresholds:
    candidate_p: float = 0.01
    binarize_p: float = 0.501
    min_voxels_per_slice: int = 425

    def __post_init__(self):
        if not (0 <= self.candidate_p < self.binarize_p <= 1):
            raise ValueError("need 0 <= candidate_p < binarize_p <= 1")
        if self.min_voxels_per_slice < 0:
            raise ValueError("min_voxels_per_slice must be nonnegative")
        object.__setattr__(self, "min_voxels_per_slice", int(self.min_voxels_per_slice))

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        return cls(**{k: data[k] for k in ("candidate_p", "binarize_p", "min_voxels_per_slice") if k in data})

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


def _cut(values, threshold):
    # compare in the map's own precision, so a stored 0.501 meets a 0.501 cut
    return np.asarray(threshold, dtype=values.dtype)


def candidate_mask(pm, thresholds=None):
    t = thresholds or RefinementThresholds()
    return SegmentationMask(pm.values > _cut(pm.values, t.candidate_p), pm.spacing_mm)


def binarize(pm, surviving, thresholds=None):
    t = thresholds or RefinementThresholds()
    check_grid_compatibility(pm, surviving)
    keep = surviving.values & (pm.values >= _cut(pm.values, t.binarize_p))
    return SegmentationMask(keep, pm.spacing_mm)


def slice_min_count_filter(mask, thresholds=None):
    """Clear every slice (fixed z) holding fewer than the minimum voxel count."""
    t = thresholds or RefinementThresholds()
    counts = mask.values.sum(axis=(0, 1))
    keep = counts >= t.min_voxels_per_slice
    return SegmentationMask(mask.values & keep[None, None, :], mask.spacing_mm)


def refine(pm, volume, thresholds=None, fit_opts=None, threads=None):
    """Run the full refinement; returns ``(final mask, T2 map on that mask)``."""
    t = thresholds or RefinementThresholds()
    check_grid_compatibility(pm, volume)
    cand = candidate_mask(pm, t)
    t2map = compute_t2_map(volume, cand, fit_opts or FitOptions(), threads)
    t2map, surviving = filter_physiological(t2map)
    final = slice_min_count_filter(binarize(pm, surviving, t), t)
    return final, t2map.restrict(final)


def _case_tables(pm, volume, truth, candidate_p, fit_opts, threads):
    """Per-voxel data needed to score any (min voxels, binarize_p) pair."""
    check_grid_compatibility(pm, volume)
    if truth.dims != pm.dims:
        raise GridMismatch(truth.dims, pm.dims)
    t = RefinementThresholds(candidate_p=candidate_p, binarize_p=1.0, min_voxels_per_slice=0)
    t2map = compute_t2_map(volume, candidate_mask(pm, t), fit_opts, threads)
    _, surviving = filter_physiological(t2map)
    xs, ys, zs = np.nonzero(surviving.values)
    p = pm.values[xs, ys, zs]
    hit = truth.values[xs, ys, zs]
    return p, zs, hit, int(truth.values.sum()), pm.dims[2]


def tune_thresholds(validation, min_voxel_grid=DEFAULT_MIN_VOXEL_GRID,
                    binarize_grid=DEFAULT_BINARIZE_GRID, candidate_p=0.01,
                    fit_opts=None, threads=None):
    """Grid-search the binarisation and slice-count thresholds.

    Parameters
    ----------
    validation : sequence of (ProbabilityMap, MultiEchoVolume, SegmentationMask)
        Validation cases with their reference segmentations.

    Returns
    -------
    RefinementThresholds
        The pair maximising mean volumetric Dice over the cases. Ties go to the
        smaller slice count, then the smaller probability cut.
    """
    validation = list(validation)
    if not validation:
        raise EmptyValidationSet("tune_thresholds needs at least one validation case")
    min_grid = sorted(set(int(m) for m in min_voxel_grid))
    p_grid = sorted(set(float(p) for p in binarize_grid))
    if not min_grid or not p_grid:
        raise ValueError("threshold grids must be non-empty")
    fit_opts = fit_opts or FitOptions()
    tables = [_case_tables(pm, vol, gt, candidate_p, fit_opts, threads) for pm, vol, gt in validation]

    mins = np.asarray(min_grid)
    score = np.zeros((len(p_grid), len(min_grid)))
    for p_vals, zs, hit, n_truth, nz in tables:
        for i, bp in enumerate(p_grid):
            sel = p_vals >= np.asarray(bp, dtype=p_vals.dtype)
            per_slice = np.bincount(zs[sel], minlength=nz)
            tp_slice = np.bincount(zs[sel & hit], minlength=nz)
            kept = per_slice[None, :] >= mins[:, None]
            n_pred = (per_slice[None, :] * kept).sum(axis=1)
            tp = (tp_slice[None, :] * kept).sum(axis=1)
            denom = n_pred + n_truth
            score[i] += np.where(denom > 0, 2.0 * tp / np.maximum(denom, 1), 1.0)
    score /= len(tables)

    best, best_key = -1.0, None
    for j, m in enumerate(min_grid):
        for i, bp in enumerate(p_grid):
            if score[i, j] > best:
                best, best_key = score[i, j], (m, bp)
    m, bp = best_key
    return RefinementThresholds(candidate_p=candidate_p, binarize_p=bp, min_voxels_per_slice=m)
