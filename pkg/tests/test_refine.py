import numpy as np
import pytest

from cartiq.errors import EmptyValidationSet, GridMismatch
from cartiq.metrics import dice
from cartiq.refine import (RefinementThresholds, binarize, candidate_mask, refine, slice_min_count_filter,
                           tune_thresholds)
from cartiq.t2fit import compute_t2_map, filter_physiological
from cartiq.volume import MultiEchoVolume, ProbabilityMap, SegmentationMask

TE7 = tuple(range(10, 71, 10))


def uniform_volume(shape, t2=40.0):
    curve = 1000 * np.exp(-np.asarray(TE7) / t2) + 30
    return MultiEchoVolume(np.broadcast_to(curve, shape + (7,)).copy(), TE7)


def test_candidate_threshold_is_strict():
    assert candidate_mask(ProbabilityMap(np.full((3, 3, 2), 0.01))).count == 0
    assert candidate_mask(ProbabilityMap(np.ones((3, 3, 2)))).count == 18
    pm = ProbabilityMap(np.array([0, 0.005, 0.02, 0.6]).reshape(2, 2, 1))
    assert candidate_mask(pm).count == 2


def test_binarize_threshold_is_inclusive():
    pm = ProbabilityMap(np.array([0.501, 0.5009, 1.0, 0.7]).reshape(2, 2, 1))
    surviving = SegmentationMask(np.array([True, True, True, False]).reshape(2, 2, 1))
    out = binarize(pm, surviving).values.ravel()
    assert out.tolist() == [True, False, True, False]


def test_binarize_all_certain_equals_surviving():
    surviving = SegmentationMask(np.random.default_rng(0).random((4, 4, 3)) < 0.5)
    out = binarize(ProbabilityMap(np.ones((4, 4, 3))), surviving)
    np.testing.assert_array_equal(out.values, surviving.values)


def test_binarize_grid_mismatch():
    with pytest.raises(GridMismatch):
        binarize(ProbabilityMap(np.ones((2, 2, 2))), SegmentationMask(np.ones((2, 2, 3), bool)))


def slice_with(count, shape=(30, 30, 2)):
    m = np.zeros(shape, bool)
    m.reshape(-1, shape[2])[:count, 0] = True
    return SegmentationMask(m)


def test_slice_filter_boundary():
    t = RefinementThresholds(min_voxels_per_slice=425)
    assert slice_min_count_filter(slice_with(424), t).count == 0
    assert slice_min_count_filter(slice_with(425), t).count == 425


def test_slice_filter_zero_is_identity():
    m = SegmentationMask(np.random.default_rng(1).random((5, 5, 4)) < 0.3)
    out = slice_min_count_filter(m, RefinementThresholds(min_voxels_per_slice=0))
    np.testing.assert_array_equal(out.values, m.values)


def test_thresholds_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        RefinementThresholds(candidate_p=0.6, binarize_p=0.5)
    t = RefinementThresholds(0.02, 0.55, 300)
    path = tmp_path / "t.json"
    path.write_text(t.to_json())
    assert RefinementThresholds.load(path) == t


def cartilage_block(shape=(30, 30, 3)):
    truth = np.zeros(shape, bool)
    truth[5:27, 5:27, :] = True  # 484 voxels per slice
    return truth


def test_refine_ideal_input():
    truth = cartilage_block()
    pm = ProbabilityMap(truth.astype(float))
    final, t2map = refine(pm, uniform_volume(truth.shape))
    np.testing.assert_array_equal(final.values, truth)
    assert abs(np.nanmean(t2map.t2_ms) - 40) < 1e-3
    assert np.all(t2map.present == truth)


def test_refine_out_of_range_t2_empties_mask():
    truth = cartilage_block()
    final, t2map = refine(ProbabilityMap(truth.astype(float)), uniform_volume(truth.shape, 150.0))
    assert final.count == 0 and t2map.count == 0


def test_refine_removes_small_blob():
    truth = cartilage_block()
    p = truth.astype(float)
    p[:, :, 1] = 0
    p[0:2, 0:5, 1] = 0.9  # 10-voxel blob
    final, _ = refine(ProbabilityMap(p), uniform_volume(truth.shape))
    assert final.values[:, :, 1].sum() == 0
    assert final.count == 2 * 484


def test_binary_pm_reduces_to_t2_gate():
    rng = np.random.default_rng(2)
    reader = rng.random((12, 12, 2)) < 0.5
    t2 = np.where(rng.random((12, 12, 2)) < 0.3, 150.0, 45.0)
    data = 1000 * np.exp(-np.asarray(TE7) / t2[..., None]) + 20
    vol = MultiEchoVolume(data, TE7)
    final, _ = refine(ProbabilityMap(reader.astype(float)), vol, RefinementThresholds(0.0, 0.5, 0))
    _, surviving = filter_physiological(compute_t2_map(vol, SegmentationMask(reader)))
    np.testing.assert_array_equal(final.values, surviving.values)


def test_monotone_and_contained():
    rng = np.random.default_rng(3)
    shape = (20, 20, 3)
    p = rng.random(shape)
    t2 = rng.uniform(20, 130, shape)
    vol = MultiEchoVolume(1000 * np.exp(-np.asarray(TE7) / t2[..., None]) + 20, TE7)
    pm = ProbabilityMap(p)
    prev = None
    for bp in (0.3, 0.5, 0.7, 0.9):
        final, _ = refine(pm, vol, RefinementThresholds(0.01, bp, 50))
        if prev is not None:
            assert not np.any(final.values & ~prev)
        prev = final.values
    cand = candidate_mask(pm)
    _, surviving = filter_physiological(compute_t2_map(vol, cand))
    assert not np.any(surviving.values & ~cand.values)
    prev = None
    for mv in (0, 50, 100, 150):
        final, _ = refine(pm, vol, RefinementThresholds(0.01, 0.5, mv))
        assert not np.any(final.values & ~surviving.values)
        if prev is not None:
            assert not np.any(final.values & ~prev)
        prev = final.values


def brute_force_tuning(cases, min_grid, p_grid):
    best = None
    for m in sorted(min_grid):
        for bp in sorted(p_grid):
            t = RefinementThresholds(0.01, bp, m)
            score = np.mean([dice(refine(pm, vol, t)[0], truth) for pm, vol, truth in cases])
            if best is None or score > best[0]:
                best = (score, m, bp)
    return best


def test_tuning_matches_exhaustive_oracle():
    rng = np.random.default_rng(4)
    shape = (24, 24, 3)
    p = rng.random(shape)
    truth = SegmentationMask(p >= 0.7)
    vol = uniform_volume(shape)
    cases = [(ProbabilityMap(p), vol, truth)]
    p_grid = [0.6, 0.65, 0.68, 0.69, 0.7, 0.71, 0.75]
    min_grid = [0, 50, 100, 200]
    t = tune_thresholds(cases, min_grid, p_grid)
    score, m, bp = brute_force_tuning(cases, min_grid, p_grid)
    assert (t.min_voxels_per_slice, t.binarize_p) == (m, bp)
    assert score == 1.0
    below = p[p < 0.7].max()
    assert below < np.float32(t.binarize_p) <= 0.7


def test_tuning_two_cases_with_ties():
    rng = np.random.default_rng(5)
    cases = []
    for k in range(2):
        p = rng.random((16, 16, 4))
        truth = p >= 0.55
        truth[:, :, 0] = False
        p[:, :, 0] = np.where(rng.random((16, 16)) < 0.05, 0.9, p[:, :, 0] * 0.5)
        cases.append((ProbabilityMap(p), uniform_volume(p.shape), SegmentationMask(truth)))
    min_grid = [0, 10, 20, 40, 80, 120]
    p_grid = [0.45, 0.5, 0.55, 0.6]
    t = tune_thresholds(cases, min_grid, p_grid)
    _, m, bp = brute_force_tuning(cases, min_grid, p_grid)
    assert (t.min_voxels_per_slice, t.binarize_p) == (m, bp)


def test_single_pair_grid():
    truth = cartilage_block()
    case = (ProbabilityMap(truth * 0.8), uniform_volume(truth.shape), SegmentationMask(truth))
    t = tune_thresholds([case], [425], [0.501])
    assert (t.min_voxels_per_slice, t.binarize_p) == (425, 0.501)


def test_empty_validation_set():
    with pytest.raises(EmptyValidationSet):
        tune_thresholds([])
