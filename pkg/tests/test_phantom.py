import json
import math

import numpy as np
import pytest

from cartiq.anatomy import REGIONS, project_to_plane, region_report
from cartiq.errors import InvalidSpec
from cartiq.phantom import PhantomSpec, generate_phantom
from cartiq.refine import RefinementThresholds, refine

SMALL = dict(shape=(96, 96, 6), inner_radius_px=30, outer_radius_px=38, slices=(1, 5),
             angle_start_deg=20, angle_span_deg=200)


def measured(spec):
    ph = generate_phantom(spec)
    final, t2map = refine(ph.probability_map(), ph.volume, RefinementThresholds(0.01, 0.501, 0))
    return ph, region_report(project_to_plane(t2map, final, laterality=spec.laterality))


@pytest.mark.parametrize("bad", [
    dict(inner_radius_px=50, outer_radius_px=40),
    dict(inner_radius_px=0),
    dict(t2_ms=0),
    dict(t2_ms=120),
    dict(region_t2={"MX": 40}),
    dict(region_t2={"M": 101}),
    dict(slices=(3, 3)),
    dict(angle_span_deg=0),
    dict(outer_radius_px=200),
    dict(te_ms=(10, 20, 30)),
    dict(sigma=-1),
    dict(region_t2={"M": 40}, shell_t2=(30, 40)),
])
def test_invalid_specs(bad):
    with pytest.raises(InvalidSpec):
        PhantomSpec(**{**SMALL, **bad})


def test_spec_round_trip(tmp_path):
    spec = PhantomSpec(**SMALL, region_t2={"M": 45}, seed=3)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec.to_dict()))
    assert PhantomSpec.load(path) == spec
    with pytest.raises(InvalidSpec):
        PhantomSpec.from_dict({"radius": 3})


def test_signal_model_and_mask():
    spec = PhantomSpec(**SMALL, c=25.0, s0=800.0)
    ph = generate_phantom(spec)
    te = np.asarray(spec.te_ms)
    inside = ph.volume.data[ph.mask.values]
    np.testing.assert_allclose(inside, np.broadcast_to(800 * np.exp(-te / 40) + 25, inside.shape), rtol=1e-6)
    assert np.all(ph.volume.data[~ph.mask.values] == 0)
    assert np.all(np.isnan(ph.truth.voxel_t2[~ph.mask.values]))
    assert ph.mask.values[:, :, 0].sum() == 0 and ph.mask.values[:, :, 1].sum() > 0


def test_uniform_recovers_40():
    _, report = measured(PhantomSpec(**SMALL))
    for name, st in report.items():
        assert abs(st.mean_t2_ms - 40) <= 0.01, name


def test_medial_lateral_blend():
    ph, report = measured(PhantomSpec(**SMALL, region_t2={"M": 45, "L": 35}))
    assert report["M"].mean_t2_ms == pytest.approx(45, abs=0.01)
    assert report["L"].mean_t2_ms == pytest.approx(35, abs=0.01)
    nm, nl = report["M"].voxel_count, report["L"].voxel_count
    assert report["all"].mean_t2_ms == pytest.approx((45 * nm + 35 * nl) / (nm + nl), abs=0.01)
    truth = ph.truth.regions
    for name, st in report.items():
        assert st.mean_t2_ms == pytest.approx(truth[name]["mean_t2_ms"], abs=0.01)
        assert st.voxel_count == pytest.approx(truth[name]["voxel_count"])


def test_noisy_phantom_within_half_ms():
    ph, report = measured(PhantomSpec(**SMALL, region_t2={"M": 45, "L": 35}, sigma=5.0, seed=11))
    for name, st in report.items():
        assert abs(st.mean_t2_ms - ph.truth.regions[name]["mean_t2_ms"]) <= 0.5, name


def test_seed_controls_noise():
    spec = PhantomSpec(**SMALL, sigma=5.0, seed=1)
    a, b = generate_phantom(spec), generate_phantom(spec)
    np.testing.assert_array_equal(a.volume.data, b.volume.data)
    c = generate_phantom(PhantomSpec(**SMALL, sigma=5.0, seed=2))
    assert not np.array_equal(a.volume.data, c.volume.data)
    assert np.all(a.volume.data >= 0)


def test_shell_assignment():
    spec = PhantomSpec(**SMALL, shell_t2=(30, 35, 40, 45, 50, 55, 60, 65))
    ph = generate_phantom(spec)
    shell = ph.truth.shell
    assert shell[~ph.mask.values].max() == -1
    for k, t2 in enumerate(spec.shell_t2):
        sel = shell == k
        if sel.any():
            assert np.all(ph.truth.voxel_t2[sel] == t2)


def test_truth_table_covers_all_regions():
    ph = generate_phantom(PhantomSpec(**SMALL, region_t2={"DLA": 60}))
    assert list(ph.truth.regions) == [r.name for r in REGIONS]
    assert ph.truth.regions["DLA"]["mean_t2_ms"] == 60
    assert not math.isnan(ph.truth.regions["all"]["mean_t2_ms"])
