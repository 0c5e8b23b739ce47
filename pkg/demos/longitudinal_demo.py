"""Baseline vs follow-up: a focal T2 increase shows up as one cluster."""

from dataclasses import replace

from cartiq import (PhantomSpec, RefinementThresholds, change_map, find_focal_clusters, generate_phantom,
                    lesion_area_percentage, project_to_plane, refine, register_plates)

base_spec = PhantomSpec(shape=(160, 160, 12), inner_radius_px=50, outer_radius_px=60, slices=(2, 10),
                        angle_start_deg=200, angle_span_deg=150, sigma=2.0, seed=1,
                        region_t2={"LA": 34, "LC": 38, "LP": 31, "MA": 44, "MC": 41, "MP": 47})
# registration needs shared structure; the follow-up keeps the sector pattern
follow_spec = replace(base_spec, region_t2={**base_spec.region_t2, "SMC": 62}, seed=2)


def plate_of(spec):
    ph = generate_phantom(spec)
    final, t2map = refine(ph.probability_map(), ph.volume, RefinementThresholds(min_voxels_per_slice=0))
    return project_to_plane(t2map, final)


baseline, followup = plate_of(base_spec), plate_of(follow_spec)
shift = register_plates(baseline, followup)
cm = change_map(baseline, followup, shift)
clusters = find_focal_clusters(cm)
print(f"translation {shift}, mean change {cm.mean:.2f} ms, SD {cm.sd:.2f} ms")
print(f"threshold {cm.mean + cm.sd:.2f} ms, {len(clusters)} cluster(s)")
for c in clusters:
    print(f"  {c.area} pixels ({100 * c.area_fraction:.1f}%), mean change {c.mean_delta:.2f} ms")
print(f"lesion area {lesion_area_percentage(clusters, cm.plate_area):.2f}% of the plate")
