"""Knee cartilage T2 relaxometry from multi-echo spin-echo MRI."""

__version__ = "0.1.0"

from .errors import CartiqError  # noqa: E402
from .volume import (  # noqa: E402
    MultiEchoVolume,
    ProbabilityMap,
    SegmentationMask,
    T2Map,
    load_mask,
    load_multi_echo_volume,
    load_probability_map,
    load_t2_map,
    write_raw_container,
)
from .t2fit import (DecayCurve, FitOptions, compute_t2_map, filter_physiological, fit_candidates,  # noqa: E402
                    fit_curves, fit_voxel)  # noqa: E402
from .refine import RefinementThresholds, refine, tune_thresholds  # noqa: E402
from .anatomy import REGIONS, project_to_plane, partition, region_report  # noqa: E402
from .longitudinal import (change_map, find_focal_clusters, lesion_area_percentage,  # noqa: E402
                           region_change, register_plates)  # noqa: E402
from .metrics import agreement_summary, dice, jaccard, rms_cv  # noqa: E402
from .phantom import PhantomSpec, generate_phantom  # noqa: E402
from .preprocess import NormalizationParams, normalize_slice  # noqa: E402
from .pipeline import PipelineConfig, load_config, run_pipeline  # noqa: E402
