"""Batch pipeline: refine, regions, longitudinal change and comparison.

Configuration is a plain ``key = value`` text file (``#`` starts a comment).
Relative paths are resolved against the file's directory. Every report
carries the toolkit version, a SHA-256 of the effective configuration and
the seed. The output directory and thread count are left out of the hash
because they do not change any result.
"""

import configparser
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import __version__
from .anatomy import project_to_plane, region_report, write_plate
from .errors import CartiqError, ConfigError
from .longitudinal import (change_map, find_focal_clusters, lesion_area_percentage, region_change,
                           register_plates)
from .metrics import agreement_summary, dice, jaccard
from .phantom import PhantomSpec, generate_phantom
from .refine import RefinementThresholds, refine
from .t2fit import FitOptions, compute_t2_map, filter_physiological
from .volume import (load_mask, load_multi_echo_volume, load_probability_map, write_raw_container)

_PATH_KEYS = ("volume", "sidecar", "pmap", "mask", "followup_volume", "followup_sidecar",
              "followup_pmap", "followup_mask", "reference_mask", "phantom", "followup_phantom",
              "thresholds")
_UNHASHED = ("output_dir", "threads")


@dataclass(frozen=True)
class PipelineConfig:
    volume: str = None
    sidecar: str = None
    pmap: str = None
    mask: str = None
    followup_volume: str = None
    followup_sidecar: str = None
    followup_pmap: str = None
    followup_mask: str = None
    reference_mask: str = None
    phantom: str = None
    followup_phantom: str = None
    thresholds: str = None
    candidate_p: float = 0.01
    binarize_p: float = 0.501
    min_voxels_per_slice: int = 425
    max_iterations: int = 200
    tolerance: float = 1e-8
    init: str = "scan"
    model: str = "offset"
    bin_width_deg: float = 1.0
    laterality: str = "right"
    connectivity: int = 8
    min_area_fraction: float = 0.01
    window: int = 10
    output_dir: str = "cartiq_out"
    formats: tuple = ("csv", "json")
    seed: int = 0
    threads: int = 0  # 0: $CARTIQ_THREADS or 1
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def has_followup(self):
        return bool(self.followup_volume or self.followup_phantom)

    def fit_options(self):
        return FitOptions(max_iterations=self.max_iterations, tolerance=self.tolerance,
                          init=self.init, model=self.model)

    def refinement_thresholds(self):
        if self.thresholds:
            return RefinementThresholds.load(self.thresholds)
        return RefinementThresholds(self.candidate_p, self.binarize_p, self.min_voxels_per_slice)

    def sha256(self):
        items = sorted((k, v) for k, v in self.raw.items() if k not in _UNHASHED)
        text = "\n".join(f"{k}={v}" for k, v in items)
        return hashlib.sha256(text.encode()).hexdigest()

    def validate(self):
        if not (self.volume or self.phantom):
            raise ConfigError("config needs either 'volume' or 'phantom'")
        if self.volume and not (self.pmap or self.mask):
            raise ConfigError("a 'volume' input needs a 'pmap' or a 'mask'")
        if self.followup_volume and not (self.followup_pmap or self.followup_mask):
            raise ConfigError("'followup_volume' needs 'followup_pmap' or 'followup_mask'")
        for key in _PATH_KEYS:
            path = getattr(self, key)
            if path and not os.path.exists(path):
                raise ConfigError(f"{key}: no such file: {path}")
        bad = set(self.formats) - {"csv", "json", "svg"}
        if bad:
            raise ConfigError(f"unsupported report formats {sorted(bad)}")
        try:
            os.makedirs(self.output_dir, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"output_dir: cannot create {self.output_dir}: {exc}") from exc
        if not os.access(self.output_dir, os.W_OK):
            raise ConfigError(f"output_dir: not writable: {self.output_dir}")


_FIELDS = {f.name: f for f in fields(PipelineConfig) if f.name != "raw"}


def _coerce(key, text, base_dir):
    default = _FIELDS[key].default
    text = text.strip()
    if key in _PATH_KEYS or key == "output_dir":
        if not text:
            return None
        return text if os.path.isabs(text) else os.path.normpath(os.path.join(base_dir, text))
    if key == "formats":
        return tuple(s.strip() for s in text.split(",") if s.strip())
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}") from exc
    return text


def parse_config(text, base_dir=".", overrides=None):
    """Build a :class:`PipelineConfig` from config text plus ``overrides``."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        parser.read_string("[pipeline]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    raw = dict(parser["pipeline"])
    for k, v in (overrides or {}).items():
        raw[k] = str(v)
    unknown = set(raw) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    values = {k: _coerce(k, v, base_dir) for k, v in raw.items()}
    return PipelineConfig(**values, raw=dict(sorted(raw.items())))


def load_config(path, overrides=None):
    if not os.path.exists(path):
        raise ConfigError(f"config: no such file: {path}")
    with open(path) as fh:
        text = fh.read()
    return parse_config(text, os.path.dirname(os.path.abspath(path)), overrides)


class StageError(CartiqError):
    """A stage failed; carries the stage, the input involved and the cause."""

    def __init__(self, stage, path, cause):
        self.stage, self.path, self.cause = stage, path, cause
        self.exit_code = getattr(cause, "exit_code", 3)
        super().__init__(f"stage '{stage}' failed on {path or '<generated>'}: "
                         f"{type(cause).__name__} (exit {self.exit_code}): {cause}")


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def provenance(cfg):
    return {"toolkit": "cartiq", "version": __version__, "config_sha256": cfg.sha256(), "seed": cfg.seed}


def heatmap_svg(values, title, cell=4):
    """Render a 2D array as an SVG heatmap; NaN cells are left blank."""
    values = np.asarray(values, dtype=np.float64)
    finite = values[np.isfinite(values)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    span = hi - lo or 1.0
    nu, nv = values.shape
    head = 16
    rows = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{nv * cell}" height="{nu * cell + head}">',
            f'<text x="2" y="12" font-size="11" font-family="sans-serif">{title} '
            f'[{lo:.2f}, {hi:.2f}]</text>']
    for u, v in zip(*np.nonzero(np.isfinite(values))):
        t = (values[u, v] - lo) / span
        # blue to red ramp
        r, b = int(round(255 * t)), int(round(255 * (1 - t)))
        rows.append(f'<rect x="{v * cell}" y="{u * cell + head}" width="{cell}" height="{cell}" '
                    f'fill="#{r:02x}40{b:02x}"/>')
    rows.append("</svg>")
    return "\n".join(rows) + "\n"


def _write_svg(path, values, title):
    with open(path, "w") as fh:
        fh.write(heatmap_svg(values, title))
    return path


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(_clean(payload), fh, indent=2)
        fh.write("\n")
    return path


@dataclass
class _Timepoint:
    label: str
    source: str
    volume: object
    pmap: object = None
    mask: object = None
    phantom: object = None


def _load_timepoint(cfg, prefix, seed):
    key = lambda name: f"{prefix}{name}"  # noqa: E731
    phantom_path = getattr(cfg, key("phantom"))
    label = prefix.rstrip("_") or "baseline"
    if phantom_path:
        try:
            spec = replace(PhantomSpec.load(phantom_path), seed=seed)
            ph = generate_phantom(spec)
        except (CartiqError, TypeError, ValueError) as exc:
            raise StageError("load", phantom_path, exc) from exc
        return _Timepoint(label, phantom_path, ph.volume, pmap=ph.probability_map(),
                          mask=None, phantom=ph)
    vol_path = getattr(cfg, key("volume"))
    try:
        vol = load_multi_echo_volume(vol_path, sidecar=getattr(cfg, key("sidecar")))
    except CartiqError as exc:
        raise StageError("load", vol_path, exc) from exc
    tp = _Timepoint(label, vol_path, vol)
    pm_path, mk_path = getattr(cfg, key("pmap")), getattr(cfg, key("mask"))
    try:
        if pm_path:
            tp.pmap = load_probability_map(pm_path)
        else:
            tp.mask = load_mask(mk_path)
    except CartiqError as exc:
        raise StageError("load", pm_path or mk_path, exc) from exc
    return tp


def _stage_refine(cfg, tp, out, reports):
    try:
        if tp.pmap is not None:
            thr = cfg.refinement_thresholds()
            final, t2map = refine(tp.pmap, tp.volume, thr, cfg.fit_options(), cfg.threads or None)
            method = "probability map"
            thr_dict = {"candidate_p": thr.candidate_p, "binarize_p": thr.binarize_p,
                        "min_voxels_per_slice": thr.min_voxels_per_slice}
        else:
            t2map = compute_t2_map(tp.volume, tp.mask, cfg.fit_options(), cfg.threads or None)
            t2map, final = filter_physiological(t2map)
            method = "mask"
            thr_dict = None
    except CartiqError as exc:
        raise StageError("refine", tp.source, exc) from exc
    prefix = "" if tp.label == "baseline" else f"{tp.label}_"
    write_raw_container(final, os.path.join(out, f"{prefix}mask.msk"))
    write_raw_container(t2map, os.path.join(out, f"{prefix}t2.t2"))
    present = t2map.t2_ms[t2map.present]
    report = {
        "provenance": provenance(cfg),
        "stage": "refine",
        "timepoint": tp.label,
        "input": os.path.basename(tp.source),
        "segmentation_source": method,
        "thresholds": thr_dict,
        "mask_voxels": final.count,
        "t2_voxels": int(present.size),
        "mean_t2_ms": float(present.mean()) if present.size else float("nan"),
    }
    reports.append(_write_json(os.path.join(out, f"{prefix}refine.json"), report))
    return final, t2map


def _stage_regions(cfg, tp, final, t2map, out, reports):
    try:
        plate = project_to_plane(t2map, final, bin_width_deg=cfg.bin_width_deg,
                                 laterality=cfg.laterality)
        report = region_report(plate)
    except CartiqError as exc:
        raise StageError("regions", tp.source, exc) from exc
    prefix = "" if tp.label == "baseline" else f"{tp.label}_"
    write_plate(plate, os.path.join(out, f"{prefix}plate.flt"))
    prov = provenance(cfg)
    if "csv" in cfg.formats:
        path = os.path.join(out, f"{prefix}regions.csv")
        header = [f"{k}: {v}" for k, v in prov.items()] + [f"timepoint: {tp.label}"]
        with open(path, "w") as fh:
            fh.write(report.to_csv(header))
        reports.append(path)
    if "json" in cfg.formats:
        payload = {"provenance": prov, "stage": "regions", "timepoint": tp.label,
                   "dropped_voxels": plate.dropped_voxels, "regions": report.as_dict()}
        reports.append(_write_json(os.path.join(out, f"{prefix}regions.json"), payload))
    if "svg" in cfg.formats:
        reports.append(_write_svg(os.path.join(out, f"{prefix}plate.svg"), plate.pixel_t2(),
                                  f"{tp.label} T2 (ms)"))
    return plate, report


def _stage_longitudinal(cfg, base, follow, out, reports):
    (plate_a, rep_a), (plate_b, rep_b) = base, follow
    try:
        shift = register_plates(plate_a, plate_b, window=cfg.window)
        cm = change_map(plate_a, plate_b, shift)
        clusters = find_focal_clusters(cm, cfg.min_area_fraction, cfg.connectivity)
        lesion = lesion_area_percentage(clusters, cm.plate_area)
        deltas = region_change(rep_a, rep_b)
    except CartiqError as exc:
        raise StageError("longitudinal", cfg.followup_volume or cfg.followup_phantom, exc) from exc
    payload = longitudinal_payload(shift, cm, clusters, lesion, deltas)
    payload = {"provenance": provenance(cfg), "stage": "longitudinal", **payload}
    reports.append(_write_json(os.path.join(out, "longitudinal.json"), payload))
    if "svg" in cfg.formats:
        reports.append(_write_svg(os.path.join(out, "change.svg"), cm.delta, "T2 change (ms)"))


def longitudinal_payload(shift, cm, clusters, lesion, deltas):
    return {
        "translation": list(shift),
        "plate_area_pixels": cm.plate_area,
        "mean_delta_ms": cm.mean,
        "sd_delta_ms": cm.sd,
        "threshold_ms": cm.mean + cm.sd,
        "clusters": [c.as_dict() for c in clusters],
        "lesion_area_percent": lesion,
        "region_delta_ms": deltas,
    }


def _stage_compare(cfg, tp, final, report, out, reports):
    payload = {"provenance": provenance(cfg), "stage": "compare", "timepoint": tp.label}
    ref = None
    try:
        if cfg.reference_mask and tp.label == "baseline":
            ref = load_mask(cfg.reference_mask)
        elif tp.phantom is not None:
            ref = tp.phantom.mask
        if ref is None:
            return
        payload["dice"] = dice(final, ref)
        payload["jaccard"] = jaccard(final, ref)
        if tp.phantom is not None:
            truth = tp.phantom.truth.regions
            rows = {name: {"measured_ms": st.mean_t2_ms, "truth_ms": truth[name]["mean_t2_ms"]}
                    for name, st in report.items()}
            payload["regions"] = rows
            pairs = [(r["measured_ms"], r["truth_ms"]) for r in rows.values()
                     if math.isfinite(r["measured_ms"]) and math.isfinite(r["truth_ms"])]
            if len(pairs) >= 2:
                payload["region_agreement"] = agreement_summary(np.asarray(pairs)).as_dict()
    except CartiqError as exc:
        raise StageError("compare", cfg.reference_mask or tp.source, exc) from exc
    prefix = "" if tp.label == "baseline" else f"{tp.label}_"
    reports.append(_write_json(os.path.join(out, f"{prefix}compare.json"), payload))


def run_pipeline(cfg, stderr=None):
    """Run every configured stage; returns ``(exit_code, report paths)``.

    Failures are reported on ``stderr`` with the stage, the input path and
    the error class, and turned into the matching exit code.
    """
    stderr = stderr or sys.stderr
    reports = []
    try:
        cfg.validate()
        out = cfg.output_dir
        timepoints = [_load_timepoint(cfg, "", cfg.seed)]
        if cfg.has_followup:
            timepoints.append(_load_timepoint(cfg, "followup_", cfg.seed))
        results = []
        for tp in timepoints:
            final, t2map = _stage_refine(cfg, tp, out, reports)
            plate, report = _stage_regions(cfg, tp, final, t2map, out, reports)
            results.append((tp, final, plate, report))
        if len(results) == 2:
            _stage_longitudinal(cfg, results[0][2:], results[1][2:], out, reports)
        for tp, final, _, report in results:
            _stage_compare(cfg, tp, final, report, out, reports)
    except CartiqError as exc:
        print(f"cartiq pipeline: {exc}", file=stderr)
        return exc.exit_code, reports
    return 0, reports
