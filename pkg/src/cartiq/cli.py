"""Command line front end (``cartiq <subcommand>``).

Exit codes: 0 success, 2 configuration error (bad flags, missing files),
3 data error, 4 numerical failure.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .anatomy import project_to_plane, region_report, write_plate
from .errors import CartiqError, ConfigError, DegenerateIntensity, MalformedFile
from .longitudinal import (change_map, find_focal_clusters, lesion_area_percentage, region_change,
                           register_plates)
from .metrics import agreement_summary, dice, jaccard
from .phantom import PhantomSpec, generate_phantom
from .pipeline import _clean, load_config, longitudinal_payload, run_pipeline
from .preprocess import NormalizationParams, normalize_slice
from .refine import RefinementThresholds, refine, tune_thresholds
from .t2fit import FitOptions, fit_candidates
from .volume import (load_mask, load_multi_echo_volume, load_probability_map, load_t2_map, save_nifti,
                     write_raw_container)


def _need(*paths):
    for p in paths:
        if p is not None and not os.path.exists(p):
            raise ConfigError(f"no such file: {p}")


def _emit(payload, out=None):
    text = json.dumps(_clean(payload), indent=2) + "\n"
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _fit_options(args):
    return FitOptions(max_iterations=args.max_iterations, init=args.init, model=args.model)


def _add_fit_flags(p):
    p.add_argument("--sidecar", help="JSON with te_ms / tr_ms / spacing_mm")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default $CARTIQ_THREADS or 1)")
    p.add_argument("--init", choices=("scan", "loglinear"), default="scan")
    p.add_argument("--model", choices=("offset", "rician"), default="offset")
    p.add_argument("--max-iterations", type=int, default=200)


def _add_plate_flags(p):
    p.add_argument("--bin-width", type=float, default=1.0, help="angular bin width in degrees")
    p.add_argument("--laterality", choices=("left", "right"), default="right")


def cmd_fit(args):
    _need(args.volume, args.mask, args.sidecar)
    vol = load_multi_echo_volume(args.volume, sidecar=args.sidecar)
    t2map, summary = fit_candidates(vol, load_mask(args.mask), _fit_options(args), args.threads)
    write_raw_container(t2map, args.out)
    _emit(summary.as_dict(), args.summary or args.out + ".json")
    return 0


def cmd_refine(args):
    if args.tune:
        _need(args.tune)
        with open(args.tune) as fh:
            cases = json.load(fh)
        base = os.path.dirname(os.path.abspath(args.tune))
        rel = lambda p: p if os.path.isabs(p) else os.path.join(base, p)  # noqa: E731
        validation = []
        for case in cases:
            _need(rel(case["pmap"]), rel(case["volume"]), rel(case["truth"]))
            validation.append((load_probability_map(rel(case["pmap"])),
                               load_multi_echo_volume(rel(case["volume"]), sidecar=case.get("sidecar")),
                               load_mask(rel(case["truth"]))))
        thr = tune_thresholds(validation, fit_opts=_fit_options(args), threads=args.threads)
        with open(args.thresholds or "thresholds.json", "w") as fh:
            fh.write(thr.to_json() + "\n")
        _emit({"candidate_p": thr.candidate_p, "binarize_p": thr.binarize_p,
               "min_voxels_per_slice": thr.min_voxels_per_slice})
        return 0
    if not (args.pmap and args.volume and args.out_mask):
        raise ConfigError("refine needs --pmap, --volume and --out-mask (or --tune)")
    _need(args.pmap, args.volume, args.sidecar, args.thresholds)
    thr = RefinementThresholds.load(args.thresholds) if args.thresholds else RefinementThresholds()
    pm = load_probability_map(args.pmap)
    vol = load_multi_echo_volume(args.volume, sidecar=args.sidecar)
    final, t2map = refine(pm, vol, thr, _fit_options(args), args.threads)
    write_raw_container(final, args.out_mask)
    if args.out_t2:
        write_raw_container(t2map, args.out_t2)
    _emit({"mask_voxels": final.count, "t2_voxels": t2map.count})
    return 0


def cmd_regions(args):
    _need(args.t2, args.mask)
    t2map = load_t2_map(args.t2)
    plate = project_to_plane(t2map, load_mask(args.mask), bin_width_deg=args.bin_width,
                             laterality=args.laterality)
    report = region_report(plate)
    with open(args.out, "w") as fh:
        fh.write(report.to_csv([f"toolkit: cartiq", f"version: {__version__}"]))
    if args.json:
        _emit({"regions": report.as_dict(), "dropped_voxels": plate.dropped_voxels}, args.json)
    if args.plate_out:
        write_plate(plate, args.plate_out)
    return 0


def _plate_from_files(t2_path, mask_path, args):
    _need(t2_path, mask_path)
    return project_to_plane(load_t2_map(t2_path), load_mask(mask_path), bin_width_deg=args.bin_width,
                            laterality=args.laterality)


def cmd_longitudinal(args):
    a = _plate_from_files(args.baseline_t2, args.baseline_mask, args)
    b = _plate_from_files(args.followup_t2, args.followup_mask, args)
    shift = register_plates(a, b, window=args.window)
    cm = change_map(a, b, shift)
    clusters = find_focal_clusters(cm, args.min_area_fraction, args.connectivity)
    payload = longitudinal_payload(shift, cm, clusters, lesion_area_percentage(clusters, cm.plate_area),
                                   region_change(region_report(a), region_report(b)))
    _emit({"version": __version__, **payload}, args.out)
    return 0


def cmd_compare(args):
    _need(args.mask_a, args.mask_b)
    a, b = load_mask(args.mask_a), load_mask(args.mask_b)
    _emit({"dice": dice(a, b), "jaccard": jaccard(a, b)}, args.out)
    return 0


def read_pairs(path):
    """Two numeric columns under a header row."""
    _need(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise MalformedFile(f"{path}: need a header and at least one data row")
    try:
        data = [(float(r[0]), float(r[1])) for r in rows[1:] if r]
    except (ValueError, IndexError) as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    return np.asarray(data)


def cmd_agree(args):
    try:
        summary = agreement_summary(read_pairs(args.pairs))
    except ValueError as exc:
        raise MalformedFile(str(exc)) from exc
    _emit(summary.as_dict(), args.out)
    return 0


def cmd_preprocess(args):
    _need(args.volume, args.sidecar)
    vol = load_multi_echo_volume(args.volume, sidecar=args.sidecar)
    if not 0 <= args.echo < vol.echoes:
        raise ConfigError(f"--echo must lie in 0..{vol.echoes - 1}")
    img = vol.data[..., args.echo].astype(np.float64)
    out = np.zeros_like(img)
    skipped = []
    for z in range(img.shape[2]):
        try:
            out[:, :, z] = normalize_slice(img[:, :, z], NormalizationParams())
        except DegenerateIntensity:
            skipped.append(z)
    if args.out.endswith((".nii", ".nii.gz")):
        save_nifti(out.astype(np.float32), args.out, vol.spacing_mm)
    else:
        np.save(args.out, out.astype(np.float32))
    _emit({"echo": args.echo, "slices": img.shape[2], "skipped_slices": skipped})
    return 0


def cmd_phantom(args):
    _need(args.spec)
    spec = PhantomSpec.load(args.spec) if args.spec else PhantomSpec()
    if args.seed is not None:
        spec = PhantomSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    ph = generate_phantom(spec)
    os.makedirs(args.out, exist_ok=True)
    write_raw_container(ph.volume, os.path.join(args.out, "volume.mev"))
    write_raw_container(ph.mask, os.path.join(args.out, "mask.msk"))
    write_raw_container(ph.probability_map(), os.path.join(args.out, "pmap.pmap"))
    with open(os.path.join(args.out, "truth.json"), "w") as fh:
        fh.write(ph.truth.to_json() + "\n")
    with open(os.path.join(args.out, "spec.json"), "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2)
        fh.write("\n")
    np.save(os.path.join(args.out, "shell.npy"), ph.truth.shell)
    return 0


def _parse_set(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_pipeline(args):
    overrides = _parse_set(args.set)
    for key in ("output_dir", "seed", "threads"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = os.path.abspath(val) if key == "output_dir" else val
    cfg = load_config(args.config, overrides)
    code, reports = run_pipeline(cfg)
    for path in reports:
        print(path)
    return code


def build_parser():
    ap = argparse.ArgumentParser(prog="cartiq", description="Knee cartilage T2 mapping toolkit")
    ap.add_argument("--version", action="version", version=f"cartiq {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit T2 on the voxels of a mask")
    p.add_argument("--volume", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True, help="output T2 map container")
    p.add_argument("--summary", help="fit summary JSON (default: OUT.json)")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("refine", help="probability map to final mask and T2 map")
    p.add_argument("--pmap")
    p.add_argument("--volume")
    p.add_argument("--thresholds", help="thresholds JSON (read, or written with --tune)")
    p.add_argument("--out-mask")
    p.add_argument("--out-t2")
    p.add_argument("--tune", metavar="CASES.json",
                   help="grid-search thresholds on validation cases [{pmap, volume, truth}, ...]")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("regions", help="27-region T2 report")
    p.add_argument("--t2", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True, help="CSV report")
    p.add_argument("--json")
    p.add_argument("--plate-out", help="write the flattened plate container")
    _add_plate_flags(p)
    p.set_defaults(func=cmd_regions)

    p = sub.add_parser("longitudinal", help="change map and focal clusters between two timepoints")
    for name in ("baseline-t2", "baseline-mask", "followup-t2", "followup-mask"):
        p.add_argument(f"--{name}", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    p.add_argument("--min-area-fraction", type=float, default=0.01)
    p.add_argument("--window", type=int, default=10)
    _add_plate_flags(p)
    p.set_defaults(func=cmd_longitudinal)

    p = sub.add_parser("compare", help="Dice and Jaccard between two masks")
    p.add_argument("--mask-a", required=True)
    p.add_argument("--mask-b", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("agree", help="agreement statistics for paired measurements")
    p.add_argument("--pairs", required=True, help="CSV with a header and two numeric columns")
    p.add_argument("--out")
    p.set_defaults(func=cmd_agree)

    p = sub.add_parser("preprocess", help="normalise every slice of one echo")
    p.add_argument("--volume", required=True)
    p.add_argument("--sidecar")
    p.add_argument("--echo", type=int, default=1, help="0-based echo index")
    p.add_argument("--out", required=True, help=".nii/.nii.gz or .npy output")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("phantom", help="write a synthetic phantom")
    p.add_argument("--spec", help="phantom spec JSON (defaults if omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("pipeline", help="run the configured pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    p.add_argument("--output-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        return args.func(args)
    except CartiqError as exc:
        print(f"cartiq {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, TypeError) as exc:
        print(f"cartiq {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
