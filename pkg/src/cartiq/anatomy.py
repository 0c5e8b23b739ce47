"""Flattening of femoral cartilage T2 maps and subregional summaries.

Each sagittal slice (fixed ``z``) is parameterised in polar coordinates
about a per-slice condylar centre, estimated by Taubin's algebraic circle
fit to the slice's cartilage voxels. A plate pixel is a
``(slice, angular bin)`` column. Within a column, voxels are ordered by
distance from the centre: the inner half (toward bone) forms the deep layer
and the outer half the superficial layer. Odd counts give the middle voxel
to the deep layer; a single-voxel column contributes half a voxel to each.

The plate's angular axis starts just after the largest unoccupied arc, so
the cartilage appears as one contiguous run of bins. Increasing bin index
is taken as anterior to posterior; pass ``reverse_angle=True`` for images
oriented the other way.

Medial/lateral sides split the occupied slice range at its midpoint. Slice
indices are assumed to increase toward the patient's left, so for a right
knee the low-index half is lateral and for a left knee it is medial.
"""

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import EmptyMask, EmptyPlate, EmptyRegion, GridMismatch, MalformedFile
from .volume import RawContainer, check_grid_compatibility, read_raw_container, write_raw_container

DEPTHS = ("deep", "superficial")
SIDES = ("lateral", "medial")
SECTORS = ("anterior", "central", "posterior")
_ABBREV = {"deep": "D", "superficial": "S", "lateral": "L", "medial": "M",
           "anterior": "A", "central": "C", "posterior": "P"}


@dataclass(frozen=True)
class RegionSelector:
    depth: str = "both"
    side: str = "both"
    sector: str = "all"

    def __post_init__(self):
        if self.depth not in DEPTHS + ("both",):
            raise ValueError(f"bad depth {self.depth!r}")
        if self.side not in SIDES + ("both",):
            raise ValueError(f"bad side {self.side!r}")
        if self.sector not in SECTORS + ("all",):
            raise ValueError(f"bad sector {self.sector!r}")

    @property
    def name(self):
        parts = [_ABBREV.get(x, "") for x in (self.depth, self.side, self.sector)]
        return "".join(parts) or "all"

    @property
    def atomic(self):
        return self.depth != "both" and self.side != "both" and self.sector != "all"

    def codes(self):
        """Atomic label codes covered by this selector."""
        out = []
        for d, depth in enumerate(DEPTHS):
            for s, side in enumerate(SIDES):
                for k, sector in enumerate(SECTORS):
                    if (self.depth in ("both", depth) and self.side in ("both", side)
                            and self.sector in ("all", sector)):
                        out.append(atomic_code(d, s, k))
        return out


def atomic_code(depth, side, sector):
    return depth * 6 + side * 3 + sector


def _build_regions():
    regions = [RegionSelector()]
    regions += [RegionSelector(depth=d) for d in DEPTHS]
    regions += [RegionSelector(side=s) for s in SIDES]
    regions += [RegionSelector(depth=d, side=s) for s in SIDES for d in DEPTHS]
    regions += [RegionSelector(side=s, sector=k) for s in SIDES for k in SECTORS]
    regions += [RegionSelector(depth=d, side=s, sector=k) for d in DEPTHS for s in SIDES for k in SECTORS]
    return tuple(regions)


# row order of the 27-region table: all, D, S, L, M, DL, SL, DM, SM,
# LA, LC, LP, MA, MC, MP, DLA ... DMP, SLA ... SMP
REGIONS = _build_regions()
ATOMIC_REGIONS = tuple(r for r in REGIONS if r.atomic)


@dataclass(frozen=True)
class FlattenedPlate:
    """2D projection of a cartilage plate.

    Arrays are indexed ``[u, v]`` (slice, angular bin); layer arrays carry a
    trailing axis ``(deep, superficial)``. Absent T2 is NaN.
    """

    t2: np.ndarray
    counts: np.ndarray
    thickness_mm: np.ndarray
    column_count: np.ndarray
    bin_width_deg: float = 1.0
    laterality: str = "right"
    angle_origin_bin: int = 0
    dropped_voxels: int = 0

    @property
    def shape(self):
        return tuple(self.column_count.shape)

    @property
    def occupied(self):
        return self.column_count > 0

    @property
    def voxel_count(self):
        return float(self.counts.sum())

    def pixel_t2(self):
        """Per-pixel T2 averaged over the layers present (NaN where empty)."""
        present = self.counts > 0
        n = present.sum(axis=-1)
        total = np.where(present, self.t2, 0.0).sum(axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n > 0, total / n, np.nan)


def _fit_center(px, py):
    # Taubin's algebraic circle fit; far less biased than the plain
    # algebraic (Kasa) fit on short, thick arcs
    mx, my = px.mean(), py.mean()
    u, v = px - mx, py - my
    z = u * u + v * v
    zm = z.mean()
    if not zm > 0:
        return None
    scale = 2.0 * np.sqrt(zm)
    m = np.column_stack([(z - zm) / scale, u, v])
    _, sv, vt = np.linalg.svd(m, full_matrices=False)
    a = vt[-1]
    a0 = a[0] / scale
    spread = np.sqrt(zm)
    if sv[1] <= 1e-9 * sv[0] or abs(a0) * spread <= 1e-9 * np.hypot(a[1], a[2]):
        return None  # collinear points: no finite centre
    cx, cy = mx - a[1] / (2 * a0), my - a[2] / (2 * a0)
    if not (np.isfinite(cx) and np.isfinite(cy)):
        return None
    return cx, cy


def _angle_origin(bins, nbins, min_gap_deg=10.0):
    # start the plate after the widest empty arc; a closed ring (no arc at
    # least min_gap_deg wide) keeps the raw angle origin
    occ = np.unique(bins)
    if occ.size == 1:
        return int(occ[0])
    nxt = np.roll(occ, -1)
    gaps = (nxt - occ - 1) % nbins
    if gaps.max() * 360.0 / nbins < min_gap_deg:
        return 0
    return int(nxt[np.argmax(gaps)])


@dataclass(frozen=True)
class VoxelLayout:
    """Where each projected voxel lands on the plate.

    ``x, y, z`` are voxel indices, ``pixel`` the flat plate index
    ``u * n_bins + v`` and ``w_deep``/``w_sup`` the share of the voxel given
    to each layer (1/0, 0/1, or 0.5/0.5 for single-voxel columns).
    """

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    pixel: np.ndarray
    w_deep: np.ndarray
    w_sup: np.ndarray
    radius_mm: np.ndarray
    shape: tuple
    angle_origin_bin: int
    dropped_voxels: int


def voxel_layout(use, spacing, bin_width_deg=1.0, reverse_angle=False, min_slice_voxels=5):
    """Assign voxels of the boolean array ``use`` to plate columns and layers.

    Slices with fewer than ``min_slice_voxels`` voxels, or whose voxels are
    collinear so no centre can be fitted, are skipped and counted in
    ``dropped_voxels``.
    """
    use = np.asarray(use, bool)
    nbins = int(round(360.0 / bin_width_deg))
    if nbins < 3 or not np.isclose(nbins * bin_width_deg, 360.0):
        raise ValueError("bin width must divide 360 degrees")
    dx, dy = float(spacing[0]), float(spacing[1])
    nz = use.shape[2]

    parts = []
    dropped = 0
    for z in range(nz):
        xs, ys = np.nonzero(use[:, :, z])
        if xs.size == 0:
            continue
        px, py = xs * dx, ys * dy
        center = _fit_center(px, py) if xs.size >= min_slice_voxels else None
        if center is None:
            dropped += xs.size
            continue
        ox, oy = px - center[0], py - center[1]
        theta = np.degrees(np.arctan2(oy, ox))
        if reverse_angle:
            theta = -theta
        bins = np.floor(np.mod(theta, 360.0) / bin_width_deg).astype(np.int64) % nbins
        parts.append((xs, ys, np.full(xs.size, z), bins, np.hypot(ox, oy)))

    shape = (nz, nbins)
    if not parts:
        e = np.zeros(0, dtype=np.int64)
        return VoxelLayout(e, e, e, e, e.astype(float), e.astype(float), e.astype(float),
                           shape, 0, dropped)

    x, y, z, b, r = (np.concatenate(c) for c in zip(*parts))
    origin = _angle_origin(b, nbins)
    v = (b - origin) % nbins
    pixel = z * nbins + v
    # inner voxels first; ties in radius fall back to voxel index
    order = np.lexsort((x * use.shape[1] + y, r, pixel))
    x, y, z, pixel, r = x[order], y[order], z[order], pixel[order], r[order]
    starts = np.flatnonzero(np.concatenate([[True], pixel[1:] != pixel[:-1]]))
    sizes = np.diff(np.concatenate([starts, [pixel.size]]))
    n = np.repeat(sizes, sizes)
    rank = np.arange(pixel.size) - np.repeat(starts, sizes)
    deep = rank < (n + 1) // 2
    w_deep = np.where(n == 1, 0.5, deep.astype(float))
    w_sup = np.where(n == 1, 0.5, (~deep).astype(float))
    return VoxelLayout(x, y, z, pixel, w_deep, w_sup, r, shape, origin, dropped)


def project_to_plane(t2map, mask=None, spacing=None, bin_width_deg=1.0, laterality="right",
                     reverse_angle=False, min_slice_voxels=5):
    """Flatten a T2 map over ``mask`` into a :class:`FlattenedPlate`.

    Only voxels that are both in ``mask`` and carry a T2 value are projected.
    Thin or degenerate slices are dropped as in :func:`voxel_layout`.
    """
    if mask is not None:
        check_grid_compatibility(t2map, mask)
        use = np.asarray(getattr(mask, "values", mask), bool) & t2map.present
    else:
        use = t2map.present
    if not use.any():
        raise EmptyMask("no segmented voxels with a T2 value")
    if laterality not in ("left", "right"):
        raise ValueError("laterality must be 'left' or 'right'")
    dx, dy, _ = spacing or t2map.spacing_mm
    lay = voxel_layout(use, (dx, dy), bin_width_deg, reverse_angle, min_slice_voxels)
    shape = lay.shape
    size = shape[0] * shape[1]
    t2 = t2map.t2_ms[lay.x, lay.y, lay.z]

    counts = np.zeros(shape + (2,))
    sums = np.zeros(shape + (2,))
    for layer, w in enumerate((lay.w_deep, lay.w_sup)):
        counts[..., layer] = np.bincount(lay.pixel, w, minlength=size).reshape(shape)
        sums[..., layer] = np.bincount(lay.pixel, w * t2, minlength=size).reshape(shape)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / counts, np.nan)

    col = np.bincount(lay.pixel, minlength=size)
    thick = np.zeros(size)
    if lay.pixel.size:
        r_lo = np.full(size, np.inf)
        r_hi = np.full(size, -np.inf)
        np.minimum.at(r_lo, lay.pixel, lay.radius_mm)
        np.maximum.at(r_hi, lay.pixel, lay.radius_mm)
        hit = col > 0
        thick[hit] = r_hi[hit] - r_lo[hit] + 0.5 * (dx + dy)
    return FlattenedPlate(means, counts, thick.reshape(shape), col.reshape(shape).astype(np.int64),
                          float(bin_width_deg), laterality, lay.angle_origin_bin, lay.dropped_voxels)


def voxel_labels(layout, laterality="right"):
    """Atomic codes ``(deep_code, sup_code)`` for every voxel of a layout."""
    shape = layout.shape
    size = shape[0] * shape[1]
    counts = np.stack([np.bincount(layout.pixel, w, minlength=size).reshape(shape)
                       for w in (layout.w_deep, layout.w_sup)], axis=-1)
    col = np.bincount(layout.pixel, minlength=size).reshape(shape)
    dummy = FlattenedPlate(np.where(counts > 0, 0.0, np.nan), counts, np.zeros(shape), col,
                           360.0 / shape[1], laterality)
    labels = partition(dummy).reshape(size, 2)
    return labels[layout.pixel, 0], labels[layout.pixel, 1]


def partition(plate):
    """Atomic subregion code per pixel-layer (``-1`` where absent).

    Codes are ``depth * 6 + side * 3 + sector`` with depth (deep, superficial),
    side (lateral, medial) and sector (anterior, central, posterior).
    """
    occ = plate.occupied
    if not occ.any():
        raise EmptyPlate("plate has no occupied pixels")
    rows = np.flatnonzero(occ.any(axis=1))
    umin, umax = int(rows.min()), int(rows.max())
    n_u = umax - umin + 1
    u = np.arange(plate.shape[0])
    first_half = 2 * (u - umin) < n_u
    medial_first = plate.laterality == "left"
    side_of_row = np.where(first_half, int(medial_first), int(not medial_first))

    sector = np.full(plate.shape, -1)
    for s in (0, 1):
        rows_s = side_of_row == s
        cols = np.flatnonzero((occ & rows_s[:, None]).any(axis=0))
        if cols.size == 0:
            continue
        vmin, span = int(cols.min()), int(cols.max() - cols.min() + 1)
        terc = (np.arange(plate.shape[1]) - vmin) * 3 // span
        sector[rows_s, :] = np.clip(terc, 0, 2)[None, :]

    labels = np.full(plate.shape + (2,), -1, dtype=np.int64)
    side = np.broadcast_to(side_of_row[:, None], plate.shape)
    for d in (0, 1):
        present = plate.counts[..., d] > 0
        labels[..., d] = np.where(present, atomic_code(d, side, sector), -1)
    return labels


def region_mean(plate, labels, selector):
    """Voxel-count-weighted mean T2 over every pixel-layer the selector matches."""
    sel = np.isin(labels, selector.codes())
    w = plate.counts[sel]
    if w.size == 0 or w.sum() <= 0:
        raise EmptyRegion(f"region {selector.name} holds no cartilage")
    return float(np.dot(w, plate.t2[sel]) / w.sum())


@dataclass(frozen=True)
class RegionStat:
    mean_t2_ms: float
    voxel_count: float
    pixel_count: int


class RegionReport(dict):
    """Ordered mapping ``region name -> RegionStat``; empty regions hold NaN."""

    def to_csv(self, header_lines=()):
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["region", "mean_t2_ms", "voxel_count", "pixel_count"])
        for name, st in self.items():
            w.writerow([name, f"{st.mean_t2_ms:.6f}", f"{st.voxel_count:g}", st.pixel_count])
        return buf.getvalue()

    def means(self):
        return {k: v.mean_t2_ms for k, v in self.items()}

    def as_dict(self):
        return {k: {"mean_t2_ms": v.mean_t2_ms, "voxel_count": v.voxel_count,
                    "pixel_count": v.pixel_count} for k, v in self.items()}


def region_report(plate, labels=None, regions=REGIONS):
    labels = partition(plate) if labels is None else labels
    report = RegionReport()
    for sel in regions:
        hit = np.isin(labels, sel.codes())
        voxels = float(plate.counts[hit].sum())
        pixels = int(hit.any(axis=-1).sum())
        try:
            mean = region_mean(plate, labels, sel)
        except EmptyRegion:
            mean = float("nan")
        report[sel.name] = RegionStat(mean, voxels, pixels)
    return report


def read_region_csv(path_or_text):
    text = path_or_text
    if "\n" not in str(path_or_text):
        with open(path_or_text) as fh:
            text = fh.read()
    rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    report = RegionReport()
    for row in list(csv.DictReader(rows)):
        report[row["region"]] = RegionStat(float(row["mean_t2_ms"]), float(row["voxel_count"]),
                                           int(row["pixel_count"]))
    return report


def write_plate(plate, path):
    """Write the plate as a raw container plus a ``.json`` label sidecar."""
    arr = np.stack([plate.t2[..., 0], plate.t2[..., 1], plate.counts[..., 0], plate.counts[..., 1],
                    plate.thickness_mm, plate.column_count.astype(float)], axis=-1)
    rc = RawContainer(b"F", arr[:, :, None, :].astype(np.float32),
                      (float(plate.bin_width_deg), 1.0, 1.0))
    write_raw_container(rc, path)
    meta = {
        "bin_width_deg": plate.bin_width_deg,
        "laterality": plate.laterality,
        "angle_origin_bin": plate.angle_origin_bin,
        "dropped_voxels": plate.dropped_voxels,
        "label_codes": {sel.name: sel.codes()[0] for sel in ATOMIC_REGIONS},
        "labels": partition(plate).tolist() if plate.occupied.any() else [],
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh)


def read_plate(path):
    rc = read_raw_container(path)
    if rc.kind != b"F" or rc.array.shape[2:] != (1, 6):
        raise MalformedFile(f"{path}: not a flattened plate container")
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    a = rc.array[:, :, 0, :].astype(np.float64)
    plate = FlattenedPlate(a[..., 0:2], a[..., 2:4], a[..., 4], a[..., 5].astype(np.int64),
                           meta["bin_width_deg"], meta["laterality"], meta["angle_origin_bin"],
                           meta["dropped_voxels"])
    if plate.t2.shape[:2] != plate.column_count.shape:
        raise GridMismatch(plate.t2.shape, plate.column_count.shape)
    return plate
