"""Voxel-grid data types and file ingestion.

Four grid-bearing types share one convention: arrays are indexed
``[x, y, z]`` (plus a trailing echo/channel axis where relevant), where
``z`` runs across sagittal slices. All of them are frozen after
construction.

The native on-disk format is a small little-endian container::

    magic      6s   b"CARTIQ"
    version    H    1
    kind       c    b"V" volume, b"M" mask, b"P" probability map,
                    b"T" T2 map, b"F" flattened plate
    dims       4I   nx, ny, nz, channels
    spacing    3d   mm
    tr_ms      d    NaN when not applicable
    threshold  d    NaN for binary masks, else the binarisation cut
    n_te       I
    te_ms      n_te * d
    payload    nx*ny*nz*channels float32, x fastest, channel slowest

Conventional extensions are ``.mev`` (volumes), ``.msk`` (masks) and
``.pmap`` (probability maps). NIfTI-1 files (``.nii``/``.nii.gz``) are read
through nibabel, with acquisition metadata taken from a JSON sidecar.
"""

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    GridMismatch,
    InvalidGeometry,
    MalformedFile,
    MissingMetadata,
    NonBinaryValues,
)

MAGIC = b"CARTIQ"
VERSION = 1
_HEADER = struct.Struct("<6sHc4I3dddI")

# OAI MESE acquisition parameters, used as defaults by the phantom generator
OAI_TE_MS = (10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0)
OAI_TR_MS = 2700.0
OAI_DIMS = (384, 269, 21)
OAI_SPACING_MM = (0.313, 0.446, 3.5)


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


def _check_dims(dims):
    if len(dims) != 3 or any(int(d) <= 0 for d in dims):
        raise InvalidGeometry(f"dims must be three positive counts, got {tuple(dims)}")


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise InvalidGeometry(f"spacing must be three positive lengths, got {spacing}")
    return spacing


def _check_te(te_ms):
    if te_ms is None or len(te_ms) == 0:
        raise MissingMetadata("no echo times (te_ms) available")
    te = tuple(float(t) for t in te_ms)
    if not all(np.isfinite(t) and t > 0 for t in te):
        raise MissingMetadata(f"echo times must be positive, got {te}")
    if any(b <= a for a, b in zip(te, te[1:])):
        raise MissingMetadata(f"echo times must be strictly increasing, got {te}")
    return te


@dataclass(frozen=True)
class MultiEchoVolume:
    """Multi-echo spin-echo signal on a 3D grid.

    ``data`` has shape ``(nx, ny, nz, E)`` and is stored as float32.
    """

    data: np.ndarray
    te_ms: tuple
    tr_ms: float = OAI_TR_MS
    spacing_mm: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4:
            raise InvalidGeometry(f"volume data must be 4D (nx, ny, nz, E), got shape {data.shape}")
        _check_dims(data.shape[:3])
        te = _check_te(self.te_ms)
        if len(te) != data.shape[3]:
            raise MissingMetadata(f"{len(te)} echo times for {data.shape[3]} echoes")
        if len(te) < 2:
            raise InvalidGeometry("a multi-echo volume needs at least two echoes")
        data = _frozen(data, np.float32)
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise MalformedFile("signal values must be finite and non-negative")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "te_ms", te)
        object.__setattr__(self, "tr_ms", float(self.tr_ms))
        object.__setattr__(self, "spacing_mm", _check_spacing(self.spacing_mm))

    @property
    def dims(self):
        return tuple(int(d) for d in self.data.shape[:3])

    @property
    def echoes(self):
        return int(self.data.shape[3])


@dataclass(frozen=True)
class ProbabilityMap:
    """Per-voxel cartilage probability in [0, 1], stored as float32."""

    values: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        values = _frozen(self.values, np.float32)
        if values.ndim != 3:
            raise InvalidGeometry(f"probability map must be 3D, got shape {values.shape}")
        _check_dims(values.shape)
        if not np.all(np.isfinite(values)) or values.min() < 0 or values.max() > 1:
            raise MalformedFile("probabilities must be finite and lie in [0, 1]")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing_mm", _check_spacing(self.spacing_mm))

    @property
    def dims(self):
        return tuple(int(d) for d in self.values.shape)


@dataclass(frozen=True)
class SegmentationMask:
    values: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        values = _frozen(self.values, bool)
        if values.ndim != 3:
            raise InvalidGeometry(f"mask must be 3D, got shape {values.shape}")
        _check_dims(values.shape)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing_mm", _check_spacing(self.spacing_mm))

    @property
    def dims(self):
        return tuple(int(d) for d in self.values.shape)

    @property
    def count(self):
        return int(self.values.sum())


@dataclass(frozen=True)
class T2Map:
    """Fitted relaxation parameters; absent voxels hold NaN in all three maps."""

    t2_ms: np.ndarray
    s0: np.ndarray = None
    c: np.ndarray = None
    spacing_mm: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        t2 = _frozen(self.t2_ms, np.float64)
        if t2.ndim != 3:
            raise InvalidGeometry(f"T2 map must be 3D, got shape {t2.shape}")
        _check_dims(t2.shape)
        present = ~np.isnan(t2)
        if np.any(~np.isfinite(t2[present])) or np.any(t2[present] <= 0):
            raise MalformedFile("present T2 values must be finite and positive")
        s0 = np.full(t2.shape, np.nan) if self.s0 is None else self.s0
        c = np.full(t2.shape, np.nan) if self.c is None else self.c
        object.__setattr__(self, "t2_ms", t2)
        object.__setattr__(self, "s0", _frozen(s0, np.float64))
        object.__setattr__(self, "c", _frozen(c, np.float64))
        object.__setattr__(self, "spacing_mm", _check_spacing(self.spacing_mm))
        if self.s0.shape != t2.shape or self.c.shape != t2.shape:
            raise GridMismatch(self.s0.shape, t2.shape)

    @property
    def dims(self):
        return tuple(int(d) for d in self.t2_ms.shape)

    @property
    def present(self):
        return ~np.isnan(self.t2_ms)

    @property
    def count(self):
        return int(self.present.sum())

    def restrict(self, mask):
        """Return a copy with every voxel outside ``mask`` made absent."""
        check_grid_compatibility(self, mask)
        keep = mask.values if isinstance(mask, SegmentationMask) else np.asarray(mask, bool)
        return T2Map(
            np.where(keep, self.t2_ms, np.nan),
            np.where(keep, self.s0, np.nan),
            np.where(keep, self.c, np.nan),
            self.spacing_mm,
        )


def grid_dims(obj):
    if hasattr(obj, "dims"):
        return tuple(obj.dims)
    return tuple(np.shape(obj)[:3])


def check_grid_compatibility(a, b):
    """Raise :class:`GridMismatch` unless ``a`` and ``b`` share voxel dims."""
    da, db = grid_dims(a), grid_dims(b)
    if da != db:
        raise GridMismatch(da, db)


# ---------------------------------------------------------------------------
# raw container


@dataclass
class RawContainer:
    kind: bytes
    array: np.ndarray  # (nx, ny, nz, channels) float32
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    tr_ms: float = float("nan")
    threshold: float = float("nan")
    te_ms: tuple = field(default_factory=tuple)


def encode_raw_container(container):
    arr = np.asarray(container.array, dtype="<f4")
    if arr.ndim == 3:
        arr = arr[..., None]
    nx, ny, nz, ch = arr.shape
    te = tuple(float(t) for t in container.te_ms)
    header = _HEADER.pack(
        MAGIC, VERSION, container.kind, nx, ny, nz, ch,
        *(float(s) for s in container.spacing_mm),
        float(container.tr_ms), float(container.threshold), len(te),
    )
    return header + struct.pack(f"<{len(te)}d", *te) + arr.tobytes(order="F")


def decode_raw_container(buf):
    if len(buf) < _HEADER.size:
        raise MalformedFile("file shorter than the container header")
    magic, version, kind, nx, ny, nz, ch, dx, dy, dz, tr, thr, n_te = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise MalformedFile(f"bad magic {magic!r}")
    if version != VERSION:
        raise MalformedFile(f"unsupported container version {version}")
    if min(nx, ny, nz, ch) <= 0:
        raise InvalidGeometry(f"nonpositive dims {(nx, ny, nz, ch)}")
    offset = _HEADER.size
    if len(buf) < offset + 8 * n_te:
        raise MalformedFile("truncated echo-time table")
    te = struct.unpack_from(f"<{n_te}d", buf, offset)
    offset += 8 * n_te
    n = nx * ny * nz * ch
    if len(buf) - offset != 4 * n:
        raise MalformedFile(f"payload holds {len(buf) - offset} bytes, expected {4 * n}")
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=offset)
    arr = arr.reshape((nx, ny, nz, ch), order="F").astype(np.float32)
    return RawContainer(kind, arr, (dx, dy, dz), tr, thr, te)


def read_raw_container(path):
    with open(path, "rb") as fh:
        return decode_raw_container(fh.read())


def _container_for(obj):
    if isinstance(obj, MultiEchoVolume):
        return RawContainer(b"V", obj.data, obj.spacing_mm, obj.tr_ms, float("nan"), obj.te_ms)
    if isinstance(obj, SegmentationMask):
        return RawContainer(b"M", obj.values.astype(np.float32), obj.spacing_mm)
    if isinstance(obj, ProbabilityMap):
        return RawContainer(b"P", obj.values, obj.spacing_mm)
    if isinstance(obj, T2Map):
        arr = np.stack([obj.t2_ms, obj.s0, obj.c], axis=-1)
        return RawContainer(b"T", arr, obj.spacing_mm)
    if isinstance(obj, RawContainer):
        return obj
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_raw_container(obj, path):
    """Write a volume, mask, probability map or T2 map to ``path``."""
    payload = encode_raw_container(_container_for(obj))
    with open(path, "wb") as fh:
        fh.write(payload)


# ---------------------------------------------------------------------------
# loaders


def _infer_format(path):
    p = str(path).lower()
    if p.endswith(".nii") or p.endswith(".nii.gz"):
        return "nifti"
    return "raw"


def _default_sidecar(path):
    p = str(path)
    for ext in (".nii.gz", ".nii"):
        if p.lower().endswith(ext):
            return p[: -len(ext)] + ".json"
    return os.path.splitext(p)[0] + ".json"


def read_sidecar(path):
    try:
        with open(path) as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    if not isinstance(meta, dict):
        raise MalformedFile(f"{path}: sidecar must be a JSON object")
    return meta


def _load_nifti(path):
    import nibabel as nib

    try:
        img = nib.load(str(path))
        data = np.asanyarray(img.dataobj)
    except Exception as exc:  # nibabel raises a zoo of types
        raise MalformedFile(f"{path}: {exc}") from exc
    zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
    return data, zooms


def load_multi_echo_volume(path, format=None, sidecar=None):
    """Load a :class:`MultiEchoVolume`.

    Parameters
    ----------
    path : str or list of str
        A raw container, a 4D NIfTI file, or a list of 3D NIfTI files (one per
        echo, in echo order).
    format : {"raw", "nifti"}, optional
        Inferred from the extension when omitted.
    sidecar : str, optional
        JSON file with ``te_ms`` and optionally ``tr_ms``/``spacing_mm``.
        Sidecar values override embedded ones. For NIfTI input the sidecar
        defaults to the image path with a ``.json`` extension.
    """
    paths = list(path) if isinstance(path, (list, tuple)) else [path]
    fmt = format or _infer_format(paths[0])
    meta = {}
    if sidecar is None and fmt == "nifti":
        candidate = _default_sidecar(paths[0])
        if os.path.exists(candidate):
            sidecar = candidate
    if sidecar is not None:
        meta = read_sidecar(sidecar)

    if fmt == "raw":
        if len(paths) != 1:
            raise MalformedFile("raw containers hold all echoes in one file")
        rc = read_raw_container(paths[0])
        if rc.kind != b"V":
            raise MalformedFile(f"{paths[0]}: expected a volume container, found kind {rc.kind!r}")
        data, spacing, te, tr = rc.array, rc.spacing_mm, rc.te_ms, rc.tr_ms
    elif fmt == "nifti":
        if len(paths) == 1:
            data, spacing = _load_nifti(paths[0])
            if data.ndim != 4:
                raise InvalidGeometry(f"{paths[0]}: expected a 4D image, got {data.ndim}D")
        else:
            parts = [_load_nifti(p) for p in paths]
            shapes = {p[0].shape for p in parts}
            if len(shapes) != 1 or parts[0][0].ndim != 3:
                raise InvalidGeometry("per-echo NIfTI files must be 3D with identical shapes")
            data = np.stack([p[0] for p in parts], axis=-1)
            spacing = parts[0][1]
        te, tr = (), float("nan")
    else:
        raise MalformedFile(f"unknown format {fmt!r}")

    te = meta.get("te_ms", te)
    tr = meta.get("tr_ms", tr)
    spacing = meta.get("spacing_mm", spacing)
    if te is None or len(te) == 0:
        raise MissingMetadata(f"{paths[0]}: no echo times embedded or in a sidecar")
    tr = float("nan") if tr is None else tr
    return MultiEchoVolume(np.asarray(data, dtype=np.float32), tuple(te), tr, tuple(spacing))


def _load_grid(path, format, kind):
    fmt = format or _infer_format(path)
    if fmt == "raw":
        rc = read_raw_container(path)
        if rc.kind != kind:
            raise MalformedFile(f"{path}: expected kind {kind!r}, found {rc.kind!r}")
        if rc.array.shape[3] != 1:
            raise InvalidGeometry(f"{path}: expected a single channel")
        return rc.array[..., 0], rc.spacing_mm, rc.threshold
    if fmt == "nifti":
        data, spacing = _load_nifti(path)
        if data.ndim == 4 and data.shape[3] == 1:
            data = data[..., 0]
        if data.ndim != 3:
            raise InvalidGeometry(f"{path}: expected a 3D image")
        return np.asarray(data, dtype=np.float64), spacing, float("nan")
    raise MalformedFile(f"unknown format {fmt!r}")


def load_mask(path, format=None):
    """Load a :class:`SegmentationMask`.

    A container whose header declares a threshold is binarised with
    ``value >= threshold``; otherwise every value must be exactly 0 or 1.
    """
    values, spacing, threshold = _load_grid(path, format, b"M")
    if not np.isnan(threshold):
        return SegmentationMask(values >= threshold, spacing)
    if not np.all((values == 0) | (values == 1)):
        bad = np.unique(values[(values != 0) & (values != 1)])[:5]
        raise NonBinaryValues(f"{path}: non-binary values such as {bad.tolist()}")
    return SegmentationMask(values == 1, spacing)


def load_probability_map(path, format=None):
    values, spacing, _ = _load_grid(path, format, b"P")
    return ProbabilityMap(values, spacing)


def load_t2_map(path):
    rc = read_raw_container(path)
    if rc.kind != b"T" or rc.array.shape[3] != 3:
        raise MalformedFile(f"{path}: not a T2 map container")
    arr = rc.array.astype(np.float64)
    return T2Map(arr[..., 0], arr[..., 1], arr[..., 2], rc.spacing_mm)


def save_nifti(array, path, spacing_mm=(1.0, 1.0, 1.0)):
    """Write ``array`` as NIfTI-1 with a diagonal affine built from the spacing."""
    import nibabel as nib

    affine = np.diag(list(spacing_mm) + [1.0])
    nib.save(nib.Nifti1Image(np.asarray(array), affine), str(path))
