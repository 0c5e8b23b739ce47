"""Synthetic knee-cartilage phantoms with known T2.

The cartilage is an annular sector swept through a run of slices. T2 can be
uniform, set per region (any of the 27 report regions, more specific names
overriding broader ones), or set per one-pixel radial shell counted outward
from the inner radius. The generator labels voxels with the same layout
rules the projection uses, so its ground-truth table is directly comparable
with a region report.
"""

import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .anatomy import REGIONS, voxel_labels, voxel_layout
from .errors import InvalidSpec
from .volume import OAI_TE_MS, OAI_TR_MS, MultiEchoVolume, ProbabilityMap, SegmentationMask

_REGION_NAMES = {sel.name: sel for sel in REGIONS}


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple = (192, 192, 21)
    spacing_mm: tuple = (0.3125, 0.3125, 3.5)
    te_ms: tuple = OAI_TE_MS
    tr_ms: float = OAI_TR_MS
    center_px: tuple = None
    inner_radius_px: float = 40.0
    outer_radius_px: float = 50.0
    angle_start_deg: float = 0.0
    angle_span_deg: float = 360.0
    slices: tuple = (2, 19)
    t2_ms: float = 40.0
    region_t2: dict = field(default_factory=dict)
    shell_t2: tuple = ()
    s0: float = 1000.0
    c: float = 50.0
    background_s0: float = 0.0
    sigma: float = 0.0
    seed: int = 0
    laterality: str = "right"
    bin_width_deg: float = 1.0

    def __post_init__(self):
        for name in ("shape", "spacing_mm", "te_ms", "slices", "shell_t2"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.center_px is not None:
            object.__setattr__(self, "center_px", tuple(float(x) for x in self.center_px))
        object.__setattr__(self, "region_t2", dict(self.region_t2))
        self._validate()

    def _validate(self):
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise InvalidSpec(f"shape must be three positive sizes, got {self.shape}")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise InvalidSpec("spacing must be three positive values")
        te = np.asarray(self.te_ms, float)
        if te.size < 4 or np.any(np.diff(te) <= 0) or te[0] <= 0:
            raise InvalidSpec("need at least four positive, increasing echo times")
        if not 0 < self.inner_radius_px < self.outer_radius_px:
            raise InvalidSpec("radii must be positive and increasing")
        if not 0 < self.angle_span_deg <= 360:
            raise InvalidSpec("angular span must lie in (0, 360]")
        lo, hi = self.slices
        if not 0 <= lo < hi <= self.shape[2]:
            raise InvalidSpec(f"slice range {self.slices} outside 0..{self.shape[2]}")
        cx, cy = self.center
        if (cx - self.outer_radius_px < 0 or cy - self.outer_radius_px < 0
                or cx + self.outer_radius_px > self.shape[0] - 1
                or cy + self.outer_radius_px > self.shape[1] - 1):
            raise InvalidSpec("annulus does not fit inside the grid")
        if self.region_t2 and self.shell_t2:
            raise InvalidSpec("give either region_t2 or shell_t2, not both")
        unknown = set(self.region_t2) - set(_REGION_NAMES)
        if unknown:
            raise InvalidSpec(f"unknown regions {sorted(unknown)}")
        values = [self.t2_ms, *self.region_t2.values(), *self.shell_t2]
        if any(not 0 < float(v) <= 100 for v in values):
            raise InvalidSpec("assigned T2 values must lie in (0, 100] ms")
        if self.s0 <= 0 or self.c < 0 or self.background_s0 < 0 or self.sigma < 0:
            raise InvalidSpec("signal parameters must be non-negative (s0 positive)")
        if self.laterality not in ("left", "right"):
            raise InvalidSpec("laterality must be 'left' or 'right'")

    @property
    def center(self):
        if self.center_px is not None:
            return self.center_px
        return float(self.shape[0] // 2), float(self.shape[1] // 2)

    def to_dict(self):
        d = asdict(self)
        d["region_t2"] = dict(self.region_t2)
        return d

    @classmethod
    def from_dict(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise InvalidSpec(f"unknown phantom fields {sorted(extra)}")
        return cls(**data)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class PhantomTruth:
    """Ground truth: per-voxel T2 (NaN outside), radial shell index (-1
    outside) and count-weighted region means keyed by region name."""

    voxel_t2: np.ndarray
    shell: np.ndarray
    regions: dict

    def to_json(self):
        return json.dumps({"regions": self.regions}, indent=2, sort_keys=False)


class Phantom(NamedTuple):
    volume: MultiEchoVolume
    mask: SegmentationMask
    truth: PhantomTruth

    def probability_map(self):
        return ProbabilityMap(self.mask.values.astype(np.float32), self.mask.spacing_mm)


def _geometry(spec):
    nx, ny, nz = spec.shape
    cx, cy = spec.center
    xx, yy = np.meshgrid(np.arange(nx) - cx, np.arange(ny) - cy, indexing="ij")
    r = np.hypot(xx, yy)
    ang = np.mod(np.degrees(np.arctan2(yy, xx)) - spec.angle_start_deg, 360.0)
    ring = (r >= spec.inner_radius_px) & (r < spec.outer_radius_px) & (ang < spec.angle_span_deg)
    lo, hi = spec.slices
    in_slab = np.zeros(nz, bool)
    in_slab[lo:hi] = True
    mask = ring[:, :, None] & in_slab[None, None, :]
    shell = np.where(ring, np.floor(r - spec.inner_radius_px).astype(int), -1)
    shell = np.where(mask, shell[:, :, None], -1)
    return mask, shell


def generate_phantom(spec=None):
    spec = spec or PhantomSpec()
    mask, shell = _geometry(spec)
    layout = voxel_layout(mask, spec.spacing_mm[:2], spec.bin_width_deg)
    if layout.pixel.size == 0:
        raise InvalidSpec("phantom geometry leaves no projectable cartilage")
    deep_code, sup_code = voxel_labels(layout, spec.laterality)
    own = np.where(layout.w_deep >= layout.w_sup, deep_code, sup_code)

    t2 = np.full(mask.shape, np.nan)
    vt2 = np.full(own.size, float(spec.t2_ms))
    if spec.shell_t2:
        sh = shell[layout.x, layout.y, layout.z]
        idx = np.clip(sh, 0, len(spec.shell_t2) - 1)
        vt2 = np.asarray(spec.shell_t2, float)[idx]
    for sel in REGIONS:
        if sel.name in spec.region_t2:
            vt2 = np.where(np.isin(own, sel.codes()), float(spec.region_t2[sel.name]), vt2)
    t2[layout.x, layout.y, layout.z] = vt2
    if layout.dropped_voxels:
        # voxels outside the projection keep the base value
        t2[mask & np.isnan(t2)] = spec.t2_ms

    regions = {}
    for sel in REGIONS:
        codes = sel.codes()
        w = np.where(np.isin(deep_code, codes), layout.w_deep, 0.0) + \
            np.where(np.isin(sup_code, codes), layout.w_sup, 0.0)
        total = float(w.sum())
        mean = float(np.dot(w, vt2) / total) if total > 0 else float("nan")
        regions[sel.name] = {"mean_t2_ms": mean, "voxel_count": total}

    te = np.asarray(spec.te_ms, float)
    s0 = np.where(mask, spec.s0, spec.background_s0)
    with np.errstate(over="ignore", invalid="ignore"):
        decay = np.exp(-te[None, None, None, :] / np.where(mask, t2, 30.0)[..., None])
    signal = s0[..., None] * decay + np.where(mask, spec.c, 0.0)[..., None]
    if spec.sigma > 0:
        rng = np.random.default_rng(spec.seed)
        signal = signal + rng.normal(0.0, spec.sigma, signal.shape)
    signal = np.clip(signal, 0.0, None)

    volume = MultiEchoVolume(signal.astype(np.float32), spec.te_ms, spec.tr_ms, spec.spacing_mm)
    seg = SegmentationMask(mask, spec.spacing_mm)
    return Phantom(volume, seg, PhantomTruth(t2, shell, regions))
