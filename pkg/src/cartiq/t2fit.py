"""Voxelwise noise-corrected monoexponential T2 fitting.

The default signal model is ``S(te) = S0 * exp(-te / T2) + c`` with
``S0 >= 0``, ``T2`` inside ``FitOptions.t2_bounds`` and ``c >= 0``. A Rician
noise-floor variant ``S(te) = sqrt((S0 * exp(-te / T2))**2 + c**2)`` is
available through ``FitOptions(model="rician")``.

Curves are fitted in batches by a bounded Levenberg-Marquardt iteration with
an analytic Jacobian. All reductions over echoes are written out as explicit
loops over per-echo arrays, so the arithmetic applied to one voxel never
depends on which other voxels share its batch: fitting a voxel alone, in a
chunk, or on another thread gives bit-identical results.
"""

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientPoints, InvalidRange, TooFewEchoes
from .volume import SegmentationMask, T2Map, check_grid_compatibility

MODELS = ("offset", "rician")
INITS = ("scan", "loglinear")

_LAMBDA0 = 1e-3
_LAMBDA_MAX = 1e16
_SCAN_POINTS = 64
# fits whose decay across the echo train is below this fraction of the
# largest signal carry no T2 information
_MIN_DECAY_FRACTION = 1e-6


@dataclass(frozen=True)
class FitOptions:
    max_iterations: int = 200
    tolerance: float = 1e-8
    t2_bounds: tuple = (0.1, 1000.0)
    init: str = "scan"
    model: str = "offset"
    chunk_size: int = 8192

    def __post_init__(self):
        lo, hi = self.t2_bounds
        if not (0 < lo < hi):
            raise InvalidRange(f"T2 bounds must satisfy 0 < lo < hi, got {self.t2_bounds}")
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")
        if self.max_iterations < 1 or self.tolerance <= 0 or self.chunk_size < 1:
            raise ValueError("max_iterations, tolerance and chunk_size must be positive")


@dataclass(frozen=True)
class DecayCurve:
    te_ms: tuple
    signal: tuple

    def __post_init__(self):
        te = tuple(float(t) for t in self.te_ms)
        sig = tuple(float(s) for s in self.signal)
        if len(te) != len(sig):
            raise ValueError("te_ms and signal differ in length")
        if len(te) < 3:
            raise InsufficientPoints(f"need at least 3 echoes for a 3-parameter fit, got {len(te)}")
        if any(b <= a for a, b in zip(te, te[1:])):
            raise ValueError("te_ms must be strictly increasing")
        object.__setattr__(self, "te_ms", te)
        object.__setattr__(self, "signal", sig)


@dataclass(frozen=True)
class FitResult:
    s0: float
    t2_ms: float
    c: float
    rss: float
    converged: bool
    iterations: int


@dataclass(frozen=True)
class FitSummary:
    candidates: int
    converged: int
    unfit: int
    runtime_s: float

    def as_dict(self):
        return {
            "voxels_fitted": self.candidates,
            "converged": self.converged,
            "unfit": self.unfit,
            "runtime_s": self.runtime_s,
        }


def _evaluate(te, s0, t2, c, model, jacobian):
    """Model values (and Jacobian columns) as lists of per-echo arrays."""
    inv = 1.0 / t2
    pred, j0, j1, j2 = [], [], [], []
    for t in te:
        e = np.exp((-t) * inv)
        a = s0 * e
        if model == "offset":
            pred.append(a + c)
            if jacobian:
                j0.append(e)
                j1.append(a * (t * inv * inv))
                j2.append(np.ones_like(e))
        else:
            f = np.sqrt(a * a + c * c)
            pred.append(f)
            if jacobian:
                fs = np.maximum(f, 1e-300)
                j0.append(a * e / fs)
                j1.append(a * a * (t * inv * inv) / fs)
                j2.append(c / fs)
    return pred, (j0, j1, j2)


def _rss(cols, pred):
    out = None
    for y, f in zip(cols, pred):
        d = y - f
        out = d * d if out is None else out + d * d
    return out


def _dot(u, v):
    out = u[0] * v[0]
    for a, b in zip(u[1:], v[1:]):
        out = out + a * b
    return out


def _solve3(a00, a01, a02, a11, a12, a22, g0, g1, g2):
    c00 = a11 * a22 - a12 * a12
    c01 = a02 * a12 - a01 * a22
    c02 = a01 * a12 - a02 * a11
    c11 = a00 * a22 - a02 * a02
    c12 = a01 * a02 - a00 * a12
    c22 = a00 * a11 - a01 * a01
    det = a00 * c00 + a01 * c01 + a02 * c02
    with np.errstate(divide="ignore", invalid="ignore"):
        d0 = (c00 * g0 + c01 * g1 + c02 * g2) / det
        d1 = (c01 * g0 + c11 * g1 + c12 * g2) / det
        d2 = (c02 * g0 + c12 * g1 + c22 * g2) / det
    ok = np.isfinite(d0) & np.isfinite(d1) & np.isfinite(d2) & (det > 0)
    return d0, d1, d2, ok


def _fix(fixed, a_ii, others, g):
    # freeze one parameter: unit diagonal, zero coupling, zero rhs
    return (np.where(fixed, 1.0, a_ii),
            [np.where(fixed, 0.0, x) for x in others],
            np.where(fixed, 0.0, g))


def _init_scan(te, cols, t2_bounds):
    """Best (S0, T2, c) over a log-spaced T2 grid with S0, c solved linearly."""
    m = float(len(te))
    sy = cols[0].copy()
    for y in cols[1:]:
        sy = sy + y
    syy = _dot(cols, cols)
    lo, hi = t2_bounds
    best = None
    for t2g in np.geomspace(lo, hi, _SCAN_POINTS):
        e = [float(np.exp(-t / t2g)) for t in te]
        see = sum(x * x for x in e)
        se = sum(e)
        sye = cols[0] * e[0]
        for y, x in zip(cols[1:], e[1:]):
            sye = sye + y * x
        det = see * m - se * se
        if det <= 1e-300 * max(see * m, 1e-300):
            s0 = np.zeros_like(sy)
            c = np.maximum(sy / m, 0.0)
        else:
            s0 = (m * sye - se * sy) / det
            c = (see * sy - se * sye) / det
            neg_c = c < 0
            s0 = np.where(neg_c, np.maximum(sye / see, 0.0) if see > 0 else 0.0, s0)
            c = np.where(neg_c, 0.0, c)
            neg_s = s0 < 0
            c = np.where(neg_s, np.maximum(sy / m, 0.0), c)
            s0 = np.where(neg_s, 0.0, s0)
        rss = syy - 2 * s0 * sye - 2 * c * sy + s0 * s0 * see + 2 * s0 * c * se + m * c * c
        if best is None:
            best = [s0, np.full_like(sy, t2g), c, rss]
        else:
            better = rss < best[3]
            best[0] = np.where(better, s0, best[0])
            best[1] = np.where(better, t2g, best[1])
            best[2] = np.where(better, c, best[2])
            best[3] = np.where(better, rss, best[3])
    return best[0], best[1], best[2]


def _init_loglinear(te, cols, t2_bounds):
    """Two-point log-linear estimate across the first-to-last echo span."""
    lo, hi = t2_bounds
    ymin = cols[0].copy()
    for y in cols[1:]:
        ymin = np.minimum(ymin, y)
    c = 0.5 * np.maximum(ymin, 0.0)
    first, last = cols[0] - c, cols[-1] - c
    with np.errstate(divide="ignore", invalid="ignore"):
        t2 = (te[-1] - te[0]) / np.log(first / last)
    t2 = np.where(np.isfinite(t2) & (t2 > 0), t2, hi)
    t2 = np.clip(t2, lo, hi)
    s0 = np.maximum(first, 0.0) * np.exp(te[0] / t2)
    return s0, t2, c


def fit_curves(te_ms, signals, opts=None):
    """Fit every row of ``signals`` (shape ``(N, M)``) sampled at ``te_ms``.

    Returns a dict of length-``N`` arrays: ``s0``, ``t2_ms``, ``c``, ``rss``,
    ``converged`` and ``iterations``.
    """
    opts = opts or FitOptions()
    te = [float(t) for t in te_ms]
    signals = np.asarray(signals, dtype=np.float64)
    if signals.ndim != 2 or signals.shape[1] != len(te):
        raise ValueError(f"signals must have shape (N, {len(te)}), got {signals.shape}")
    if len(te) < 3:
        raise InsufficientPoints(f"need at least 3 echoes, got {len(te)}")
    n = signals.shape[0]
    cols = [np.ascontiguousarray(signals[:, k]) for k in range(len(te))]
    lo, hi = (float(b) for b in opts.t2_bounds)

    init = _init_scan if opts.init == "scan" else _init_loglinear
    s0, t2, c = init(te, cols, (lo, hi))
    s0 = np.maximum(s0, 0.0)
    t2 = np.clip(t2, lo, hi)
    c = np.maximum(c, 0.0)

    scale = np.abs(cols[0])
    for y in cols[1:]:
        scale = np.maximum(scale, np.abs(y))
    scale = np.where(scale > 0, scale, 1.0)

    pred, _ = _evaluate(te, s0, t2, c, opts.model, False)
    rss = _rss(cols, pred)
    lam = np.full(n, _LAMBDA0)
    converged = np.zeros(n, dtype=bool)
    iterations = np.zeros(n, dtype=np.int64)
    active = np.arange(n)

    for _ in range(opts.max_iterations):
        if active.size == 0:
            break
        y = [col[active] for col in cols]
        P0, P1, P2, R, L, S = s0[active], t2[active], c[active], rss[active], lam[active], scale[active]
        pred, (j0, j1, j2) = _evaluate(te, P0, P1, P2, opts.model, True)
        res = [a - b for a, b in zip(y, pred)]
        a00, a01, a02 = _dot(j0, j0), _dot(j0, j1), _dot(j0, j2)
        a11, a12, a22 = _dot(j1, j1), _dot(j1, j2), _dot(j2, j2)
        g0, g1, g2 = _dot(j0, res), _dot(j1, res), _dot(j2, res)
        # Marquardt scaling of the damping term
        d00 = a00 + L * np.where(a00 > 0, a00, 1.0)
        d11 = a11 + L * np.where(a11 > 0, a11, 1.0)
        d22 = a22 + L * np.where(a22 > 0, a22, 1.0)
        s_0, s_1, s_2, ok = _solve3(d00, a01, a02, d11, a12, d22, g0, g1, g2)

        # parameters pinned at a bound and pushed outward are frozen, then resolved
        f0 = (P0 <= 0.0) & (s_0 < 0)
        f1 = ((P1 <= lo) & (s_1 < 0)) | ((P1 >= hi) & (s_1 > 0))
        f2 = (P2 <= 0.0) & (s_2 < 0)
        if np.any(f0 | f1 | f2):
            b00, (b01, b02), h0 = _fix(f0, d00, [a01, a02], g0)
            b11, (b01, b12), h1 = _fix(f1, d11, [b01, a12], g1)
            b22, (b02, b12), h2 = _fix(f2, d22, [b02, b12], g2)
            r_0, r_1, r_2, r_ok = _solve3(b00, b01, b02, b11, b12, b22, h0, h1, h2)
            redo = f0 | f1 | f2
            s_0 = np.where(redo, r_0, s_0)
            s_1 = np.where(redo, r_1, s_1)
            s_2 = np.where(redo, r_2, s_2)
            ok = np.where(redo, r_ok, ok)
        s_0 = np.where(ok, s_0, 0.0)
        s_1 = np.where(ok, s_1, 0.0)
        s_2 = np.where(ok, s_2, 0.0)

        T0 = np.maximum(P0 + s_0, 0.0)
        T1 = np.clip(P1 + s_1, lo, hi)
        T2_ = np.maximum(P2 + s_2, 0.0)
        trial, _ = _evaluate(te, T0, T1, T2_, opts.model, False)
        R_new = _rss(y, trial)
        accept = ok & np.isfinite(R_new) & (R_new < R)

        step = np.maximum(
            np.abs(T0 - P0) / (np.abs(P0) + 1e-6 * S),
            np.maximum(np.abs(T1 - P1) / P1, np.abs(T2_ - P2) / (np.abs(P2) + 1e-6 * S)),
        )
        small = ok & (step < opts.tolerance)

        s0[active] = np.where(accept, T0, P0)
        t2[active] = np.where(accept, T1, P1)
        c[active] = np.where(accept, T2_, P2)
        rss[active] = np.where(accept, R_new, R)
        L = np.where(accept, np.maximum(L * 0.1, 1e-12), L * 10.0)
        lam[active] = L
        iterations[active] += 1

        done = small | (L > _LAMBDA_MAX)
        converged[active[done]] = small[done]
        active = active[~done]

    decay = s0 * (np.exp(-te[0] / t2) - np.exp(-te[-1] / t2))
    informative = decay > _MIN_DECAY_FRACTION * scale
    converged &= informative & np.isfinite(t2) & (t2 > 0)
    return {
        "s0": s0,
        "t2_ms": t2,
        "c": c,
        "rss": rss,
        "converged": converged,
        "iterations": iterations,
    }


def fit_voxel(curve, opts=None):
    """Fit a single :class:`DecayCurve`.

    Non-convergence is reported through ``FitResult.converged`` rather than
    raised; callers treat such voxels as unfit.
    """
    if not isinstance(curve, DecayCurve):
        curve = DecayCurve(*curve)
    out = fit_curves(curve.te_ms, np.asarray([curve.signal]), opts)
    return FitResult(
        s0=float(out["s0"][0]),
        t2_ms=float(out["t2_ms"][0]),
        c=float(out["c"][0]),
        rss=float(out["rss"][0]),
        converged=bool(out["converged"][0]),
        iterations=int(out["iterations"][0]),
    )


def default_threads():
    try:
        return max(1, int(os.environ.get("CARTIQ_THREADS", "1")))
    except ValueError:
        return 1


def fit_candidates(volume, candidates, opts=None, threads=None):
    """Fit T2 on candidate voxels only; returns ``(T2Map, FitSummary)``.

    The first echo is dropped from every curve. Work is split into chunks of
    ``opts.chunk_size`` voxels which may run on ``threads`` worker threads
    (default: ``$CARTIQ_THREADS`` or 1); results do not depend on either.
    """
    opts = opts or FitOptions()
    check_grid_compatibility(volume, candidates)
    if volume.echoes < 4:
        raise TooFewEchoes(f"need at least 4 echoes (3 after dropping the first), got {volume.echoes}")
    threads = threads or default_threads()
    start = time.perf_counter()

    mask = candidates.values if isinstance(candidates, SegmentationMask) else np.asarray(candidates, bool)
    idx = np.flatnonzero(mask)
    te = volume.te_ms[1:]
    flat = volume.data.reshape(-1, volume.echoes)
    n = idx.size
    t2 = np.full(n, np.nan)
    s0 = np.full(n, np.nan)
    c = np.full(n, np.nan)
    conv = np.zeros(n, dtype=bool)

    bounds = [(i, min(i + opts.chunk_size, n)) for i in range(0, n, opts.chunk_size)]

    def run(span):
        a, b = span
        return span, fit_curves(te, flat[idx[a:b], 1:], opts)

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, bounds))
    else:
        results = [run(span) for span in bounds]
    for (a, b), out in results:
        ok = out["converged"]
        conv[a:b] = ok
        t2[a:b] = np.where(ok, out["t2_ms"], np.nan)
        s0[a:b] = np.where(ok, out["s0"], np.nan)
        c[a:b] = np.where(ok, out["c"], np.nan)

    shape = volume.dims
    maps = []
    for vals in (t2, s0, c):
        full = np.full(int(np.prod(shape)), np.nan)
        full[idx] = vals
        maps.append(full.reshape(shape))
    summary = FitSummary(int(n), int(conv.sum()), int(n - conv.sum()), time.perf_counter() - start)
    return T2Map(maps[0], maps[1], maps[2], volume.spacing_mm), summary


def compute_t2_map(volume, candidates, opts=None, threads=None):
    """T2 map present exactly on candidate voxels whose fit converged."""
    return fit_candidates(volume, candidates, opts, threads)[0]


def filter_physiological(t2map, lo=0.0, hi=100.0):
    """Keep T2 values in ``(lo, hi]``; returns ``(T2Map, SegmentationMask)``."""
    if not lo < hi:
        raise InvalidRange(f"lo must be below hi, got ({lo}, {hi})")
    keep = t2map.present & (t2map.t2_ms > lo) & (t2map.t2_ms <= hi)
    mask = SegmentationMask(keep, t2map.spacing_mm)
    return t2map.restrict(mask), mask
