"""Fit one noisy decay curve and compare with a coarse brute-force search."""

import numpy as np

from cartiq import DecayCurve, FitOptions, fit_voxel

te = np.arange(20.0, 71.0, 10.0)
rng = np.random.default_rng(17)
signal = 800 * np.exp(-te / 35) + 50 + rng.normal(0, 5, te.size)

for init in ("scan", "loglinear"):
    r = fit_voxel(DecayCurve(te, signal), FitOptions(init=init))
    print(f"{init:>9}: S0={r.s0:8.2f}  T2={r.t2_ms:6.2f} ms  c={r.c:6.2f}  rss={r.rss:8.3f}  "
          f"iterations={r.iterations}")

# coarse grid for comparison; c solved in closed form for each (S0, T2)
best = None
for t2 in np.arange(20, 60.01, 0.5):
    e = np.exp(-te / t2)
    for s0 in np.arange(600, 1000.01, 2):
        c = max(0.0, float(np.mean(signal - s0 * e)))
        rss = float(np.sum((signal - s0 * e - c) ** 2))
        if best is None or rss < best[0]:
            best = (rss, s0, t2, c)
print(f"     grid: S0={best[1]:8.2f}  T2={best[2]:6.2f} ms  c={best[3]:6.2f}  rss={best[0]:8.3f}")
