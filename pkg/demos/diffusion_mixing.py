"""The limiting diffusion mixes at the rate of its spectral gap.

The Ferrari-Spohn diffusion has generator (sigma2/2) d^2 + (phi0'/phi0) d on
(0, inf).  It is reversible with respect to phi0**2 and its semigroup decays
like exp(-(e1 - e0) t) off the ground state.  We simulate one long path by
Euler-Maruyama and read the decay rate off the empirical autocovariance.
"""
import math

import numpy as np

from tiltedwalk.continuum import fs_model, simulate_fs, sl_solve

spectrum = sl_solve(1.0, lambda r: r, 30.0, 8000, 4, q_tag="linear")
model = fs_model(spectrum)
gap = spectrum.eigenvalues[1] - spectrum.eigenvalues[0]

path = simulate_fs(model, 1000.0, 1e-3, seed=0)
x = path.values[::10]
y = x - x.mean()
print(f"levels e0..e3 = {np.round(spectrum.eigenvalues, 5)}")
print(f"spectral gap e1 - e0 = {gap:.4f}")
for lag in (0.25, 0.5, 1.0):
    k = int(round(lag / 0.01))
    c0, ck = float(np.mean(y * y)), float(np.mean(y[:-k] * y[k:]))
    print(f"lag {lag:4.2f}: autocorrelation {ck / c0:.4f}, "
          f"exp(-gap*lag) = {math.exp(-gap * lag):.4f}")
print("(the first excited mode dominates once higher modes have died out)")
