"""How the lattice ground state approaches the Airy profile.

For the lazy nearest-neighbour walk (variance 1/2) under the linear tilt
V(x) = lam * x, the natural height scale is H = lam**(-1/3).  Below we solve
the tilted transfer operator for shrinking lam, rescale heights by H, and
watch both the eigenvalue gap e and the eigenfunction approach the
continuum ground state Ai(chi*r - omega1).
"""
import numpy as np
from scipy.special import ai_zeros

from tiltedwalk.continuum import airy_ground_state
from tiltedwalk.harness import grid_project
from tiltedwalk.model import make_kernel, make_potential
from tiltedwalk.spectral import compute_spectrum

kernel = make_kernel({"kind": "lazy-nn", "a": 0.25})
linear = make_potential("linear")
airy = airy_ground_state(kernel.sigma2)

print(f"continuum ground level e0 = {airy.e0:.6f}")
print(f"{'lambda':>8} {'H':>8} {'M':>6} {'e_lambda':>10} {'|e-e0|':>9} {'L2(phi)':>9}")
for lam in (1e-2, 1e-3, 1e-4, 1e-5):
    spec = compute_spectrum(kernel, linear, lam)
    # compare against cell averages of the continuum profile, not point values
    target = grid_project(airy.phi0, spec.h, spec.M)
    dist = np.sqrt(spec.h * np.sum((spec.phi - target) ** 2))
    print(f"{lam:8.0e} {spec.H:8.2f} {spec.M:6d} {spec.e:10.6f} "
          f"{abs(spec.e - airy.e0):9.2e} {dist:9.4f}")

# the profile itself at the smallest lam: peak position and height
r_peak = spec.r[np.argmax(spec.phi)]
# phi0 peaks where Ai' vanishes: chi*r - omega1 = a'_1 < 0
r_mode = (airy.omega1 + ai_zeros(1)[1][0]) / airy.chi
print(f"\nlattice peak at r = {r_peak:.3f}, continuum mode at r = {r_mode:.3f}")
