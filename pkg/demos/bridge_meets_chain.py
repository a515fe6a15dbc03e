"""A long tilted bridge looks like the stationary ground-state chain.

Pin a positive, area-tilted walk at height 1 at both ends of a window of
2N steps with N much larger than H**2.  In the middle of the window the
bridge has forgotten its endpoints, so its rescaled height should have the
same law as a stationary draw of the ground-state chain, and both should be
close to the continuum density phi0(r)**2.
"""
import numpy as np

from tiltedwalk.bridge import make_bridge, sample_bridges
from tiltedwalk.chain import doob_transform, sample_chains
from tiltedwalk.continuum import airy_ground_state
from tiltedwalk.harness import EmpiricalDistribution, ks_critical_value
from tiltedwalk.model import make_kernel, make_potential
from tiltedwalk.spectral import compute_spectrum

kernel = make_kernel({"kind": "lazy-nn", "a": 0.25})
linear = make_potential("linear")
lam, n = 1e-3, 20_000

spec = compute_spectrum(kernel, linear, lam)
chain = doob_transform(spec)
H2 = round(spec.H**2)
bridge = make_bridge(kernel, linear, lam, 1, 1, N=10 * H2)
mid = bridge.n_steps // 2

from_bridge = sample_bridges(bridge, n, seed=1, record=[mid])[:, 0] * spec.h
from_chain = sample_chains(chain, n, [0], seed=2)[:, 0] * spec.h

a, b = EmpiricalDistribution(from_bridge), EmpiricalDistribution(from_chain)
print(f"H = {spec.H:.2f}, bridge half-length N = {bridge.N} = 10 H^2")
print(f"mean height: bridge {from_bridge.mean():.4f}, chain {from_chain.mean():.4f}")
print(f"two-sample KS {a.ks_two_sample(b):.4f} (1% critical value "
      f"{ks_critical_value(a.n, b.n):.4f})")

airy = airy_ground_state(kernel.sigma2)
r = np.linspace(0, 8, 4001)
cdf = np.cumsum(airy.phi0(r) ** 2) * (r[1] - r[0])
print(f"KS of the chain against phi0^2: {b.ks(lambda x: np.interp(x, r, cdf / cdf[-1])):.4f}")
