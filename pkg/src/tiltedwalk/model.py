"""Random-walk kernels, area-tilt potential families and the height scale.

A kernel is a zero-mean jump law ``p_z`` on the integers.  A potential family
is a map ``(lam, x) -> V_lam(x)`` together with its rescaled limit profile
``q`` and a lower envelope ``q0``.  The height scale ``H`` solves
``H**2 * V_lam(H) == 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import reduce
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "WalkKernel",
    "PotentialFamily",
    "ScaleInfo",
    "ScaleError",
    "make_kernel",
    "make_potential",
    "solve_scale",
    "rescaled_profile",
    "profile_deviation",
]

PROB_TOL = 1e-12
TAIL_MASS_TOL = 1e-14
SCALE_BRACKET = (1e-9, 1e12)


class ScaleError(RuntimeError):
    """Raised when the height scale cannot be bracketed."""


@dataclass(frozen=True)
class WalkKernel:
    """Jump distribution with finite support on the integers."""

    support: tuple[int, ...]
    probs: tuple[float, ...]
    sigma2: float = field(init=False)
    name: str = "custom"

    def __post_init__(self):
        if len(self.support) != len(self.probs):
            raise ValueError("support and probs must have equal length")
        if len(set(self.support)) != len(self.support):
            raise ValueError("duplicate offsets in kernel support")
        order = np.argsort(self.support)
        support = tuple(int(self.support[i]) for i in order)
        probs = tuple(float(self.probs[i]) for i in order)
        p = np.asarray(probs)
        z = np.asarray(support, dtype=float)
        if np.any(p < 0):
            raise ValueError("kernel has a negative weight")
        if abs(p.sum() - 1.0) > PROB_TOL:
            raise ValueError(f"kernel weights sum to {p.sum()!r}, not 1")
        mean = float(z @ p)
        if abs(mean) > PROB_TOL:
            raise ValueError(f"kernel mean is {mean:.3g}; a zero-mean walk is required")
        nonzero = [abs(s) for s, w in zip(support, probs) if s != 0 and w > 0]
        if not nonzero or reduce(math.gcd, nonzero) != 1:
            raise ValueError("kernel is not irreducible on the integers")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "sigma2", float(z**2 @ p))

    @property
    def offsets(self) -> np.ndarray:
        return np.asarray(self.support, dtype=np.int64)

    @property
    def weights(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=float)

    @property
    def reach(self) -> int:
        """Largest absolute jump."""
        return max(abs(s) for s in self.support)

    @property
    def is_symmetric(self) -> bool:
        table = dict(zip(self.support, self.probs))
        return all(table.get(-s, 0.0) == w for s, w in table.items())

    @property
    def is_lazy(self) -> bool:
        return dict(zip(self.support, self.probs)).get(0, 0.0) > 0

    def mean(self) -> float:
        return float(self.offsets @ self.weights)

    def variance(self) -> float:
        return float(self.offsets.astype(float) ** 2 @ self.weights)

    def describe(self) -> dict:
        return {"name": self.name, "support": list(self.support), "probs": list(self.probs)}


def make_kernel(spec: Mapping | str) -> WalkKernel:
    """Build a kernel from a descriptor.

    Accepted descriptors::

        {"kind": "lazy-nn", "a": 0.25}
        {"kind": "symmetric", "weights": {-1: 0.25, 0: 0.5, 1: 0.25}}
        {"kind": "truncated-geometric", "rho": 0.3, "R": 40}

    A bare string ``"lazy-nn"`` means ``a = 1/4``.  The ``symmetric`` kind
    accepts any zero-mean weight table; the name refers to the common use.
    """
    if isinstance(spec, str):
        spec = {"kind": spec}
    kind = spec.get("kind")
    if kind == "lazy-nn":
        a = float(spec.get("a", 0.25))
        if not 0 < a <= 0.5:
            raise ValueError(f"lazy-nn needs 0 < a <= 1/2, got {a}")
        if a == 0.5:
            return WalkKernel((-1, 1), (0.5, 0.5), name="nn")
        return WalkKernel((-1, 0, 1), (a, 1 - 2 * a, a), name=f"lazy-nn({a:g})")
    if kind in ("symmetric", "weights", "custom"):
        table = {int(k): float(v) for k, v in dict(spec["weights"]).items()}
        return WalkKernel(tuple(table), tuple(table.values()), name=spec.get("name", kind))
    if kind == "truncated-geometric":
        rho = float(spec["rho"])
        if not 0 < rho < 1:
            raise ValueError(f"truncated-geometric needs 0 < rho < 1, got {rho}")
        # normalized law p_z ∝ rho^|z|; dropped mass beyond R is 2 rho^(R+1) / (1 + rho)
        R = spec.get("R")
        if R is None:
            R = max(1, math.ceil(math.log(TAIL_MASS_TOL * (1 + rho) / 2) / math.log(rho)) - 1)
        R = int(R)
        dropped = 2 * rho ** (R + 1) / (1 + rho)
        if dropped >= TAIL_MASS_TOL:
            raise ValueError(f"truncation at R={R} drops mass {dropped:.2e} >= {TAIL_MASS_TOL}")
        z = np.arange(-R, R + 1)
        w = rho ** np.abs(z)
        w /= w.sum()
        return WalkKernel(tuple(int(v) for v in z), tuple(w), name=f"trunc-geom({rho:g},{R})")
    raise ValueError(f"unknown kernel kind {kind!r}")


@dataclass(frozen=True)
class PotentialFamily:
    """A family ``V_lam`` of self-potentials with its rescaled limit.

    ``evaluate(lam, x)`` must accept arrays.  ``scale_exponent`` is set for
    pure power laws ``V = lam * x**alpha`` where ``H = lam**(-1/(2+alpha))``
    in closed form; it is informational only.
    """

    kind: str
    evaluate: Callable[[float, np.ndarray], np.ndarray]
    q: Callable[[np.ndarray], np.ndarray]
    q0: Callable[[np.ndarray], np.ndarray]
    alpha: float | None = None

    def __call__(self, lam: float, x) -> np.ndarray:
        return np.asarray(self.evaluate(lam, np.asarray(x, dtype=float)), dtype=float)

    @property
    def tag(self) -> str:
        if self.kind == "power" and self.alpha is not None:
            return f"power-{self.alpha:g}"
        return self.kind

    def check_grid(self, lam: float, x_max: float = 1e6, n: int = 2001) -> None:
        """Assert V(0)=0, monotone and growing on a grid."""
        x = np.concatenate([[0.0], np.geomspace(1e-6, x_max, n)])
        v = self(lam, x)
        if v[0] != 0:
            raise ValueError("V_lam(0) must vanish")
        if np.any(np.diff(v) < 0) or np.any(v < 0):
            raise ValueError("V_lam must be nonnegative and nondecreasing")
        if not v[-1] > v[n // 2]:
            raise ValueError("V_lam does not grow")


def _linear():
    return PotentialFamily(
        kind="linear",
        evaluate=lambda lam, x: lam * x,
        q=lambda r: np.asarray(r, dtype=float),
        q0=lambda r: np.asarray(r, dtype=float),
        alpha=1.0,
    )


def _power(alpha: float):
    if alpha <= 0:
        raise ValueError("power exponent must be positive")
    return PotentialFamily(
        kind="power",
        evaluate=lambda lam, x: lam * np.power(x, alpha),
        q=lambda r: np.power(np.asarray(r, dtype=float), alpha),
        q0=lambda r: np.power(np.asarray(r, dtype=float), alpha),
        alpha=float(alpha),
    )


def make_potential(spec: Mapping | str | PotentialFamily) -> PotentialFamily:
    """Build a potential family.

    ``"linear"`` gives ``V = lam*x``; ``{"kind": "power", "alpha": a}`` gives
    ``lam*x**a``.  Custom families pass ``evaluate``, ``q`` and ``q0``
    callables explicitly; there is no default lower envelope for them.
    """
    if isinstance(spec, PotentialFamily):
        return spec
    if isinstance(spec, str):
        spec = {"kind": spec}
    kind = spec.get("kind")
    if kind == "linear":
        return _linear()
    if kind == "power":
        return _power(float(spec["alpha"]))
    if kind == "custom":
        missing = [k for k in ("evaluate", "q", "q0") if k not in spec]
        if missing:
            raise ValueError(f"custom potential needs {missing}")
        return PotentialFamily("custom", spec["evaluate"], spec["q"], spec["q0"])
    raise ValueError(f"unknown potential kind {kind!r}")


@dataclass(frozen=True)
class ScaleInfo:
    lam: float
    H: float

    @property
    def h(self) -> float:
        return 1.0 / self.H


def solve_scale(potential: PotentialFamily, lam: float, rtol: float = 1e-14) -> ScaleInfo:
    """Solve ``H**2 V_lam(H) = 1`` by bisection in ``log H``."""
    if not lam > 0:
        raise ValueError("lam must be positive")

    def g(logH):
        H = math.exp(logH)
        return H * H * float(potential(lam, H)) - 1.0

    lo, hi = (math.log(b) for b in SCALE_BRACKET)
    g_lo, g_hi = g(lo), g(hi)
    if not (g_lo < 0 < g_hi):
        raise ScaleError(
            f"no sign change of H^2 V(H) - 1 on {SCALE_BRACKET} for lam={lam}: "
            f"values {g_lo:.3g}, {g_hi:.3g}"
        )
    # bisect until the bracket is below rtol in relative terms
    while hi - lo > rtol:
        mid = 0.5 * (lo + hi)
        if g(mid) < 0:
            lo = mid
        else:
            hi = mid
    return ScaleInfo(lam=lam, H=math.exp(0.5 * (lo + hi)))


def rescaled_profile(potential: PotentialFamily, lam: float, grid, scale: ScaleInfo | None = None):
    """Return ``H**2 * V_lam(r*H)`` on the grid of ``r`` values."""
    scale = scale or solve_scale(potential, lam)
    r = np.asarray(grid, dtype=float)
    return scale.H**2 * potential(lam, r * scale.H)


def profile_deviation(potential: PotentialFamily, lam: float, grid) -> float:
    """Sup distance between the rescaled profile and ``q`` on the grid."""
    r = np.asarray(grid, dtype=float)
    return float(np.max(np.abs(rescaled_profile(potential, lam, r) - potential.q(r))))
