"""Half-line Sturm-Liouville problem, Airy ground state, Ferrari-Spohn diffusion.

The operator is ``-(sigma2/2) d^2/dr^2 + q(r)`` on ``(0, R)`` with Dirichlet
walls; its eigenvalues ``e_0 < e_1 < ...`` are positive.  The ground state
``phi_0`` defines the diffusion with generator
``(sigma2/2) d^2 + sigma2 (phi_0'/phi_0) d``, reversible for ``phi_0**2 dr``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
from numba import njit
from scipy.integrate import solve_ivp
from scipy.linalg import eigh_tridiagonal
from scipy.optimize import brentq
from scipy.special import gamma

__all__ = [
    "SturmLiouvilleSpectrum",
    "FSDiffusionModel",
    "ContinuumPath",
    "CutoffError",
    "sl_solve",
    "airy_ai",
    "airy_zeros",
    "AiryGroundState",
    "airy_ground_state",
    "fs_model",
    "fs_drift",
    "simulate_fs",
    "simulate_fs_ensemble",
    "semigroup_apply",
    "expand",
    "synthesize",
    "fs_semigroup_apply",
    "save_sl_spectrum",
]

AI0 = 1.0 / (3 ** (2 / 3) * gamma(2 / 3))
AIP0 = -1.0 / (3 ** (1 / 3) * gamma(1 / 3))
SL_FORMAT_TAG = "tiltedwalk-sl-spectrum v1"


class CutoffError(ValueError):
    """The far wall sits below the classically allowed region of the top mode."""


@dataclass
class SturmLiouvilleSpectrum:
    sigma2: float
    q: Callable
    R: float
    n: int
    r: np.ndarray               # grid including both walls, length n + 2
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray  # shape (k, n + 2), zero at both walls
    q_tag: str = "custom"
    richardson: dict = field(default_factory=dict)

    @property
    def dr(self) -> float:
        return self.r[1] - self.r[0]

    @property
    def k(self) -> int:
        return len(self.eigenvalues)

    @property
    def phi0(self) -> np.ndarray:
        return self.eigenfunctions[0]

    def inner(self, f, g) -> float:
        """Trapezoidal L2 product on the grid."""
        return float(np.trapezoid(np.asarray(f) * np.asarray(g), self.r))


def _tridiagonal(sigma2, q, R, n):
    dr = R / (n + 1)
    r = np.linspace(0.0, R, n + 2)
    kin = sigma2 / (2 * dr * dr)
    diag = 2 * kin + np.asarray(q(r[1:-1]), dtype=float)
    off = np.full(n - 1, -kin)
    return r, diag, off


def _eigenvalues_only(sigma2, q, R, n, k):
    _, d, e = _tridiagonal(sigma2, q, R, n)
    return eigh_tridiagonal(d, e, eigvals_only=True, select="i", select_range=(0, k - 1))


def sl_solve(sigma2: float, q: Callable, R: float, n: int, k: int, q_tag: str = "custom",
             richardson: bool = True) -> SturmLiouvilleSpectrum:
    """Lowest ``k`` eigenpairs by second-order finite differences.

    ``n`` counts interior grid points.  With ``richardson`` the problem is
    also solved on ``2n + 1`` points (nested grid) and the difference and the
    extrapolated values are reported, not applied.
    """
    if n < 2000:
        raise ValueError("n must be at least 2000")
    if k < 1:
        raise ValueError("k must be positive")
    r, d, e = _tridiagonal(sigma2, q, R, n)
    vals, vecs = eigh_tridiagonal(d, e, select="i", select_range=(0, k - 1))
    q_R = float(q(np.asarray(R)))
    if q_R < vals[-1] + 10:
        raise CutoffError(f"q(R)={q_R:.4g} < e_(k-1) + 10 = {vals[-1] + 10:.4g}; "
                          f"increase R")
    dr = r[1] - r[0]
    funcs = np.zeros((k, n + 2))
    funcs[:, 1:-1] = vecs.T / math.sqrt(dr)
    for j in range(k):
        # fix sign: positive slope at the origin wall
        if funcs[j, 1] < 0:
            funcs[j] *= -1
    extra = {}
    if richardson:
        fine = _eigenvalues_only(sigma2, q, R, 2 * n + 1, k)
        extra = {
            "fine_eigenvalues": fine,
            "difference": vals - fine,
            "extrapolated": (4 * fine - vals) / 3,
        }
    return SturmLiouvilleSpectrum(sigma2=sigma2, q=q, R=R, n=n, r=r, eigenvalues=vals,
                                  eigenfunctions=funcs, q_tag=q_tag, richardson=extra)


def sign_changes(values, rel_floor: float = 1e-8) -> int:
    """Sign changes of a grid function, ignoring entries below a relative floor."""
    v = np.asarray(values)
    v = v[np.abs(v) > rel_floor * np.abs(v).max()]
    return int(np.count_nonzero(np.diff(np.sign(v)) != 0))


# --- Airy function from the ODE Ai'' = x Ai ----------------------------------

@lru_cache(maxsize=None)
def _airy_negative(x_min: float):
    sol = solve_ivp(lambda x, y: (y[1], x * y[0]), (0.0, x_min), (AI0, AIP0),
                    method="DOP853", rtol=1e-13, atol=1e-16, dense_output=True)
    return sol.sol


@lru_cache(maxsize=None)
def _airy_positive(x_max: float):
    """Log-derivative ``w = Ai'/Ai`` on ``[0, x_max]``.

    ``w' = x - w**2`` is integrated from the far end toward the origin, the
    stable direction for the decaying solution: the crude seed
    ``w = -sqrt(x)`` at the far end is forgotten at rate ``exp(-2 int sqrt x)``.
    ``L' = w`` accumulates ``log(Ai(x)/Ai(x_far))``.
    """
    far = x_max + 12.0
    sol = solve_ivp(lambda x, y: (x - y[0] ** 2, y[0]), (far, 0.0), (-math.sqrt(far), 0.0),
                    method="DOP853", rtol=1e-13, atol=1e-14, dense_output=True)
    log_at_zero = sol.sol(0.0)[1]
    return sol.sol, log_at_zero


def airy_ai(x, derivative: bool = False, x_min: float = -40.0, x_max: float = 60.0):
    """Ai(x) (or Ai'(x)) from ODE integration, for ``x_min <= x <= x_max``."""
    x = np.asarray(x, dtype=float)
    if np.any(x < x_min) or np.any(x > x_max):
        raise ValueError(f"airy_ai evaluated outside [{x_min}, {x_max}]")
    out = np.empty_like(x)
    neg = x < 0
    if np.any(neg):
        y = _airy_negative(float(x_min))(x[neg])
        out[neg] = y[1] if derivative else y[0]
    if np.any(~neg):
        sol, log0 = _airy_positive(float(x_max))
        y = sol(x[~neg])
        ai = AI0 * np.exp(y[1] - log0)
        out[~neg] = y[0] * ai if derivative else ai
    return out


@lru_cache(maxsize=None)
def airy_zeros(count: int) -> tuple[float, ...]:
    """Magnitudes ``omega_1 < omega_2 < ...`` of the first zeros ``-omega_j`` of Ai."""
    grid = np.linspace(0.0, -(3.0 * count + 6), 40 * count + 400)
    vals = airy_ai(grid)
    roots = []
    for a, b, fa, fb in zip(grid[:-1], grid[1:], vals[:-1], vals[1:]):
        if fa == 0 or fa * fb < 0:
            roots.append(-brentq(lambda s: float(airy_ai(s)), b, a, xtol=1e-15, rtol=1e-15))
            if len(roots) == count:
                break
    if len(roots) < count:
        raise RuntimeError("not enough Airy zeros bracketed")
    return tuple(roots)


@dataclass(frozen=True)
class AiryGroundState:
    sigma2: float
    chi: float
    omega1: float
    e0: float
    norm: float

    def _ai(self, r, derivative=False):
        s = self.chi * np.asarray(r, dtype=float) - self.omega1
        # widen the integration range in coarse steps so the cache stays small
        top = max(60.0, 20.0 * math.ceil(float(np.max(s, initial=0.0)) / 20.0))
        return airy_ai(s, derivative=derivative, x_max=top)

    def phi0(self, r):
        return self._ai(r) / self.norm

    def dphi0(self, r):
        return self.chi * self._ai(r, derivative=True) / self.norm

    def level(self, j: int) -> float:
        """``omega_{j+1} / chi``: the j-th Dirichlet level for ``q(r) = r``."""
        return airy_zeros(j + 1)[j] / self.chi


def airy_ground_state(sigma2: float) -> AiryGroundState:
    """Closed-form ground state for ``q(r) = r``.

    ``chi = (2/sigma2)**(1/3)``, ``e0 = omega1/chi`` and
    ``phi0(r) = Ai(chi*r - omega1)`` scaled to unit L2 norm, using
    ``int_{-omega1}^inf Ai(s)**2 ds = Ai'(-omega1)**2``.
    """
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    chi = (2.0 / sigma2) ** (1.0 / 3.0)
    omega1 = airy_zeros(1)[0]
    slope = float(airy_ai(-omega1, derivative=True))
    norm = abs(slope) / math.sqrt(chi)
    return AiryGroundState(sigma2=sigma2, chi=chi, omega1=omega1, e0=omega1 / chi, norm=norm)


# --- Ferrari-Spohn diffusion ----------------------------------------------------

@dataclass
class FSDiffusionModel:
    spectrum: SturmLiouvilleSpectrum
    r: np.ndarray                  # interior grid
    drift: np.ndarray              # sigma2 * phi0'/phi0 on the interior grid
    r_drift: np.ndarray            # r * drift, smooth down to r = 0
    stationary_density: np.ndarray  # phi0**2 on the full grid, unit mass
    cdf: np.ndarray                # cumulative of the density on the full grid
    r_safe: float                  # upper end of the trusted drift range
    diagnostics: dict = field(default_factory=dict)

    @property
    def sigma2(self) -> float:
        return self.spectrum.sigma2

    @property
    def r_min(self) -> float:
        return float(self.r[0])


def fs_model(spectrum: SturmLiouvilleSpectrum, floor: float = 1e-10) -> FSDiffusionModel:
    """Drift and stationary law from the ground state on the grid.

    The drift is trusted where ``phi0 > floor * max(phi0)``; beyond that the
    finite-difference eigenvector has only absolute accuracy.
    """
    full_r = spectrum.r
    phi = spectrum.phi0
    dphi = np.gradient(phi, full_r)
    r = full_r[1:-1]
    drift = spectrum.sigma2 * dphi[1:-1] / phi[1:-1]
    trusted = np.nonzero(phi[1:-1] > floor * phi.max())[0]
    r_safe = float(r[min(trusted[-1], len(r) - 2)])
    density = phi**2
    density = density / np.trapezoid(density, full_r)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (density[1:] + density[:-1]) * np.diff(full_r))])
    cdf /= cdf[-1]
    r_drift = np.concatenate([[spectrum.sigma2], r * drift])
    return FSDiffusionModel(spectrum=spectrum, r=r, drift=drift, r_drift=r_drift,
                            stationary_density=density, cdf=cdf, r_safe=r_safe)


def fs_drift(model: FSDiffusionModel, r):
    """Drift ``sigma2 * phi0'/phi0`` at arbitrary points.

    Interpolates ``r * drift`` (which tends to ``sigma2`` at the wall) and
    divides by ``r``.  Points outside ``[r_min, r_safe]`` are clamped into it;
    the count is accumulated in ``model.diagnostics["clamped"]``.
    """
    r = np.asarray(r, dtype=float)
    lo, hi = model.r_min, model.r_safe
    outside = (r < lo) | (r > hi)
    if np.any(outside):
        model.diagnostics["clamped"] = model.diagnostics.get("clamped", 0) + int(outside.sum())
    rc = np.clip(r, lo, hi)
    grid = np.concatenate([[0.0], model.r])
    return np.interp(rc, grid, model.r_drift) / rc


@njit(cache=True)
def _em_step(v, z, dt, noise, grid_dr, r_drift, r_safe, x_floor, R, counts):
    if v < x_floor:
        counts[1] += 1
        xe = x_floor
    else:
        xe = v
    if xe > r_safe:
        # beyond the trusted range the drift is frozen at its last trusted value
        xe = r_safe
    pos = xe / grid_dr
    i = int(pos)
    frac = pos - i
    g = r_drift[i] * (1.0 - frac) + r_drift[i + 1] * frac
    v = v + g / xe * dt + noise * z
    if v < 0.0:
        v = -v
        counts[0] += 1
    if v > R:
        v = 2.0 * R - v
        counts[2] += 1
    return v


@njit(cache=True)
def _em_advance(x, xi, dt, noise, grid_dr, r_drift, r_safe, x_floor, R, counts):
    """Push every path through ``xi.shape[0]`` steps, in place."""
    n_steps, n_paths = xi.shape
    for s in range(n_steps):
        for j in range(n_paths):
            x[j] = _em_step(x[j], xi[s, j], dt, noise, grid_dr, r_drift, r_safe, x_floor, R,
                            counts)


@njit(cache=True)
def _em_trace(v, xi, out, dt, noise, grid_dr, r_drift, r_safe, x_floor, R, counts):
    out[0] = v
    for s in range(xi.shape[0]):
        v = _em_step(v, xi[s], dt, noise, grid_dr, r_drift, r_safe, x_floor, R, counts)
        out[s + 1] = v


def _sample_stationary(model, n, rng):
    u = rng.random(n)
    return np.interp(u, model.cdf, model.spectrum.r)


@dataclass
class ContinuumPath:
    times: np.ndarray
    values: np.ndarray
    seed: int
    diagnostics: dict


class _Stepper:
    """Euler-Maruyama with wall safeguards, shared by single and ensemble runs.

    Overshoots below 0 are reflected; inside the layer ``x < sigma*sqrt(dt)``
    the ``1/x`` drift is evaluated at the layer edge.  Counters record
    reflections, capped drifts and reflections off the far wall.
    """

    def __init__(self, model: FSDiffusionModel, dt: float, max_escapes: int = 10**6):
        self.model = model
        self.dt = float(dt)
        self.noise = math.sqrt(model.sigma2 * dt)
        self.x_floor = self.noise
        self.R = float(model.spectrum.R)
        self.max_escapes = max_escapes
        self.counts = np.zeros(3, dtype=np.int64)

    @property
    def _args(self):
        m = self.model
        return (self.dt, self.noise, m.spectrum.dr, m.r_drift, m.r_safe, self.x_floor,
                self.R, self.counts)

    def _check(self):
        if self.counts[2] > self.max_escapes:
            raise RuntimeError("diffusion escaped [0, R] too often; reduce dt")

    def advance(self, x, xi):
        _em_advance(x, np.ascontiguousarray(xi), *self._args)
        self._check()

    def trace(self, x0, xi):
        out = np.empty(len(xi) + 1)
        _em_trace(float(x0), np.ascontiguousarray(xi), out, *self._args)
        self._check()
        return out

    def diagnostics(self) -> dict:
        return dict(zip(("reflections", "drift_caps", "escapes"), (int(c) for c in self.counts)))


def simulate_fs(model: FSDiffusionModel, T: float, dt: float, seed: int) -> ContinuumPath:
    """One stationary path on ``[-T, T]`` with step ``dt``."""
    if not T > 0 or not dt > 0:
        raise ValueError("T and dt must be positive")
    rng = np.random.default_rng(seed)
    steps = int(round(2 * T / dt))
    x0 = _sample_stationary(model, 1, rng)[0]
    stepper = _Stepper(model, dt)
    values = stepper.trace(x0, rng.standard_normal(steps))
    times = -T + dt * np.arange(steps + 1)
    return ContinuumPath(times=times, values=values, seed=seed, diagnostics=stepper.diagnostics())


def simulate_fs_ensemble(model: FSDiffusionModel, times, n_paths: int, dt: float, seed: int,
                         block: int = 64):
    """Values at the given times (``>= 0``, start at stationarity at 0) of many paths.

    Returns ``(values, diagnostics)`` with ``values.shape == (n_paths, len(times))``.
    Normals are drawn in blocks of ``block`` steps, so results depend on it.
    """
    times = np.asarray(times, dtype=float)
    if np.any(times < 0) or np.any(np.diff(times) < 0):
        raise ValueError("times must be nonnegative and sorted")
    rng = np.random.default_rng(seed)
    marks = np.rint(times / dt).astype(np.int64)
    x = _sample_stationary(model, n_paths, rng)
    out = np.empty((n_paths, len(times)))
    stepper = _Stepper(model, dt)
    done = 0
    for k, mark in enumerate(marks):
        while done < mark:
            n = int(min(block, mark - done))
            stepper.advance(x, rng.standard_normal((n, n_paths)))
            done += n
        out[:, k] = x
    return out, stepper.diagnostics()


# --- semigroups -----------------------------------------------------------------

def expand(spectrum: SturmLiouvilleSpectrum, f) -> np.ndarray:
    """Coefficients of a grid function in the computed eigenbasis."""
    f = np.asarray(f, dtype=float)
    return np.array([spectrum.inner(f, phi) for phi in spectrum.eigenfunctions])


def synthesize(spectrum: SturmLiouvilleSpectrum, coeffs) -> np.ndarray:
    return np.asarray(coeffs) @ spectrum.eigenfunctions


def semigroup_apply(spectrum: SturmLiouvilleSpectrum, coeffs, t: float) -> np.ndarray:
    """``a_i -> exp(-(e_i - e_0) t) a_i``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    e = spectrum.eigenvalues
    coeffs = np.asarray(coeffs, dtype=float)
    return np.exp(-(e[: len(coeffs)] - e[0]) * t) * coeffs


def fs_semigroup_apply(spectrum: SturmLiouvilleSpectrum, psi, t: float) -> np.ndarray:
    """``psi -> T^t(psi*phi0)/phi0`` on the interior grid (walls returned as nan)."""
    phi0 = spectrum.phi0
    coeffs = semigroup_apply(spectrum, expand(spectrum, np.asarray(psi) * phi0), t)
    out = np.full_like(phi0, np.nan)
    out[1:-1] = synthesize(spectrum, coeffs)[1:-1] / phi0[1:-1]
    return out


def save_sl_spectrum(spectrum: SturmLiouvilleSpectrum, path) -> None:
    lines = [f"# {SL_FORMAT_TAG}", f"# sigma2={spectrum.sigma2!r}", f"# q={spectrum.q_tag}",
             f"# R={spectrum.R!r}", f"# n={spectrum.n}",
             "# eigenvalues=" + ",".join(f"{v:.17g}" for v in spectrum.eigenvalues)]
    lines.append("\t".join(["r"] + [f"phi_{j}" for j in range(spectrum.k)]))
    for i, r in enumerate(spectrum.r):
        lines.append("\t".join([f"{r:.17g}"] + [f"{v:.17g}" for v in spectrum.eigenfunctions[:, i]]))
    Path(path).write_text("\n".join(lines) + "\n")
