"""Experiments comparing the lattice objects with their continuum limit.

Each experiment returns an :class:`ExperimentReport` holding named metrics,
pass/fail checks against tolerances, and tables destined for CSV files.
Every random quantity is driven by an explicit integer seed; substreams are
derived with :class:`numpy.random.SeedSequence`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import CubicSpline

from . import __version__
from .bridge import iter_bridge_blocks, make_bridge, restricted_partition, tube_mask
from .chain import LatticePath, doob_transform, sample_chains
from .continuum import fs_model, simulate_fs_ensemble, sl_solve
from .model import PotentialFamily, WalkKernel, solve_scale
from .spectral import TransferSpectrum, compute_spectrum

__all__ = [
    "EmpiricalDistribution",
    "Check",
    "ExperimentReport",
    "ContinuumReference",
    "continuum_reference",
    "substream_seeds",
    "grid_project",
    "lattice_edges",
    "fixed_edges",
    "binned_tv",
    "ks_critical_value",
    "eigen_convergence",
    "fdd_compare",
    "tightness_probe",
    "window_endpoint_laws",
    "tv_window",
    "stay_positive_probability",
    "stay_positive_scaling",
    "meeting_probability",
    "eta_good_census",
    "eta_good_experiment",
]

MIN_SAMPLES = 1000


# --- plumbing --------------------------------------------------------------------

@dataclass
class EmpiricalDistribution:
    samples: np.ndarray
    sorted: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float).ravel()
        if self.samples.size == 0:
            raise ValueError("empty sample")
        self.sorted = np.sort(self.samples)

    @property
    def n(self) -> int:
        return self.sorted.size

    def ecdf(self, x):
        return np.searchsorted(self.sorted, np.asarray(x, dtype=float), side="right") / self.n

    def ks(self, cdf: Callable) -> float:
        """Sup distance to a continuous CDF, exact for tied (lattice) samples."""
        values, counts = np.unique(self.sorted, return_counts=True)
        right = np.cumsum(counts) / self.n
        left = right - counts / self.n
        F = np.asarray(cdf(values), dtype=float)
        return float(max(np.abs(right - F).max(), np.abs(left - F).max()))

    def ks_two_sample(self, other: "EmpiricalDistribution") -> float:
        pts = np.union1d(self.sorted, other.sorted)
        return float(np.abs(self.ecdf(pts) - other.ecdf(pts)).max())

    def w1(self, cdf: Callable, grid) -> float:
        """``int |F_n - F|`` on a grid covering the support."""
        grid = np.asarray(grid, dtype=float)
        return float(np.trapezoid(np.abs(self.ecdf(grid) - cdf(grid)), grid))


def ks_critical_value(n: int, m: int, alpha: float = 0.01) -> float:
    """Asymptotic two-sample KS critical value."""
    c = math.sqrt(-0.5 * math.log(alpha / 2))
    return c * math.sqrt((n + m) / (n * m))


@dataclass
class Check:
    name: str
    value: float
    op: str
    threshold: float

    @property
    def passed(self) -> bool:
        v, t = self.value, self.threshold
        return {"<": v < t, "<=": v <= t, ">": v > t, ">=": v >= t}[self.op]


@dataclass
class ExperimentReport:
    tag: str
    parameters: dict
    metrics: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)   # name -> (columns, rows)
    seeds: dict = field(default_factory=dict)
    version: str = __version__
    paths: dict = field(default_factory=dict)    # name -> LatticePath, only when requested

    def add_metric(self, name, value):
        if name in self.metrics:
            raise KeyError(f"metric {name!r} reported twice")
        self.metrics[name] = value

    def check(self, name, value, op, threshold):
        self.checks.append(Check(name, float(value), op, float(threshold)))

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def validate(self, declared: Sequence[str]) -> None:
        missing = [m for m in declared if m not in self.metrics]
        extra = [m for m in self.metrics if m not in declared]
        if missing or extra:
            raise ValueError(f"{self.tag}: missing metrics {missing}, undeclared {extra}")

    def manifest(self) -> dict:
        return {
            "experiment": self.tag,
            "version": self.version,
            "parameters": self.parameters,
            "seeds": self.seeds,
            "metrics": self.metrics,
            "checks": [
                {"name": c.name, "value": c.value, "op": c.op, "threshold": c.threshold,
                 "passed": c.passed}
                for c in self.checks
            ],
            "passed": self.passed,
        }


def substream_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _tol(tolerances, name, default):
    return float((tolerances or {}).get(name, default))


# --- continuum reference ------------------------------------------------------------

@dataclass
class ContinuumReference:
    """Ground state of the limit operator as callables built from ``sl_solve``."""

    sigma2: float
    e0: float
    e1: float
    phi0: Callable
    cdf: Callable
    spectrum: object
    model: object


def _cutoff(q, level):
    hi = 1.0
    while float(q(hi)) < level:
        hi *= 2
    lo = 0.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if float(q(mid)) < level else (lo, mid)
    return hi


def continuum_reference(sigma2: float, potential: PotentialFamily, n: int = 8000,
                        level: float = 25.0) -> ContinuumReference:
    """Solve with the far wall where ``q`` reaches ``level``."""
    R = _cutoff(potential.q, level)
    spec = sl_solve(sigma2, potential.q, R, n, 2, q_tag=potential.tag, richardson=False)
    model = fs_model(spec)
    spline = CubicSpline(spec.r, spec.phi0)

    def phi0(r):
        r = np.asarray(r, dtype=float)
        return np.where((r >= 0) & (r <= R), spline(np.clip(r, 0, R)), 0.0)

    def cdf(r):
        return np.interp(r, spec.r, model.cdf)

    return ContinuumReference(sigma2=sigma2, e0=float(spec.eigenvalues[0]),
                              e1=float(spec.eigenvalues[1]), phi0=phi0, cdf=cdf,
                              spectrum=spec, model=model)


def grid_project(f: Callable, h: float, M: int, order: int = 10) -> np.ndarray:
    """Cell averages ``(1/h) int_{r-h}^{r} f`` at ``r = h, 2h, ..., M h``.

    Gauss-Legendre with ``order`` nodes per cell (exact for polynomials of
    degree ``2*order - 1``).
    """
    nodes, weights = leggauss(order)
    r = h * np.arange(1, M + 1)
    pts = r[:, None] - 0.5 * h * (1.0 - nodes[None, :])
    return (np.asarray(f(pts), dtype=float) * weights[None, :]).sum(axis=1) / 2.0


def lattice_edges(h: float, n_bins: int, r_max: float) -> np.ndarray:
    """Bin edges at half-integer lattice points, equal site count per bin.

    The last bin is open to the right.  Aligning edges with the lattice avoids
    aliasing between lattice samples and a continuous law.
    """
    width = max(1, math.ceil(r_max / (h * n_bins)))
    edges = h * (0.5 + width * np.arange(n_bins + 1))
    edges[0] = 0.0
    edges[-1] = np.inf
    return edges


def fixed_edges(n_bins: int, r_max: float) -> np.ndarray:
    """Equal cells on ``[0, r_max]``, the last one open to the right."""
    edges = np.linspace(0.0, r_max, n_bins + 1)
    edges[-1] = np.inf
    return edges


def _bin_index(values, edges):
    idx = np.searchsorted(edges, values, side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


def binned_tv(a: np.ndarray, b: np.ndarray, edges: np.ndarray) -> float:
    """Plug-in TV between two samples of d-vectors binned on a common grid."""
    a = np.atleast_2d(np.asarray(a, dtype=float).T).T
    b = np.atleast_2d(np.asarray(b, dtype=float).T).T
    nb = len(edges) - 1
    codes_a = np.ravel_multi_index(tuple(_bin_index(a[:, j], edges) for j in range(a.shape[1])),
                                   (nb,) * a.shape[1])
    codes_b = np.ravel_multi_index(tuple(_bin_index(b[:, j], edges) for j in range(b.shape[1])),
                                   (nb,) * b.shape[1])
    size = nb ** a.shape[1]
    pa = np.bincount(codes_a, minlength=size) / len(codes_a)
    pb = np.bincount(codes_b, minlength=size) / len(codes_b)
    return 0.5 * float(np.abs(pa - pb).sum())


def _strictly_decreasing(values) -> bool:
    return bool(np.all(np.diff(np.asarray(values, dtype=float)) < 0))


# --- eigen-convergence ----------------------------------------------------------------

def eigen_convergence(kernel: WalkKernel, potential: PotentialFamily, lams, n_grid: int = 8000,
                      M_override: int | None = None, tolerances=None) -> ExperimentReport:
    lams = sorted((float(v) for v in lams), reverse=True)
    ref = continuum_reference(kernel.sigma2, potential, n=n_grid)
    rows, phi_rows = [], []
    errs, dists, ratios = [], [], []
    for lam in lams:
        spec = compute_spectrum(kernel, potential, lam, M=M_override)
        err = abs(spec.e - ref.e0)
        projected = grid_project(ref.phi0, spec.h, spec.M)
        dist = math.sqrt(spec.h * float(np.sum((spec.phi - projected) ** 2)))
        rows.append([lam, spec.H, spec.E, spec.e, err])
        phi_rows.append([lam, spec.M, dist, spec.c / spec.h, err / ref.e0])
        errs.append(err)
        dists.append(dist)
        ratios.append(spec.c / spec.h)
    rep = ExperimentReport("eigen-convergence", {
        "kernel": kernel.describe(), "potential": potential.tag, "lambdas": lams,
        "sigma2": kernel.sigma2, "n_grid": n_grid, "M_override": M_override})
    rep.add_metric("e0_continuum", ref.e0)
    rep.add_metric("rel_err_smallest", errs[-1] / ref.e0)
    rep.add_metric("phi_dist_smallest", dists[-1])
    rep.add_metric("c_over_h_smallest", ratios[-1])
    rep.add_metric("err_decreasing", _strictly_decreasing(errs))
    rep.add_metric("phi_dist_decreasing", _strictly_decreasing(dists))
    rep.check("rel_err_smallest", errs[-1] / ref.e0, "<", _tol(tolerances, "rel_err", 0.05))
    rep.check("phi_dist_smallest", dists[-1], "<", _tol(tolerances, "phi_dist", 0.05))
    rep.check("c_over_h_dev", abs(ratios[-1] - 1), "<", _tol(tolerances, "c_over_h", 0.05))
    rep.check("err_decreasing", float(_strictly_decreasing(errs)), ">=", 1)
    rep.check("phi_dist_decreasing", float(_strictly_decreasing(dists)), ">=", 1)
    rep.tables["e_lambda"] = (["lambda", "H", "E", "e", "err_vs_continuum"], rows)
    rep.tables["phi_lambda"] = (["lambda", "M", "phi_dist", "c_over_h", "rel_err"], phi_rows)
    return rep


# --- finite-dimensional distributions ---------------------------------------------------

def _chain_marginals(spec: TransferSpectrum, times, n_samples, seed):
    chain = doob_transform(spec)
    steps = np.rint(np.asarray(times) * spec.H**2).astype(np.int64)
    return sample_chains(chain, n_samples, steps, seed) * spec.h


def _bridge_marginals(kernel, potential, lam, times, n_samples, seed, N_factor):
    scale = solve_scale(potential, lam)
    H2 = scale.H**2
    N = int(math.ceil(N_factor * H2))
    ens = make_bridge(kernel, potential, lam, 1, 1, N=N)
    steps = N + np.rint(np.asarray(times) * H2).astype(np.int64)
    out = np.empty((n_samples, len(steps)))
    for k0, states in iter_bridge_blocks(ens, n_samples, seed):
        first = k0 + 1
        sel = np.nonzero((steps >= first) & (steps < first + len(states)))[0]
        out[:, sel] = states[steps[sel] - first].T
    return out * scale.h


def fdd_compare(kernel: WalkKernel, potential: PotentialFamily, lams, times, n_samples: int,
                seed: int, dt: float = 1e-4, n_bins: int = 30, r_max: float = 4.0,
                sources=("chain",), bridge_N_factor: float = 8.0, binning: str = "fixed",
                tolerances=None) -> ExperimentReport:
    """Marginal KS/W1 against ``phi0**2`` and binned pair TV against the diffusion.

    ``binning="fixed"`` uses ``n_bins`` equal cells on ``[0, r_max]`` for every
    lambda, so lattice discreteness counts as discrepancy; ``"lattice"``
    aligns the cells with the lattice and measures only the smooth part.
    """
    if binning not in ("fixed", "lattice"):
        raise ValueError("binning must be 'fixed' or 'lattice'")
    if n_samples < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples")
    times = np.asarray(sorted(float(t) for t in times))
    if times[0] != 0:
        raise ValueError("times must include 0")
    lams = sorted((float(v) for v in lams), reverse=True)
    unknown = set(sources) - {"chain", "bridge"}
    if unknown:
        raise ValueError(f"unknown sources {sorted(unknown)}")
    ref = continuum_reference(kernel.sigma2, potential)
    seeds = substream_seeds(seed, 1 + len(lams) * len(sources))
    fs_values, fs_diag = simulate_fs_ensemble(ref.model, times, n_samples, dt, seeds[0])
    w1_grid = np.linspace(0.0, ref.spectrum.R, 4001)
    rows, pair_rows = [], []
    for j, t in enumerate(times):
        emp = EmpiricalDistribution(fs_values[:, j])
        rows.append(["fs", math.nan, t, emp.ks(ref.cdf), emp.w1(ref.cdf, w1_grid)])
    ks0, tv_first_pair = {}, {}
    s_idx = 1
    for source in sources:
        for lam in lams:
            scale = solve_scale(potential, lam)
            if source == "chain":
                spec = compute_spectrum(kernel, potential, lam)
                vals = _chain_marginals(spec, times, n_samples, seeds[s_idx])
            else:
                vals = _bridge_marginals(kernel, potential, lam, times, n_samples, seeds[s_idx],
                                         bridge_N_factor)
            s_idx += 1
            for j, t in enumerate(times):
                emp = EmpiricalDistribution(vals[:, j])
                ks = emp.ks(ref.cdf)
                rows.append([source, lam, t, ks, emp.w1(ref.cdf, w1_grid)])
                if j == 0:
                    ks0[(source, lam)] = ks
            edges = fixed_edges(n_bins, r_max) if binning == "fixed" else \
                lattice_edges(scale.h, n_bins, r_max)
            for a in range(len(times)):
                for b in range(a + 1, len(times)):
                    tv = binned_tv(vals[:, [a, b]], fs_values[:, [a, b]], edges)
                    pair_rows.append([source, lam, times[a], times[b], tv])
                    if (a, b) == (0, 1):
                        tv_first_pair[(source, lam)] = tv
    rep = ExperimentReport("fdd", {
        "kernel": kernel.describe(), "potential": potential.tag, "lambdas": lams,
        "times": times.tolist(), "n_samples": n_samples, "dt": dt, "n_bins": n_bins,
        "r_max": r_max, "sources": list(sources), "bridge_N_factor": bridge_N_factor,
        "binning": binning})
    rep.seeds = {"seed": seed, "substreams": seeds}
    rep.add_metric("fs_ks_t0", rows[0][3])
    rep.add_metric("fs_escapes", fs_diag["escapes"])
    rep.check("fs_ks_t0", rows[0][3], "<", _tol(tolerances, "ks", 0.02))
    for source in sources:
        ks_seq = [ks0[(source, lam)] for lam in lams]
        tv_seq = [tv_first_pair[(source, lam)] for lam in lams]
        rep.add_metric(f"{source}_ks_t0_smallest", ks_seq[-1])
        rep.add_metric(f"{source}_pair_tv_smallest", tv_seq[-1])
        rep.add_metric(f"{source}_ks_improves", bool(ks_seq[-1] < ks_seq[0]))
        rep.add_metric(f"{source}_tv_improves", bool(tv_seq[-1] < tv_seq[0]))
        rep.check(f"{source}_ks_t0_smallest", ks_seq[-1], "<", _tol(tolerances, "ks", 0.02))
        rep.check(f"{source}_pair_tv_smallest", tv_seq[-1], "<", _tol(tolerances, "tv", 0.08))
        if len(lams) > 1:
            rep.check(f"{source}_ks_improves", ks_seq[0] - ks_seq[-1], ">", 0)
            rep.check(f"{source}_tv_improves", tv_seq[0] - tv_seq[-1], ">", 0)
    rep.tables["marginals"] = (["source", "lambda", "t", "ks", "w1"], rows)
    rep.tables["pairs"] = (["source", "lambda", "s", "t", "binned_tv"], pair_rows)
    return rep


# --- tightness ------------------------------------------------------------------------

def tightness_probe(kernel: WalkKernel, potential: PotentialFamily, lams, eps_grid, delta_grid,
                    n_samples: int, seed: int, check_point=(0.5, 0.05), uniformity: float = 3.0,
                    tolerances=None) -> ExperimentReport:
    """Estimate ``P(max_{t <= delta} |x(t) - x(0)| > eps)`` for the stationary chain."""
    lams = sorted((float(v) for v in lams), reverse=True)
    deltas = sorted(float(d) for d in delta_grid)
    eps_grid = sorted(float(e) for e in eps_grid)
    seeds = substream_seeds(seed, len(lams))
    rows = []
    at_check = {}
    monotone = True
    for lam, s in zip(lams, seeds):
        spec = compute_spectrum(kernel, potential, lam)
        chain = doob_transform(spec)
        H2 = spec.H**2
        last = int(round(deltas[-1] * H2))
        paths = sample_chains(chain, n_samples, np.arange(last + 1), s)
        dev = np.maximum.accumulate(np.abs(paths - paths[:, :1]), axis=1) * spec.h
        for eps in eps_grid:
            est = [float(np.mean(dev[:, int(round(d * H2))] > eps)) for d in deltas]
            monotone &= bool(np.all(np.diff(est) >= 0))
            for d, p in zip(deltas, est):
                rows.append([lam, eps, d, p, p / d])
                if (eps, d) == tuple(check_point):
                    at_check[lam] = p / d
    rep = ExperimentReport("tightness", {
        "kernel": kernel.describe(), "potential": potential.tag, "lambdas": lams,
        "eps": eps_grid, "deltas": deltas, "n_samples": n_samples,
        "check_point": list(check_point)})
    rep.seeds = {"seed": seed, "substreams": seeds}
    rep.add_metric("monotone_in_delta", monotone)
    rep.check("monotone_in_delta", float(monotone), ">=", 1)
    if at_check:
        vals = np.array(list(at_check.values()))
        spread = float(vals.max() / vals.min()) if vals.min() > 0 else math.inf
        rep.add_metric("rate_spread", spread)
        rep.check("rate_spread", spread, "<=", _tol(tolerances, "uniformity", uniformity))
    else:
        rep.add_metric("rate_spread", math.nan)
    big = [r[3] for r in rows if r[1] >= 10]
    rep.add_metric("max_estimate_eps_ge_10", max(big) if big else 0.0)
    rep.tables["tightness"] = (["lambda", "eps", "delta", "estimate", "estimate_over_delta"], rows)
    return rep


# --- TV window --------------------------------------------------------------------------

def _pi_power(chain, m):
    return np.linalg.matrix_power(chain.pi.toarray(), m)


def window_endpoint_laws(spec: TransferSpectrum, chain, bridge, n_half: int, Pm=None):
    """Joint laws of the window endpoints under the chain and under the bridge.

    Both window laws share the interior factor, so their density ratio is a
    function of the two endpoints only; TV of the window equals TV of these
    ``M x M`` tables.
    """
    m = 2 * n_half
    if Pm is None:
        Pm = _pi_power(chain, m)
    joint_chain = chain.mu[:, None] * Pm
    a, b = bridge.N - n_half, bridge.N + n_half
    left = bridge.forward[a] * spec.phi
    right = np.divide(bridge.backward[b], spec.phi, out=np.zeros(spec.M), where=spec.phi > 0)
    joint_bridge = left[:, None] * Pm * right[None, :]
    joint_bridge /= joint_bridge.sum()
    return joint_chain, joint_bridge


def _weighted_binned_tv(codes, weights):
    """``1/2 sum_cells |mean((w - 1) 1_cell)|`` for samples from the reference law."""
    _, inverse = np.unique(codes, return_inverse=True)
    per_cell = np.bincount(inverse, weights=weights - 1.0)
    return 0.5 * float(np.abs(per_cell).sum()) / len(codes)


def tv_window(kernel: WalkKernel, potential: PotentialFamily, lam: float, T: float, N_grid,
              uv_pairs, n_samples: int, seed: int, C: float = 2.0, n_bins: int = 20,
              r_max: float = 4.0, uniformity_tol: float = 0.05,
              tolerances=None) -> ExperimentReport:
    """Distance between the bridge and the stationary chain on ``[-T, T]``.

    Reports the exact TV of the full window law and the TV of the binned
    five-time functional (estimated with exact likelihood ratios, 20 and 10
    cells per time).
    """
    if n_bins % 2:
        raise ValueError("n_bins must be even so the coarse grid nests")
    spec = compute_spectrum(kernel, potential, lam)
    chain = doob_transform(spec)
    H, H2 = spec.H, spec.H**2
    n_half = int(round(T * H2))
    N_grid = sorted(int(n) for n in N_grid)
    if N_grid[0] <= n_half:
        raise ValueError(f"N must exceed T*H^2 = {n_half}")
    uv_pairs = [(int(u), int(v)) for u, v in uv_pairs]
    for u, v in uv_pairs:
        if not (1 <= u <= C * H and 1 <= v <= C * H):
            raise ValueError(f"boundary heights must lie in [1, C*H] = [1, {C * H:.3g}]")
    Pm = _pi_power(chain, 2 * n_half)
    steps = np.rint(np.linspace(0, 2 * n_half, 5)).astype(np.int64)
    samples = sample_chains(chain, n_samples, steps, seed)
    edges = lattice_edges(spec.h, n_bins, r_max)
    idx_fine = np.stack([_bin_index(samples[:, j] * spec.h, edges) for j in range(5)], axis=1)
    codes_fine = np.ravel_multi_index(tuple(idx_fine.T), (n_bins,) * 5)
    codes_coarse = np.ravel_multi_index(tuple((idx_fine // 2).T), (n_bins // 2,) * 5)
    rows = []
    joints = {}
    for u, v in uv_pairs:
        for N in N_grid:
            bridge = make_bridge(kernel, potential, lam, u, v, N=N, M=spec.M)
            jc, jb = window_endpoint_laws(spec, chain, bridge, n_half, Pm)
            joints[(u, v, N)] = jb
            tv_exact = 0.5 * float(np.abs(jb - jc).sum())
            ratio = np.divide(jb, jc, out=np.zeros_like(jb), where=jc > 0)
            w = ratio[samples[:, 0] - 1, samples[:, -1] - 1]
            rows.append([u, v, N, N / H2, tv_exact, _weighted_binned_tv(codes_fine, w),
                         _weighted_binned_tv(codes_coarse, w)])
    rep = ExperimentReport("tv-window", {
        "kernel": kernel.describe(), "potential": potential.tag, "lambda": lam, "T": T,
        "N_grid": N_grid, "uv_pairs": [list(p) for p in uv_pairs], "n_samples": n_samples,
        "C": C, "n_bins": n_bins, "r_max": r_max})
    rep.seeds = {"seed": seed}
    decreasing = True
    for u, v in uv_pairs:
        seq = [r[4] for r in rows if (r[0], r[1]) == (u, v)]
        decreasing &= seq[-1] < seq[0]
    rep.add_metric("tv_decreases", bool(decreasing))
    rep.check("tv_decreases", float(decreasing), ">=", 1)
    refine = max(r[6] - r[5] for r in rows)
    rep.add_metric("coarse_minus_fine_max", refine)
    rep.check("coarse_minus_fine_max", refine, "<=", _tol(tolerances, "refinement", 0.01))
    if len(uv_pairs) > 1:
        Nmax = N_grid[-1]
        first = joints[(*uv_pairs[0], Nmax)]
        spread = max(0.5 * float(np.abs(joints[(*p, Nmax)] - first).sum()) for p in uv_pairs[1:])
    else:
        spread = 0.0
    rep.add_metric("uv_uniformity_tv", spread)
    rep.check("uv_uniformity_tv", spread, "<", _tol(tolerances, "uniformity", uniformity_tol))
    # decay rate in units of the macroscopic time, from the first pair's extreme N
    seq = [r for r in rows if (r[0], r[1]) == uv_pairs[0]]
    if seq[-1][4] > 0 and seq[0][4] > 0 and seq[-1][3] > seq[0][3]:
        rate = -math.log(seq[-1][4] / seq[0][4]) / (seq[-1][3] - seq[0][3])
    else:
        rate = math.nan
    rep.add_metric("decay_rate", rate)
    rep.tables["tv_window"] = (["u", "v", "N", "N_over_H2", "tv_exact", "tv_binned_fine",
                                "tv_binned_coarse"], rows)
    return rep


# --- stay-positive scaling ------------------------------------------------------------

def stay_positive_probability(kernel: WalkKernel, n: int, m: int, x: int, y: int,
                              eta: float | None) -> float:
    """Probability that the walk from ``x`` is at ``y`` at the ``m``-th point with all
    ``m`` points in ``(0, 2 eta sqrt(n))``; ``eta=None`` drops the upper cap."""
    steps = m - 1
    if eta is None:
        masks = None
        M = max(x, y) + (steps // 2 + 1) * kernel.reach
    else:
        cap = math.ceil(2 * eta * math.sqrt(n)) - 1
        masks = tube_mask(steps, 1, cap)
        M = cap
    if masks is None:
        masks = tube_mask(steps, 1, M)
    return math.exp(restricted_partition(kernel, None, 1.0, x, y, masks, n_steps=steps, M=M))


def _check_range(n, m, x, y, eta):
    if not (n / 3 <= m <= n):
        raise ValueError(f"m={m} outside [n/3, n] for n={n}")
    if not (1 <= x <= eta * math.sqrt(n) and 1 <= y <= eta * math.sqrt(n)):
        raise ValueError("x, y must lie in [1, eta*sqrt(n)]")


def stay_positive_scaling(kernel: WalkKernel, n_grid, x: int, y: int, eta: float,
                          m_fracs=(1.0, 1 / 3), band: float = 2.0,
                          tolerances=None) -> ExperimentReport:
    n_grid = sorted(int(n) for n in n_grid)
    rows = []
    for frac in m_fracs:
        for n in n_grid:
            m = min(n, math.ceil(frac * n - 1e-9))
            _check_range(n, m, x, y, eta)
            p_cap = stay_positive_probability(kernel, n, m, x, y, eta)
            p_free = stay_positive_probability(kernel, n, m, x, y, None)
            rows.append([n, m, frac, p_cap, p_cap * n**1.5 / (x * y), p_free / p_cap])
    rep = ExperimentReport("stay-positive", {
        "kernel": kernel.describe(), "n_grid": n_grid, "x": x, "y": y, "eta": eta,
        "m_fracs": list(m_fracs)})
    band = _tol(tolerances, "band", band)
    worst, cap_effect = 1.0, 1.0
    lows, highs = [], []
    for frac in m_fracs:
        ratios = [r[4] for r in rows if r[2] == frac]
        worst = max(worst, max(ratios) / min(ratios))
        lows.append(min(ratios))
        highs.append(max(ratios))
        cap_effect = max(cap_effect, max(r[5] for r in rows if r[2] == frac))
    min_cap = min(r[5] for r in rows)
    rep.add_metric("ratio_band", worst)
    rep.add_metric("c_lower", min(lows))
    rep.add_metric("c_upper", max(highs))
    rep.add_metric("cap_effect_max", cap_effect)
    rep.add_metric("cap_effect_min", min_cap)
    rep.check("ratio_band", worst, "<", band)
    rep.check("cap_effect_min", min_cap, ">=", 1.0 - 1e-12)
    rep.tables["stay_positive"] = (["n", "m", "m_frac", "probability", "scaled_ratio",
                                    "uncapped_over_capped"], rows)
    return rep


# --- meeting probability -----------------------------------------------------------

def _confined(kernel, n, a, b, eta):
    cap = math.ceil(2 * eta * math.sqrt(n)) - 1
    return make_bridge(kernel, None, 1.0, a, b, n_steps=n - 1, M=cap,
                       masks=tube_mask(n - 1, 1, cap))


def meeting_probability(kernel: WalkKernel, n_grid, x: int, y: int, z: int, w: int, eta: float,
                        n_samples: int, seed: int, alpha: float = 0.5, band: float = 2.0,
                        tolerances=None) -> ExperimentReport:
    """Two independent confined bridges: meeting probability and intersection moments.

    ``Nint`` counts times in ``[n/3, 2n/3]`` where both paths sit at the same
    site at most ``eta*sqrt(n)``.  Its mean is also computed exactly.
    """
    n_grid = sorted(int(n) for n in n_grid)
    seeds = substream_seeds(seed, 2 * len(n_grid))
    rows = []
    for i, n in enumerate(n_grid):
        for a in (x, y, z, w):
            if not 1 <= a <= eta * math.sqrt(n):
                raise ValueError("endpoints must lie in [1, eta*sqrt(n)]")
        low = int(math.floor(eta * math.sqrt(n)))
        first, last = math.ceil(n / 3), math.floor(2 * n / 3)   # 1-based path points
        b1, b2 = _confined(kernel, n, x, y, eta), _confined(kernel, n, z, w, eta)
        exact = 0.0
        for k in range(first - 1, last):
            exact += float(b1.marginal(k)[:low] @ b2.marginal(k)[:low])
        count = np.zeros(n_samples)
        met = np.zeros(n_samples, dtype=bool)
        it1 = iter_bridge_blocks(b1, n_samples, seeds[2 * i])
        it2 = iter_bridge_blocks(b2, n_samples, seeds[2 * i + 1])
        for (k0, s1), (_, s2) in zip(it1, it2):
            same = s1 == s2
            met |= same.any(axis=0)
            ks = k0 + 1 + np.arange(len(s1))
            window = (ks >= first - 1) & (ks <= last - 1)
            count += (same[window] & (s1[window] <= low)).sum(axis=0)
        mean, second = float(count.mean()), float((count**2).mean())
        se = float(count.std(ddof=1) / math.sqrt(n_samples))
        p_meet = float(met.mean())
        pz = (1 - alpha) ** 2 * mean**2 / second if second > 0 else 0.0
        rows.append([n, exact, mean, se, second, exact / math.sqrt(n), second / n, p_meet, pz])
    rep = ExperimentReport("meeting", {
        "kernel": kernel.describe(), "n_grid": n_grid, "x": x, "y": y, "z": z, "w": w,
        "eta": eta, "n_samples": n_samples, "alpha": alpha})
    rep.seeds = {"seed": seed, "substreams": seeds}
    band = _tol(tolerances, "band", band)
    en = [r[5] for r in rows]
    en2 = [r[6] for r in rows]
    rep.add_metric("EN_over_sqrt_n_min", min(en))
    rep.add_metric("EN_band", max(en) / min(en))
    rep.add_metric("EN2_over_n_max", max(en2))
    rep.add_metric("EN2_band", max(en2) / min(en2))
    rep.add_metric("meet_minus_pz_min", min(r[7] - r[8] for r in rows))
    rep.add_metric("exact_vs_mc_z_max", max(abs(r[2] - r[1]) / r[3] for r in rows))
    rep.check("EN_band", max(en) / min(en), "<", band)
    rep.check("EN2_band", max(en2) / min(en2), "<", band)
    rep.check("meet_minus_pz_min", min(r[7] - r[8] for r in rows), ">=", 0)
    rep.check("exact_vs_mc_z_max", max(abs(r[2] - r[1]) / r[3] for r in rows), "<=", 3)
    rep.tables["meeting"] = (["n", "EN_exact", "EN_mc", "EN_se", "EN2_mc", "EN_over_sqrt_n",
                              "EN2_over_n", "p_meet", "pz_floor"], rows)
    return rep


# --- eta-good census --------------------------------------------------------------

def eta_good_census(path1, path2, eta: float, H: float, length: int | None = None) -> dict:
    """Classify consecutive blocks of ``length`` (default ``round(H**2)``) time steps.

    A block is good when both paths stay at most ``2*eta*H`` on it and sit
    below ``eta*H`` at both of its ends.  ``far1``/``far2`` count blocks where
    a path stays above ``eta*H``; ``triples_potential`` counts triples whose
    outer blocks each see both paths dip below ``eta*H``; ``good_middle``
    counts good middle blocks of the triples.
    """
    p1 = np.asarray(path1)
    p2 = np.asarray(path2)
    if p1.shape != p2.shape:
        raise ValueError("paths must share the time window")
    L = int(round(H * H)) if length is None else int(length)
    n_blocks = (len(p1) - 1) // L
    if n_blocks < 3:
        raise ValueError("window shorter than three blocks")
    good, low1, low2 = [], [], []
    far1 = far2 = 0
    for k in range(n_blocks):
        s1 = p1[k * L:(k + 1) * L + 1]
        s2 = p2[k * L:(k + 1) * L + 1]
        ends_low = max(s1[0], s1[-1], s2[0], s2[-1]) < eta * H
        good.append(bool(s1.max() <= 2 * eta * H and s2.max() <= 2 * eta * H and ends_low))
        low1.append(bool(s1.min() < eta * H))
        low2.append(bool(s2.min() < eta * H))
        far1 += not low1[-1]
        far2 += not low2[-1]
    triples = n_blocks // 3
    potential = sum(low1[3 * k] and low2[3 * k] and low1[3 * k + 2] and low2[3 * k + 2]
                    for k in range(triples))
    good_middle = sum(good[3 * k + 1] for k in range(triples))
    return {"blocks": n_blocks, "good": int(sum(good)), "far1": far1, "far2": far2,
            "triples": triples, "triples_potential": int(potential),
            "good_middle": int(good_middle)}


def eta_good_experiment(kernel: WalkKernel, potential: PotentialFamily, lam: float,
                        N_factor: float, eta: float, seeds, uv=(1, 1),
                        tolerances=None, keep_paths: bool = False) -> ExperimentReport:
    scale = solve_scale(potential, lam)
    N = int(round(N_factor * scale.H**2))
    b1 = make_bridge(kernel, potential, lam, 1, 1, N=N)
    b2 = b1 if tuple(uv) == (1, 1) else make_bridge(kernel, potential, lam, uv[0], uv[1], N=N)
    rows, paths = [], {}
    for s in seeds:
        s1, s2 = substream_seeds(int(s), 2)
        x1 = _single(b1, s1)
        x2 = _single(b2, s2)
        c = eta_good_census(x1, x2, eta, scale.H)
        if keep_paths:
            for name, x, sub in (("path1", x1, s1), ("path2", x2, s2)):
                paths[f"seed{int(s)}_{name}"] = LatticePath(-(len(x) // 2), x, seed=sub)
        rows.append([int(s), c["blocks"], c["good"], c["triples"], c["triples_potential"],
                     c["good_middle"], c["good_middle"] / c["triples"], c["far1"], c["far2"]])
    fractions = [r[6] for r in rows]
    rep = ExperimentReport("eta-good", {
        "kernel": kernel.describe(), "potential": potential.tag, "lambda": lam,
        "N_factor": N_factor, "N": N, "eta": eta, "uv": list(uv)})
    rep.seeds = {"seeds": [int(s) for s in seeds]}
    rep.paths = paths
    rep.add_metric("rho_min", min(fractions))
    rep.add_metric("rho_max", max(fractions))
    rep.check("rho_min", min(fractions), ">", _tol(tolerances, "rho", 0.0))
    rep.tables["eta_good"] = (["seed", "blocks", "good", "triples", "triples_potential",
                               "good_middle", "fraction", "far1", "far2"], rows)
    return rep


def _single(ens, seed):
    chunks = [states[:, 0] for _, states in iter_bridge_blocks(ens, 1, seed, block=4096)]
    return np.concatenate(chunks)
