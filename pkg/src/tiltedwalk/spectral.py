"""Truncated tilted transfer operator and its Perron eigenpair.

The operator acts on functions on ``{1..M}``::

    Ttilde(x, y) = p[y - x] * exp(-(V(x) + V(y)) / 2)

Jumps leaving ``{1..M}`` are dropped, so state 0 and everything above ``M``
act as killing walls.  Eigenfunctions are normalized in the rescaled norm
``||u||_{2,lam}**2 = h * sum(u**2)`` with ``h = 1/H``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import PotentialFamily, ScaleInfo, WalkKernel, solve_scale

__all__ = [
    "TransferSpectrum",
    "ConvergenceError",
    "default_truncation",
    "build_operator",
    "leading_eigenpair",
    "finalize_spectrum",
    "compute_spectrum",
    "tail_mass",
    "dv_inner",
    "dv_functional",
    "save_spectrum",
    "load_spectrum",
]

FORMAT_TAG = "tiltedwalk-spectrum v1"


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


def default_truncation(potential: PotentialFamily, scale: ScaleInfo, factor: float = 20.0,
                       envelope_level: float = 40.0) -> int:
    """``ceil(max(factor*H, H*K))`` where ``q0(K) = envelope_level``."""
    lo, hi = 0.0, 1.0
    while float(potential.q0(hi)) < envelope_level:
        hi *= 2
        if hi > 1e9:
            raise ValueError("lower envelope q0 never reaches the truncation level")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if float(potential.q0(mid)) < envelope_level:
            lo = mid
        else:
            hi = mid
    return int(math.ceil(max(factor * scale.H, scale.H * hi)))


def _site_weights(potential, lam, M):
    if potential is None:
        return np.ones(M)
    return np.exp(-0.5 * potential(lam, np.arange(1, M + 1, dtype=float)))


def build_operator(kernel: WalkKernel, potential: PotentialFamily | None, lam: float,
                   M: int) -> sp.csr_matrix:
    """Sparse ``M x M`` matrix of the tilted kernel on ``{1..M}``.

    ``potential=None`` means no tilt (``V = 0``), which is what the untilted
    random-walk computations use.
    """
    M = int(M)
    if M <= 2 * kernel.reach:
        raise ValueError(f"M={M} too small for kernel reach {kernel.reach}")
    w = _site_weights(potential, lam, M)
    diagonals, offsets = [], []
    for z, p in zip(kernel.support, kernel.probs):
        idx = np.arange(M - abs(z)) if z >= 0 else np.arange(-z, M)
        diagonals.append(p * w[idx] * w[idx + z])
        offsets.append(z)
    return sp.diags(diagonals, offsets, shape=(M, M), format="csr")


def _perron_vector(A: sp.csr_matrix, tol: float, max_iter: int, power_steps: int):
    """Positive Perron vector of a nonnegative irreducible matrix.

    Power iteration on ``(I + A)/2`` from the all-ones vector; once the
    Collatz-Wielandt upper bound is available it switches to inverse
    iteration shifted just above that bound, which keeps iterates positive
    and converges entrywise, tails included.
    """
    n = A.shape[0]
    x = np.ones(n)
    iters = 0
    for _ in range(min(power_steps, max_iter)):
        x = 0.5 * (x + A @ x)
        x /= x.max()
        iters += 1
    identity = sp.identity(n, format="csc")
    while True:
        Ax = A @ x
        theta = float(x @ Ax) / float(x @ x)
        # entries that underflowed to zero carry no information about the ratio
        pos = x > 0
        ratio = Ax[pos] / x[pos]
        sup_res = float(np.abs(Ax - theta * x).max() / x.max())
        rel_res = float(np.abs(ratio / theta - 1).max()) if theta > 0 else math.inf
        if sup_res <= tol and rel_res <= tol:
            return theta, x, iters, sup_res
        if iters >= max_iter:
            raise ConvergenceError(f"Perron iteration did not converge in {iters} steps",
                                   residual=max(sup_res, rel_res))
        shift = float(ratio.max()) * (1 + 1e-13) + 1e-300
        x = spla.splu((shift * identity - A).tocsc()).solve(x)
        np.clip(x, 0.0, None, out=x)
        x /= x.max()
        iters += 1


def leading_eigenpair(matrix, tol: float = 1e-12, max_iter: int = 1_000_000,
                      power_steps: int = 500):
    """Return ``(E, phi, phi_star)`` for a nonnegative irreducible matrix.

    ``phi`` and ``phi_star`` are the right and left Perron vectors scaled to
    unit sup norm.  Deterministic: the start vector is all ones.
    """
    A = sp.csr_matrix(matrix, dtype=float)
    if A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    if (A.data < 0).any():
        raise ValueError("matrix must be nonnegative")
    if np.any(np.asarray(abs(A).sum(axis=1)).ravel() == 0):
        raise ConvergenceError("zero row detected")
    if np.any(np.asarray(abs(A).sum(axis=0)).ravel() == 0):
        raise ConvergenceError("zero column detected")
    _, phi, _, _ = _perron_vector(A, tol, max_iter, power_steps)
    _, phi_star, _, _ = _perron_vector(A.T.tocsr(), tol, max_iter, power_steps)
    E = float(phi_star @ (A @ phi)) / float(phi_star @ phi)
    return E, phi, phi_star


@dataclass
class TransferSpectrum:
    M: int
    matrix_tilde: sp.csr_matrix
    E: float
    phi: np.ndarray
    phi_star: np.ndarray
    c: float
    e: float
    scale: ScaleInfo
    residuals: dict = field(default_factory=dict)
    kernel: WalkKernel | None = None
    potential: PotentialFamily | None = None

    @property
    def h(self) -> float:
        return self.scale.h

    @property
    def H(self) -> float:
        return self.scale.H

    @property
    def lam(self) -> float:
        return self.scale.lam

    @property
    def sites(self) -> np.ndarray:
        return np.arange(1, self.M + 1)

    @property
    def r(self) -> np.ndarray:
        """Rescaled positions ``x*h`` of the lattice sites."""
        return self.sites * self.h

    @property
    def mu(self) -> np.ndarray:
        """Invariant law ``c * phi * phi_star`` of the ground-state chain."""
        return self.c * self.phi * self.phi_star


def _residuals(A, E, phi, phi_star):
    r = A @ phi - E * phi
    rs = A.T @ phi_star - E * phi_star
    return {
        "right_sup": float(np.abs(r).max() / np.abs(phi).max()),
        "left_sup": float(np.abs(rs).max() / np.abs(phi_star).max()),
    }


def finalize_spectrum(E: float, phi, phi_star, scale: ScaleInfo, matrix=None,
                      kernel=None, potential=None) -> TransferSpectrum:
    """Normalize eigenfunctions and derive ``c`` and ``e``."""
    phi = np.asarray(phi, dtype=float)
    phi_star = np.asarray(phi_star, dtype=float)
    if np.any(phi <= 0) or np.any(phi_star <= 0):
        raise ValueError("eigenfunction has nonpositive entries; truncation too aggressive "
                         "or periodicity mishandled")
    h = scale.h
    phi = phi / math.sqrt(h * float(phi @ phi))
    phi_star = phi_star / math.sqrt(h * float(phi_star @ phi_star))
    c = 1.0 / float(phi @ phi_star)
    e = -scale.H**2 * math.log(E)
    residuals = _residuals(matrix, E, phi, phi_star) if matrix is not None else {}
    M = len(phi)
    return TransferSpectrum(M=M, matrix_tilde=matrix, E=E, phi=phi, phi_star=phi_star, c=c,
                            e=e, scale=scale, residuals=residuals, kernel=kernel,
                            potential=potential)


def compute_spectrum(kernel: WalkKernel, potential: PotentialFamily, lam: float,
                     M: int | None = None, tol: float = 1e-12) -> TransferSpectrum:
    scale = solve_scale(potential, lam)
    if M is None:
        M = default_truncation(potential, scale)
    A = build_operator(kernel, potential, lam, M)
    E, phi, phi_star = leading_eigenpair(A, tol=tol)
    if not 0 < E < 1:
        raise ConvergenceError(f"leading eigenvalue {E} outside (0, 1)")
    return finalize_spectrum(E, phi, phi_star, scale, matrix=A, kernel=kernel,
                             potential=potential)


def tail_mass(spectrum: TransferSpectrum, K: float) -> float:
    """``h * sum(phi(r) for r > K)`` on the rescaled lattice."""
    mask = spectrum.r > K
    return float(spectrum.h * spectrum.phi[mask].sum())


def dv_inner(spectrum: TransferSpectrum, mu, u) -> float:
    """``sum_x mu(x) * ((1 - T)u / u)(x)`` with ``T = Ttilde / E``."""
    mu = np.asarray(mu, dtype=float)
    u = np.asarray(u, dtype=float)
    support = mu > 0
    if np.any(u[support] <= 0):
        raise ValueError("u must be strictly positive on the support of mu")
    Tu = (spectrum.matrix_tilde @ u) / spectrum.E
    return float(mu[support] @ (1.0 - Tu[support] / u[support]))


def dv_functional(spectrum: TransferSpectrum, mu, u) -> float:
    """``dv_inner`` with the ``h**-2`` prefactor of the rescaled functional."""
    return dv_inner(spectrum, mu, u) / spectrum.h**2


def save_spectrum(spectrum: TransferSpectrum, path) -> None:
    header = {
        "lambda": spectrum.lam, "H": spectrum.H, "E": spectrum.E, "e": spectrum.e,
        "c": spectrum.c, "M": spectrum.M,
        **{f"residual_{k}": v for k, v in spectrum.residuals.items()},
    }
    lines = [f"# {FORMAT_TAG}"]
    lines += [f"# {k}={v!r}" for k, v in header.items()]
    lines.append("x\tphi\tphi_star")
    for x, a, b in zip(spectrum.sites, spectrum.phi, spectrum.phi_star):
        lines.append(f"{x}\t{a:.17g}\t{b:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_spectrum(path) -> tuple[dict, np.ndarray]:
    """Read a spectrum file; returns ``(header, table)`` with columns x, phi, phi_star."""
    header, rows = {}, []
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != f"# {FORMAT_TAG}":
        raise ValueError(f"{path}: not a {FORMAT_TAG} file")
    for line in lines[1:]:
        if line.startswith("#"):
            key, _, value = line[2:].partition("=")
            header[key] = float(value) if key != "M" else int(value)
        elif line.startswith("x\t"):
            continue
        elif line:
            rows.append([float(v) for v in line.split("\t")])
    return header, np.asarray(rows)
