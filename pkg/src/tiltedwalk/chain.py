"""Ground-state Markov chain obtained from the Perron eigenfunctions.

``pi(x, y) = T(x, y) * phi(y) / phi(x)`` with ``T = Ttilde / E`` is a
stochastic kernel on ``{1..M}``; ``pi_star`` is the same construction with
the left eigenfunction and the transposed operator.  Both leave
``mu = c * phi * phi_star`` invariant.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from numba import njit

from .model import ScaleInfo
from .spectral import TransferSpectrum

__all__ = [
    "GroundStateChain",
    "LatticePath",
    "RescaledPath",
    "LeakageError",
    "doob_transform",
    "sample_stationary",
    "sample_chains",
    "rescale",
    "dirichlet_form",
    "save_path",
    "load_path",
]

ROW_TOL = 1e-8
PATH_FORMAT_TAG = "tiltedwalk-path v1"


class LeakageError(RuntimeError):
    """Row sums of the transformed kernel are too far from one."""


@dataclass
class GroundStateChain:
    pi: sp.csr_matrix
    pi_star: sp.csr_matrix
    mu: np.ndarray
    spectrum: TransferSpectrum
    offsets: np.ndarray        # kernel support, sorted
    cum: np.ndarray            # M x len(offsets) cumulative rows of pi
    cum_star: np.ndarray       # same for pi_star, over offsets_star
    row_deficit: float         # largest |row sum - 1| before renormalization

    @property
    def offsets_star(self) -> np.ndarray:
        """Support of ``pi_star``: the reflected kernel support."""
        return -self.offsets[::-1]

    @property
    def M(self) -> int:
        return self.spectrum.M

    @property
    def scale(self) -> ScaleInfo:
        return self.spectrum.scale

    def stationary_mean(self, f) -> float:
        """``sum_x mu(x) f(x)`` for ``f`` given on the sites ``1..M``."""
        return float(self.mu @ np.asarray(f(self.spectrum.sites), dtype=float))


def _banded_rows(P: sp.csr_matrix, offsets: np.ndarray) -> np.ndarray:
    M = P.shape[0]
    rows = np.arange(M)
    out = np.zeros((M, len(offsets)))
    dense_cols = rows[:, None] + offsets[None, :]
    ok = (dense_cols >= 0) & (dense_cols < M)
    r, k = np.nonzero(ok)
    out[r, k] = np.asarray(P[r, dense_cols[r, k]]).ravel()
    return out


def _transform(A: sp.csr_matrix, E: float, left: np.ndarray, right: np.ndarray):
    P = sp.diags(1.0 / left) @ (A / E) @ sp.diags(right)
    P = sp.csr_matrix(P)
    sums = np.asarray(P.sum(axis=1)).ravel()
    deficit = float(np.abs(sums - 1.0).max())
    return sp.csr_matrix(sp.diags(1.0 / sums) @ P), deficit


def doob_transform(spectrum: TransferSpectrum) -> GroundStateChain:
    """Build ``pi``, ``pi_star`` and ``mu``; rows are renormalized after the check."""
    A = spectrum.matrix_tilde
    if A is None or spectrum.kernel is None:
        raise ValueError("spectrum must carry its operator and kernel")
    pi, d1 = _transform(A, spectrum.E, spectrum.phi, spectrum.phi)
    pi_star, d2 = _transform(A.T.tocsr(), spectrum.E, spectrum.phi_star, spectrum.phi_star)
    deficit = max(d1, d2)
    if deficit > ROW_TOL:
        raise LeakageError(f"row sums deviate from 1 by {deficit:.2e}; increase M")
    mu = spectrum.mu
    mu = mu / mu.sum()
    offsets = spectrum.kernel.offsets
    cum = np.cumsum(_banded_rows(pi, offsets), axis=1)
    cum_star = np.cumsum(_banded_rows(pi_star, -offsets[::-1]), axis=1)
    cum[:, -1] = 1.0
    cum_star[:, -1] = 1.0
    return GroundStateChain(pi=pi, pi_star=pi_star, mu=mu, spectrum=spectrum, offsets=offsets,
                            cum=cum, cum_star=cum_star, row_deficit=deficit)


@njit(cache=True)
def _walk(states, u, cum, offsets, out, out_cols, first_col):
    """Advance ``states`` (0-based) through ``u.shape[0]`` steps of inverse-CDF sampling.

    After each step the states are written to ``out[:, col]`` for every
    recorded column ``col`` with ``out_cols[col] == step``, where steps are
    counted from ``first_col``.
    """
    n_steps, n = u.shape
    K = offsets.shape[0]
    col = 0
    while col < out_cols.shape[0] and out_cols[col] <= first_col:
        col += 1
    for s in range(n_steps):
        for j in range(n):
            x = states[j]
            k = 0
            while k < K - 1 and u[s, j] >= cum[x, k]:
                k += 1
            states[j] = x + offsets[k]
        step = first_col + s + 1
        while col < out_cols.shape[0] and out_cols[col] == step:
            for j in range(n):
                out[j, col] = states[j]
            col += 1


def sample_chains(chain: GroundStateChain, n_paths: int, record_steps, seed: int,
                  reverse: bool = False, block: int = 256) -> np.ndarray:
    """States (in ``1..M``) of independent stationary chains at the given step counts.

    ``record_steps`` is a sorted sequence of nonnegative step indices; step 0
    is the stationary draw.  With ``reverse=True`` the chains move with
    ``pi_star``.
    """
    record = np.asarray(record_steps, dtype=np.int64)
    if record.ndim != 1 or np.any(record < 0) or np.any(np.diff(record) < 0):
        raise ValueError("record_steps must be sorted nonnegative integers")
    rng = np.random.default_rng(seed)
    cum = chain.cum_star if reverse else chain.cum
    offsets = chain.offsets_star if reverse else chain.offsets
    states = rng.choice(chain.M, size=n_paths, p=chain.mu).astype(np.int64)
    out = np.empty((n_paths, len(record)), dtype=np.int64)
    for c in np.nonzero(record == 0)[0]:
        out[:, c] = states
    done, total = 0, int(record[-1]) if len(record) else 0
    while done < total:
        n = min(block, total - done)
        _walk(states, rng.random((n, n_paths)), cum, offsets, out, record, done)
        done += n
    return out + 1


@dataclass
class LatticePath:
    start_index: int
    values: np.ndarray
    seed: int | None = None

    @property
    def indices(self) -> np.ndarray:
        return self.start_index + np.arange(len(self.values))


@dataclass
class RescaledPath:
    times: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        return np.interp(t, self.times, self.values)


def sample_stationary(chain: GroundStateChain, T: float, seed: int,
                      reverse: bool = False) -> LatticePath:
    """Stationary path on the time indices ``[-T*H**2, T*H**2]``."""
    if not T > 0:
        raise ValueError("T must be positive")
    n = int(round(T * chain.scale.H**2))
    steps = np.arange(2 * n + 1)
    values = sample_chains(chain, 1, steps, seed, reverse=reverse, block=4096)[0]
    return LatticePath(start_index=-n, values=values, seed=seed)


def rescale(path: LatticePath, scale: ScaleInfo) -> RescaledPath:
    h = scale.h
    return RescaledPath(times=path.indices * h * h, values=np.asarray(path.values) * h)


def dirichlet_form(chain: GroundStateChain, g) -> float:
    """``1/2 sum_{x,y} mu(x) pi(x,y) (g(x) - g(y))**2``."""
    g = np.asarray(g, dtype=float)
    P = chain.pi.tocoo()
    diff = g[P.row] - g[P.col]
    return 0.5 * float(np.sum(chain.mu[P.row] * P.data * diff * diff))


def save_path(path: LatticePath, scale: ScaleInfo, fh) -> None:
    lines = [f"# {PATH_FORMAT_TAG}", f"# lambda={scale.lam!r}", f"# H={scale.H!r}",
             f"# seed={path.seed}", "time_index\tvalue"]
    lines += [f"{i}\t{v}" for i, v in zip(path.indices, path.values)]
    Path(fh).write_text("\n".join(lines) + "\n")


def load_path(fh) -> tuple[dict, LatticePath]:
    lines = Path(fh).read_text().splitlines()
    if not lines or lines[0] != f"# {PATH_FORMAT_TAG}":
        raise ValueError(f"{fh}: not a {PATH_FORMAT_TAG} file")
    header = {}
    rows = []
    for line in lines[1:]:
        if line.startswith("#"):
            k, _, v = line[2:].partition("=")
            header[k] = v
        elif line and not line.startswith("time_index"):
            i, v = line.split("\t")
            rows.append((int(i), int(v)))
    idx = np.array([r[0] for r in rows], dtype=np.int64)
    vals = np.array([r[1] for r in rows], dtype=np.int64)
    seed = None if header.get("seed") in (None, "None") else int(header["seed"])
    return header, LatticePath(start_index=int(idx[0]), values=vals, seed=seed)
