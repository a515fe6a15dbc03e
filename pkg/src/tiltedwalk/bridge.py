"""Exact partition functions and samplers for tilted positive bridges.

A bridge runs for ``n_steps`` steps from ``u`` to ``v`` on ``{1..M}`` with
weight ``prod p(step) * exp(-tilt * sum V(X_i))`` over all ``n_steps + 1``
points.  Everything is a forward/backward recursion with the tilted operator,
renormalized each step with the log scale carried separately.  Optional
per-time intervals restrict the allowed states.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from numba import njit

from .chain import LatticePath
from .model import PotentialFamily, WalkKernel, solve_scale
from .spectral import build_operator, default_truncation

__all__ = [
    "BridgeEnsemble",
    "DeadEndError",
    "make_bridge",
    "tube_mask",
    "partition_function",
    "restricted_partition",
    "sample_bridge",
    "sample_bridges",
    "iter_bridge_blocks",
]


class DeadEndError(RuntimeError):
    pass


def tube_mask(n_steps: int, lo: int, hi: int, times=None) -> np.ndarray:
    """``(n_steps + 1, 2)`` inclusive bounds; ``[lo, hi]`` at ``times`` (default all)."""
    masks = np.empty((n_steps + 1, 2), dtype=np.int64)
    masks[:, 0] = 1
    masks[:, 1] = np.iinfo(np.int64).max
    idx = slice(None) if times is None else np.asarray(times)
    masks[idx, 0] = lo
    masks[idx, 1] = hi
    return masks


@dataclass
class BridgeEnsemble:
    kernel: WalkKernel
    potential: PotentialFamily | None
    lam: float
    u: int
    v: int
    n_steps: int
    M: int
    tilt: float
    operator: sp.csr_matrix
    end_weight: np.ndarray        # exp(-tilt*V/2) on the sites
    forward: np.ndarray           # (n_steps+1, M), rows scaled to max 1
    forward_log: np.ndarray
    backward: np.ndarray
    backward_log: np.ndarray
    masks: np.ndarray | None = None

    @property
    def N(self) -> int:
        if self.n_steps % 2:
            raise ValueError("odd number of steps has no half-length")
        return self.n_steps // 2

    @property
    def empty(self) -> bool:
        return not np.isfinite(self.log_Z)

    @property
    def log_Z(self) -> float:
        """Log partition function from the backward recursion."""
        b = self.backward[0, self.u - 1]
        if b <= 0:
            return -math.inf
        return self._log_ends + math.log(b) + self.backward_log[0]

    @property
    def log_Z_forward(self) -> float:
        f = self.forward[-1, self.v - 1]
        if f <= 0:
            return -math.inf
        return self._log_ends + math.log(f) + self.forward_log[-1]

    @property
    def _log_ends(self) -> float:
        # the operator splits each endpoint weight in half; restore the other halves
        return math.log(self.end_weight[self.u - 1]) + math.log(self.end_weight[self.v - 1])

    def marginal(self, k: int) -> np.ndarray:
        """Exact law of the state after ``k`` steps, on the sites ``1..M``."""
        w = self.forward[k] * self.backward[k]
        s = w.sum()
        if s <= 0:
            raise ValueError("empty bridge has no marginals")
        return w / s

    @property
    def sites(self) -> np.ndarray:
        return np.arange(1, self.M + 1)


def _site_mask(masks, k, M):
    lo, hi = masks[k]
    x = np.arange(1, M + 1)
    return (x >= lo) & (x <= hi)


def _default_M(kernel, potential, lam, u, v, n_steps, masks):
    reach_bound = max(u, v) + (n_steps // 2 + 1) * kernel.reach
    M = reach_bound
    if potential is not None:
        scale = solve_scale(potential, lam)
        M = min(M, max(default_truncation(potential, scale), max(u, v) + math.ceil(20 * scale.H)))
    if masks is not None:
        M = min(M, int(masks[:, 1].max()))
    return max(M, 2 * kernel.reach + 1, u, v)


def _recursion(A, n_steps, start, masks, M):
    table = np.zeros((n_steps + 1, M))
    logs = np.zeros(n_steps + 1)
    vec = start.copy()
    acc = 0.0
    for k in range(n_steps + 1):
        if k > 0:
            vec = A @ vec
        if masks is not None:
            vec = vec * masks[k]
        m = vec.max()
        if m <= 0:
            table[k:] = 0.0
            logs[k:] = -math.inf
            return table, logs
        vec = vec / m
        acc += math.log(m)
        table[k] = vec
        logs[k] = acc
    return table, logs


def _prepare(kernel, potential, lam, u, v, n_steps, M, masks, tilt):
    if M is None:
        M = _default_M(kernel, potential, lam, u, v, n_steps, masks)
    M = int(M)
    if max(u, v) > M:
        raise ValueError("endpoints above the truncation level")
    if potential is None:
        A = build_operator(kernel, None, lam, M)
        w = np.ones(M)
    else:
        scaled = PotentialFamily(potential.kind, lambda lam_, x: tilt * potential(lam_, x),
                                 potential.q, potential.q0, potential.alpha)
        A = build_operator(kernel, scaled, lam, M)
        w = np.exp(-0.5 * tilt * potential(lam, np.arange(1, M + 1, dtype=float)))
    bool_masks = None
    if masks is not None:
        bool_masks = np.array([_site_mask(masks, k, M) for k in range(n_steps + 1)])
    return A, w, bool_masks, M


def _check_args(N, n_steps, u, v, masks):
    if (N is None) == (n_steps is None):
        raise ValueError("give exactly one of N and n_steps")
    n_steps = 2 * int(N) if n_steps is None else int(n_steps)
    u, v = int(u), int(v)
    if u < 1 or v < 1 or n_steps < 1:
        raise ValueError("need u, v >= 1 and at least one step")
    if masks is not None:
        masks = np.asarray(masks, dtype=np.int64)
        if masks.shape != (n_steps + 1, 2):
            raise ValueError(f"masks must have shape {(n_steps + 1, 2)}")
    return n_steps, u, v, masks


def make_bridge(kernel: WalkKernel, potential: PotentialFamily | None, lam: float, u: int,
                v: int, N: int | None = None, n_steps: int | None = None, M: int | None = None,
                masks=None, tilt: float = 1.0) -> BridgeEnsemble:
    """Prepare forward and backward tables for the bridge from ``u`` to ``v``.

    Give either the half-length ``N`` (time runs ``-N..N``, so ``2N`` steps)
    or ``n_steps`` directly.  ``potential=None`` is the untilted walk.  The
    default ``M`` is exact when no path can reach it; otherwise it follows
    the spectral truncation rule.
    """
    n_steps, u, v, masks = _check_args(N, n_steps, u, v, masks)
    A, w, bool_masks, M = _prepare(kernel, potential, lam, u, v, n_steps, M, masks, tilt)
    start_u = np.zeros(M)
    start_u[u - 1] = 1.0
    start_v = np.zeros(M)
    start_v[v - 1] = 1.0
    # forward rows are row vectors start_u T^k; backward rows are T^(n-k) 1_v
    fwd, flog = _recursion(A.T.tocsr(), n_steps, start_u, bool_masks, M)
    rev_masks = None if bool_masks is None else bool_masks[::-1]
    bwd, blog = _recursion(A, n_steps, start_v, rev_masks, M)
    return BridgeEnsemble(kernel=kernel, potential=potential, lam=lam, u=u, v=v,
                          n_steps=n_steps, M=M, tilt=tilt, operator=A, end_weight=w,
                          forward=fwd, forward_log=flog, backward=bwd[::-1].copy(),
                          backward_log=blog[::-1].copy(), masks=masks)


def partition_function(kernel, potential, lam, u, v, N, M=None, tilt=1.0) -> float:
    """``log Z`` of the positive tilted bridge on ``-N..N``."""
    return make_bridge(kernel, potential, lam, u, v, N=N, M=M, tilt=tilt).log_Z


def restricted_partition(kernel, potential, lam, u, v, masks, N=None, n_steps=None,
                         M=None, tilt: float = 1.0) -> float:
    """``log Z`` with per-time allowed intervals; ``-inf`` if a mask empties the space.

    Only the current vector is kept, so long horizons need ``O(M)`` memory.
    """
    masks = np.asarray(masks, dtype=np.int64)
    if n_steps is None and N is None:
        n_steps = masks.shape[0] - 1
    n_steps, u, v, masks = _check_args(N, n_steps, u, v, masks)
    A, w, bool_masks, M = _prepare(kernel, potential, lam, u, v, n_steps, M, masks, tilt)
    vec = np.zeros(M)
    vec[v - 1] = 1.0
    acc = 0.0
    for k in range(n_steps, -1, -1):
        if k < n_steps:
            vec = A @ vec
        vec = vec * bool_masks[k]
        m = vec.max()
        if m <= 0:
            return -math.inf
        vec /= m
        acc += math.log(m)
    if vec[u - 1] <= 0:
        return -math.inf
    return math.log(w[u - 1]) + math.log(w[v - 1]) + math.log(vec[u - 1]) + acc


def _banded_operator(A: sp.csr_matrix, offsets: np.ndarray) -> np.ndarray:
    M = A.shape[0]
    cols = np.arange(M)[:, None] + offsets[None, :]
    ok = (cols >= 0) & (cols < M)
    out = np.zeros((M, len(offsets)))
    r, k = np.nonzero(ok)
    out[r, k] = np.asarray(A[r, cols[r, k]]).ravel()
    return out


@njit(cache=True)
def _bridge_block(states, u, k0, B, Tb, offsets, out):
    n_block, n = u.shape
    K = offsets.shape[0]
    M = B.shape[1]
    w = np.empty(K)
    for s in range(n_block):
        row = k0 + s + 1
        for j in range(n):
            x = states[j]
            tot = 0.0
            for k in range(K):
                y = x + offsets[k]
                if 0 <= y < M:
                    w[k] = Tb[x, k] * B[row, y]
                else:
                    w[k] = 0.0
                tot += w[k]
            if not tot > 0.0:
                return j
            target = u[s, j] * tot
            acc = 0.0
            pick = -1
            for k in range(K):
                if w[k] > 0.0:
                    pick = k
                    acc += w[k]
                    if target < acc:
                        break
            states[j] = x + offsets[pick]
            out[s, j] = states[j]
    return -1


def iter_bridge_blocks(ens: BridgeEnsemble, n_samples: int, seed: int, block: int = 256):
    """Yield ``(k0, states)`` with ``states[s, j]`` the site after ``k0 + s + 1`` steps.

    The first block is preceded by ``(−1, u * ones)`` so every time index
    ``0..n_steps`` is covered exactly once.
    """
    if ens.empty:
        raise DeadEndError("bridge has zero weight")
    rng = np.random.default_rng(seed)
    Tb = _banded_operator(ens.operator, ens.kernel.offsets)
    states = np.full(n_samples, ens.u - 1, dtype=np.int64)
    yield -1, (states + 1)[None, :].copy()
    k0 = 0
    while k0 < ens.n_steps:
        nb = min(block, ens.n_steps - k0)
        out = np.empty((nb, n_samples), dtype=np.int64)
        bad = _bridge_block(states, rng.random((nb, n_samples)), k0, ens.backward, Tb,
                            ens.kernel.offsets, out)
        if bad >= 0:
            raise DeadEndError(f"sample {bad} reached a state with no admissible continuation")
        yield k0, out + 1
        k0 += nb


def sample_bridges(ens: BridgeEnsemble, n_samples: int, seed: int, record=None,
                   block: int = 256) -> np.ndarray:
    """``(n_samples, len(record))`` sites at the recorded step counts (default all)."""
    record = np.arange(ens.n_steps + 1) if record is None else np.asarray(record, dtype=np.int64)
    out = np.empty((n_samples, len(record)), dtype=np.int64)
    for k0, states in iter_bridge_blocks(ens, n_samples, seed, block):
        first = k0 + 1
        sel = np.nonzero((record >= first) & (record < first + len(states)))[0]
        out[:, sel] = states[record[sel] - first].T
    return out


def sample_bridge(ens: BridgeEnsemble, seed: int) -> LatticePath:
    """One exact bridge sample; time indices start at ``-n_steps // 2``."""
    values = sample_bridges(ens, 1, seed)[0]
    return LatticePath(start_index=-(ens.n_steps // 2), values=values, seed=seed)
