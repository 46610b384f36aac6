"""Replica-vectorized flow simulation.

The public modules expose readable single-realization simulators; every
Monte Carlo experiment instead runs through :func:`run_flow_batch`, which
steps all replicas at once with numba kernels and streams noise in chunks
(so that horizon * replicas never has to fit in memory).  Noise comes from
the same Philox substream discipline as :func:`brownflow.noise.sample_bundle`,
one sub-seed per replica, so batch runs are bit-reproducible and a single
replica can be replayed through the reference simulators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .noise import W_MINUS, W_PLUS, aux, derive_seed, stream_generator

#: modes of the batch engine
PM = "pm"
PLUS_KERNEL = "plus_kernel"
PLUS_COALESCING = "plus_coalescing"


@dataclass
class BatchResult:
    terminals: np.ndarray          # (R, n) final positions
    merge_step: np.ndarray         # (R, n-1) first step adjacent classes merged, -1 if never
    positions: np.ndarray | None   # (R, n, n_steps+1) if store=True


@njit(cache=True)
def _steps_pm(pos, rep, merge_step, dwp, dwm, shared_p, out, k0, merge_tol):
    n_rep, n = pos.shape
    c = dwm.shape[1]
    for r in range(n_rep):
        rp = 0 if shared_p else r
        for k in range(c):
            for j in range(n):
                x = pos[r, j]
                if x > 0.0:
                    pos[r, j] = x + dwp[rp, k]
                else:
                    pos[r, j] = x + dwm[r, k]
            for j in range(1, n):
                if rep[r, j] != rep[r, j - 1] and pos[r, j] - pos[r, j - 1] <= merge_tol:
                    hi = rep[r, j]
                    lo = rep[r, j - 1]
                    for m in range(n):
                        if rep[r, m] == hi:
                            rep[r, m] = lo
                            pos[r, m] = pos[r, lo]
                    if merge_step[r, j - 1] < 0:
                        merge_step[r, j - 1] = k0 + k + 1
            if out.shape[2] > 1:
                for j in range(n):
                    out[r, j, k + 1] = pos[r, j]


@njit(cache=True)
def _steps_plus(pos, rep, merge_step, dwp, daux, shared_p, out, k0, merge_tol,
                coalescing):
    n_rep, n = pos.shape
    c = daux.shape[2]
    for r in range(n_rep):
        rp = 0 if shared_p else r
        for k in range(c):
            for j in range(n):
                jr = rep[r, j] if coalescing else j
                x = pos[r, j]
                if x > 0.0:
                    pos[r, j] = x + dwp[rp, k]
                else:
                    pos[r, j] = x + daux[r, jr, k]
            if coalescing:
                for j in range(1, n):
                    if rep[r, j] != rep[r, j - 1] and pos[r, j] - pos[r, j - 1] <= merge_tol:
                        hi = rep[r, j]
                        lo = rep[r, j - 1]
                        for m in range(n):
                            if rep[r, m] == hi:
                                rep[r, m] = lo
                                pos[r, m] = pos[r, lo]
                        if merge_step[r, j - 1] < 0:
                            merge_step[r, j - 1] = k0 + k + 1
            if out.shape[2] > 1:
                for j in range(n):
                    out[r, j, k + 1] = pos[r, j]


class _StreamBank:
    """Chunked draws from per-replica (or shared) Philox substreams."""

    def __init__(self, seed, label, n_replicas, shared):
        self.shared = shared
        if shared:
            self._gens = [stream_generator(seed, label)]
        else:
            self._gens = [
                stream_generator(derive_seed(seed, "replica", r), label)
                for r in range(n_replicas)
            ]

    def draw(self, c, sigma):
        out = np.empty((len(self._gens), c))
        for r, g in enumerate(self._gens):
            out[r, :] = g.standard_normal(c)
        out *= sigma
        return out


def run_flow_batch(x0, grid, seed, n_replicas, mode=PM, shared_w_plus=False,
                   consumer=None, chunk=2048, merge_tol=None, store=False):
    """Advance ``n_replicas`` copies of the n-point motion over ``grid``.

    ``consumer(k0, block)`` (optional) receives each chunk as positions of
    shape ``(R, n, c + 1)`` with ``block[:, :, 0]`` the state at step ``k0``.
    ``shared_w_plus`` makes every replica ride the same W+ stream (the
    conditioning used when estimating the kernel by filtering).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n = len(x0)
    if np.any(np.diff(x0) < 0):
        raise ValueError("initial positions must be sorted")
    if merge_tol is None:
        merge_tol = 1e-12 * max(1.0, float(np.max(np.abs(x0))) if n else 1.0)
    sigma = math.sqrt(grid.dt)
    n_steps = grid.n_steps

    pos = np.tile(x0, (n_replicas, 1))
    rep = np.tile(np.arange(n, dtype=np.int64), (n_replicas, 1))
    merge_step = np.full((n_replicas, max(n - 1, 0)), -1, dtype=np.int64)
    # pre-merge exact duplicates, mirroring the reference simulator
    for j in range(1, n):
        if x0[j] - x0[j - 1] <= merge_tol:
            rep[:, j] = rep[:, j - 1]
            merge_step[:, j - 1] = 0

    bank_p = _StreamBank(seed, W_PLUS, n_replicas, shared_w_plus)
    if mode == PM:
        bank_m = _StreamBank(seed, W_MINUS, n_replicas, False)
    elif mode in (PLUS_KERNEL, PLUS_COALESCING):
        banks_aux = [_StreamBank(seed, aux(j), n_replicas, False) for j in range(n)]
    else:
        raise ValueError("unknown mode %r" % (mode,))

    history = np.empty((n_replicas, n, n_steps + 1)) if store else None
    if store:
        history[:, :, 0] = pos

    k0 = 0
    while k0 < n_steps:
        c = min(chunk, n_steps - k0)
        need_block = store or consumer is not None
        if need_block:
            block = np.empty((n_replicas, n, c + 1))
            block[:, :, 0] = pos
            out = block
        else:
            out = np.empty((n_replicas, n, 1))
        dwp = bank_p.draw(c, sigma)
        if mode == PM:
            dwm = bank_m.draw(c, sigma)
            _steps_pm(pos, rep, merge_step, dwp, dwm, bank_p.shared, out, k0, merge_tol)
        else:
            daux = np.empty((n_replicas, n, c))
            for j in range(n):
                daux[:, j, :] = banks_aux[j].draw(c, sigma)
            _steps_plus(pos, rep, merge_step, dwp, daux, bank_p.shared, out, k0,
                        merge_tol, mode == PLUS_COALESCING)
        if consumer is not None:
            consumer(k0, block)
        if store:
            history[:, :, k0 + 1:k0 + c + 1] = block[:, :, 1:]
        k0 += c

    return BatchResult(terminals=pos, merge_step=merge_step, positions=history)


def replica_bundle_seed(seed, r):
    """Seed whose (label) substreams the batch engine uses for replica ``r``."""
    return derive_seed(seed, "replica", r)
