"""Flows driven by noise shared on the positive half line only.

Above zero every particle rides the same stream ``W_PLUS``; below zero each
particle (or coalescence class) gets its own auxiliary Brownian motion.
Two n-point laws live on top of this driving rule:

* ``KERNEL_MODE`` — the n-point motion of the diffusive kernel: particles
  that sit together above zero move in parallel and split into independent
  motions once they reach zero; nothing ever merges permanently.
* ``COALESCING_MODE`` — the coalescing flow: classes that cross or meet
  merge forever, exactly as in :mod:`brownflow.flow_pm`.

The kernel itself is estimated by filtering: freeze one ``W_PLUS``
realization and average one-point motions over independent negative-side
noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .flow_pm import MERGE_TOL, _merge
from .noise import W_MINUS, W_PLUS, aux, derive_seed, stream_generator

KERNEL_MODE = "kernel"
COALESCING_MODE = "coalescing"


@dataclass
class PlusNPointPath:
    """Trajectories of the positive-side-noise n-point motion.

    Same layout as :class:`brownflow.flow_pm.NPointPath`; ``mode`` records
    which splitting/merging rule produced it.  In ``KERNEL_MODE``
    ``coalescence_times`` stays empty (classes only split).
    """

    grid: object
    positions: np.ndarray
    class_id: np.ndarray
    coalescence_times: dict
    mode: str

    @property
    def n_particles(self):
        return self.positions.shape[0]


def simulate_n_point_plus(x0, bundle, mode=KERNEL_MODE, merge_tol=None):
    """n-point motion with shared noise above 0, independent noise below.

    ``bundle`` must hold ``W_PLUS`` and ``aux(j)`` for every particle.
    Particles starting at exactly the same point are pre-merged; in
    ``KERNEL_MODE`` such a class splits into singletons at the step its
    position first lands at or below 0.
    """
    if mode not in (KERNEL_MODE, COALESCING_MODE):
        raise ValueError("unknown mode %r" % (mode,))
    x0 = np.asarray(x0, dtype=np.float64)
    if np.any(np.diff(x0) < 0):
        raise ValueError("initial positions must be sorted")
    n = len(x0)
    for label in [W_PLUS] + [aux(j) for j in range(n)]:
        if label not in bundle:
            raise ValueError("bundle is missing stream %r" % label)
    if merge_tol is None:
        merge_tol = MERGE_TOL * max(1.0, float(np.max(np.abs(x0))) if n else 1.0)
    n_steps = bundle.grid.n_steps
    dwp = bundle[W_PLUS]
    daux = [bundle[aux(j)] for j in range(n)]

    positions = np.empty((n, n_steps + 1))
    class_id = np.empty((n, n_steps + 1), dtype=np.int64)
    pos = x0.copy()
    cls = np.arange(n)
    coalescence = {}
    for j in range(1, n):
        if pos[j] - pos[j - 1] <= merge_tol:
            _merge(cls, pos, j, coalescence, bundle.grid.t_start)
    positions[:, 0] = pos
    class_id[:, 0] = cls

    coalescing = mode == COALESCING_MODE
    for k in range(n_steps):
        for j in range(n):
            if pos[j] > 0:
                pos[j] = pos[j] + dwp[k]
            else:
                # a merged class below zero follows its representative's
                # stream in coalescing mode; in kernel mode everyone below
                # zero is on its own
                jr = cls[j] if coalescing else j
                pos[j] = pos[j] + daux[jr][k]
        if coalescing:
            for j in range(1, n):
                if cls[j] != cls[j - 1] and pos[j] - pos[j - 1] <= merge_tol:
                    _merge(cls, pos, j, coalescence, bundle.grid.time(k + 1))
        else:
            for j in range(n):
                if pos[j] <= 0 and np.count_nonzero(cls == cls[j]) > 1:
                    for m in np.nonzero(cls == cls[j])[0]:
                        cls[m] = m
        positions[:, k + 1] = pos
        class_id[:, k + 1] = cls

    if coalescing:
        for i in range(n):
            for j in range(i + 1, n):
                coalescence.setdefault((i, j), math.inf)
    return PlusNPointPath(grid=bundle.grid, positions=positions,
                          class_id=class_id, coalescence_times=coalescence,
                          mode=mode)


# ---------------------------------------------------------------------------
# Kernel estimation by filtering

@dataclass
class KernelEstimate:
    """Empirical kernel at one point: terminal cloud of filtered replicas.

    ``support`` holds the M inner terminal positions (uniform weights);
    all inner replicas shared the same conditioning W+ stream.
    """

    x0: float
    window: tuple
    support: np.ndarray
    w_plus_seed: int

    @property
    def weights(self):
        m = len(self.support)
        return np.full(m, 1.0 / m)


@njit(cache=True)
def _filter_steps(pos, dwp, dwm):
    m = len(pos)
    for r in range(m):
        x = pos[r]
        for k in range(len(dwp)):
            x = x + (dwp[k] if x > 0.0 else dwm[r, k])
        pos[r] = x


def estimate_kernel_plus(x0, grid, w_plus, M, inner_seed, chunk=1 << 14):
    """Filtered kernel estimate: M one-point motions under one shared W+.

    ``w_plus`` is either a seed (increments drawn from its ``W_PLUS``
    substream) or a precomputed increment array of length ``grid.n_steps``.
    Negative-side streams are keyed by ``(inner_seed, replica)``.
    """
    if M < 1:
        raise ValueError("need at least one inner replica")
    sigma = math.sqrt(grid.dt)
    if np.ndim(w_plus) == 0:
        w_plus_seed = int(w_plus)
        gp = stream_generator(w_plus_seed, W_PLUS)
        draw_p = lambda c: gp.standard_normal(c) * sigma
    else:
        w_plus = np.asarray(w_plus, dtype=np.float64)
        if len(w_plus) != grid.n_steps:
            raise ValueError("w_plus stream does not match the grid")
        w_plus_seed = -1
        offset = [0]

        def draw_p(c):
            a = w_plus[offset[0]:offset[0] + c]
            offset[0] += c
            return a

    gens_m = [
        stream_generator(derive_seed(inner_seed, "replica", r), W_MINUS)
        for r in range(M)
    ]
    pos = np.full(M, float(x0))
    left = grid.n_steps
    while left > 0:
        c = min(chunk, left)
        dwp = draw_p(c)
        dwm = np.empty((M, c))
        for r, g in enumerate(gens_m):
            dwm[r, :] = g.standard_normal(c)
        dwm *= sigma
        _filter_steps(pos, dwp, dwm)
        left -= c
    return KernelEstimate(
        x0=float(x0), window=(grid.t_start, grid.t_end), support=pos,
        w_plus_seed=w_plus_seed,
    )


def kernel_apply(est, f):
    """Integrate a scalar function against the empirical kernel."""
    vals = np.asarray([f(p) for p in est.support], dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise ValueError("f takes non-finite values on the kernel support")
    return float(np.mean(vals))


def two_point_correlation_check(x0, horizon, n_outer, f, M=256, dt=1e-3,
                                seed=0):
    """Consistency of the filtered kernel with the 2-point motion.

    E[(Kf)^2] is estimated (a) from squared kernel means over independent
    W+ conditionings, with the inner-noise bias removed, and (b) from the
    2-point kernel-mode motion started at the diagonal (x0, x0), averaging
    f(X)f(Y).  The two must agree within Monte Carlo error.
    """
    from ._batch import PLUS_KERNEL, run_flow_batch
    from .noise import make_grid

    grid = make_grid(0.0, horizon, dt)
    side_a = np.empty(n_outer)
    for r in range(n_outer):
        est = estimate_kernel_plus(
            x0, grid, derive_seed(seed, "outer", r), M,
            inner_seed=derive_seed(seed, "inner", r),
        )
        vals = np.array([f(p) for p in est.support])
        vbar = vals.mean()
        s2 = vals.var(ddof=1) if M > 1 else 0.0
        side_a[r] = vbar * vbar - s2 / M   # unbiased for (E[f|W+])^2

    res = run_flow_batch(
        np.array([x0, x0]), grid, derive_seed(seed, "pair"), n_outer,
        mode=PLUS_KERNEL,
    )
    side_b = np.array([f(a) * f(b) for a, b in res.terminals])

    mean_a, mean_b = float(side_a.mean()), float(side_b.mean())
    se = math.sqrt(side_a.var(ddof=1) / n_outer + side_b.var(ddof=1) / n_outer)
    return {
        "squared_kernel_mean": mean_a,
        "two_point_mean": mean_b,
        "diff": mean_a - mean_b,
        "stderr": se,
        "pass": bool(abs(mean_a - mean_b) <= 3.0 * se),
        "n_outer": n_outer,
        "inner_replicas": M,
    }
