"""Coalescing flow driven by two half-line white noises.

A particle above zero moves with the increments of ``W_PLUS``, a particle
below zero with ``W_MINUS`` (at exactly zero it follows ``W_MINUS``; any
fixed convention is admissible since the time spent there is negligible).
All particles of one realization share the same two driving streams, which
makes particles on the same side move in parallel and makes crossing pairs
coalesce.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .noise import W_MINUS, W_PLUS, NoiseBundle, cumulate

#: default relative coalescence tolerance (positions closer than
#: merge_tol * scale are merged even without a sign change)
MERGE_TOL = 1e-12


def step_pm(x, dw_plus, dw_minus):
    """One Euler step: ``x + dw_plus`` if ``x > 0``, else ``x + dw_minus``."""
    if not (math.isfinite(x) and math.isfinite(dw_plus) and math.isfinite(dw_minus)):
        raise ValueError("non-finite input to step_pm")
    return x + dw_plus if x > 0 else x + dw_minus


@dataclass
class NPointPath:
    """Trajectories of n coupled particles plus coalescence bookkeeping.

    ``positions`` has shape ``(n_particles, n_steps + 1)``; ``class_id`` the
    same shape, holding the lowest particle index of each coalescence class.
    ``coalescence_times[(i, j)]`` is the first time the classes of particles
    ``i < j`` merged (``inf`` if they never did).
    """

    grid: object
    positions: np.ndarray
    class_id: np.ndarray
    coalescence_times: dict

    @property
    def n_particles(self):
        return self.positions.shape[0]

    def zero_crossing_steps(self, particle):
        """Steps at which a particle's path changed sign (its zero-hit epochs)."""
        p = self.positions[particle]
        return np.nonzero(np.sign(p[1:]) != np.sign(p[:-1]))[0]


@dataclass
class FlowMapSample:
    """Images of a sorted point grid under one realized flow map."""

    x_grid: np.ndarray
    images: np.ndarray
    noise_ref: int


def simulate_one_point_pm(x0, bundle):
    """Euler path of the one-point motion; ``path[0] = x0``."""
    for label in (W_PLUS, W_MINUS):
        if label not in bundle:
            raise ValueError("bundle is missing stream %r" % label)
    dwp = bundle[W_PLUS]
    dwm = bundle[W_MINUS]
    n = bundle.grid.n_steps
    path = np.empty(n + 1)
    path[0] = x = float(x0)
    for k in range(n):
        x = x + (dwp[k] if x > 0 else dwm[k])
        path[k + 1] = x
    return path


def simulate_n_point_pm(x0, bundle, merge_tol=None):
    """n-point motion: shared increments per side, adjacent classes merged
    when their positions cross or meet.

    ``x0`` must be sorted; exact duplicates start pre-merged. Once merged,
    classes move identically forever (bitwise).
    """
    for label in (W_PLUS, W_MINUS):
        if label not in bundle:
            raise ValueError("bundle is missing stream %r" % label)
    x0 = np.asarray(x0, dtype=np.float64)
    if np.any(np.diff(x0) < 0):
        raise ValueError("initial positions must be sorted")
    n = len(x0)
    n_steps = bundle.grid.n_steps
    if merge_tol is None:
        merge_tol = MERGE_TOL * max(1.0, float(np.max(np.abs(x0))) if n else 1.0)

    dwp = bundle[W_PLUS]
    dwm = bundle[W_MINUS]
    positions = np.empty((n, n_steps + 1))
    class_id = np.empty((n, n_steps + 1), dtype=np.int64)
    pos = x0.copy()
    cls = np.arange(n)
    coalescence = {}
    # pre-merge exact duplicates
    for j in range(1, n):
        if pos[j] - pos[j - 1] <= merge_tol:
            _merge(cls, pos, j, coalescence, bundle.grid.t_start)
    positions[:, 0] = pos
    class_id[:, 0] = cls

    for k in range(n_steps):
        dp, dm = dwp[k], dwm[k]
        for j in range(n):
            pos[j] = pos[j] + (dp if pos[j] > 0 else dm)
        for j in range(1, n):
            if cls[j] != cls[j - 1] and pos[j] - pos[j - 1] <= merge_tol:
                _merge(cls, pos, j, coalescence, bundle.grid.time(k + 1))
        positions[:, k + 1] = pos
        class_id[:, k + 1] = cls

    for i in range(n):
        for j in range(i + 1, n):
            coalescence.setdefault((i, j), math.inf)
    return NPointPath(
        grid=bundle.grid, positions=positions, class_id=class_id,
        coalescence_times=coalescence,
    )


def _merge(cls, pos, j, coalescence, t):
    """Merge particle j's class into particle j-1's; lower index wins."""
    lo, hi = cls[j - 1], cls[j]
    members_hi = np.nonzero(cls == hi)[0]
    members_lo = np.nonzero(cls == lo)[0]
    for a in members_lo:
        for b in members_hi:
            key = (min(a, b), max(a, b))
            coalescence.setdefault(key, t)
    cls[members_hi] = lo
    pos[members_hi] = pos[lo]


def flow_map_pm(x_grid, bundle, merge_tol=None):
    """Realized flow map on a sorted point grid (images are nondecreasing)."""
    path = simulate_n_point_pm(x_grid, bundle, merge_tol=merge_tol)
    return FlowMapSample(
        x_grid=np.asarray(x_grid, dtype=np.float64),
        images=path.positions[:, -1].copy(),
        noise_ref=bundle.seed,
    )


def recover_noise_pm(flow_sample, tol=1e-12):
    """Recover the driving increments from the flow far from the origin.

    Requires the point grid to extend beyond the range of the noise: the two
    outermost images on each side must have identical displacement.
    """
    x = flow_sample.x_grid
    img = flow_sample.images
    if len(x) < 2:
        raise ValueError("need at least two grid points on each side")
    disp = img - x
    if abs(disp[-1] - disp[-2]) > tol:
        raise ValueError(
            "grid too narrow on the positive side: displacements %r vs %r"
            % (disp[-2], disp[-1])
        )
    if abs(disp[0] - disp[1]) > tol:
        raise ValueError(
            "grid too narrow on the negative side: displacements %r vs %r"
            % (disp[0], disp[1])
        )
    return disp[-1], disp[0]


def flow_property_check(bundle, s, u, t, x_grid, merge_tol=None):
    """Compare the direct map on [s, t] with the composition through u.

    Both legs reuse the same bundle (restricted to the matching windows);
    the composition restarts particles at the intermediate images.
    """
    grid = bundle.grid
    ks, ku, kt = grid.index_of(s), grid.index_of(u), grid.index_of(t)
    if not ks <= ku <= kt:
        raise ValueError("need s <= u <= t on the grid")
    direct = flow_map_pm(x_grid, bundle.subwindow(ks, kt), merge_tol=merge_tol)
    first = flow_map_pm(x_grid, bundle.subwindow(ks, ku), merge_tol=merge_tol)
    # intermediate images may contain duplicates (coalesced classes); keep
    # them, the simulator treats duplicates as pre-merged
    second = flow_map_pm(first.images, bundle.subwindow(ku, kt), merge_tol=merge_tol)
    deviation = float(np.max(np.abs(second.images - direct.images))) if len(x_grid) else 0.0
    return {
        "s": s, "u": u, "t": t,
        "n_points": len(x_grid),
        "max_abs_deviation": deviation,
    }


def noise_range(bundle):
    """sup over the window of |cumulated noise|, for sizing recovery grids."""
    return max(
        float(np.max(np.abs(cumulate(bundle[W_PLUS])))),
        float(np.max(np.abs(cumulate(bundle[W_MINUS])))),
    )
