"""Time changes, reflected boundary processes and local-time estimation.

The two-point motion of the coalescing flow, watched only while it sits in
a wedge-shaped region, is a reflected process: excursions outside the region
are excised, and what the process loses at the boundary is measured by a
local time.  This module builds those time-changed paths, estimates the
boundary local time by counting epsilon-crossings, and assembles the two
sides of the Laplace-transform identity that links the total time spent
outside the wedge to the local time accumulated inside it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .noise import W_MINUS, W_PLUS, TimeGrid, derive_seed, stream_generator

#: continuity correction for barrier detection on a discretely sampled path:
#: a level eps monitored every dt behaves like a continuous barrier at
#: eps - BETA_BGK * sqrt(dt)  (Broadie-Glasserman-Kou constant zeta(1/2)/sqrt(2*pi))
BETA_BGK = 0.5826


@dataclass
class WedgePath:
    """A 2d path restricted to the steps spent in a retained region.

    ``xr``, ``yr`` hold the surviving path points (length = retained steps
    + 1, or 0 if nothing was retained); ``index_map`` the originating step
    index of each retained step; ``l_est`` a running boundary local-time
    estimate (zeros until one is attached).
    """

    grid_r: TimeGrid
    xr: np.ndarray
    yr: np.ndarray
    index_map: np.ndarray
    region: str = "D"
    l_est: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.l_est is None:
            self.l_est = np.zeros(len(self.xr))

    @property
    def n_steps(self):
        return self.grid_r.n_steps


@dataclass
class CrossingCount:
    """Completed excursions of a distance path from 0 up to level eps."""

    eps: float
    count: int

    @property
    def estimate(self):
        return self.eps * self.count


def time_change(path2d, indicator, dt, region="D"):
    """Excise the steps where ``indicator`` is false.

    ``path2d`` is a pair of arrays of length ``n+1``; ``indicator`` a boolean
    array of length ``n`` classifying each step.  The output path keeps the
    state before the first retained step and the state after every retained
    step, so consecutive retained steps stay contiguous in the new clock.
    """
    x, y = (np.asarray(a, dtype=np.float64) for a in path2d)
    indicator = np.asarray(indicator, dtype=bool)
    if len(x) != len(y):
        raise ValueError("path components have different lengths")
    if len(indicator) != len(x) - 1:
        raise ValueError(
            "indicator has %d entries for %d steps" % (len(indicator), len(x) - 1)
        )
    kept = np.nonzero(indicator)[0]
    if len(kept) == 0:
        grid_r = TimeGrid(0.0, dt, 0)
        empty = np.empty(0)
        return WedgePath(grid_r=grid_r, xr=empty, yr=empty.copy(),
                         index_map=kept, region=region)
    xr = np.concatenate(([x[kept[0]]], x[kept + 1]))
    yr = np.concatenate(([y[kept[0]]], y[kept + 1]))
    grid_r = TimeGrid(0.0, dt, len(kept))
    return WedgePath(grid_r=grid_r, xr=xr, yr=yr, index_map=kept, region=region)


def uv_transform(wedge):
    """Rotate by 45 degrees: u = (y+x)/sqrt(2), v = (y-x)/sqrt(2)."""
    s = math.sqrt(2.0)
    return (wedge.yr + wedge.xr) / s, (wedge.yr - wedge.xr) / s


@njit(cache=True)
def _count_upcrossings(path, level, reset_tol):
    count = 0
    armed = path[0] <= reset_tol
    for i in range(len(path)):
        v = path[i]
        if armed:
            if v >= level:
                count += 1
                armed = False
        elif v <= reset_tol:
            armed = True
    return count


def _crossing_params(distance_path, eps, boundary_tol, dt):
    if eps <= 0:
        raise ValueError("eps must be positive")
    level = eps
    if dt is not None:
        # the path only reveals itself on the grid, so an excursion must
        # overshoot eps a little before we see it; correct the barrier
        level = eps - BETA_BGK * math.sqrt(dt)
        if level <= 0:
            raise ValueError("eps too small for this dt (corrected level <= 0)")
    if boundary_tol is None:
        if dt is not None:
            # discrete minima are biased up by the same continuity-correction
            # offset as maxima are biased down, so re-arming here makes the
            # counted band exactly [0, eps] in the continuous limit
            boundary_tol = BETA_BGK * math.sqrt(dt)
        else:
            scale = float(np.max(distance_path)) if len(distance_path) else 1.0
            boundary_tol = 1e-9 * max(1.0, scale)
    return level, boundary_tol


def local_time_crossings(distance_path, eps, boundary_tol=None, dt=None):
    """Local-time estimate eps * (number of completed 0 -> eps excursions).

    For a path reflected at 0 the estimate converges to the Skorokhod local
    time as eps -> 0.  Passing ``dt`` applies a continuity correction to the
    detection level and defaults the reset tolerance to 2*sqrt(dt); without
    it, a discretely sampled path essentially never re-arms.
    """
    distance_path = np.asarray(distance_path, dtype=np.float64)
    if len(distance_path) and distance_path.min() < -1e-12:
        raise ValueError("distance path must be nonnegative")
    level, reset_tol = _crossing_params(distance_path, eps, boundary_tol, dt)
    count = _count_upcrossings(distance_path, level, reset_tol)
    return CrossingCount(eps=eps, count=int(count))


@njit(cache=True)
def _running_crossing_estimate(path, level, reset_tol, eps, out):
    # same event logic as _count_upcrossings, but each completed excursion
    # spreads its eps increment linearly over the steps since it was armed
    # (keeps the running estimate monotone without eps-sized jumps)
    total = 0.0
    armed = path[0] <= reset_tol
    arm_at = 0
    out[0] = 0.0
    for i in range(1, len(path)):
        v = path[i]
        if armed and v >= level:
            width = i - arm_at
            for j in range(arm_at + 1, i + 1):
                out[j] = total + eps * (j - arm_at) / width
            total += eps
            armed = False
            arm_at = i
        else:
            if (not armed) and v <= reset_tol:
                armed = True
                arm_at = i
            out[i] = total
    return total


def running_local_time(distance_path, eps, boundary_tol=None, dt=None):
    """Running version of :func:`local_time_crossings` (nondecreasing array)."""
    distance_path = np.asarray(distance_path, dtype=np.float64)
    level, reset_tol = _crossing_params(distance_path, eps, boundary_tol, dt)
    out = np.zeros(len(distance_path))
    if len(distance_path):
        _running_crossing_estimate(distance_path, level, reset_tol, eps, out)
    return out


# ---------------------------------------------------------------------------
# Laplace identity for the coalescing pair

@dataclass
class LaplaceSamples:
    """Per-replica ingredients of the Laplace identity for a coalescing pair.

    ``t_outside``: time spent outside the wedge before coalescence (T - T0);
    ``l_est``: boundary local-time estimate at the end of the wedge clock;
    ``t0``: wedge-clock time consumed before coalescence; ``t0_corner``: the
    first wedge-clock time the pair came within ``corner_tol`` of the corner
    (a tolerance-based detector, kept for sensitivity reporting).  Censored
    replicas (no coalescence before the horizon) are excluded from the
    arrays and counted.
    """

    t_outside: np.ndarray
    l_est: np.ndarray
    t0: np.ndarray
    t0_corner: np.ndarray
    eps: float
    dt: float
    horizon: float
    censored: int
    n_coarse: int = 0

    @property
    def n_effective(self):
        return len(self.t_outside)


@njit(cache=True)
def _laplace_pair_chunk(state, dwp, dwm, level, rearm, merge_tol, corner_tol):
    """Advance one replica of the pair through a chunk of increments.

    state = [x, y, d_steps, dc_steps, ncross, armed, t0c_steps]
    (floats; counters are exact small integers).  Returns the in-chunk step
    index after which the pair coalesced, or -1.  An excursion of the
    penetration depth counts when it reaches ``level``; the counter re-arms
    once the depth falls back to ``rearm`` (the same barrier-correction
    offset, so the armed band has the full width eps).
    """
    x = state[0]
    y = state[1]
    d_steps = state[2]
    dc_steps = state[3]
    ncross = state[4]
    armed = state[5] > 0.5
    t0c = state[6]
    done = -1
    for k in range(len(dwp)):
        x = x + (dwp[k] if x > 0.0 else dwm[k])
        y = y + (dwp[k] if y > 0.0 else dwm[k])
        if y - x <= merge_tol:
            done = k
            break
        depth = (x if x > 0.0 else 0.0) + (-y if y < 0.0 else 0.0)
        if depth > 0.0:
            dc_steps += 1.0
            if armed and depth >= level:
                ncross += 1.0
                armed = False
        else:
            d_steps += 1.0
            if t0c < 0.0 and max(abs(x), abs(y)) <= corner_tol:
                t0c = d_steps
        if (not armed) and depth <= rearm:
            armed = True
    state[0] = x
    state[1] = y
    state[2] = d_steps
    state[3] = dc_steps
    state[4] = ncross
    state[5] = 1.0 if armed else 0.0
    state[6] = t0c
    return done


def laplace_identity_samples(x0_pair, dt, eps, n_replicas, seed,
                             horizon=None, corner_tol=None, chunk=1 << 16,
                             coarse_dt=None, alpha_min=0.5,
                             saturate_exponent=15.0):
    """Sample both sides of the pair Laplace identity by streaming replicas.

    Each replica runs the two-point coalescing motion from ``x0_pair``
    (straddling 0) until coalescence or ``horizon``.  The wedge here is
    D = {x <= 0 <= y}; the boundary local time is estimated from completed
    eps-excursions of the penetration depth max(x,0) + max(-y,0), with the
    normalization L = eps * count / 2 (each boundary axis carries half of a
    symmetric excursion count).

    The coalescence time is heavy tailed (P(T > h) decays like 1/sqrt(h)),
    so resolving a small censored fraction at a fine ``dt`` is prohibitively
    expensive.  Passing ``coarse_dt`` enables a second phase: once the
    outside-time exponent at ``alpha_min`` exceeds ``saturate_exponent``,
    the replica's exp(-alpha*(T-T0)) is below exp(-saturate_exponent)
    (~3e-7 at the default 15, orders of magnitude under any Monte Carlo
    error bar) for every alpha >= alpha_min, so the time side is settled.
    The simulation then continues at ``coarse_dt``, still counting
    eps-crossings (with the barrier correction recomputed for the coarse
    step) so the local-time side stays live, until coalescence or the
    horizon.  ``n_coarse`` in the result counts such replicas.

    Noise streams per replica match the batch engine, so any replica that
    never entered the coarse phase can be replayed through
    ``simulate_n_point_pm`` for inspection.
    """
    x0, y0 = float(x0_pair[0]), float(x0_pair[1])
    if not x0 <= 0.0 <= y0:
        raise ValueError("pair must straddle 0, got %r" % (x0_pair,))
    sep = y0 - x0
    if horizon is None:
        horizon = 50.0 * sep * sep
    if corner_tol is None:
        corner_tol = 2.0 * math.sqrt(dt)
    b = BETA_BGK * math.sqrt(dt)
    level = eps - b
    if level <= 0:
        raise ValueError("eps too small for this dt")
    merge_tol = 1e-12 * max(1.0, abs(x0), abs(y0))
    max_steps = int(round(horizon / dt))
    sigma = math.sqrt(dt)
    if coarse_dt is not None:
        b_c = BETA_BGK * math.sqrt(coarse_dt)
        level_c = eps - b_c
        if level_c <= 0:
            raise ValueError("eps too small for coarse_dt")
        # the separation is only monitored every coarse_dt and moves with
        # variance 2*coarse_dt per wedge step, so absorption at 0 behaves
        # like a barrier shifted by the same continuity correction
        merge_tol_c = BETA_BGK * math.sqrt(2.0 * coarse_dt)

    t_out, l_vals, t0_vals, t0c_vals = [], [], [], []
    censored = 0
    n_coarse = 0
    for r in range(n_replicas):
        sub = derive_seed(seed, "replica", r)
        gp = stream_generator(sub, W_PLUS)
        gm = stream_generator(sub, W_MINUS)
        state = np.array([x0, y0, 0.0, 0.0, 0.0, 1.0, -1.0])
        steps_left = max_steps
        done = -1
        coarse = False
        while steps_left > 0:
            c = min(chunk, steps_left)
            dwp = gp.standard_normal(c) * sigma
            dwm = gm.standard_normal(c) * sigma
            done = _laplace_pair_chunk(state, dwp, dwm, level, b,
                                       merge_tol, corner_tol)
            if done >= 0:
                break
            steps_left -= c
            if (coarse_dt is not None
                    and alpha_min * dt * state[3] > saturate_exponent):
                coarse = True
                break
        fine_d, fine_dc = state[2], state[3]
        if coarse:
            # the time transform is settled; keep counting crossings at the
            # coarse step (barrier correction recomputed for that step) so
            # the local-time side stays live until coalescence
            n_coarse += 1
            c_sigma = math.sqrt(coarse_dt)
            c_left = int(round(steps_left * dt / coarse_dt))
            while c_left > 0:
                c = min(chunk, c_left)
                dwp = gp.standard_normal(c) * c_sigma
                dwm = gm.standard_normal(c) * c_sigma
                done = _laplace_pair_chunk(state, dwp, dwm, level_c, b_c,
                                           merge_tol_c, corner_tol)
                if done >= 0:
                    break
                c_left -= c
        if done < 0:
            censored += 1
            continue
        t_out.append(dt * fine_dc + coarse_dt * (state[3] - fine_dc)
                     if coarse else dt * state[3])
        l_vals.append(eps * state[4] / 2.0)
        t0_vals.append(dt * fine_d + coarse_dt * (state[2] - fine_d)
                       if coarse else dt * state[2])
        t0c_vals.append(dt * state[6] if state[6] >= 0 else math.nan)
    return LaplaceSamples(
        t_outside=np.array(t_out), l_est=np.array(l_vals),
        t0=np.array(t0_vals), t0_corner=np.array(t0c_vals),
        eps=eps, dt=dt, horizon=horizon, censored=censored,
        n_coarse=n_coarse,
    )


def laplace_report(samples, alphas=(0.5, 1.0, 2.0)):
    """Compare E[exp(-a*(T-T0))] with E[exp(-2*sqrt(2a)*L)] per alpha.

    The two transforms come from the same replicas, so the error bar is the
    stderr of the per-replica difference.
    """
    n = samples.n_effective
    rows = []
    for a in alphas:
        lhs = np.exp(-a * samples.t_outside)
        rhs = np.exp(-2.0 * math.sqrt(2.0 * a) * samples.l_est)
        diff = lhs - rhs
        se = float(np.std(diff, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
        rows.append({
            "alpha": a,
            "lhs_mean": float(np.mean(lhs)),
            "rhs_mean": float(np.mean(rhs)),
            "diff": float(np.mean(diff)),
            "stderr": se,
            "pass": bool(abs(np.mean(diff)) <= 3.0 * se),
        })
    total = n + samples.censored
    return {
        "n_effective": n,
        "censored": samples.censored,
        "censored_fraction": samples.censored / total if total else 0.0,
        "n_coarse": samples.n_coarse,
        "alphas": rows,
    }


# ---------------------------------------------------------------------------
# Structural checks

def reflection_decomposition_check(wedge, eps, dt):
    """Check the oblique-reflection decomposition on a half-plane wedge.

    For a pair watched only while the first coordinate is negative, both
    coordinates should decompose as independent Brownian motions minus one
    shared local-time drift.  Quadratic and cross variations are taken on
    the raw increments over retained steps that were already adjacent in
    the original clock (those are exact Gaussian steps; an increment that
    spans an excised excursion carries a boundary overshoot).  The drift
    statement is checked at the terminals: adding the running local-time
    estimate back should leave both endpoints centered near their starts.
    """
    if wedge.n_steps == 0:
        return {"elapsed": 0.0, "qv_b1": 0.0, "qv_b2": 0.0,
                "cross_variation": 0.0, "b1_terminal": 0.0, "b2_terminal": 0.0,
                "l_total": 0.0, "tol": 0.0}
    distance = np.maximum(-wedge.xr, 0.0)
    l_est = running_local_time(distance, eps, dt=dt)
    b1 = wedge.xr + l_est - wedge.xr[0]
    b2 = wedge.yr + l_est - wedge.yr[0]
    elapsed = wedge.grid_r.t_end - wedge.grid_r.t_start
    d1 = np.diff(wedge.xr)
    d2 = np.diff(wedge.yr)
    im = wedge.index_map
    contig = np.empty(len(d1), dtype=bool)
    contig[0] = True
    contig[1:] = np.diff(im) == 1
    d1c = d1[contig]
    d2c = d2[contig]
    elapsed_c = dt * len(d1c)
    return {
        "elapsed": float(elapsed_c),
        "elapsed_total": float(elapsed),
        "qv_b1": float(np.sum(d1c * d1c)),
        "qv_b2": float(np.sum(d2c * d2c)),
        "cross_variation": float(np.sum(d1c * d2c)),
        "b1_terminal": float(b1[-1]),
        "b2_terminal": float(b2[-1]),
        "l_total": float(l_est[-1]),
        "tol": 5.0 * math.sqrt(dt) * max(elapsed_c, dt),
        "terminal_tol": 5.0 * math.sqrt(max(elapsed, dt)),
    }


def corner_decomposition_check(path2d, dt, margin=None):
    """Split a 2-point path of the positive-side flow at the wedge boundary.

    Steps are classified by the state they land in: the part with a
    coordinate <= 0, and the part with both > 0.  On the latter the gap
    y - x stays (numerically) frozen and the lower coordinate behaves as a
    Brownian motion away from 0.  The index maps must partition the steps so
    that scattering both parts back reproduces the path bitwise.
    """
    x, y = (np.asarray(a, dtype=np.float64) for a in path2d)
    n = len(x) - 1
    if margin is None:
        margin = 4.0 * math.sqrt(dt)
    inside = (x[1:] > 0.0) & (y[1:] > 0.0)   # per-step, by landing state
    idx_plus = np.nonzero(inside)[0]
    idx_r = np.nonzero(~inside)[0]

    # reassembly through the index maps
    rx = np.empty(n + 1)
    ry = np.empty(n + 1)
    rx[0], ry[0] = x[0], y[0]
    rx[idx_plus + 1] = x[idx_plus + 1]
    ry[idx_plus + 1] = y[idx_plus + 1]
    rx[idx_r + 1] = x[idx_r + 1]
    ry[idx_r + 1] = y[idx_r + 1]
    exact = bool(np.array_equal(rx, x) and np.array_equal(ry, y))

    # gap freeze on the retained-plus steps
    gap_drift = 0.0
    r_incr = []
    rmin = np.minimum(x, y)
    for k in idx_plus:
        if x[k] > 0.0 and y[k] > 0.0:   # step fully inside the quadrant
            gap_drift = max(gap_drift, abs((y[k + 1] - x[k + 1]) - (y[k] - x[k])))
            if rmin[k] >= margin and rmin[k + 1] >= margin:
                r_incr.append(rmin[k + 1] - rmin[k])
    r_incr = np.array(r_incr)
    if len(r_incr) >= 20:
        from scipy import stats
        ks = stats.kstest(r_incr / math.sqrt(dt), "norm")
        ks_stat, ks_p = float(ks.statistic), float(ks.pvalue)
    else:
        ks_stat, ks_p = math.nan, math.nan
    return {
        "n_steps": n,
        "n_plus": int(len(idx_plus)),
        "n_r": int(len(idx_r)),
        "partition_complete": int(len(idx_plus) + len(idx_r)) == n,
        "reassembly_exact": exact,
        "gap_max_drift": float(gap_drift),
        "r_increments_ks_stat": ks_stat,
        "r_increments_ks_pvalue": ks_p,
        "n_r_increments": int(len(r_incr)),
    }


def h_residual_check(wedge):
    """Ito-residual diagnostic for h(u,v) = (u^2 + v^2) / (2v).

    On a stretch with v bounded away from 0, the change of h along the path
    minus the martingale term (first-order increments) minus the drift
    0.5 * lap(h) * dt should be a mean-zero residual of order dt.
    """
    u, v = uv_transform(wedge)
    if np.min(v) <= 0:
        raise ValueError("h diagnostic needs v bounded away from 0")
    dt = wedge.grid_r.dt
    du = np.diff(u)
    dv = np.diff(v)
    u0, v0 = u[:-1], v[:-1]
    h = (u * u + v * v) / (2.0 * v)
    h_u = u0 / v0
    h_v = 0.5 - u0 * u0 / (2.0 * v0 * v0)
    lap = 1.0 / v0 + u0 * u0 / v0 ** 3
    martingale = np.sum(h_u * du + h_v * dv)
    drift = np.sum(0.5 * lap * dt)
    residual = float(h[-1] - h[0] - martingale - drift)
    return {"residual": residual, "h_change": float(h[-1] - h[0]),
            "martingale_part": float(martingale), "drift_part": float(drift)}
