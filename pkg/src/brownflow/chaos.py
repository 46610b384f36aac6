"""Wiener chaos expansion of the filtered kernel, on a function grid.

Everything here works on functions sampled on a uniform grid.  The heat
semigroup is a sampled-Gaussian convolution; the chaos levels are built by
one backward sweep over the time grid:

    level 0 at time u       = P_{t-u} f
    level n at time u_k     = P_dt(level n at u_{k+1})
                              + sum_i e_i * (P_dt(level n-1 at u_{k+1}))' * dW^i_k

which unrolls to the iterated stochastic integrals of the expansion with
strictly ordered time cells (each increment enters a level exactly once,
multiplying a function of the later increments only).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve1d

from .noise import CovarianceKind

#: kernels are truncated this many standard deviations out
_KERNEL_CUTOFF = 8.5


@dataclass
class FunctionGrid:
    """A function sampled on uniform nodes, evaluated by linear interpolation.

    Evaluations outside the node range clamp to the edge values and set
    ``clamped`` (checked by tests that the grid was wide enough).
    """

    nodes: np.ndarray
    values: np.ndarray
    clamped: bool = field(default=False, compare=False)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.nodes) != len(self.values):
            raise ValueError("nodes and values differ in length")
        if len(self.nodes) < 2:
            raise ValueError("need at least two nodes")
        d = np.diff(self.nodes)
        if np.any(d <= 0) or abs(d.max() - d.min()) > 1e-9 * d.mean():
            raise ValueError("nodes must be sorted and uniformly spaced")

    @property
    def h(self):
        return (self.nodes[-1] - self.nodes[0]) / (len(self.nodes) - 1)

    @classmethod
    def from_function(cls, f, x_max, n_nodes, x_min=None):
        if x_min is None:
            x_min = -x_max
        nodes = np.linspace(x_min, x_max, n_nodes)
        return cls(nodes=nodes, values=np.asarray([f(x) for x in nodes], dtype=np.float64))

    def with_values(self, values):
        return FunctionGrid(nodes=self.nodes, values=np.asarray(values, dtype=np.float64))

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if np.any(x < self.nodes[0]) or np.any(x > self.nodes[-1]):
            self.clamped = True
        out = np.interp(x, self.nodes, self.values)
        return float(out) if out.ndim == 0 else out


def default_grid(f, t_total, n_nodes=(1 << 12) + 1, width_sigmas=8.0):
    """Sample ``f`` on the default chaos grid for a total horizon ``t_total``."""
    return FunctionGrid.from_function(f, width_sigmas * math.sqrt(t_total), n_nodes)


_kernel_cache = {}


def _gauss_kernels(tau, h):
    """Sampled heat kernel and its spatial derivative, truncated and cached."""
    key = (round(tau, 15), round(h, 15))
    if key in _kernel_cache:
        return _kernel_cache[key]
    sigma = math.sqrt(tau)
    half = max(1, int(math.ceil(_KERNEL_CUTOFF * sigma / h)))
    u = np.arange(-half, half + 1) * h
    g = np.exp(-u * u / (2.0 * tau))
    g /= g.sum()                       # preserves constants exactly
    pdf = np.exp(-u * u / (2.0 * tau)) / math.sqrt(2.0 * math.pi * tau)
    gd = (-u / tau) * pdf * h          # odd: kills constants exactly
    _kernel_cache[key] = (g, gd)
    return g, gd


def heat_apply(f, tau):
    """Heat semigroup on a function grid (Gaussian smoothing by variance tau)."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if tau == 0:
        return f.with_values(f.values.copy())
    g, _ = _gauss_kernels(tau, f.h)
    return f.with_values(convolve1d(f.values, g, mode="nearest"))


def heat_derivative(f, tau):
    """Spatial derivative of the smoothed function, (P_tau f)'.

    Computed by convolving with the derivative of the heat kernel, so ``f``
    itself is never finite-differenced.
    """
    if tau <= 0:
        raise ValueError("tau must be positive (smoothing is what makes the "
                         "derivative well defined)")
    _, gd = _gauss_kernels(tau, f.h)
    return f.with_values(convolve1d(f.values, gd, mode="nearest"))


def heat_point(f, tau, x):
    """P_tau f evaluated at a single point by direct quadrature."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if tau == 0:
        return f(x)
    u = x - f.nodes
    w = np.exp(-u * u / (2.0 * tau)) / math.sqrt(2.0 * math.pi * tau) * f.h
    return float(np.dot(w, f.values))


def _basis_masks(cov, nodes):
    if cov is CovarianceKind.C_PLUS:
        return [(nodes > 0).astype(np.float64)]
    return [(nodes > 0).astype(np.float64), (nodes < 0).astype(np.float64)]


@dataclass
class ChaosStack:
    """Per-level chaos values at one point, for a batch of noise replicas.

    ``levels`` has shape ``(n_replicas, n_max + 1)``; level 0 is the
    deterministic heat term.
    """

    window: tuple
    x: float
    levels: np.ndarray
    n_max: int

    @property
    def totals(self):
        return self.levels.sum(axis=1)


def chaos_levels_batch(f, window, n_max, increments, cov, x, dt):
    """Backward chaos sweep for a batch of replicas at once.

    ``increments`` maps each basis index (0 for the positive half line, 1
    for the negative one under C_PM) to an ``(R, n_steps)`` array of noise
    increments.  Returns a :class:`ChaosStack`.
    """
    s, t = window
    n_steps = int(round((t - s) / dt))
    if n_max < 0:
        raise ValueError("n_max must be >= 0")
    masks = _basis_masks(cov, f.nodes)
    if set(increments) != set(range(len(masks))):
        raise ValueError("need one increment array per basis element, keys %r"
                         % (list(range(len(masks))),))
    incs = [np.atleast_2d(np.asarray(increments[i], dtype=np.float64))
            for i in range(len(masks))]
    r_count = incs[0].shape[0]
    for a in incs:
        if a.shape != (r_count, n_steps):
            raise ValueError("increment arrays must have shape (R, %d)" % n_steps)

    # phi[m]: (R, nodes) value of level m as a function, at the current time
    phi = np.zeros((n_max + 1, r_count, len(f.nodes)))
    phi[0, :, :] = f.values
    g, gd = _gauss_kernels(dt, f.h)
    for k in range(n_steps - 1, -1, -1):
        smooth = convolve1d(phi, g, axis=2, mode="nearest")
        if n_max > 0:
            deriv = convolve1d(phi[:n_max], gd, axis=2, mode="nearest")
        for m in range(n_max, 0, -1):
            phi[m] = smooth[m]
            for i, e in enumerate(masks):
                phi[m] += e * deriv[m - 1] * incs[i][:, k][:, None]
        phi[0] = smooth[0]

    levels = np.empty((r_count, n_max + 1))
    for m in range(n_max + 1):
        levels[:, m] = np.array(
            [np.interp(x, f.nodes, phi[m, r]) for r in range(r_count)]
        )
    return ChaosStack(window=window, x=x, levels=levels, n_max=n_max)


def chaos_term(f, window, n, increments, cov, x, dt):
    """Value of one chaos level at x for a single noise realization."""
    stack = chaos_levels_batch(f, window, n, increments, cov, x, dt)
    return float(stack.levels[0, n])


def chaos_sum(f, window, n_max, increments, cov, x, dt):
    """Truncated chaos reconstruction at x plus per-level diagnostics."""
    stack = chaos_levels_batch(f, window, n_max, increments, cov, x, dt)
    return {
        "value": float(stack.totals[0]),
        "levels": stack.levels[0].copy(),
    }


# ---------------------------------------------------------------------------
# Quadrature oracles

def var_j1_quadrature(f, t, x, cov, n_time=256):
    """Variance of the first chaos level by deterministic quadrature.

    By the Ito isometry (level 1 integrates the deterministic function
    u -> P_u(e_i * (P_{t-u}f)')(x) against each driving motion):

        Var(J^1) = sum_i int_0^t ( P_s(e_i * (P_{t-s}f)')(x) )^2 ds
    """
    masks = _basis_masks(cov, f.nodes)
    # midpoint rule keeps s strictly inside (0, t), where both the
    # smoothing and the derivative are well defined
    ss = (np.arange(n_time) + 0.5) * (t / n_time)
    total = 0.0
    for sv in ss:
        dfv = heat_derivative(f, t - sv).values
        for e in masks:
            g = f.with_values(e * dfv)
            total += heat_point(g, sv, x) ** 2
    return float(total * (t / n_time))


def variance_bound(f, tau, x):
    """P_tau(f^2)(x) - (P_tau f(x))^2, the total chaos variance."""
    f2 = f.with_values(f.values ** 2)
    return heat_point(f2, tau, x) - heat_point(f, tau, x) ** 2
