"""Statistical verification harness.

Distribution tests, realized (co)variation, martingale-problem residuals
against the n-point generator, the gambler's-ruin exit probability, and a
coalescence-time survey.  Every check returns a small report object; all
randomness is seed-derived, so reports are reproducible.  Aggregations use
numpy sums (pairwise), which keeps them independent of replica scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import stats

from .noise import W_MINUS, W_PLUS, CovarianceKind, derive_seed, stream_generator
from .wedge import BETA_BGK, _laplace_pair_chunk


@dataclass
class MCSummary:
    n: int
    mean: float
    stderr: float
    extra: dict = None


@dataclass
class TestReport:
    name: str
    statistic: str
    value: float
    tolerance: float
    passed: bool
    inputs: dict

    def to_dict(self):
        d = {"name": self.name, "statistic": self.statistic,
             "value": self.value, "tolerance": self.tolerance,
             "pass": self.passed}
        d.update({"input_" + k: v for k, v in self.inputs.items()})
        return d


def ks_test(samples, cdf, level=0.01, name="ks"):
    """One-sample Kolmogorov-Smirnov test; passes if p-value >= level."""
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) < 50:
        raise ValueError("need at least 50 samples, got %d" % len(samples))
    res = stats.kstest(samples, cdf)
    return TestReport(
        name=name, statistic="ks_pvalue", value=float(res.pvalue),
        tolerance=level, passed=bool(res.pvalue >= level),
        inputs={"n": len(samples), "ks_statistic": float(res.statistic),
                "rule": "pass iff pvalue >= level"},
    )


def realized_covariation(path_a, path_b):
    """Running sum of increment products (realized bracket), out[0] = 0."""
    a = np.asarray(path_a, dtype=np.float64)
    b = np.asarray(path_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paths differ in length")
    out = np.empty(len(a))
    out[0] = 0.0
    np.cumsum(np.diff(a) * np.diff(b), out=out[1:])
    return out


# ---------------------------------------------------------------------------
# Test functions with closed-form derivatives

class GaussianBump:
    """Product of per-coordinate Gaussian bumps."""

    def __init__(self, centers, widths):
        self.c = np.asarray(centers, dtype=np.float64)
        self.w = np.asarray(widths, dtype=np.float64)
        self.name = "bump(c=%s,w=%s)" % (self.c.tolist(), self.w.tolist())

    def value(self, x):
        z = (np.asarray(x) - self.c) / self.w
        return np.exp(-0.5 * np.sum(z * z, axis=-1))

    def grad(self, x):
        x = np.asarray(x)
        v = self.value(x)[..., None]
        return v * (-(x - self.c) / self.w ** 2)

    def hess(self, x):
        x = np.asarray(x)
        g = -(x - self.c) / self.w ** 2          # (..., n)
        v = self.value(x)[..., None, None]
        outer = g[..., :, None] * g[..., None, :]
        diag = np.zeros(outer.shape[-2:])
        np.fill_diagonal(diag, -1.0 / self.w ** 2)
        return v * (outer + diag)


class RidgeBump:
    """Gaussian bump of a linear combination a.x (non-separable cross terms)."""

    def __init__(self, direction, center=0.0, width=1.0):
        self.a = np.asarray(direction, dtype=np.float64)
        self.c = float(center)
        self.w = float(width)
        self.name = "ridge(a=%s,c=%g,w=%g)" % (self.a.tolist(), self.c, self.w)

    def _z(self, x):
        return (np.tensordot(np.asarray(x), self.a, axes=([-1], [0])) - self.c) / self.w

    def value(self, x):
        z = self._z(x)
        return np.exp(-0.5 * z * z)

    def grad(self, x):
        z = self._z(x)
        return (np.exp(-0.5 * z * z) * (-z / self.w))[..., None] * self.a

    def hess(self, x):
        z = self._z(x)
        coef = np.exp(-0.5 * z * z) * ((z * z - 1.0) / self.w ** 2)
        return coef[..., None, None] * np.outer(self.a, self.a)


def linear_function(coeffs):
    class _Linear:
        def __init__(self, a):
            self.a = np.asarray(a, dtype=np.float64)
            self.name = "linear(%s)" % self.a.tolist()

        def value(self, x):
            return np.tensordot(np.asarray(x), self.a, axes=([-1], [0]))

        def grad(self, x):
            x = np.asarray(x)
            return np.broadcast_to(self.a, x.shape).copy()

        def hess(self, x):
            x = np.asarray(x)
            n = x.shape[-1]
            return np.zeros(x.shape[:-1] + (n, n))

    return _Linear(coeffs)


def test_function_library(n):
    """Four smooth n-variate functions with hand-coded derivatives."""
    ones = np.ones(n)
    alt = np.array([(-1.0) ** j for j in range(n)])
    return [
        GaussianBump(np.linspace(-0.5, 0.5, n), np.full(n, 1.0)),
        GaussianBump(np.zeros(n), np.linspace(0.7, 1.3, n)),
        RidgeBump(ones / math.sqrt(n), center=0.2, width=0.8),
        RidgeBump(alt / math.sqrt(n), center=0.0, width=1.2),
    ]


def generator_apply(f, x, cov):
    """n-point generator: 0.5*sum_i d2_ii + sum_{i<j} C(x_i,x_j) d2_ij.

    ``cov`` None means C == 0 off the diagonal (the negative-control
    generator of independent particles).
    """
    x = np.asarray(x)
    h = f.hess(x)
    n = x.shape[-1]
    out = 0.5 * np.trace(h, axis1=-2, axis2=-1)
    if n > 1:
        for i in range(n):
            for j in range(i + 1, n):
                if cov is None:
                    continue
                out = out + cov(x[..., i], x[..., j]) * h[..., i, j]
    return out


def martingale_residual(paths, f, cov, dt=None):
    """Mean discrete martingale residual of f over replicas.

    ``paths`` is either a single path object with ``positions`` of shape
    ``(n, K+1)`` or a stacked array ``(R, n, K+1)``.  Residual per replica:
    f(X_T) - f(X_0) - sum_k A f(X_{t_k}) dt, left-point evaluation.
    """
    if hasattr(paths, "positions"):
        pos = paths.positions[None, :, :]
        dt = paths.grid.dt
    else:
        pos = np.asarray(paths)
        if pos.ndim == 2:
            pos = pos[None, :, :]
        if dt is None:
            raise ValueError("dt required for raw position arrays")
    for attr in ("value", "grad", "hess"):
        if not hasattr(f, attr):
            raise ValueError("test function must provide closed-form %s" % attr)
    x = np.swapaxes(pos, 1, 2)                     # (R, K+1, n)
    res = f.value(x[:, -1, :]) - f.value(x[:, 0, :])
    # chunk the generator sweep to bound the hessian workspace
    k_total = x.shape[1] - 1
    step = max(1, min(k_total, 1 << 14))
    for k0 in range(0, k_total, step):
        a = generator_apply(f, x[:, k0:min(k0 + step, k_total), :], cov)
        res = res - a.sum(axis=1) * dt
    n = len(res)
    return MCSummary(n=n, mean=float(res.mean()),
                     stderr=float(res.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf)


# ---------------------------------------------------------------------------
# Exit probability (gambler's ruin through the wedge)

@njit(cache=True)
def _ruin_chunk(sep, xi, lo, hi):
    s = sep
    for k in range(len(xi)):
        s = s + xi[k]
        if s <= lo:
            return s, -1
        if s >= hi:
            return s, 1
    return s, 0


def exit_probability_check(alpha, eps, n_replicas, dt=1e-5, seed=0,
                           name=None):
    """P(pair separation reaches eps before coalescing) vs alpha/eps.

    The separation of a pair straddling 0 moves only on the steps spent in
    the wedge, where its increments are iid N(0, 2dt); steps outside leave
    it frozen and the pair returns to the wedge a.s.  The exit probability
    therefore equals that of the embedded random walk, which is what gets
    simulated (no censoring).  Both detection barriers carry the
    discrete-monitoring correction.
    """
    if not 0 < alpha < eps:
        raise ValueError("need 0 < alpha < eps")
    shift = BETA_BGK * math.sqrt(2.0 * dt)
    lo = shift
    hi = eps - shift
    if not lo < alpha < hi:
        raise ValueError("dt too coarse for these barriers")
    sigma = math.sqrt(2.0 * dt)
    wins = 0
    for r in range(n_replicas):
        gen = stream_generator(derive_seed(seed, "ruin", r), "SEP")
        sep = float(alpha)
        outcome = 0
        while outcome == 0:
            xi = gen.standard_normal(1 << 12) * sigma
            sep, outcome = _ruin_chunk(sep, xi, lo, hi)
        if outcome > 0:
            wins += 1
    p_hat = wins / n_replicas
    target = alpha / eps
    se = math.sqrt(target * (1.0 - target) / n_replicas)
    return TestReport(
        name=name or "exit_probability(%g,%g)" % (alpha, eps),
        statistic="p_hat - alpha/eps", value=p_hat - target, tolerance=3.0 * se,
        passed=bool(abs(p_hat - target) <= 3.0 * se),
        inputs={"alpha": alpha, "eps": eps, "n": n_replicas, "dt": dt,
                "p_hat": p_hat, "target": target, "seed": seed},
    )


# ---------------------------------------------------------------------------
# Coalescence survey

def coalescence_times(x0_pair, dt, horizon, n_replicas, seed, chunk=1 << 16):
    """Coalescence time per replica for one pair (inf when censored)."""
    x0, y0 = float(x0_pair[0]), float(x0_pair[1])
    merge_tol = 1e-12 * max(1.0, abs(x0), abs(y0))
    max_steps = int(round(horizon / dt))
    sigma = math.sqrt(dt)
    out = np.empty(n_replicas)
    for r in range(n_replicas):
        sub = derive_seed(seed, "replica", r)
        gp = stream_generator(sub, W_PLUS)
        gm = stream_generator(sub, W_MINUS)
        state = np.array([x0, y0, 0.0, 0.0, 0.0, 1.0, -1.0])
        left = max_steps
        t = math.inf
        while left > 0:
            c = min(chunk, left)
            dwp = gp.standard_normal(c) * sigma
            dwm = gm.standard_normal(c) * sigma
            done = _laplace_pair_chunk(state, dwp, dwm, 1e300, 0.0,
                                       merge_tol, 0.0)
            if done >= 0:
                t = dt * (max_steps - left + done + 1)
                break
            left -= c
        out[r] = t
    return out


def coalescence_survey(pairs, horizons, n_replicas, dt=1e-4, seed=0):
    """Empirical P(T <= h) per starting pair over a grid of horizons."""
    horizons = sorted(horizons)
    h_max = horizons[-1]
    rows = []
    for i, pair in enumerate(pairs):
        if pair[1] - pair[0] <= 0:
            rows.append({"pair": tuple(pair), "censored_fraction": 0.0,
                         "prob": {h: 1.0 for h in horizons}})
            continue
        times = coalescence_times(pair, dt, h_max, n_replicas,
                                  derive_seed(seed, "pair", i))
        rows.append({
            "pair": tuple(pair),
            "censored_fraction": float(np.isinf(times).mean()),
            "prob": {h: float((times <= h).mean()) for h in horizons},
        })
    return rows
