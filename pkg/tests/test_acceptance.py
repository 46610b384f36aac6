"""End-to-end statistical acceptance suite.

One test per headline claim; each prints a single PASS/FAIL line (straight
to the terminal, bypassing capture) before asserting.  Tolerances are fixed
up front; every random input is seed-derived, so the suite is deterministic.
"""

import json
import math

import numpy as np
import yaml

from brownflow._batch import PLUS_KERNEL, PM, run_flow_batch
from brownflow.chaos import (
    chaos_levels_batch,
    default_grid,
    heat_point,
    variance_bound,
)
from brownflow.cli import main as cli_main
from brownflow.flow_plus import estimate_kernel_plus, kernel_apply
from brownflow.flow_pm import flow_map_pm, flow_property_check, simulate_n_point_pm
from brownflow.noise import (
    W_PLUS,
    CovarianceKind,
    derive_seed,
    make_grid,
    sample_bundle,
    stream_generator,
)
from brownflow.verify import (
    RidgeBump,
    exit_probability_check,
    ks_test,
    martingale_residual,
    test_function_library,
)
from brownflow.wedge import (
    corner_decomposition_check,
    laplace_identity_samples,
    laplace_report,
    local_time_crossings,
    time_change,
)

test_function_library.__test__ = False


def announce(capfd, num, label, ok):
    with capfd.disabled():
        print("acceptance %2d | %-42s | %s"
              % (num, label, "PASS" if ok else "FAIL"), flush=True)
    return ok


# --- 1. one-point terminal law --------------------------------------------

def test_acceptance_01_one_point_law(capfd):
    grid = make_grid(0.0, 1.0, 1e-4)
    reports = []
    for i, x0 in enumerate((-1.0, 0.0, 1.0)):
        res = run_flow_batch(np.array([x0]), grid, derive_seed(101, "start", i),
                             n_replicas=10000, mode=PM, chunk=1024)
        reports.append(ks_test(res.terminals[:, 0] - x0, "norm", level=0.01))
    ok = all(r.passed for r in reports)
    announce(capfd, 1, "one-point law KS vs N(x0,1), 3 starts", ok)
    assert ok, [(r.value, r.tolerance) for r in reports]


# --- 2. exit probability ---------------------------------------------------

def test_acceptance_02_exit_probability(capfd):
    reports = [
        exit_probability_check(a, e, n_replicas=10000, dt=1e-5,
                               seed=derive_seed(202, "pair", a, e))
        for a, e in ((0.1, 0.2), (0.05, 0.5), (0.2, 0.25))
    ]
    ok = all(r.passed for r in reports)
    announce(capfd, 2, "exit probability = alpha/eps, 3 pairs", ok)
    assert ok, [(r.inputs["p_hat"], r.inputs["target"]) for r in reports]


# --- 3. covariation slope by sign pattern ----------------------------------

MIN_RUN = 600     # steps; slope stderr ~ sqrt(2/600) sits 2.7 sigma inside tol


def _covariation_fractions(positions, dt, same_side_shares):
    """Per-replica: slope of the covariation restricted to each sign class.

    Each Euler step's increment correlation is exactly determined by the
    sign pattern at its left endpoint, so the steps of one covariance class
    may be pooled even when they are not contiguous.
    """
    tol = 5.0 * math.sqrt(dt)
    n_pass = n_informative = 0
    for r in range(positions.shape[0]):
        x, y = positions[r, 0], positions[r, 1]
        dx = np.diff(x)
        dy = np.diff(y)
        sx = x[:-1] > 0
        sy = y[:-1] > 0
        c_true = (sx == sy) if same_side_shares else (sx & sy)
        informative = False
        ok = True
        for target, mask in ((1.0, c_true), (0.0, ~c_true)):
            m = int(mask.sum())
            if m < MIN_RUN:
                continue
            informative = True
            slope = float(np.sum(dx[mask] * dy[mask])) / (m * dt)
            if abs(slope - target) > tol:
                ok = False
        n_informative += informative
        n_pass += informative and ok
    return n_pass, n_informative


def test_acceptance_03_covariation_slopes(capfd):
    dt = 1e-3
    grid = make_grid(0.0, 1.0, dt)
    results = {}
    for name, x0, mode, same in (
        ("pm", [-0.5, 0.5], PM, True),
        ("plus_kernel", [0.3, 0.8], PLUS_KERNEL, False),
    ):
        res = run_flow_batch(np.array(x0), grid, derive_seed(303, name),
                             n_replicas=1000, mode=mode, store=True)
        results[name] = _covariation_fractions(res.positions, dt, same)
    ok = all(n_inf >= 750 and n_pass >= 0.95 * n_inf
             for n_pass, n_inf in results.values())
    announce(capfd, 3, "covariation slope in {0,1} by sign pattern", ok)
    assert ok, results


# --- 4. Laplace identity ---------------------------------------------------

def test_acceptance_04_laplace_identity(capfd):
    s = laplace_identity_samples((-0.1, 0.1), dt=1e-5, eps=0.036,
                                 n_replicas=10000, seed=404,
                                 horizon=25000.0, coarse_dt=2e-4)
    rep = laplace_report(s, alphas=(0.5, 1.0, 2.0))
    censored_frac = s.censored / 10000
    ok = all(row["pass"] for row in rep["alphas"]) and censored_frac < 0.01
    announce(capfd, 4, "pair Laplace identity, alpha in {0.5,1,2}", ok)
    assert ok, (rep["alphas"], censored_frac)


# --- 5. Dirac regime of the filtered kernel --------------------------------

def test_acceptance_05_dirac_regime(capfd):
    grid = make_grid(0.0, 0.01, 1e-4)
    sigma = math.sqrt(grid.dt)
    all_identical = True
    for r in range(100):
        w_seed = derive_seed(505, "outer", r)
        est = estimate_kernel_plus(1.0, grid, w_seed, M=256,
                                   inner_seed=derive_seed(505, "inner", r))
        vals = np.unique(est.support)
        all_identical &= len(vals) == 1
        # the common point must be x0 advanced by the shared stream, bitwise
        dwp = stream_generator(w_seed, W_PLUS).standard_normal(grid.n_steps)
        x = 1.0
        for k in range(grid.n_steps):
            x = x + dwp[k] * sigma
        all_identical &= vals[0] == x
    announce(capfd, 5, "Dirac regime: 256 inner replicas bitwise equal",
             all_identical)
    assert all_identical


# --- 6. kernel mean vs heat semigroup --------------------------------------

def bump(x):
    return math.exp(-0.5 * ((x - 0.2) / 0.3) ** 2)


def test_acceptance_06_kernel_mean(capfd):
    grid = make_grid(0.0, 1.0, 1e-3)
    vals = np.empty(1000)
    for r in range(1000):
        est = estimate_kernel_plus(0.5, grid, derive_seed(606, "outer", r),
                                   M=256, inner_seed=derive_seed(606, "inner", r))
        vals[r] = kernel_apply(est, bump)
    target = heat_point(default_grid(bump, 1.0), 1.0, 0.5)
    se = float(vals.std(ddof=1) / math.sqrt(len(vals)))
    ok = abs(vals.mean() - target) <= 3.0 * se
    announce(capfd, 6, "kernel mean = P_1 f within 3 sigma", ok)
    assert ok, (vals.mean(), target, se)


# --- 7. chaos reconstruction -----------------------------------------------

def test_acceptance_07_chaos_reconstruction(capfd):
    t, dt, x, n_max, n_rep, m_inner = 0.25, 0.01, 0.0, 6, 100, 256
    grid = make_grid(0.0, t, dt)
    f = default_grid(bump, t, n_nodes=513)
    sigma = math.sqrt(dt)
    dwp = np.empty((n_rep, grid.n_steps))
    mc = np.empty(n_rep)
    for r in range(n_rep):
        dwp[r] = stream_generator(derive_seed(707, "outer", r),
                                  W_PLUS).standard_normal(grid.n_steps) * sigma
        est = estimate_kernel_plus(x, grid, dwp[r], M=m_inner,
                                   inner_seed=derive_seed(707, "inner", r))
        mc[r] = kernel_apply(est, bump)
    stack = chaos_levels_batch(f, (0.0, t), n_max, {0: dwp},
                               CovarianceKind.C_PLUS, x, dt)
    diff = stack.totals - mc
    se = float(diff.std(ddof=1) / math.sqrt(n_rep))
    ok_recon = abs(diff.mean()) <= 3.0 * se

    ok_centered = True
    for n in range(1, n_max + 1):
        lvl = stack.levels[:, n]
        ok_centered &= abs(lvl.mean()) <= 3.0 * lvl.std(ddof=1) / math.sqrt(n_rep)

    var_sum = float(stack.levels[:, 1:].var(axis=0, ddof=1).sum())
    bound = variance_bound(f, t, x)
    # 3 sigma on the chi-square fluctuation of the dominant level's variance
    se_var = float(stack.levels[:, 1].var(ddof=1)) * math.sqrt(2.0 / (n_rep - 1))
    ok_var = var_sum <= bound + 3.0 * se_var

    ok = ok_recon and ok_centered and ok_var
    announce(capfd, 7, "chaos sum (n<=6) vs nested MC + variance", ok)
    assert ok, (diff.mean(), se, var_sum, bound)


# --- 8. local time of reflected Brownian motion ----------------------------

def test_acceptance_08_local_time_oracle(capfd):
    dt, eps, n_rep, n_steps = 1e-6, 0.01, 1000, 1000000
    sigma = math.sqrt(dt)
    est = np.empty(n_rep)
    for r in range(n_rep):
        gen = stream_generator(derive_seed(808, "replica", r), "B")
        path = np.empty(n_steps + 1)
        path[0] = 0.0
        np.cumsum(gen.standard_normal(n_steps) * sigma, out=path[1:])
        np.abs(path, out=path)
        est[r] = local_time_crossings(path, eps, dt=dt).estimate
    target = math.sqrt(2.0 / math.pi)
    se = float(est.std(ddof=1) / math.sqrt(n_rep))
    ok = abs(est.mean() - target) <= 3.0 * se
    announce(capfd, 8, "eps-crossing local time = sqrt(2/pi)", ok)
    assert ok, (est.mean(), target, se)


# --- 9. martingale residuals ------------------------------------------------

STARTS = {1: [0.2], 2: [-0.3, 0.4], 3: [-0.5, 0.1, 0.6]}


def test_acceptance_09_martingale_residuals(capfd):
    dt = 1e-3
    grid = make_grid(0.0, 1.0, dt)
    failures = []
    for n, x0 in STARTS.items():
        for mode, cov in ((PM, CovarianceKind.C_PM),
                          (PLUS_KERNEL, CovarianceKind.C_PLUS)):
            res = run_flow_batch(np.array(x0), grid,
                                 derive_seed(1919, mode, n), 400,
                                 mode=mode, store=True)
            for f in test_function_library(n):
                s = martingale_residual(res.positions, f, cov, dt=grid.dt)
                if abs(s.mean) > 3.0 * s.stderr:
                    failures.append((n, mode, f.name, s.mean, s.stderr))
    # negative control: same-side pair, difference-direction ridge, C == 0
    res = run_flow_batch(np.array([0.2, 0.3]), grid, 5, 400, mode=PM,
                         store=True)
    ridge = RidgeBump(np.array([1.0, -1.0]) / math.sqrt(2), width=0.5)
    bad = martingale_residual(res.positions, ridge, None, dt=grid.dt)
    control_fails = abs(bad.mean) > 3.0 * bad.stderr
    ok = not failures and control_fails
    announce(capfd, 9, "martingale residuals + negative control", ok)
    assert ok, (failures, bad.mean, bad.stderr)


# --- 10. exact structural invariants ---------------------------------------

def test_acceptance_10_structural_invariants(capfd, tmp_path):
    ok = True

    # order preservation of a realized flow map
    grid = make_grid(0.0, 0.5, 1e-3)
    bundle = sample_bundle(grid, [W_PLUS, "W_MINUS"], seed=1001)
    x_grid = np.linspace(-1.5, 1.5, 31)
    fm = flow_map_pm(x_grid, bundle)
    ok &= bool(np.all(np.diff(fm.images) >= 0.0))

    # coalescence absorption: identical bitwise from the merge step on
    path = simulate_n_point_pm(np.array([-0.005, 0.005]), bundle)
    t_merge = path.coalescence_times[(0, 1)]
    ok &= math.isfinite(t_merge)
    if math.isfinite(t_merge):
        k_merge = grid.index_of(t_merge)
        ok &= bool(np.array_equal(path.positions[0, k_merge:],
                                  path.positions[1, k_merge:]))

    # time-change conservation: retained + discarded steps == total, exactly
    indicator = path.positions[0, 1:] <= 0.0
    wedge = time_change((path.positions[0], path.positions[1]), indicator,
                        grid.dt)
    ok &= wedge.n_steps + int(np.sum(~indicator)) == grid.n_steps

    # corner decomposition reassembles the kernel-mode pair bitwise
    res = run_flow_batch(np.array([-0.1, 0.1]), grid, 1002, 3,
                         mode=PLUS_KERNEL, store=True)
    for r in range(3):
        rep = corner_decomposition_check(
            (res.positions[r, 0], res.positions[r, 1]), grid.dt)
        ok &= bool(rep["reassembly_exact"])

    # flow composition through an intermediate time
    comp = flow_property_check(bundle, 0.0, 0.25, 0.5, x_grid)
    ok &= comp["max_abs_deviation"] <= 1e-12

    # CLI determinism: same config, two runs, identical artifacts
    cfg = yaml.safe_dump({"experiment": "flow_pm",
                          "params": {"seed": 7, "x0": [0.0], "horizon": 0.05,
                                     "replicas": 25}})
    manifests = []
    for tag in ("a", "b"):
        cfg_path = tmp_path / ("c_%s.yaml" % tag)
        cfg_path.write_text(cfg)
        out = tmp_path / ("out_%s" % tag)
        ok &= cli_main(["run", str(cfg_path), "--output-dir", str(out)]) == 0
        with open(out / "manifest.json") as fh:
            manifests.append(json.load(fh)["artifacts"])
    ok &= manifests[0] == manifests[1]

    announce(capfd, 10, "exact structural invariants + CLI determinism", ok)
    assert ok
