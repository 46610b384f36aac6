"""Experiment runner.

``brownflow run <config> [--output-dir D] [--seed-override N] [--threads K]``

Configs are YAML mappings with three top-level keys: ``experiment``,
``params`` and (optionally) ``output_dir``.  Validation is strict — unknown
keys are rejected with a suggestion — and every default is materialized
into the config echo stored in the manifest, so a run can be reproduced
from its own artifacts.  All files are written through a temp-and-rename
step; the manifest carries a sha256 per artifact.

Exit codes: 0 success, 1 embedded statistical test failed, 2 config error,
3 runtime error.
"""

from __future__ import annotations

import argparse
import difflib
import hashlib
import json
import math
import os
import sys
import tempfile

import numpy as np
import yaml

from . import __version__
from ._batch import PLUS_COALESCING, PLUS_KERNEL, run_flow_batch
from .noise import CovarianceKind, derive_seed, make_grid
from .chaos import FunctionGrid, chaos_levels_batch, heat_point
from .flow_plus import estimate_kernel_plus
from .wedge import laplace_identity_samples, laplace_report

REQUIRED = object()


def _pair(v):
    v = [float(a) for a in v]
    if len(v) != 2:
        raise ValueError("expected a pair")
    return v


#: per-experiment parameter schema: name -> (coercion, default)
SCHEMAS = {
    "flow_pm": {
        "x0": (lambda v: [float(a) for a in v], [0.0]),
        "horizon": (float, 1.0),
        "dt": (float, None),
        "replicas": (int, 10000),
        "seed": (int, REQUIRED),
    },
    "flow_plus_kernel": {
        "x0": (float, 0.5),
        "horizon": (float, 1.0),
        "dt": (float, None),
        "M": (int, 256),
        "replicas": (int, 100),
        "seed": (int, REQUIRED),
    },
    "flow_plus_coalescing": {
        "x0": (lambda v: [float(a) for a in v], [-1.0, 0.0, 1.0]),
        "horizon": (float, 1.0),
        "dt": (float, None),
        "replicas": (int, 10000),
        "seed": (int, REQUIRED),
    },
    "wedge_laplace": {
        "x0_pair": (_pair, [-0.1, 0.1]),
        "dt": (float, 1e-5),
        "eps": (float, 0.05),
        "horizon": (float, None),
        "alphas": (lambda v: [float(a) for a in v], [0.5, 1.0, 2.0]),
        "replicas": (int, 1000),
        "seed": (int, REQUIRED),
    },
    "chaos_compare": {
        "x": (float, 0.0),
        "t": (float, 0.25),
        "dt": (float, None),
        "n_max": (int, 6),
        "M": (int, 256),
        "replicas": (int, 100),
        "f_center": (float, 0.2),
        "f_width": (float, 0.3),
        "seed": (int, REQUIRED),
    },
    "verify_suite": {
        "seed": (int, REQUIRED),
        "ks_replicas": (int, 2000),
        "exit_replicas": (int, 2000),
        "exit_pairs": (lambda v: [_pair(p) for p in v],
                       [[0.1, 0.2], [0.05, 0.5], [0.2, 0.25]]),
        "martingale_replicas": (int, 200),
        "survey_replicas": (int, 400),
        "dt": (float, 1e-4),
    },
}

_TOP_KEYS = ("experiment", "params", "output_dir")


class ConfigError(Exception):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def _suggest(key, known):
    close = difflib.get_close_matches(key, known, n=1)
    return " (did you mean %r?)" % close[0] if close else ""


def validate(text):
    """Parse and normalize a config; raises ConfigError with all problems."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(["config is not valid YAML: %s" % e])
    if not isinstance(raw, dict):
        raise ConfigError(["config must be a mapping"])
    errors = []
    for key in raw:
        if key not in _TOP_KEYS:
            errors.append("unknown key %r%s" % (key, _suggest(key, _TOP_KEYS)))
    exp = raw.get("experiment")
    if exp not in SCHEMAS:
        errors.append("experiment must be one of %s, got %r"
                      % (sorted(SCHEMAS), exp))
        raise ConfigError(errors)
    schema = SCHEMAS[exp]
    params_in = raw.get("params") or {}
    if not isinstance(params_in, dict):
        errors.append("params must be a mapping")
        raise ConfigError(errors)
    params = {}
    for key, val in params_in.items():
        if key not in schema:
            errors.append("unknown param %r%s" % (key, _suggest(key, list(schema))))
            continue
        try:
            params[key] = schema[key][0](val)
        except (TypeError, ValueError) as e:
            errors.append("param %r: %s" % (key, e))
    for key, (_, default) in schema.items():
        if key in params:
            continue
        if default is REQUIRED:
            errors.append("missing required param %r" % key)
        else:
            params[key] = default
    if errors:
        raise ConfigError(errors)
    errors.extend(_cross_checks(exp, params))
    if errors:
        raise ConfigError(errors)
    return {"experiment": exp, "params": params,
            "output_dir": raw.get("output_dir", "brownflow_out")}


def _cross_checks(exp, p):
    errors = []
    if "dt" in p and p["dt"] is None:
        base = p.get("horizon", p.get("t", 1.0))
        p["dt"] = 1e-3 * base
    if p.get("dt") is not None and p["dt"] <= 0:
        errors.append("dt must be positive")
    for key in ("horizon", "t"):
        if p.get(key) is not None and p[key] <= 0:
            errors.append("%s must be positive" % key)
    for key in ("replicas", "M"):
        if key in p and p[key] < 1:
            errors.append("%s must be >= 1" % key)
    if exp == "flow_pm" or exp == "flow_plus_coalescing":
        if any(b < a for a, b in zip(p["x0"], p["x0"][1:])):
            errors.append("x0 must be sorted")
    if exp == "wedge_laplace":
        a, b = p["x0_pair"]
        if not a <= 0.0 <= b:
            errors.append("x0_pair must straddle 0")
        if p["horizon"] is None:
            p["horizon"] = 50.0 * (b - a) ** 2
        if p["eps"] <= 0.5826 * math.sqrt(p["dt"]):
            errors.append("eps too small for dt (crossing level collapses)")
    if exp == "verify_suite":
        for alpha, eps in p["exit_pairs"]:
            if not 0 < alpha < eps:
                errors.append("exit pair (%g, %g): need 0 < alpha < eps"
                              % (alpha, eps))
    return errors


# ---------------------------------------------------------------------------
# Atomic artifact helpers

def _fmt(v):
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


def _atomic_bytes(path, data):
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                               prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header, rows):
    import csv
    import io
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")   # RFC 4180
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    _atomic_bytes(path, buf.getvalue().encode())


def write_json(path, obj):
    _atomic_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _checksum(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Experiment implementations — each returns (artifact paths, passed)

def _run_flow_pm(p, outdir):
    grid = make_grid(0.0, p["horizon"], p["dt"])
    res = run_flow_batch(np.array(p["x0"]), grid, p["seed"], p["replicas"])
    rows = [[r] + list(res.terminals[r]) for r in range(p["replicas"])]
    header = ["replica"] + ["terminal_%d" % j for j in range(len(p["x0"]))]
    f1 = os.path.join(outdir, "terminals.csv")
    write_csv(f1, header, rows)
    files = [f1]
    if len(p["x0"]) > 1:
        f2 = os.path.join(outdir, "merge_steps.csv")
        write_csv(f2, ["replica"] + ["merge_%d_%d" % (j, j + 1)
                                     for j in range(len(p["x0"]) - 1)],
                  [[r] + list(res.merge_step[r]) for r in range(p["replicas"])])
        files.append(f2)
    from . import report
    files.append(report.terminal_histogram(
        res.terminals, p["x0"], p["horizon"], os.path.join(outdir, "terminals.png")))
    return files, True


def _run_flow_plus_kernel(p, outdir):
    grid = make_grid(0.0, p["horizon"], p["dt"])
    means = []
    first_support = None
    for r in range(p["replicas"]):
        est = estimate_kernel_plus(
            p["x0"], grid, derive_seed(p["seed"], "outer", r), p["M"],
            inner_seed=derive_seed(p["seed"], "inner", r),
        )
        if r == 0:
            first_support = est.support
        means.append(float(est.support.mean()))
    f1 = os.path.join(outdir, "kernel_support.csv")
    write_csv(f1, ["replica", "terminal_position"],
              [[i, v] for i, v in enumerate(first_support)])
    f2 = os.path.join(outdir, "kernel_means.csv")
    write_csv(f2, ["outer_replica", "kernel_mean"],
              [[i, v] for i, v in enumerate(means)])
    from . import report
    f3 = report.kernel_support_figure(first_support, np.array(means),
                                      os.path.join(outdir, "kernel.png"))
    return [f1, f2, f3], True


def _run_flow_plus_coalescing(p, outdir):
    grid = make_grid(0.0, p["horizon"], p["dt"])
    res = run_flow_batch(np.array(p["x0"]), grid, p["seed"], p["replicas"],
                         mode=PLUS_COALESCING)
    n = len(p["x0"])
    f1 = os.path.join(outdir, "terminals.csv")
    write_csv(f1, ["replica"] + ["terminal_%d" % j for j in range(n)],
              [[r] + list(res.terminals[r]) for r in range(p["replicas"])])
    f2 = os.path.join(outdir, "merge_steps.csv")
    write_csv(f2, ["replica"] + ["merge_%d_%d" % (j, j + 1) for j in range(n - 1)],
              [[r] + list(res.merge_step[r]) for r in range(p["replicas"])])
    from . import report
    f3 = report.terminal_histogram(res.terminals, p["x0"], p["horizon"],
                                   os.path.join(outdir, "terminals.png"))
    return [f1, f2, f3], True


def _run_wedge_laplace(p, outdir):
    samples = laplace_identity_samples(
        p["x0_pair"], p["dt"], p["eps"], p["replicas"], p["seed"],
        horizon=p["horizon"],
    )
    rep = laplace_report(samples, p["alphas"])
    f1 = os.path.join(outdir, "laplace_samples.csv")
    write_csv(f1, ["replica", "t_outside", "l_est", "t0"],
              [[i, samples.t_outside[i], samples.l_est[i], samples.t0[i]]
               for i in range(samples.n_effective)])
    f2 = os.path.join(outdir, "laplace_report.json")
    write_json(f2, rep)
    from . import report as report_mod
    f3 = report_mod.laplace_figure(rep, os.path.join(outdir, "laplace.png"))
    passed = all(row["pass"] for row in rep["alphas"])
    return [f1, f2, f3], passed


def _run_chaos_compare(p, outdir):
    t, dt, x = p["t"], p["dt"], p["x"]
    c, w = p["f_center"], p["f_width"]
    f = FunctionGrid.from_function(
        lambda u: math.exp(-(u - c) ** 2 / (2.0 * w * w)),
        8.0 * math.sqrt(t), (1 << 12) + 1)
    grid = make_grid(0.0, t, dt)
    R = p["replicas"]
    sigma = math.sqrt(grid.dt)
    from .noise import W_PLUS, stream_generator
    inc = np.empty((R, grid.n_steps))
    mc = np.empty(R)
    for r in range(R):
        wp_seed = derive_seed(p["seed"], "outer", r)
        inc[r] = stream_generator(wp_seed, W_PLUS).standard_normal(grid.n_steps) * sigma
        est = estimate_kernel_plus(x, grid, inc[r], p["M"],
                                   inner_seed=derive_seed(p["seed"], "inner", r))
        vals = np.exp(-(est.support - c) ** 2 / (2.0 * w * w))
        mc[r] = vals.mean()
    stack = chaos_levels_batch(f, (0.0, t), p["n_max"], {0: inc},
                               CovarianceKind.C_PLUS, x, grid.dt)
    lv = stack.levels
    f1 = os.path.join(outdir, "chaos_levels.csv")
    write_csv(f1, ["level", "sample_mean", "sample_var", "stderr"],
              [[m, float(lv[:, m].mean()), float(lv[:, m].var(ddof=1)),
                float(lv[:, m].std(ddof=1) / math.sqrt(R))]
               for m in range(p["n_max"] + 1)])
    diff = stack.totals - mc
    se = float(diff.std(ddof=1) / math.sqrt(R))
    comparison = {
        "chaos_mean": float(stack.totals.mean()),
        "nested_mc_mean": float(mc.mean()),
        "diff_mean": float(diff.mean()),
        "diff_stderr": se,
        "heat_value": heat_point(f, t, x),
        "pass": bool(abs(diff.mean()) <= 3.0 * se),
    }
    f2 = os.path.join(outdir, "chaos_compare.json")
    write_json(f2, comparison)
    from . import report
    f3 = report.chaos_figure(lv, os.path.join(outdir, "chaos_levels.png"))
    return [f1, f2, f3], comparison["pass"]


def _run_verify_suite(p, outdir):
    from scipy import stats
    from . import report as report_mod
    from .verify import (TestReport, coalescence_survey,
                         exit_probability_check, ks_test, martingale_residual,
                         test_function_library)
    seed = p["seed"]
    dt = p["dt"]
    reports = []

    grid = make_grid(0.0, 1.0, dt)
    res = run_flow_batch(np.array([0.5]), grid, derive_seed(seed, "ks"),
                         p["ks_replicas"])
    reports.append(ks_test(res.terminals[:, 0],
                           stats.norm(loc=0.5, scale=1.0).cdf,
                           name="one_point_terminal_law"))

    for i, (alpha, eps) in enumerate(p["exit_pairs"]):
        reports.append(exit_probability_check(
            alpha, eps, p["exit_replicas"], dt=dt,
            seed=derive_seed(seed, "exit", i)))

    lib = test_function_library(2)
    res2 = run_flow_batch(np.array([-0.3, 0.4]), grid,
                          derive_seed(seed, "mart"),
                          p["martingale_replicas"], store=True)
    for f in lib[:2]:
        s = martingale_residual(res2.positions, f, CovarianceKind.C_PM, dt=dt)
        tol = 3.0 * s.stderr
        reports.append(TestReport(
            name="martingale_residual[%s]" % f.name, statistic="mean_residual",
            value=s.mean, tolerance=tol, passed=bool(abs(s.mean) <= tol),
            inputs={"n": s.n, "stderr": s.stderr, "cov": "C_PM"}))

    survey = coalescence_survey([[-0.1, 0.1]], [1.0, 5.0, 10.0],
                                p["survey_replicas"], dt=dt,
                                seed=derive_seed(seed, "survey"))
    probs = survey[0]["prob"]
    mono = all(probs[a] <= probs[b] for a, b in zip(sorted(probs), sorted(probs)[1:]))
    reports.append(TestReport(
        name="coalescence_survey_monotone", statistic="is_monotone",
        value=0.0 if mono else 1.0, tolerance=0.5, passed=mono,
        inputs={"pair": [-0.1, 0.1], "probs": {str(k): v for k, v in probs.items()},
                "censored_fraction": survey[0]["censored_fraction"]}))

    f1 = os.path.join(outdir, "verify_reports.jsonl")
    _atomic_bytes(f1, ("\n".join(json.dumps(r.to_dict(), sort_keys=True)
                                 for r in reports) + "\n").encode())
    f2 = report_mod.suite_figure(reports, os.path.join(outdir, "verify_suite.png"))
    return [f1, f2], all(r.passed for r in reports)


_RUNNERS = {
    "flow_pm": _run_flow_pm,
    "flow_plus_kernel": _run_flow_plus_kernel,
    "flow_plus_coalescing": _run_flow_plus_coalescing,
    "wedge_laplace": _run_wedge_laplace,
    "chaos_compare": _run_chaos_compare,
    "verify_suite": _run_verify_suite,
}


def run(config, output_dir=None, seed_override=None):
    """Execute a validated config; returns the process exit code."""
    outdir = output_dir or config["output_dir"]
    os.makedirs(outdir, exist_ok=True)
    params = dict(config["params"])
    if seed_override is not None:
        params["seed"] = int(seed_override)
    echo = {"experiment": config["experiment"], "params": params,
            "output_dir": outdir}
    files, passed = _RUNNERS[config["experiment"]](params, outdir)
    manifest = {
        "config": echo,
        "version": __version__,
        "artifacts": {os.path.basename(f): _checksum(f) for f in files},
        "pass": passed,
    }
    write_json(os.path.join(outdir, "manifest.json"), manifest)
    return 0 if passed else 1


def _apply_threads(threads):
    if threads is None:
        threads = os.environ.get("BROWNFLOW_THREADS")
    if threads is None:
        return
    import numba
    numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))


def main(argv=None):
    parser = argparse.ArgumentParser(prog="brownflow")
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="run an experiment config")
    runp.add_argument("config")
    runp.add_argument("--output-dir", default=None)
    runp.add_argument("--seed-override", type=int, default=None)
    runp.add_argument("--threads", type=int, default=None)
    args = parser.parse_args(argv)

    try:
        with open(args.config) as fh:
            text = fh.read()
    except OSError as e:
        print("cannot read config: %s" % e, file=sys.stderr)
        return 2
    try:
        config = validate(text)
    except ConfigError as e:
        for msg in e.errors:
            print("config error: %s" % msg, file=sys.stderr)
        return 2
    try:
        _apply_threads(args.threads)
        return run(config, output_dir=args.output_dir,
                   seed_override=args.seed_override)
    except KeyboardInterrupt:
        raise
    except Exception as e:  # noqa: BLE001 - map any runtime failure to exit 3
        print("runtime error: %s" % e, file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
