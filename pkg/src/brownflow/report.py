"""Figure rendering for experiment artifacts.

Each experiment's report path drops one PNG next to the delimited output.
Figures are diagnostic, not part of any pass/fail decision; the data they
show is always also present in the CSV/JSON artifacts.
"""

from __future__ import annotations

import math
import os
import tempfile

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                               prefix=".tmp-", suffix=".png")
    os.close(fd)
    try:
        fig.savefig(tmp, dpi=110, bbox_inches="tight")
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def terminal_histogram(terminals, x0, horizon, path):
    """Histogram of terminal positions per particle, with the BM density."""
    terminals = np.asarray(terminals)
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.linspace(terminals.min() - 0.5, terminals.max() + 0.5, 400)
    for j, start in enumerate(x0):
        ax.hist(terminals[:, j], bins=60, density=True, alpha=0.45,
                label="x0=%g" % start)
        pdf = np.exp(-(xs - start) ** 2 / (2 * horizon)) / math.sqrt(2 * math.pi * horizon)
        ax.plot(xs, pdf, lw=1, color="k")
    ax.set_xlabel("terminal position")
    ax.set_ylabel("density")
    ax.legend(fontsize=8)
    ax.set_title("terminal law vs one-point Gaussian")
    return _save(fig, path)


def kernel_support_figure(support, means, path):
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].hist(support, bins=40, density=True, color="tab:blue", alpha=0.7)
    axes[0].set_title("kernel support (one conditioning)")
    axes[0].set_xlabel("terminal position")
    axes[1].hist(means, bins=30, density=True, color="tab:orange", alpha=0.7)
    axes[1].set_title("kernel means across conditionings")
    axes[1].set_xlabel("kernel mean")
    return _save(fig, path)


def laplace_figure(report, path):
    rows = report["alphas"]
    a = [r["alpha"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(a, [r["lhs_mean"] for r in rows],
                yerr=[r["stderr"] for r in rows], marker="o",
                label="E exp(-a (T - T0))")
    ax.plot(a, [r["rhs_mean"] for r in rows], marker="s", ls="--",
            label="E exp(-2 sqrt(2a) L)")
    ax.set_xlabel("alpha")
    ax.set_ylabel("Laplace transform")
    ax.legend(fontsize=8)
    ax.set_title("pair Laplace identity (censored: %.2f%%)"
                 % (100 * report["censored_fraction"]))
    return _save(fig, path)


def chaos_figure(levels, path):
    """Per-level sample variance (log scale) plus the mean of level 0."""
    levels = np.asarray(levels)
    var = levels.var(axis=0, ddof=1) if len(levels) > 1 else np.zeros(levels.shape[1])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(np.arange(len(var)), np.maximum(var, 1e-300), color="tab:green",
           alpha=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("chaos level")
    ax.set_ylabel("sample variance")
    ax.set_title("chaos level variances")
    return _save(fig, path)


def suite_figure(reports, path):
    names = [r.name for r in reports]
    ratio = [abs(r.value) / r.tolerance if r.tolerance else 0.0 for r in reports]
    colors = ["tab:green" if r.passed else "tab:red" for r in reports]
    fig, ax = plt.subplots(figsize=(7, 0.4 * len(reports) + 1.5))
    ax.barh(range(len(reports)), ratio, color=colors)
    ax.axvline(1.0, color="k", lw=1, ls="--")
    ax.set_yticks(range(len(reports)))
    ax.set_yticklabels(names, fontsize=7)
    ax.set_xlabel("|value| / tolerance")
    ax.set_title("verification suite")
    return _save(fig, path)
