"""Static figures for the sweep diagnostic, the resampling probe and endpoint comparisons."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiments import ResultTable  # noqa: E402
from .report import mean_sd  # noqa: E402

golden = (np.sqrt(5.0) - 1.0) / 2.0
RC = {
    "font.size": 8,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "lines.markersize": 4,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}
# fixed PNG metadata keeps repeated renders byte-stable
PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, metadata=PNG_META)
    plt.close(fig)
    return path


def _seed_mean(table: ResultTable, experiment, method, metric, K):
    v = list(table.by_seed(experiment, method, metric, K).values())
    return mean_sd(v)


def sweep_figure(table: ResultTable, path: Path, prefix: str = "js") -> Path | None:
    """Seed-averaged improvement per gap bin, one panel per K."""
    rows = [r for r in table.rows if r.experiment == "sweep" and r.metric.startswith(f"{prefix}_bin")
            and r.metric.endswith("_improvement")]
    if not rows:
        return None
    Ks = sorted({r.K for r in rows})
    methods = sorted({r.method for r in rows})
    n_bins = 1 + max(int(r.metric[len(prefix) + 4 :].split("_")[0]) for r in rows)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(Ks), figsize=(2.2 * len(Ks), 2.2), sharey=True, squeeze=False)
        for ax, K in zip(axes[0], Ks):
            for m in methods:
                gaps = [_seed_mean(table, "sweep", m, f"{prefix}_bin{b}_gap", K)[0] for b in range(n_bins)]
                imps = [_seed_mean(table, "sweep", m, f"{prefix}_bin{b}_improvement", K)[0] for b in range(n_bins)]
                ax.plot(gaps, imps, marker="o", label=m)
            ax.axhline(0.0, color="0.6", lw=0.8, ls="--")
            ax.set_title(f"K = {K}")
            ax.set_xlabel(f"{prefix.replace('_', ' ')} gap (bin mean)")
        axes[0][0].set_ylabel("soft NLL improvement")
        axes[0][-1].legend(frameon=False)
        return _save(fig, path)


def probe_figure(table: ResultTable, path: Path) -> Path | None:
    by_hold = defaultdict(list)
    for r in table.rows:
        if r.experiment == "resample_probe" and r.metric == "soft_nll":
            by_hold[int(r.method.removeprefix("sls_hold"))].append(r.value)
    if not by_hold:
        return None
    holds = sorted(by_hold)
    stats = [mean_sd(by_hold[h]) for h in holds]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.2, 3.2 * golden))
        ax.errorbar(holds, [s[0] for s in stats], yerr=[0 if np.isnan(s[1]) else s[1] for s in stats],
                    marker="o", capsize=2)
        ax.set_xscale("log")
        ax.set_xlabel("hold period (epochs)")
        ax.set_ylabel("eval soft NLL")
        return _save(fig, path)


def endpoint_figure(table: ResultTable, experiment: str, path: Path, metric: str = "soft_nll") -> Path | None:
    by_method = defaultdict(list)
    for r in table.rows:
        if r.experiment == experiment and r.metric == metric and r.K is None:
            by_method[r.method].append(r.value)
    if not by_method:
        return None
    methods = sorted(by_method)
    stats = [mean_sd(by_method[m]) for m in methods]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(0.6 * len(methods) + 1.5, 2.4))
        x = np.arange(len(methods))
        ax.bar(x, [s[0] for s in stats], yerr=[0 if np.isnan(s[1]) else s[1] for s in stats],
               color="0.7", edgecolor="0.2", capsize=2)
        ax.set_xticks(x, methods, rotation=30, ha="right")
        ax.set_ylabel(metric.replace("_", " "))
        lo = min(s[0] for s in stats)
        hi = max(s[0] for s in stats)
        pad = 0.1 * (hi - lo) if hi > lo else 0.05 * abs(hi) + 1e-3
        ax.set_ylim(lo - 3 * pad, hi + 3 * pad)
        return _save(fig, path)


def render_figures(table: ResultTable, outdir) -> dict[str, Path]:
    outdir = Path(outdir)
    made = {}
    for name, fn in (
        ("sweep_js", lambda p: sweep_figure(table, p, "js")),
        ("sweep_l1", lambda p: sweep_figure(table, p, "l1")),
        ("sweep_high_js", lambda p: sweep_figure(table, p, "high_js")),
        ("resample_probe", lambda p: probe_figure(table, p)),
        ("main_soft_nll", lambda p: endpoint_figure(table, "main", p)),
        ("family_soft_nll", lambda p: endpoint_figure(table, "family", p)),
    ):
        out = fn(outdir / f"{name}.png")
        if out is not None:
            made[f"figure_{name}"] = out
    return made
