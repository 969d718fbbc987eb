"""Result CSVs, mean ± SD summaries and paired-statistics tables.

The result CSV is long-format with columns
``experiment, method, seed, K, metric, value``.  Rows are sorted by key,
``K`` is empty when not applicable and values are written with ``repr`` so
a read-back is bit-exact and a rerun of the same config is byte-identical.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path

import numpy as np

from ..stats import holm_correct, wilcoxon_signed_rank
from ..train import HISTORY_COLUMNS
from .experiments import RESULT_COLUMNS, ResultRow, ResultTable

# metrics shown in the summary, in this order; diagnostics with "_bin" are CSV-only
SUMMARY_FIRST = (
    "soft_nll",
    "kl_to_annotator",
    "soft_brier",
    "hard_acc_all",
    "ece_eqmass",
    "smooth_ece",
    "entropy_corr",
    "soft_nll_high",
    "improvement",
)


def write_results_csv(table: ResultTable, path) -> None:
    rows = sorted(table.rows, key=lambda r: r.key)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([r.experiment, r.method, r.seed, "" if r.K is None else r.K, r.metric, repr(float(r.value))])


def read_results_csv(path) -> ResultTable:
    t = ResultTable()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return t
        if tuple(header) != RESULT_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        for exp, method, seed, K, metric, value in reader:
            t.rows.append(ResultRow(exp, method, int(seed), int(K) if K else None, metric, float(value)))
    return t.finalize()


def write_histories(table: ResultTable, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in sorted(table.histories):
        with open(directory / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for row in table.histories[name]:
                w.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])


def mean_sd(values) -> tuple[float, float]:
    """Mean and across-seed sample SD (``ddof=1``; NaN for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else math.nan


def format_mean_sd(values, digits: int = 4) -> str:
    m, s = mean_sd(values)
    sd = "n/a" if math.isnan(s) else f"{s:.{digits}f}"
    return f"{m:.{digits}f} ± {sd}"


def _summary_metrics(metrics) -> list[str]:
    rest = sorted(m for m in metrics if m not in SUMMARY_FIRST and "_bin" not in m)
    return [m for m in SUMMARY_FIRST if m in metrics] + rest


def summary_text(table: ResultTable) -> str:
    """Plain-text mean ± SD table per experiment, metric and (method, K) group."""
    groups = defaultdict(list)
    for r in table.rows:
        groups[(r.experiment, r.metric, r.method, r.K)].append(r.value)
    lines = []
    for exp in sorted({k[0] for k in groups}):
        metrics = _summary_metrics({k[1] for k in groups if k[0] == exp})
        lines.append(f"== {exp} ==")
        lines.append(f"{'metric':<26} {'method':<28} {'K':>5} {'n':>3}  mean ± SD")
        for metric in metrics:
            keys = sorted((k for k in groups if k[0] == exp and k[1] == metric), key=lambda k: (k[3] or -1, k[2]))
            for k in keys:
                vals = groups[k]
                K = "-" if k[3] is None else str(k[3])
                lines.append(f"{metric:<26} {k[2]:<28} {K:>5} {len(vals):>3}  {format_mean_sd(vals)}")
        lines.append("")
    return "\n".join(lines)


def stats_table(
    table: ResultTable, experiment: str, metric: str = "soft_nll", reference: str = "soft", methods=None
) -> list[dict]:
    """Paired Wilcoxon tests of each method against ``reference``, one cell per (K, method).

    ``diff = method - reference`` per seed.  ``p_less`` tests a lower metric
    for the method, ``p_two_sided`` either direction; Holm adjustment runs
    over all cells of the family separately for each alternative.
    """
    vals = table.values(experiment=experiment, metric=metric)
    Ks = sorted({k for (_, _, k) in vals}, key=lambda k: -1 if k is None else k)
    names = sorted({m for (m, _, _) in vals} - {reference}) if methods is None else list(methods)
    cells = []
    for K in Ks:
        ref = {s: v for (m, s, k), v in vals.items() if m == reference and k == K}
        for m in names:
            other = {s: v for (mm, s, k), v in vals.items() if mm == m and k == K}
            seeds = sorted(set(ref) & set(other))
            if not seeds:
                continue
            diffs = np.array([other[s] - ref[s] for s in seeds])
            nz = diffs[diffs != 0]
            cells.append({
                "experiment": experiment,
                "metric": metric,
                "method": m,
                "reference": reference,
                "K": "" if K is None else K,
                "n": len(seeds),
                "mean_diff": float(diffs.mean()),
                "n_lower": int((diffs < 0).sum()),
                "n_higher": int((diffs > 0).sum()),
                "p_less": wilcoxon_signed_rank(diffs, "less") if nz.size else 1.0,
                "p_two_sided": wilcoxon_signed_rank(diffs, "two_sided") if nz.size else 1.0,
            })
    if cells:
        for alt in ("p_less", "p_two_sided"):
            adj = holm_correct([c[alt] for c in cells])
            for c, a in zip(cells, adj):
                c[f"{alt}_holm"] = float(a)
    return cells


STATS_COLUMNS = (
    "experiment", "metric", "method", "reference", "K", "n", "mean_diff", "n_lower", "n_higher",
    "p_less", "p_less_holm", "p_two_sided", "p_two_sided_holm",
)


def write_stats_csv(cells, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATS_COLUMNS)
        for c in cells:
            w.writerow([repr(c[k]) if isinstance(c[k], float) else c[k] for k in STATS_COLUMNS])


def stats_text(cells) -> str:
    if not cells:
        return "no paired cells\n"
    lines = [f"{'method':<24} {'K':>4} {'n':>2} {'mean diff':>11} {'lower':>5}  {'p_less':>8} {'holm':>8}  {'p_two':>8} {'holm':>8}"]
    for c in cells:
        lines.append(
            f"{c['method']:<24} {str(c['K']):>4} {c['n']:>2} {c['mean_diff']:>11.5f} {c['n_lower']:>2}/{c['n']:<2}"
            f"  {c['p_less']:>8.5f} {c['p_less_holm']:>8.5f}  {c['p_two_sided']:>8.5f} {c['p_two_sided_holm']:>8.5f}"
        )
    rejected = sum(c["p_less_holm"] < 0.05 for c in cells)
    agree = sum(c["n_lower"] == c["n"] for c in cells)
    lines.append(f"{agree} of the {len(cells)} cells have all {cells[0]['n']} paired seeds lower than {cells[0]['reference']}; "
                 f"{rejected} one-sided rejections after Holm at 0.05")
    return "\n".join(lines) + "\n"


def emit_report(table: ResultTable, outdir, plots: bool = False) -> dict[str, Path]:
    """Write ``results.csv``, ``summary.txt``, per-run histories, errors and optional figures."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    files = {"results": outdir / "results.csv", "summary": outdir / "summary.txt"}
    write_results_csv(table, files["results"])
    files["summary"].write_text(summary_text(table))
    if table.histories:
        write_histories(table, outdir / "histories")
        files["histories"] = outdir / "histories"
    if table.errors:
        files["errors"] = outdir / "errors.txt"
        files["errors"].write_text("\n".join(table.errors) + "\n")
    if plots:
        from .plots import render_figures

        files.update(render_figures(table, outdir))
    return files


def regenerate(outdir, plots: bool = False) -> dict[str, Path]:
    """Rebuild summaries (and figures) from an existing ``results.csv``."""
    outdir = Path(outdir)
    table = read_results_csv(outdir / "results.csv")
    files = {"summary": outdir / "summary.txt"}
    files["summary"].write_text(summary_text(table))
    if plots:
        from .plots import render_figures

        files.update(render_figures(table, outdir))
    return files
