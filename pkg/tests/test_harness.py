import math
from dataclasses import replace

import numpy as np
import pytest

from labeldelivery.data import js_distance, make_synthetic_task, subsample_dataset
from labeldelivery.errors import ConfigurationError
from labeldelivery.harness.config import OUTPUT_ROOT_ENV, config_text, load_config, parse_overrides
from labeldelivery.harness.experiments import (
    ResultTable,
    _guarded,
    binned_improvement,
    build_dataset,
    prop1_breaches,
    run_experiment,
    seed_split,
)
from labeldelivery.harness.report import (
    emit_report,
    format_mean_sd,
    mean_sd,
    read_results_csv,
    regenerate,
    stats_table,
    stats_text,
    summary_text,
    write_results_csv,
)

# the tiny eval split has fewer high-disagreement examples than ECE bins
pytestmark = pytest.mark.filterwarnings("ignore::labeldelivery.errors.DegenerateWarning")

TINY = [
    "data.n=160",
    "data.C=3",
    "data.d=4",
    "data.votes_per_example=10",
    "data.separation=2.0",
    "train.epochs=4",
    "train.batch_size=32",
    "train.hidden=16",
    "geometry.power_iters=30",
    "geometry.trace_probes=5",
    "geometry.grad_draws=20",
    "ood.knn_k=5",
    "sweep.K_values=5",
    "sweep.hold_periods=1, 2",
]


def tiny(kind, *extra, seeds="0, 1"):
    return load_config(None, TINY + [f"experiment.seeds={seeds}", *extra], kind=kind)


def test_config_file_overrides_and_kind(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[experiment]\nseeds = 3, 4\n[train]\nepochs = 9\n[delivery]\nhold_period = 5\n")
    cfg = load_config(path, ["train.epochs=2"], kind="family")
    assert cfg.kind == "family"
    assert cfg.seeds == (3, 4)
    assert cfg.train.epochs == 2
    assert cfg.train.hold_period == 5
    assert "multipass" in cfg.methods


def test_config_rejects_unknown_keys_and_values(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(None, ["train.epoch=3"])
    with pytest.raises(ConfigurationError):
        load_config(None, ["mystery.key=1"])
    with pytest.raises(ConfigurationError):
        load_config(None, ["train.epochs=many"])
    with pytest.raises(ConfigurationError):
        load_config(None, ["experiment.seeds="])
    with pytest.raises(ConfigurationError):
        parse_overrides(["noequals"])
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.ini")
    with pytest.raises(ConfigurationError):
        load_config(None, ["experiment.methods=soft, shuffled_sls"], kind="main")
    with pytest.raises(ConfigurationError):
        load_config(None, ["experiment.methods=soft, mixup"], kind="sweep")


def test_output_root_precedence(tmp_path, monkeypatch):
    cfg = load_config(None, ["experiment.output_root=cfgroot"], kind="main")
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    assert str(cfg.output_dir()) == "cfgroot/main"
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "env"))
    assert cfg.output_dir() == tmp_path / "env" / "main"
    assert cfg.output_dir(tmp_path / "flag") == tmp_path / "flag" / "main"
    monkeypatch.delenv(OUTPUT_ROOT_ENV)
    assert str(load_config(None, kind="sweep").output_dir()) == "results/sweep"


def test_config_text_round_trips(tmp_path):
    cfg = tiny("geometry")
    path = tmp_path / "round.ini"
    path.write_text(config_text(cfg))
    assert load_config(path) == cfg


def test_row_arithmetic():
    t = ResultTable()
    for m in ("soft", "sls"):
        t.add("main", m, 0, None, {"soft_nll": 0.5, "ece_eqmass": 0.1, "hard_acc_all": 0.9})
    assert len(t.finalize().rows) == 6
    t.add("main", "soft", 0, None, {"soft_nll": 0.4})
    with pytest.raises(ConfigurationError):
        t.finalize()


def test_mean_sd_format():
    assert format_mean_sd([1, 2, 3]) == "2.0000 ± 1.0000"
    assert format_mean_sd([0.5]) == "0.5000 ± n/a"
    assert math.isnan(mean_sd([])[0])


def test_empty_table_writes_header_only(tmp_path):
    write_results_csv(ResultTable(), tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text() == "experiment,method,seed,K,metric,value\n"
    assert read_results_csv(tmp_path / "r.csv").rows == []


def test_failed_cell_becomes_error_row():
    def boom(task):
        raise RuntimeError("nope")

    t = _guarded(boom)({"experiment": "main", "method": "soft", "seed": 3})
    assert [(r.metric, math.isnan(r.value)) for r in t.rows] == [("error", True)]
    assert "RuntimeError: nope" in t.errors[0]


@pytest.mark.parametrize("seed", range(4))
def test_bins_partition_and_aggregate_to_the_mean(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(7, 400))
    gap = np.round(r.random(n), 1)  # ties across bin edges
    imp = r.normal(size=n)
    centers, means, sizes = binned_improvement(gap, imp, 5)
    assert sizes.sum() == n
    assert abs((sizes * means).sum() / n - imp.mean()) < 1e-9
    assert np.all(np.diff(centers) >= 0)


def test_seed_split_is_shared_across_methods():
    cfg = tiny("main")
    ds = build_dataset(cfg)
    a, _ = seed_split(ds, cfg, 4)
    b, _ = seed_split(ds, replace(cfg, methods=("soft",)), 4)
    assert np.array_equal(a.ids, b.ids)


@pytest.fixture(scope="module")
def main_table():
    return run_experiment(tiny("main", "experiment.methods=soft, sls"))


def test_main_grid_rows(main_table):
    methods = {r.method for r in main_table.rows}
    assert methods == {"soft", "sls"}
    assert {r.seed for r in main_table.rows} == {0, 1}
    assert not main_table.errors
    assert set(main_table.histories) == {"main_soft_seed0", "main_soft_seed1", "main_sls_seed0", "main_sls_seed1"}


def test_summary_round_trip_and_rerun_bytes(main_table, tmp_path):
    emit_report(main_table, tmp_path / "a")
    emit_report(run_experiment(tiny("main", "experiment.methods=soft, sls")), tmp_path / "b")
    for name in ("results.csv", "summary.txt", "histories/main_sls_seed1.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    in_memory = (tmp_path / "a" / "summary.txt").read_text()
    regenerate(tmp_path / "a")
    assert (tmp_path / "a" / "summary.txt").read_text() == in_memory
    assert summary_text(read_results_csv(tmp_path / "a" / "results.csv")) == in_memory


def test_parallel_workers_give_the_same_rows(main_table):
    par = run_experiment(tiny("main", "experiment.methods=soft, sls", "experiment.workers=2"))
    assert par.rows == main_table.rows


def test_stats_table_cells(main_table):
    cells = stats_table(main_table, "main", "soft_nll", "soft")
    assert [c["method"] for c in cells] == ["sls"]
    assert cells[0]["n"] == 2
    assert cells[0]["n_lower"] + cells[0]["n_higher"] <= 2
    assert "of the 1 cells" in stats_text(cells)


def test_hold_one_equals_canonical_sls_row():
    probe = run_experiment(tiny("resample_probe", seeds="0"))
    family = run_experiment(tiny("family", "experiment.methods=soft, sls", seeds="0"))
    a = probe.by_seed("resample_probe", "sls_hold1", "soft_nll")
    b = family.by_seed("family", "sls", "soft_nll")
    assert a == b
    # hold = epochs is appended to the configured periods
    assert {r.method for r in probe.rows} == {"sls_hold1", "sls_hold2", "sls_hold4"}


def test_single_vote_collapses_count_methods():
    cfg = tiny("family", "data.votes_per_example=1", "experiment.methods=multipass, deterministic_control, majority", seeds="0")
    t = run_experiment(cfg)
    metrics = {m: {r.metric: r.value for r in t.rows if r.method == m} for m in cfg.methods}
    assert metrics["multipass"] == metrics["deterministic_control"] == metrics["majority"]


def test_sweep_rows_and_consistency_limit():
    t = run_experiment(tiny("sweep", "sweep.K_values=5, 10000", "experiment.methods=soft, sls", seeds="0"))
    rows = {(r.K, r.metric): r.value for r in t.rows if r.method == "sls"}
    for K in (5, 10000):
        n_bins = sum(1 for (k, m) in rows if k == K and m.startswith("js_bin") and m.endswith("_improvement"))
        assert n_bins == 5
    # large K: the subsampled target converges to the full distribution
    ds = make_synthetic_task(160, 3, 4, 1.0, 10, 7, separation=2.0)
    assert js_distance(subsample_dataset(ds, 10**4, 0).target(), ds.full_dist).max() < 0.02
    assert abs(rows[(10000, "improvement")]) < abs(rows[(5, "improvement")])


def test_geometry_and_ood_rows():
    g = run_experiment(tiny("geometry", seeds="0"))
    metrics = {(r.method, r.metric) for r in g.rows}
    assert ("soft~sls", "barrier") in metrics and ("sls", "lambda_max_full") in metrics
    assert g.by_seed("geometry", "soft", "barrier_self") == {0: 0.0}
    o = run_experiment(tiny("ood", "experiment.methods=soft", seeds="0"))
    names = {r.metric for r in o.rows}
    assert {"far_msp", "near_knn", "far_odin"} <= names


@pytest.mark.slow
def test_prop1_experiment_within_tolerance():
    cfg = load_config(None, ["experiment.seeds=0", "prop1.trials=2", "prop1.draws=100000"], kind="prop1")
    t = run_experiment(cfg)
    assert prop1_breaches(t, cfg) == []
