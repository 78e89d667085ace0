"""Lifecycle orchestration tests on the synthetic cluster corpus.

Configs here are intentionally tiny (few users, one or two epochs) so the
whole file stays fast; learning quality is covered elsewhere.
"""

import numpy as np
import pytest

from sfrec.config import ExperimentConfig
from sfrec.exchange import MessageKind
from sfrec.harness import (
    LifecycleError,
    RunRecord,
    _SeedRun,
    evaluate_from_state,
    prepare_data,
    read_results,
    run_lifecycle,
    write_results,
)


def tiny_config(**overrides):
    base = dict(
        data_format="cluster",
        variant="independent",
        dim=8,
        lr=5e-3,
        batch_size=64,
        slow_epochs=1,
        fast_epochs=1,
        patience=0,
        seeds=1,
        n_eval_neg=20,
        max_users=8,
        max_positions_per_user=4,
        precision="float32",
        record_timing=False,
    )
    base.update(overrides)
    cfg = ExperimentConfig(**base)
    cfg.validate()
    return cfg


@pytest.fixture(scope="module")
def cluster_prepared():
    cfg = tiny_config()
    return prepare_data(cfg)


def test_prepare_data_subsample_is_stable(cluster_prepared):
    again = prepare_data(tiny_config())
    assert again[1] == cluster_prepared[1]
    assert len(cluster_prepared[1]) == 8


def test_independent_run_sends_no_messages(cluster_prepared):
    out = run_lifecycle(tiny_config(), cluster_prepared)
    assert out.messages[0] == []
    assert out.diagnostics[0] == {"uploads": 0, "refreshes": 0, "downloads": 0}


def test_bidirectional_uploads_once_per_user_at_threshold_five(cluster_prepared):
    cfg = tiny_config(variant="s2f_full", threshold=5)
    out = run_lifecycle(cfg, cluster_prepared)
    n_users = len(cluster_prepared[1])
    # 5 fast events per user and a count threshold of 5: exactly one upload
    assert out.diagnostics[0]["uploads"] == n_users
    assert out.diagnostics[0]["refreshes"] == n_users
    # one initial download per user plus one after each upload
    assert out.diagnostics[0]["downloads"] == 2 * n_users
    kinds = [m.kind for m in out.messages[0]]
    assert kinds.count(MessageKind.NEGATIVE_MEMORY_UP) == n_users
    assert kinds.count(MessageKind.INTEREST_DOWN) == 2 * n_users
    assert kinds.count(MessageKind.GRU_N_SYNC) == 2 * n_users


def test_upload_count_follows_threshold(cluster_prepared):
    cfg = tiny_config(variant="f2s", threshold=2)
    out = run_lifecycle(cfg, cluster_prepared)
    # 5 fast events with threshold 2 tick over at events 2 and 4
    assert out.diagnostics[0]["uploads"] == 2 * len(cluster_prepared[1])


def test_upload_only_variant_never_downloads(cluster_prepared):
    out = run_lifecycle(tiny_config(variant="f2s"), cluster_prepared)
    kinds = {m.kind for m in out.messages[0]}
    assert kinds == {MessageKind.NEGATIVE_MEMORY_UP}
    assert out.diagnostics[0]["downloads"] == 0


def test_upload_only_kinds_are_a_strict_subset_of_bidirectional(cluster_prepared):
    f2s = run_lifecycle(tiny_config(variant="f2s"), cluster_prepared)
    full = run_lifecycle(tiny_config(variant="s2f_full"), cluster_prepared)
    f2s_kinds = {m.kind for m in f2s.messages[0]}
    full_kinds = {m.kind for m in full.messages[0]}
    assert f2s_kinds < full_kinds


def test_no_uploads_when_event_count_stays_below_threshold(cluster_prepared):
    # every user has 5 fast events; a threshold of 6 is never reached
    out = run_lifecycle(tiny_config(variant="s2f_full", threshold=6), cluster_prepared)
    assert out.diagnostics[0]["uploads"] == 0
    kinds = {m.kind for m in out.messages[0]}
    assert MessageKind.NEGATIVE_MEMORY_UP not in kinds  # only the initial downloads remain


def test_records_cover_every_metric_and_seed(cluster_prepared):
    cfg = tiny_config(seeds=2, eval_ks=[5, 10])
    out = run_lifecycle(cfg, cluster_prepared)
    keys = {(r.component, r.metric, r.k, r.seed) for r in out.records}
    expected = {
        (comp, metric, k, seed)
        for comp in ("slow", "fast")
        for metric, k in (("hr", 5), ("ndcg", 5), ("hr", 10), ("ndcg", 10), ("mrr", 0))
        for seed in (0, 1)
    }
    assert keys == expected
    assert all(0.0 <= r.value <= 1.0 for r in out.records)


def test_wall_seconds_zero_when_timing_disabled(cluster_prepared):
    out = run_lifecycle(tiny_config(), cluster_prepared)
    assert all(r.wall_seconds == 0.0 for r in out.records)


def test_same_config_same_seed_is_byte_identical(tmp_path, cluster_prepared):
    cfg = tiny_config(variant="s2f_full")
    paths = []
    for i in range(2):
        out = run_lifecycle(cfg, cluster_prepared)
        path = tmp_path / f"run{i}.csv"
        write_results(out.records, path)
        paths.append(path.read_bytes())
    assert paths[0] == paths[1]


def test_seed_changes_the_numbers(cluster_prepared):
    a = run_lifecycle(tiny_config(), cluster_prepared)
    b = run_lifecycle(tiny_config(base_seed=17), cluster_prepared)
    assert [r.value for r in a.records] != [r.value for r in b.records]


def test_results_round_half_up_to_four_decimals(tmp_path):
    rec = RunRecord("cluster", "independent", "slow", "hr", 5, 0.71655, 0, 0.0)
    path = tmp_path / "r.csv"
    write_results([rec], path)
    lines = path.read_text().splitlines()
    assert lines == [
        "dataset,variant,component,metric,k,value,seed,wall_seconds",
        "cluster,independent,slow,hr,5,0.7166,0,0.0000",
    ]


def test_results_file_round_trips(tmp_path):
    records = [
        RunRecord("cluster", "s2f_full", "fast", "hr", 5, 0.25, 1, 0.0),
        RunRecord("cluster", "s2f_full", "fast", "mrr", 0, 0.125, 0, 0.0),
    ]
    path = tmp_path / "r.csv"
    write_results(records, path)
    back = read_results(path)
    assert len(back) == 2
    assert back[0].metric == "hr" and back[1].metric == "mrr"  # sorted on write
    write_results(back, tmp_path / "r2.csv")
    assert (tmp_path / "r2.csv").read_bytes() == path.read_bytes()


def test_results_reader_rejects_foreign_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError, match="header"):
        read_results(path)


def test_empty_records_refused(tmp_path):
    with pytest.raises(ValueError, match="empty"):
        write_results([], tmp_path / "never.csv")


def test_non_finite_loss_aborts_with_context(cluster_prepared):
    split, users = cluster_prepared
    run = _SeedRun(tiny_config(), 0, split, users)
    # the head's output bias feeds sigmoid directly, so a NaN here reaches the loss
    bad = run.slow.head.mlp.params()[-1]
    bad.data = np.full_like(bad.data, np.nan)
    with pytest.raises(LifecycleError, match="slow-train.*user"):
        run.train_slow()


def test_lifecycle_needs_users():
    cfg = tiny_config()
    split, _ = prepare_data(cfg)
    with pytest.raises(LifecycleError, match="no users"):
        run_lifecycle(cfg, (split, []))


def test_saved_state_reproduces_training_time_evaluation(cluster_prepared):
    cfg = tiny_config(variant="s2f_full")
    out = run_lifecycle(cfg, cluster_prepared, collect_state=True)
    arrays, exposures = out.states[0]
    redone = evaluate_from_state(cfg, 0, cluster_prepared, arrays, out.messages[0], exposures)
    original = {(r.component, r.metric, r.k): r.value for r in out.records}
    assert {(r.component, r.metric, r.k): r.value for r in redone} == original
