import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trunkrepro.sim import SimilarityMatrix
from trunkrepro.sweep import (
    CSV_HEADER,
    SweepError,
    SweepRecord,
    SweepSpec,
    distinct_trees,
    emit_csv,
    emit_plot,
    expand_range,
    frozen_profile,
    read_csv,
    read_records,
    run_sweep,
)

from conftest import desk_config

PARAM = "training.grouping_volatility"


def fake_runner(cfg, build_dir):
    gv = cfg.grouping_volatility
    fp = "flat" if gv >= 1.0 else ("mid" if gv >= 0.5 else "deep")
    return SweepRecord(0, None, 0, 1.0 - gv / 10, fp, 1 if fp == "flat" else 2, 2.0, str(build_dir), cfg.seed)


def test_expand_range_is_inclusive():
    values = expand_range(0.1, 2.1, 0.1)
    assert len(values) == 21
    assert values[0] == 0.1 and values[-1] == 2.1 and values[2] == 0.3
    assert expand_range(1, 1, 0.5) == [1]
    with pytest.raises(SweepError):
        expand_range(1, 0, 0.1)
    with pytest.raises(SweepError):
        expand_range(0, 1, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 50), st.integers(1, 40), st.sampled_from([0.01, 0.05, 0.1, 0.25]))
def test_expand_range_length(start_i, n, step):
    start = start_i * step
    values = expand_range(start, start + n * step, step)
    assert len(values) == n + 1
    assert np.all(np.diff(values) > 0)


def test_range_sweep_writes_21_records(tmp_path):
    spec = SweepSpec(desk_config(), PARAM, range=(0.1, 2.1, 0.1))
    records = run_sweep(spec, tmp_path / "s", runner=fake_runner)
    assert len(records) == 21
    assert [r.index for r in records] == list(range(21))
    assert (tmp_path / "s" / "manifest.json").exists()
    assert set(distinct_trees(records)) == {"flat", "mid", "deep"}


def test_repeats_and_resume(tmp_path):
    spec = SweepSpec(desk_config(), PARAM, values=[0.2, 0.8], repeats=2)
    first = run_sweep(spec, tmp_path / "s", runner=fake_runner, stop_after=3)
    assert len(first) == 3
    calls = []

    def counting(cfg, d):
        calls.append(cfg.grouping_volatility)
        return fake_runner(cfg, d)

    done = run_sweep(spec, tmp_path / "s", runner=counting)
    assert calls == [0.8]
    assert [(r.value, r.repeat) for r in done] == [(0.2, 0), (0.2, 1), (0.8, 0), (0.8, 1)]


def test_torn_tail_is_dropped(tmp_path):
    spec = SweepSpec(desk_config(), PARAM, values=[0.2, 0.4])
    run_sweep(spec, tmp_path / "s", runner=fake_runner, stop_after=1)
    with open(tmp_path / "s" / "records.jsonl", "a") as fh:
        fh.write('{"index": 1, "val')
    assert len(read_records(tmp_path / "s")) == 1
    records = run_sweep(spec, tmp_path / "s", runner=fake_runner)
    assert [r.index for r in records] == [0, 1]


def test_failed_points_are_recorded(tmp_path):
    def flaky(cfg, d):
        if cfg.grouping_volatility == 0.4:
            raise RuntimeError("boom")
        return fake_runner(cfg, d)

    spec = SweepSpec(desk_config(), PARAM, values=[0.2, 0.4, 0.6])
    records = run_sweep(spec, tmp_path / "s", runner=flaky)
    assert [r.status for r in records] == ["ok", "failed", "ok"]
    assert "boom" in records[1].error
    assert list(distinct_trees(records).values()) == [[0.2], [0.6]]


def test_other_sweep_in_dir_refused(tmp_path):
    run_sweep(SweepSpec(desk_config(), PARAM, values=[0.2]), tmp_path / "s", runner=fake_runner)
    with pytest.raises(SweepError):
        run_sweep(SweepSpec(desk_config(), PARAM, values=[0.3]), tmp_path / "s", runner=fake_runner)


def test_invalid_points_rejected_up_front():
    with pytest.raises(Exception):
        SweepSpec(desk_config(), PARAM, values=[0.5, -1.0])
    with pytest.raises(SweepError):
        SweepSpec(desk_config(), PARAM, values=[])


def test_csv_round_trip(tmp_path):
    spec = SweepSpec(desk_config(), PARAM, values=[0.2, 0.6, 1.2])
    records = run_sweep(spec, tmp_path / "s", runner=fake_runner)
    emit_csv(records, tmp_path / "out.csv")
    rows = read_csv(tmp_path / "out.csv")
    assert tuple(rows[0]) == CSV_HEADER
    assert [r["value"] for r in rows] == [0.2, 0.6, 1.2]
    assert [r["fingerprint"] for r in rows] == ["deep", "mid", "flat"]
    assert rows[0]["accuracy"] == records[0].accuracy


def test_empty_csv_has_header_only(tmp_path):
    emit_csv([], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == ",".join(CSV_HEADER) + "\n"
    assert read_csv(tmp_path / "e.csv") == []


def test_plot_has_one_legend_entry_per_tree(tmp_path):
    spec = SweepSpec(desk_config(), PARAM, values=[0.2, 0.3, 0.6, 1.2, 1.5])
    records = run_sweep(spec, tmp_path / "s", runner=fake_runner)
    labels = emit_plot(records, tmp_path / "p.png", PARAM)
    assert len(labels) == 3
    assert (tmp_path / "p.png").stat().st_size > 0
    with pytest.raises(SweepError):
        emit_plot([], tmp_path / "q.png")


def test_frozen_profile_is_monotonic():
    rng = np.random.default_rng(0)
    m = rng.random((6, 6)) + np.eye(6) * 2
    sim = SimilarityMatrix(m / m.sum(axis=1, keepdims=True), tuple(range(6)))
    rows = frozen_profile(sim, expand_range(0.1, 3.0, 0.1))
    counts = [r["groups"] for r in rows]
    assert counts == sorted(counts)
    assert counts[-1] == 6
