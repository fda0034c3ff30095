"""Benchmark harness: plan determinism, share accounting, conservation."""

import pytest

from wsmail.bench import (
    KINDS,
    BenchReport,
    LatencySample,
    WorkloadSpec,
    op_sequence,
    run_external_load,
    run_mix,
)


def test_mix_must_sum_to_one():
    with pytest.raises(ValueError):
        WorkloadSpec(mix={"send": 0.5, "list": 0.4})
    with pytest.raises(ValueError):
        WorkloadSpec(mix={"send": 0.5, "list": 0.25, "retrieve": 0.25, "nosuch": 0.0})


def test_plan_is_deterministic_for_seed():
    a = op_sequence(WorkloadSpec(seed=42, clients=3, ops_per_client=100))
    b = op_sequence(WorkloadSpec(seed=42, clients=3, ops_per_client=100))
    c = op_sequence(WorkloadSpec(seed=43, clients=3, ops_per_client=100))
    assert a == b
    assert a != c


def test_plan_has_exact_shares():
    spec = WorkloadSpec(seed=1, clients=4, ops_per_client=500)
    for plan in op_sequence(spec):
        assert len(plan) == 500
        for kind in KINDS:
            assert plan.count(kind) == 125


def test_plan_respects_uneven_mix():
    spec = WorkloadSpec(
        seed=1, clients=1, ops_per_client=10,
        mix={"send": 0.5, "list": 0.3, "retrieve": 0.2, "delete": 0.0},
    )
    (plan,) = op_sequence(spec)
    assert plan.count("send") == 5
    assert plan.count("list") == 3
    assert plan.count("retrieve") == 2
    assert plan.count("delete") == 0


def test_outlier_flagging():
    spec = WorkloadSpec()
    samples = [LatencySample("list", 10.0, True) for _ in range(99)]
    samples.append(LatencySample("send", 150.0, True))
    report = BenchReport(spec, samples, 0, 0, {})
    flagged = report.outliers()
    assert flagged == [{"kind": "send", "elapsed_ms": 150.0}]


def test_small_mix_run_conserves_messages(tmp_path):
    spec = WorkloadSpec(seed=3, clients=2, ops_per_client=16, prime_inbox=2)
    report = run_mix(spec, tmp_path)
    assert len(report.samples) == 32
    per_kind = report.per_kind()
    for kind in KINDS:
        assert per_kind[kind]["share"] == pytest.approx(0.25)
    assert report.conservation["conserved"] is True
    assert report.bytes_in > 0 and report.bytes_out > 0
    # the text rendering includes the published comparison line
    text = report.render_text()
    assert "prototype baseline" in text
    assert "conserved=True" in text


def test_external_load_short_run(tmp_path):
    result = run_external_load(rate_hz=10.0, duration_s=1.5, tmp_dir=tmp_path)
    assert result["conserved"] is True
    assert result["stored"] + result["dead"] == result["sent"]
    assert 13 <= result["sent"] <= 17  # 15 expected at 10 Hz for 1.5 s
