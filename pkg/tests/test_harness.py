"""Protocol exploration harness: determinism, property checks, shrinking."""

import json
import random

import pytest

from wsmail.errors import NotACounterexample
from wsmail.harness import (
    ATTACKER,
    FETCH_CORRESPONDENCE,
    RECEIVER,
    SENDER,
    TOKEN_EXPIRY,
    TOKEN_SINGLE_USE,
    Counterexample,
    check_trace,
    explore,
    generate_ops,
    main,
    run_ops,
    shrink,
)


def test_op_generation_is_deterministic():
    a = generate_ops(random.Random(9), 40)
    b = generate_ops(random.Random(9), 40)
    c = generate_ops(random.Random(10), 40)
    assert a == b and a != c
    assert 1 <= len(a) <= 40


def test_honest_runs_have_no_violations():
    for seed in range(150):
        example = explore(seed, 30)
        assert example is None, (seed, example.property, example.detail)


def test_replay_is_deterministic():
    ops = generate_ops(random.Random(4), 40)
    trace_a, _ = run_ops(ops, leak_key=False)
    trace_b, _ = run_ops(ops, leak_key=False)
    assert [e["event"] for e in trace_a] == [e["event"] for e in trace_b]


def find_leak_violation(max_seeds=300):
    for seed in range(max_seeds):
        example = explore(seed, 40, leak_key=True)
        if example is not None:
            return example
    return None


def test_leaked_key_violation_is_found_and_shrinks():
    """Falsifiability: with the origin server's key leaked, the harness
    must detect forged sender attribution."""
    example = find_leak_violation()
    assert example is not None
    assert example.property == FETCH_CORRESPONDENCE

    minimized = shrink(example, leak_key=True)
    assert len(minimized.ops) <= len(example.ops)
    # the shrunk plan still reproduces the same violation
    _, violation = run_ops(minimized.ops, leak_key=True)
    assert violation is not None and violation[0] == FETCH_CORRESPONDENCE
    # and no single further deletion can (fixed point)
    for i in range(len(minimized.ops)):
        _, v = run_ops(minimized.ops[:i] + minimized.ops[i + 1:], leak_key=True)
        assert v is None or v[0] != FETCH_CORRESPONDENCE
    # the essential steps survive shrinking
    kinds = [op["op"] for op in minimized.ops]
    assert "attacker_forge" in kinds
    assert "receiver_fetch" in kinds


def test_same_plan_is_safe_without_the_leak():
    example = find_leak_violation()
    assert example is not None
    _, violation = run_ops(example.ops, leak_key=False)
    assert violation is None


def test_shrink_rejects_non_counterexample():
    bogus = Counterexample(
        seed=1, property=FETCH_CORRESPONDENCE, detail="made up",
        ops=[{"op": "advance_clock", "pick": 0, "ms": 1}], trace=[],
    )
    with pytest.raises(NotACounterexample):
        shrink(bogus, leak_key=False)


# ------------------------------------------------------- trace-level checks


def strip_event(guid, sender=SENDER, acl=(RECEIVER,)):
    return {"event": "SEND_STRIPPED", "at": 0, "guid": guid,
            "digest": "d", "sender": sender, "acl": sorted(acl)}


def ok_event(guid, subject=RECEIVER, **extra):
    return {"event": "RETRIEVE_OK", "at": 1, "guid": guid,
            "digest": "d", "subject": subject, **extra}


def test_check_trace_accepts_matched_fetch():
    assert check_trace([strip_event("g1"), ok_event("g1", claimed_sender=SENDER)]) is None


def test_check_trace_flags_fetch_without_strip():
    violation = check_trace([ok_event("ghost")])
    assert violation is not None and violation[0] == FETCH_CORRESPONDENCE


def test_check_trace_flags_acl_escape():
    violation = check_trace([strip_event("g1", acl=("other@dest.sim",)), ok_event("g1")])
    assert violation is not None and violation[0] == FETCH_CORRESPONDENCE


def test_check_trace_flags_misattributed_sender():
    violation = check_trace(
        [strip_event("g1", sender=ATTACKER), ok_event("g1", claimed_sender=SENDER)]
    )
    assert violation is not None and violation[0] == FETCH_CORRESPONDENCE


def test_check_trace_flags_token_reuse():
    trace = [
        strip_event("g1"),
        ok_event("g1", token_id="t1"),
        ok_event("g1", token_id="t1"),
    ]
    violation = check_trace(trace)
    assert violation is not None and violation[0] == TOKEN_SINGLE_USE


def test_check_trace_flags_expired_acceptance():
    trace = [
        strip_event("g1"),
        ok_event("g1", token_id="t1", token_expires_at=100, fetched_at=100),
    ]
    violation = check_trace(trace)
    assert violation is not None and violation[0] == TOKEN_EXPIRY


# ------------------------------------------------------------------- CLI


def test_cli_clean_run(capsys, tmp_path):
    code = main(["--seeds", "25", "--max-len", "15", "--out-dir", str(tmp_path)])
    out = capsys.readouterr().out
    assert code == 0
    assert "no property violations in 25 seeds" in out


def test_cli_leak_key_writes_counterexample(capsys, tmp_path):
    code = main(["--seeds", "300", "--max-len", "40", "--leak-key", "--out-dir", str(tmp_path)])
    out = capsys.readouterr().out
    assert code == 0
    assert "violation found as expected under --leak-key" in out
    files = list(tmp_path.glob("counterexample-seed*.json"))
    assert len(files) == 1
    doc = json.loads(files[0].read_text())
    assert doc["property"] == FETCH_CORRESPONDENCE
    assert any(e["event"] == "ATTACKER_INJECT" for e in doc["trace"])
