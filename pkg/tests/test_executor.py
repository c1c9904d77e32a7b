import pytest

from cfalab import corpus
from cfalab.attacks import AttackSpec
from cfalab.executor import ExecutionFault, execute, expected_counts, observe_indirect_targets
from conftest import NONCE, TEST_KEYS, Built
from oracles import mac32


def run(b, inputs=None, **kw):
    return execute(b.cfg, b.plan, b.itl, TEST_KEYS, NONCE, inputs, **kw)


def test_crc32_scaled_counts(build):
    b = build(corpus.crc32_source(16))
    rep, log = run(b, {"r0": 5})
    assert rep.trace.counts == {0x10000495: 5, 0x10000441: 80, 0x10000465: 5}
    assert rep.trace.illegal == []
    assert rep.auth_size == 3 * 8 + 8
    assert log.m == 5


def test_straight_line_only_return_measured(build):
    b = build(corpus.STRAIGHT_SOURCE)
    rep, log = run(b)
    assert rep.trace.counts == {}
    assert rep.m_f == 0
    assert rep.m_b == mac32(TEST_KEYS.measurement.k_m, 0, b.addr("main.c"))
    assert [e[0] for e in log.events] == ["fallthrough", "call", "return", "exit"]
    assert (log.n, log.m) == (0, 1)


def test_syringe_bolus_counts(build):
    b = build(corpus.SYRINGE_SOURCE)
    body = b.addr("bolus.inner_body")
    rep, _ = run(b, corpus.syringe_inputs(0.010, "+"))
    assert rep.trace.counts[body] == 68
    rep, _ = run(b, corpus.syringe_inputs(0.011, "-"))
    assert rep.trace.counts[body] == 75
    rep, _ = run(b, corpus.syringe_inputs(0.010, "x"))
    assert body not in rep.trace.counts


def test_l_equals_n_plus_m(build):
    for src, inp in [(corpus.DISPATCH_SOURCE, {"r1": 6}), (corpus.SYRINGE_SOURCE, corpus.syringe_inputs(0.02))]:
        b = build(src)
        _, log = run(b, inp)
        conds = sum(1 for k, _, _ in log.events if k.startswith("cond"))
        ind = sum(1 for k, _, _ in log.events if k.startswith("indirect"))
        rets = sum(1 for k, _, _ in log.events if k == "return")
        assert log.n == conds + ind and log.m == rets
        assert log.l == log.n + log.m


def test_replay_is_deterministic(build):
    b = build(corpus.DISPATCH_SOURCE)
    r1, l1 = run(b, {"r1": 7})
    r2, l2 = run(b, {"r1": 7})
    assert r1.to_bytes() == r2.to_bytes()
    assert l1.events == l2.events


def test_dispatch_indirect_reports(build):
    b = build(corpus.DISPATCH_SOURCE)
    rep, log = run(b, {"r1": 4})
    assert rep.trace.counts[b.addr("on_even.e0")] == 2
    assert rep.trace.counts[b.addr("on_odd.o0")] == 2
    assert log.indirect_reports == 4


def test_expected_counts_match_report(build):
    b = build(corpus.SYRINGE_SOURCE)
    inp = corpus.syringe_inputs(0.005, "-")
    rep, _ = run(b, inp)
    assert expected_counts(b.cfg, b.plan, b.itl, inp) == rep.trace.counts


def test_observe_indirect_targets(build):
    b = build(corpus.COMPUTED_TARGET_SOURCE)
    assert observe_indirect_targets(b.cfg, {}) == [b.addr("target.t0")]


def test_fuel_exhaustion(build):
    b = build(corpus.LOOP_SOURCE)
    with pytest.raises(ExecutionFault) as exc:
        run(b, {"r1": 1000}, fuel=50)
    assert exc.value.reason == "fuel-exhausted"
    assert exc.value.report is not None


def test_return_stack_underflow(build):
    b = build("func main {\n block a: cbr b if r1\n block r: ret\n block b: exit\n}\n")
    with pytest.raises(ExecutionFault) as exc:
        run(b, {"r1": 0})
    assert exc.value.reason == "return-stack-underflow"


def test_division_by_zero(build):
    b = build("func main {\n block a: compute r2 = r1 // r3; exit\n}\n")
    with pytest.raises(ExecutionFault) as exc:
        run(b, {"r1": 1})
    assert exc.value.reason == "division-by-zero"


def test_dirty_program_refused(build):
    b = build("func main {\n block a: set pac_key0 = 1; exit\n}\n")
    with pytest.raises(ValueError):
        run(b)


def test_fuel_must_be_positive(build):
    with pytest.raises(ValueError):
        run(build(corpus.DIAMOND_SOURCE), fuel=0)


def test_illegal_indirect_attack_recorded(build):
    b = build(corpus.DISPATCH_SOURCE)
    bad = b.addr("main.latch")
    rep, _ = run(b, {"r1": 2}, attack=AttackSpec("illegal-indirect", addr=bad))
    assert rep.trace.illegal == [bad]


def test_misaligned_indirect_faults(build):
    b = build(corpus.DISPATCH_SOURCE)
    with pytest.raises(ExecutionFault) as exc:
        run(b, {"r1": 2}, attack=AttackSpec("illegal-indirect", addr=b.addr("on_even.e0") + 2))
    assert exc.value.reason == "invalid-indirect-target"
    assert exc.value.report.trace.illegal == [b.addr("on_even.e0") + 2]


@pytest.mark.parametrize("delta", [3, -2])
def test_loop_count_delta_changes_count(build, delta):
    b = build(corpus.SYRINGE_SOURCE)
    inp = corpus.syringe_inputs(0.010, "+")
    rep, _ = run(b, inp, attack=AttackSpec("loop-count-delta", block="bolus.inner_body", delta=delta))
    assert rep.trace.counts[b.addr("bolus.inner_body")] == 68 + delta


def test_branch_swap_changes_path(build):
    b = build(corpus.DIAMOND_SOURCE)
    _, clean = run(b, {"r1": 0})
    _, swapped = run(b, {"r1": 0}, attack=AttackSpec("branch-swap", block="main.entry"))
    assert clean.events[0][0] == "cond-fallthrough"
    assert swapped.events[0][0] == "cond-taken"


def test_return_corrupt_changes_backward_measurement(build):
    b = build(corpus.STRAIGHT_SOURCE)
    clean, _ = run(b)
    try:
        hit, _ = run(b, attack=AttackSpec("return-corrupt", depth=0))
    except ExecutionFault as exc:
        hit = exc.report
    assert hit.m_b != clean.m_b
    assert hit.m_b == mac32(TEST_KEYS.measurement.k_m, 0, b.addr("main.c") + 4)
