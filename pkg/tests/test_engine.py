import random

import pytest

from cfalab.engine import (
    AttestationKey,
    AttestationReport,
    IllegalOverflow,
    KeyPair,
    MeasurementKey,
    OccurrenceTrace,
    init_engine,
    measure_step,
    measurer,
    sign_report,
    signature_matches,
)
from cfalab.instrument import IndirectTargetList
from oracles import empty_report_body, hmac_sha256, mac32

# Frozen from tests/oracles.py (hand-rolled HMAC over hashlib.sha256).
GOLDEN_MAC_ZERO_KEY = 2529940558  # measure_step(0, 0x10000441, 16 zero bytes)
GOLDEN_MAC_COUNTING_KEY = 0x41E5D58F  # measure_step(0, 0x10000441, bytes(range(16)))
GOLDEN_EMPTY_SIGNATURE = "7896992d535601737b682ab69dcd89c1ea57e364eab0763d188ff72b78f70b22"

ZERO_KEYS = KeyPair(MeasurementKey(bytes(16)), AttestationKey(bytes(32)))
EMPTY_ITL = IndirectTargetList(frozenset(), {})


def test_golden_measurement_vectors():
    assert measure_step(0, 0x10000441, MeasurementKey(bytes(16))) == GOLDEN_MAC_ZERO_KEY
    assert measure_step(0, 0x10000441, MeasurementKey(bytes(range(16)))) == GOLDEN_MAC_COUNTING_KEY


def test_golden_vectors_match_oracle():
    assert mac32(bytes(16), 0, 0x10000441) == GOLDEN_MAC_ZERO_KEY
    assert hmac_sha256(bytes(32), empty_report_body()).hex() == GOLDEN_EMPTY_SIGNATURE


def test_golden_empty_signature():
    report = sign_report(OccurrenceTrace(), 0, 0, bytes(16), AttestationKey(bytes(32)))
    assert report.signature.hex() == GOLDEN_EMPTY_SIGNATURE
    assert report.body() == empty_report_body()


def test_measure_step_deterministic_and_fast_path_agrees():
    rng = random.Random(1)
    for _ in range(200):
        key = MeasurementKey(rng.randbytes(16))
        prev, dest = rng.getrandbits(32), rng.getrandbits(32)
        assert measure_step(prev, dest, key) == measure_step(prev, dest, key)
        assert measurer(key)(prev, dest) == measure_step(prev, dest, key) == mac32(key.k_m, prev, dest)


def test_chain_start_uses_zero():
    eng = init_engine(ZERO_KEYS, bytes(16), EMPTY_ITL)
    eng.measure_forward(0x10000441)
    assert eng.m_f == measure_step(0, 0x10000441, ZERO_KEYS.measurement)


def test_fresh_engine():
    eng = init_engine(ZERO_KEYS, bytes(16), EMPTY_ITL)
    assert (eng.m_f, eng.m_b) == (0, 0)
    assert eng.trace.counts == {} and eng.trace.illegal == []
    other = init_engine(ZERO_KEYS, bytes(16), EMPTY_ITL)
    assert eng.serialize_state() == other.serialize_state()


def test_bad_key_and_nonce_sizes():
    with pytest.raises(ValueError):
        MeasurementKey(bytes(15))
    with pytest.raises(ValueError):
        AttestationKey(bytes(16))
    with pytest.raises(ValueError):
        init_engine(ZERO_KEYS, bytes(8), EMPTY_ITL)
    with pytest.raises(ValueError):
        KeyPair.from_bytes(bytes(47))


def test_keypair_file_layout():
    raw = bytes(range(48))
    kp = KeyPair.from_bytes(raw)
    assert kp.measurement.k_m == raw[:16] and kp.attestation.k_a == raw[16:]
    assert kp.to_bytes() == raw


def test_report_direct_counts():
    eng = init_engine(ZERO_KEYS, bytes(16), EMPTY_ITL)
    eng.report_direct(0x100)
    assert eng.trace.counts == {0x100: 1}
    for _ in range(4250):
        eng.report_direct(0x10000495)
    eng.report_direct(0x100)
    assert eng.trace.counts == {0x100: 2, 0x10000495: 4250}


def test_report_indirect():
    itl = IndirectTargetList(frozenset({0x200}), {0x200: "static"})
    eng = init_engine(ZERO_KEYS, bytes(16), itl, max_illegal=16)
    eng.report_indirect(0x200)
    eng.report_indirect(0x10000443)
    assert eng.trace.counts == {0x200: 1}
    assert eng.trace.illegal == [0x10000443]
    for i in range(15):
        eng.report_indirect(0x300 + i)
    with pytest.raises(IllegalOverflow):
        eng.report_indirect(0x999)
    assert eng.aborted == "illegal-overflow"
    assert len(eng.trace.illegal) == 16


def test_max_illegal_zero():
    eng = init_engine(ZERO_KEYS, bytes(16), EMPTY_ITL, max_illegal=0)
    with pytest.raises(IllegalOverflow):
        eng.report_indirect(0x1234)


def test_sign_roundtrip_and_tamper():
    trace = OccurrenceTrace({0x10: 3, 0x8: 1}, [0x44])
    rep = sign_report(trace, 7, 9, bytes(range(16)), AttestationKey(bytes(32)))
    assert signature_matches(rep, AttestationKey(bytes(32)))
    parsed = AttestationReport.from_bytes(rep.to_bytes())
    assert parsed == rep
    assert parsed.to_bytes() == rep.to_bytes()
    flipped = AttestationReport(rep.nonce, rep.trace, rep.m_f ^ 1, rep.m_b, rep.signature)
    assert not signature_matches(flipped, AttestationKey(bytes(32)))


def test_canonical_layout():
    trace = OccurrenceTrace({0x20: 2, 0x10: 1}, [0x99])
    rep = sign_report(trace, 0xAABBCCDD, 0x11223344, bytes(16), AttestationKey(bytes(32)))
    raw = rep.to_bytes()
    assert raw[:4] == b"CFA1"
    assert raw[20:24] == (2).to_bytes(4, "little")
    # entries sorted by address
    assert raw[24:28] == (0x10).to_bytes(4, "little")
    assert raw[28:36] == (1).to_bytes(8, "little")
    assert raw[36:40] == (0x20).to_bytes(4, "little")
    assert raw[48:52] == (1).to_bytes(4, "little")
    assert raw[52:56] == (0x99).to_bytes(4, "little")
    assert raw[56:60] == (0xAABBCCDD).to_bytes(4, "little")
    assert raw[60:64] == (0x11223344).to_bytes(4, "little")
    assert len(raw) == 64 + 32
    assert rep.auth_size == 8 * 2 + 4 + 8


@pytest.mark.parametrize("raw", [b"XXXX" + bytes(60), b"CFA1" + bytes(10), b"CFA1" + bytes(100)])
def test_malformed_reports(raw):
    with pytest.raises(ValueError):
        AttestationReport.from_bytes(raw)


def test_key_confinement():
    rng = random.Random(7)
    for _ in range(50):
        keys = KeyPair.from_bytes(rng.randbytes(48))
        counts = {0x10000000 + 4 * rng.randrange(64): rng.randrange(1, 1000) for _ in range(5)}
        eng = init_engine(keys, rng.randbytes(16), EMPTY_ITL)
        for a in counts:
            eng.report_direct(a)
            eng.measure_forward(a)
        raw = eng.finalize().to_bytes()
        words = {keys.to_bytes()[i : i + 4] for i in range(0, 48, 4)}
        windows = {raw[i : i + 4] for i in range(0, len(raw) - 3, 4)}
        assert not (words & windows)


def test_measurement_is_order_sensitive():
    rng = random.Random(11)
    key = MeasurementKey(rng.randbytes(16))
    for _ in range(100):
        a, b = rng.getrandbits(32), rng.getrandbits(32)
        ab = mac32(key.k_m, mac32(key.k_m, 0, a), b)
        ba = mac32(key.k_m, mac32(key.k_m, 0, b), a)
        if a == b or ab == ba:
            continue
        step = measurer(key)
        assert step(step(0, a), b) == ab
        assert step(step(0, b), a) == ba
