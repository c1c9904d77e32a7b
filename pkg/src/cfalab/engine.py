"""Attestation engine: keys, the chained measurement, the occurrence trace and
the signed report with its canonical wire encoding.

The keyed MAC standing in for ``pacg`` is HMAC-SHA256 truncated to 32 bits:
``MAC(k_m, le32(prev) || le32(dest))``, first four digest bytes read
little-endian.
"""
from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .instrument import IndirectTargetList

MAGIC = b"CFA1"
DEFAULT_MAX_ILLEGAL = 16
ENTRY_BYTES = 8  # payload accounting per trace entry: u32 address + u32 count

_PAIR = struct.Struct("<II")
_U32 = struct.Struct("<I")
_ENTRY = struct.Struct("<IQ")


@dataclass(frozen=True)
class MeasurementKey:
    k_m: bytes = field(repr=False)

    def __post_init__(self):
        if len(self.k_m) != 16:
            raise ValueError("measurement key must be 16 bytes")


@dataclass(frozen=True)
class AttestationKey:
    k_a: bytes = field(repr=False)

    def __post_init__(self):
        if len(self.k_a) != 32:
            raise ValueError("attestation key must be 32 bytes")


@dataclass(frozen=True)
class KeyPair:
    measurement: MeasurementKey
    attestation: AttestationKey

    @classmethod
    def from_bytes(cls, raw: bytes) -> "KeyPair":
        """Key file layout: 16 bytes k_m followed by 32 bytes k_a."""
        if len(raw) != 48:
            raise ValueError(f"key file must be 48 bytes, got {len(raw)}")
        return cls(MeasurementKey(raw[:16]), AttestationKey(raw[16:]))

    def to_bytes(self) -> bytes:
        return self.measurement.k_m + self.attestation.k_a


def measure_step(prev: int, dest: int, key: MeasurementKey) -> int:
    return int.from_bytes(hmac.digest(key.k_m, _PAIR.pack(prev, dest), "sha256")[:4], "little")


def measurer(key: MeasurementKey) -> Callable[[int, int], int]:
    """A faster equivalent of ``measure_step`` bound to one key."""
    block = key.k_m.ljust(64, b"\0")
    inner = hashlib.sha256(bytes(b ^ 0x36 for b in block))
    outer = hashlib.sha256(bytes(b ^ 0x5C for b in block))
    pack = _PAIR.pack
    from_bytes = int.from_bytes

    def step(prev: int, dest: int) -> int:
        i = inner.copy()
        i.update(pack(prev, dest))
        o = outer.copy()
        o.update(i.digest())
        return from_bytes(o.digest()[:4], "little")

    return step


@dataclass
class OccurrenceTrace:
    counts: dict[int, int] = field(default_factory=dict)
    illegal: list[int] = field(default_factory=list)

    def payload_size(self) -> int:
        return ENTRY_BYTES * len(self.counts) + 4 * len(self.illegal)

    def total(self) -> int:
        return sum(self.counts.values())


class IllegalOverflow(RuntimeError):
    """More illegal indirect targets than the engine can hold."""


@dataclass
class EngineState:
    keys: KeyPair
    nonce: bytes
    itl: IndirectTargetList
    max_illegal: int = DEFAULT_MAX_ILLEGAL
    trace: OccurrenceTrace = field(default_factory=OccurrenceTrace)
    m_f: int = 0
    m_b: int = 0
    aborted: str | None = None

    def __post_init__(self):
        self._mac = measurer(self.keys.measurement)

    def report_direct(self, dest: int) -> None:
        counts = self.trace.counts
        counts[dest] = counts.get(dest, 0) + 1

    def report_indirect(self, dest: int) -> None:
        if dest in self.itl.targets:
            self.report_direct(dest)
            return
        if len(self.trace.illegal) >= self.max_illegal:
            self.aborted = "illegal-overflow"
            raise IllegalOverflow(f"illegal target {dest:#x} exceeds cap {self.max_illegal}")
        self.trace.illegal.append(dest)

    def measure_forward(self, dest: int) -> None:
        self.m_f = self._mac(self.m_f, dest)

    def measure_backward(self, ret_addr: int) -> None:
        self.m_b = self._mac(self.m_b, ret_addr)

    def finalize(self) -> "AttestationReport":
        return sign_report(self.trace, self.m_f, self.m_b, self.nonce, self.keys.attestation)

    def serialize_state(self) -> bytes:
        return report_body(self.nonce, self.trace, self.m_f, self.m_b)


def init_engine(
    keys: KeyPair,
    nonce: bytes,
    itl: IndirectTargetList,
    max_illegal: int = DEFAULT_MAX_ILLEGAL,
) -> EngineState:
    if len(nonce) != 16:
        raise ValueError("nonce must be 16 bytes")
    return EngineState(keys, bytes(nonce), itl, max_illegal)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def report_body(nonce: bytes, trace: OccurrenceTrace, m_f: int, m_b: int) -> bytes:
    parts = [MAGIC, nonce, _U32.pack(len(trace.counts))]
    parts += [_ENTRY.pack(a, trace.counts[a]) for a in sorted(trace.counts)]
    parts.append(_U32.pack(len(trace.illegal)))
    parts += [_U32.pack(a) for a in trace.illegal]
    parts.append(_PAIR.pack(m_f, m_b))
    return b"".join(parts)


@dataclass(frozen=True)
class AttestationReport:
    nonce: bytes
    trace: OccurrenceTrace
    m_f: int
    m_b: int
    signature: bytes

    def body(self) -> bytes:
        return report_body(self.nonce, self.trace, self.m_f, self.m_b)

    def to_bytes(self) -> bytes:
        return self.body() + self.signature

    @property
    def auth_size(self) -> int:
        """Bytes of trace entries, illegal targets and the two measurements."""
        return self.trace.payload_size() + 8

    @classmethod
    def from_bytes(cls, raw: bytes) -> "AttestationReport":
        if raw[:4] != MAGIC:
            raise ValueError("bad magic")
        try:
            pos = 4
            nonce = raw[pos : pos + 16]
            pos += 16
            (n,) = _U32.unpack_from(raw, pos)
            pos += 4
            counts = {}
            for _ in range(n):
                addr, cnt = _ENTRY.unpack_from(raw, pos)
                counts[addr] = cnt
                pos += _ENTRY.size
            (k,) = _U32.unpack_from(raw, pos)
            pos += 4
            illegal = [_U32.unpack_from(raw, pos + 4 * i)[0] for i in range(k)]
            pos += 4 * k
            m_f, m_b = _PAIR.unpack_from(raw, pos)
            pos += 8
        except struct.error as exc:
            raise ValueError(f"truncated report: {exc}") from None
        sig = raw[pos : pos + 32]
        if len(sig) != 32 or pos + 32 != len(raw):
            raise ValueError("bad report length")
        return cls(nonce, OccurrenceTrace(counts, illegal), m_f, m_b, sig)

    def to_json(self) -> dict:
        return {
            "nonce": self.nonce.hex(),
            "counts": {f"{a:#010x}": c for a, c in sorted(self.trace.counts.items())},
            "illegal": [f"{a:#010x}" for a in self.trace.illegal],
            "m_f": f"{self.m_f:#010x}",
            "m_b": f"{self.m_b:#010x}",
            "signature": self.signature.hex(),
        }


def sign_report(
    trace: OccurrenceTrace, m_f: int, m_b: int, nonce: bytes, key: AttestationKey
) -> AttestationReport:
    body = report_body(nonce, trace, m_f, m_b)
    sig = hmac.new(key.k_a, body, hashlib.sha256).digest()
    snapshot = OccurrenceTrace(dict(trace.counts), list(trace.illegal))
    return AttestationReport(bytes(nonce), snapshot, m_f, m_b, sig)


def signature_matches(report: AttestationReport, key: AttestationKey) -> bool:
    expected = hmac.new(key.k_a, report.body(), hashlib.sha256).digest()
    return hmac.compare_digest(expected, report.signature)


def trace_from_mapping(counts: Mapping[int, int], illegal=()) -> OccurrenceTrace:
    return OccurrenceTrace({a: c for a, c in counts.items() if c}, list(illegal))
