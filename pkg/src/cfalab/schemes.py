"""Comparison authenticators built from one ground-truth execution log.

Four prior designs are rebuilt over the :class:`~cfalab.executor.ExecutionLog`
event stream so their authenticator sizes can be set against the occurrence
trace on identical runs:

* naive: every non-sequential destination, plus a digest of the list;
* OAT: one bit per conditional branch, indirect destinations verbatim and a
  hash chain over return addresses;
* C-FLAT: a path hash outside loops plus (iteration-path hash, count) records
  per loop;
* Blast: one (function, Ball-Larus path number) entry per call, loop back
  edge and function exit.

All digests use ``h32``, the first four bytes of SHA-256 read little-endian.
"""
from __future__ import annotations

import csv
import hashlib
import io
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable

from .ball_larus import EXIT, BallLarusNumbering, IrreducibleCFG, ball_larus_number
from .dominators import DominatorInfo, back_edges, compute_dominators, natural_loops
from .engine import AttestationReport
from .executor import ExecutionLog
from .ir import ProgramCFG

_PAIR = struct.Struct("<II")

FORWARD_KINDS = frozenset({"cond-taken", "cond-fallthrough", "indirect-call", "indirect-jump"})
COND_KINDS = frozenset({"cond-taken", "cond-fallthrough"})
INDIRECT_KINDS = frozenset({"indirect-call", "indirect-jump"})


class SchemeUnsupported(ValueError):
    """The scheme cannot describe this program or run."""


def h32(data: bytes) -> int:
    return int.from_bytes(hashlib.sha256(data).digest()[:4], "little")


def fold(h: int, x: int) -> int:
    return h32(_PAIR.pack(h, x & 0xFFFFFFFF))


def _need_events(log: ExecutionLog) -> list:
    if log.events is None:
        raise ValueError("execution log was recorded without events")
    return log.events


# ---------------------------------------------------------------------------
# naive
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NaiveAuth:
    destinations: tuple[int, ...]
    digest: bytes

    @property
    def size(self) -> int:
        return 4 * len(self.destinations) + 32


def build_naive(log: ExecutionLog) -> NaiveAuth:
    dests = tuple(d for kind, _, d in _need_events(log) if kind in FORWARD_KINDS or kind == "return")
    digest = hashlib.sha256(b"".join(struct.pack("<I", d) for d in dests)).digest()
    return NaiveAuth(dests, digest)


# ---------------------------------------------------------------------------
# OAT
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OatAuth:
    cond_bits: tuple[int, ...]
    indirect_dests: tuple[int, ...]
    ret_chain: int
    returns: int

    @property
    def size(self) -> int:
        return math.ceil(len(self.cond_bits) / 8) + 4 * len(self.indirect_dests) + 4

    def packed_bits(self) -> bytes:
        out = bytearray(math.ceil(len(self.cond_bits) / 8))
        for i, bit in enumerate(self.cond_bits):
            if bit:
                out[i >> 3] |= 1 << (i & 7)
        return bytes(out)


def oat_ret_step(h: int, ret_addr: int) -> int:
    return h32(struct.pack("<I", (h ^ ret_addr) & 0xFFFFFFFF))


def build_oat(log: ExecutionLog) -> OatAuth:
    bits: list[int] = []
    dests: list[int] = []
    h = 0
    m = 0
    for kind, _, d in _need_events(log):
        if kind in COND_KINDS:
            bits.append(1 if kind == "cond-taken" else 0)
        elif kind in INDIRECT_KINDS:
            dests.append(d)
        elif kind == "return":
            h = oat_ret_step(h, d)
            m += 1
    return OatAuth(tuple(bits), tuple(dests), h, m)


# ---------------------------------------------------------------------------
# C-FLAT
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CflatAuth:
    top_hash: int
    loop_records: dict[str, dict[int, int]]  # loop header -> {iteration hash: count}

    @property
    def record_count(self) -> int:
        return sum(len(r) for r in self.loop_records.values())

    @property
    def size(self) -> int:
        return 4 + 8 * self.record_count


@dataclass
class _LoopCtx:
    header: str | None
    body: frozenset[str]
    frame: int
    h: int = 0
    seen: dict[int, int] = field(default_factory=dict)


def build_cflat(log: ExecutionLog, cfg: ProgramCFG, dom: DominatorInfo | None = None) -> CflatAuth:
    """Loops are found through back edges; callees are folded into the caller."""
    dom = dom or compute_dominators(cfg)
    loops = natural_loops(cfg, dom)
    backs = back_edges(cfg, dom)
    records: dict[str, dict[int, int]] = {h: {} for h in loops}
    ctxs = [_LoopCtx(None, frozenset(), 0)]
    frame = 0

    def close_top() -> None:
        c = ctxs.pop()
        parent = ctxs[-1]
        parent.h = fold(parent.h, c.h)  # the partial final iteration
        for hh, n in sorted(c.seen.items()):
            parent.h = fold(fold(parent.h, hh), n)
            rec = records[c.header]
            rec[hh] = rec.get(hh, 0) + n

    for kind, src, dst in _need_events(log):
        if kind == "exit":
            break
        if kind == "return":
            while ctxs[-1].header is not None and ctxs[-1].frame == frame:
                close_top()
            frame -= 1
        s_blk = cfg.block_containing(src)
        d_blk = cfg.block_at(dst) or cfg.block_containing(dst)
        if d_blk is None:
            raise SchemeUnsupported(f"transfer to {dst:#x} outside the program")
        d = d_blk.id
        if kind in ("call", "indirect-call"):
            frame += 1
        elif kind != "return":
            while ctxs[-1].header is not None and ctxs[-1].frame == frame and d not in ctxs[-1].body:
                close_top()
            top = ctxs[-1]
            if top.header == d and top.frame == frame and (s_blk.id, d) in backs:
                top.seen[top.h] = top.seen.get(top.h, 0) + 1
                top.h = 0
            elif d in loops and not (top.header == d and top.frame == frame):
                ctxs.append(_LoopCtx(d, loops[d], frame))
        ctxs[-1].h = fold(ctxs[-1].h, dst)
    while len(ctxs) > 1:
        close_top()
    return CflatAuth(ctxs[0].h, {h: r for h, r in records.items() if r})


# ---------------------------------------------------------------------------
# Blast
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlastAuth:
    entries: tuple[tuple[str, int], ...]
    digest: int

    @property
    def size(self) -> int:
        return 8 * len(self.entries) + 4


@dataclass
class _Frame:
    function: str
    block: str
    r: int
    call_block: str | None = None


def build_blast(
    log: ExecutionLog,
    cfg: ProgramCFG,
    numbering: dict[str, BallLarusNumbering] | None = None,
    dom: DominatorInfo | None = None,
) -> BlastAuth:
    dom = dom or compute_dominators(cfg)
    if numbering is None:
        numbering = {name: ball_larus_number(cfg, name, dom) for name in cfg.functions}
    entries: list[tuple[str, int]] = []
    entry_blk = cfg.blocks[cfg.entry]
    frames = [_Frame(entry_blk.function, entry_blk.id, numbering[entry_blk.function].increment("<entry>", entry_blk.id, "entry"))]
    kind_map = {
        "cond-taken": "cond-taken",
        "cond-fallthrough": "cond-fallthrough",
        "jump": "jump",
        "fallthrough": "fallthrough",
        "indirect-jump": "indirect",
    }

    def finish(fr: _Frame) -> None:
        bl = numbering[fr.function]
        entries.append((fr.function, fr.r + bl.increment(fr.block, EXIT, "exit")))

    for kind, src, dst in _need_events(log):
        fr = frames[-1]
        bl = numbering[fr.function]
        if kind in kind_map:
            d_blk = cfg.block_at(dst)
            if d_blk is None or d_blk.function != fr.function:
                raise SchemeUnsupported("indirect jump leaves the function")
            ek = kind_map[kind]
            key = (fr.block, d_blk.id, ek)
            if key in bl.backedge_resets:
                exit_inc, reset = bl.backedge_resets[key]
                entries.append((fr.function, fr.r + exit_inc))
                fr.r = reset
            elif key in bl.increments:
                fr.r += bl.increments[key]
            else:
                raise SchemeUnsupported(f"edge {key} missing from the path DAG")
            fr.block = d_blk.id
        elif kind in ("call", "indirect-call"):
            d_blk = cfg.block_at(dst)
            if d_blk is None or cfg.functions[d_blk.function].entry != d_blk.id:
                raise SchemeUnsupported("call target is not a function entry")
            entries.append((fr.function, fr.r))  # partial path up to the call
            fr.call_block = fr.block
            callee = d_blk.function
            frames.append(_Frame(callee, d_blk.id, numbering[callee].increment("<entry>", d_blk.id, "entry")))
        elif kind == "return":
            finish(fr)
            frames.pop()
            caller = frames[-1]
            cont = cfg.fallthrough(caller.call_block)
            caller.r += numbering[caller.function].increment(caller.call_block, cont, "call-continuation")
            caller.block = cont
        elif kind == "exit":
            finish(fr)
            break
    h = 0
    for fn, p in entries:
        h = fold(fold(h, h32(fn.encode())), p)
    return BlastAuth(tuple(entries), h)


# ---------------------------------------------------------------------------
# size report
# ---------------------------------------------------------------------------


def occ_size(report: AttestationReport) -> int:
    """Occurrence-trace authenticator: 8 bytes per entry plus both chains."""
    return report.auth_size


@dataclass(frozen=True)
class SizeReport:
    program: str
    n: int
    m: int
    l: int
    num_blocks: int
    u: int
    naive: int
    oat: int
    cflat: int
    cflat_records: int
    blast: int | None  # None: unsupported for this program
    occ: int

    FIELDS = ("program", "n", "m", "l", "num_blocks", "u", "naive", "oat", "cflat", "cflat_records", "blast", "occ")

    def row(self) -> dict:
        out = {f: getattr(self, f) for f in self.FIELDS}
        if out["blast"] is None:
            out["blast"] = "unsupported"
        return out


def size_report(program: str, cfg: ProgramCFG, log: ExecutionLog, report: AttestationReport) -> SizeReport:
    dom = compute_dominators(cfg)
    naive = build_naive(log)
    oat = build_oat(log)
    cflat = build_cflat(log, cfg, dom)
    try:
        blast = build_blast(log, cfg, dom=dom).size
    except (IrreducibleCFG, SchemeUnsupported):
        blast = None
    return SizeReport(
        program=program,
        n=log.n,
        m=log.m,
        l=log.l,
        num_blocks=cfg.num_blocks,
        u=len(report.trace.counts),
        naive=naive.size,
        oat=oat.size,
        cflat=cflat.size,
        cflat_records=cflat.record_count,
        blast=blast,
        occ=occ_size(report),
    )


def to_csv(rows: Iterable[SizeReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SizeReport.FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r.row())
    return buf.getvalue()
