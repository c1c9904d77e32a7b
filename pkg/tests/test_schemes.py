import csv
import io
import struct

import pytest

from cfalab import corpus
from cfalab.ball_larus import IrreducibleCFG, ball_larus_number
from cfalab.executor import ExecutionLog, execute
from cfalab.schemes import (
    SchemeUnsupported,
    SizeReport,
    build_blast,
    build_cflat,
    build_naive,
    build_oat,
    fold,
    h32,
    oat_ret_step,
    occ_size,
    size_report,
    to_csv,
)
from conftest import NONCE, TEST_KEYS, Built


def run(src, inputs=None):
    b = Built(src)
    rep, log = execute(b.cfg, b.plan, b.itl, TEST_KEYS, NONCE, inputs)
    return b, rep, log


def test_h32_and_fold():
    assert h32(b"") == 0x42C4B0E3  # e3b0c442... read little-endian
    assert fold(1, 2) == h32(struct.pack("<II", 1, 2))


def test_naive_empty_log():
    auth = build_naive(ExecutionLog())
    assert auth.destinations == () and auth.size == 32


def test_naive_diamond_single_destination():
    b, _, log = run(corpus.DIAMOND_SOURCE, {"r1": 1})
    auth = build_naive(log)
    assert auth.destinations == (b.addr("main.right"),)
    assert auth.size == 36


def test_naive_counts_returns_and_indirects():
    _, _, log = run(corpus.DISPATCH_SOURCE, {"r1": 3})
    assert len(build_naive(log).destinations) == log.l


def test_naive_needs_events():
    with pytest.raises(ValueError):
        build_naive(ExecutionLog(events=None))


def test_oat_loop_bits():
    _, _, log = run(corpus.LOOP_SOURCE, {"r1": 5})
    auth = build_oat(log)
    assert auth.cond_bits == (0, 0, 0, 0, 0, 1)
    assert auth.packed_bits() == bytes([0b100000])
    assert auth.size == 1 + 4


def test_oat_ret_chain_and_indirects():
    b, _, log = run(corpus.STRAIGHT_SOURCE)
    auth = build_oat(log)
    assert auth.ret_chain == oat_ret_step(0, b.addr("main.c"))
    assert auth.ret_chain == h32(struct.pack("<I", b.addr("main.c")))
    b, _, log = run(corpus.loop_scaling_source(4))
    auth = build_oat(log)
    assert auth.indirect_dests == (b.addr("tick.t0"),) * 4
    assert auth.size == 1 + 16 + 4


def test_cflat_invariant_loop_single_record():
    b, _, log = run(corpus.LOOP_SOURCE, {"r1": 5})
    auth = build_cflat(log, b.cfg, b.dom)
    assert auth.record_count == 1
    assert list(auth.loop_records["main.cond"].values()) == [5]
    assert auth.size == 4 + 8


def test_cflat_alternating_loop_two_records():
    b, _, log = run(corpus.alternating_loop_source(5))
    auth = build_cflat(log, b.cfg, b.dom)
    assert sorted(auth.loop_records["main.cond"].values()) == [2, 3]


def test_cflat_loop_free():
    b, _, log = run(corpus.DIAMOND_SOURCE, {"r1": 0})
    auth = build_cflat(log, b.cfg, b.dom)
    assert auth.record_count == 0 and auth.size == 4


def test_cflat_path_sensitive():
    b, _, l0 = run(corpus.DIAMOND_SOURCE, {"r1": 0})
    _, _, l1 = run(corpus.DIAMOND_SOURCE, {"r1": 1})
    assert build_cflat(l0, b.cfg).top_hash != build_cflat(l1, b.cfg).top_hash


def test_blast_straight_line():
    b, _, log = run(corpus.unique_blocks_source(0))
    auth = build_blast(log, b.cfg)
    assert auth.entries == (("main", 0),)
    assert auth.size == 12


def test_blast_repeated_calls():
    b, _, log = run(corpus.loop_scaling_source(6))
    auth = build_blast(log, b.cfg)
    assert sum(1 for fn, _ in auth.entries if fn == "tick") == 6


@pytest.mark.parametrize("name", ["crc32", "syringe", "dispatch", "diamond", "loop"])
def test_blast_path_numbers_in_range(name):
    src = corpus.crc32_source(8) if name == "crc32" else corpus.bundled_sources()[name]
    inputs = {"crc32": {"r0": 2}, "syringe": corpus.syringe_inputs(0.003), "dispatch": {"r1": 3}, "loop": {"r1": 4}}
    b, _, log = run(src, inputs.get(name, {}))
    numbering = {fn: ball_larus_number(b.cfg, fn, b.dom) for fn in b.cfg.functions}
    for fn, p in build_blast(log, b.cfg, numbering, b.dom).entries:
        assert 0 <= p < numbering[fn].num_paths


IRREDUCIBLE = """\
func main {
  block entry: cbr b if r1
  block a: compute r2 = r2 + 1; cbr out if r2 >= 3
  block b: compute r3 = r3 + 1; jmp a
  block out: compute; exit
}
"""


def test_blast_intra_function_ijmp_supported():
    b, _, log = run(corpus.IJMP_SOURCE, {"r1": 1})
    assert len(build_blast(log, b.cfg).entries) == 1


def test_blast_irreducible_unsupported():
    b, rep, log = run(IRREDUCIBLE, {"r1": 1})
    with pytest.raises(IrreducibleCFG):
        build_blast(log, b.cfg)
    assert size_report("irreducible", b.cfg, log, rep).row()["blast"] == "unsupported"


@pytest.mark.parametrize("u, size", [(0, 8), (3, 32), (73, 592)])
def test_occ_sizes(u, size):
    _, rep, _ = run(corpus.unique_blocks_source(u, iterations=4))
    assert len(rep.trace.counts) == u
    assert occ_size(rep) == size


def test_size_report_and_csv():
    b, rep, log = run(corpus.SYRINGE_SOURCE, corpus.syringe_inputs(0.010))
    sr = size_report("syringe", b.cfg, log, rep)
    assert (sr.n, sr.m, sr.l) == (log.n, log.m, log.l)
    assert sr.u == 3 and sr.occ == 32
    assert sr.naive == 4 * log.l + 32
    rows = list(csv.DictReader(io.StringIO(to_csv([sr, sr]))))
    assert list(rows[0]) == list(SizeReport.FIELDS)
    assert len(rows) == 2 and rows[0]["occ"] == "32"
