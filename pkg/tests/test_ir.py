import json

import pytest

from cfalab import corpus
from cfalab.ir import BASE_ADDR, EdgeKind, Op, ParseError, ValidationError, load_program


def test_single_block_program():
    cfg = load_program("func main {\n  block only: compute; exit\n}\n")
    assert cfg.num_blocks == 1
    assert cfg.edges == ()
    blk = cfg.blocks["main.only"]
    assert cfg.exits == {blk.start_addr}
    assert blk.start_addr == BASE_ADDR
    assert blk.end_addr == BASE_ADDR + 4


def test_default_layout_is_sequential():
    cfg = load_program(corpus.DIAMOND_SOURCE)
    starts = [cfg.blocks[b].start_addr for b in cfg.functions["main"].blocks]
    # 1 + 2 + 1 + 2 instructions
    assert starts == [BASE_ADDR, BASE_ADDR + 4, BASE_ADDR + 12, BASE_ADDR + 16]


def test_crc32_pinned_blocks():
    cfg = load_program(corpus.CRC32_SOURCE)
    assert cfg.blocks["crc32pseudo.inner_body"].start_addr == 0x10000441
    assert cfg.blocks["crc32pseudo.inner_exit"].start_addr == 0x10000465
    assert cfg.blocks["benchmark_body.outer_body"].start_addr == 0x10000495
    assert cfg.entry == "benchmark_body.entry"
    assert len({b.start_addr for b in cfg.blocks.values()}) == cfg.num_blocks


def test_dangling_branch_target():
    with pytest.raises(ValidationError) as exc:
        load_program("func main {\n block a: cbr nowhere if r1\n block b: exit\n}")
    assert exc.value.rule == "dangling-target"


@pytest.mark.parametrize(
    "src, rule",
    [
        ("func main { block a: compute }", "missing-fallthrough"),
        ("func main { block a: ret }", "missing-exit"),
        ("func main { block a: exit\n block b: exit }", "unreachable-block"),
        ("func main { block a @0x100: compute\n block b @0x100: exit }", "duplicate-address"),
        ("func main { block a @0x100: compute; compute\n block b @0x104: exit }", "overlapping-blocks"),
        ("func main { block a: exit\n block a: exit }", "duplicate-label"),
        ("func main { block a: exit }\nfunc main { block b: exit }", "duplicate-function"),
        ("func main { block a: jmp b; compute\n block b: exit }", "terminator-not-last"),
        ("func main { block a: call nope\n block b: exit }", "dangling-target"),
    ],
)
def test_validation_rules(src, rule):
    with pytest.raises(ValidationError) as exc:
        load_program(src)
    assert exc.value.rule == rule


def test_parse_error_has_position():
    with pytest.raises(ParseError) as exc:
        load_program("func main {\n  block a: frobnicate r1\n}")
    assert exc.value.line == 2
    assert exc.value.col > 1


def test_cbr_requires_condition():
    with pytest.raises(ParseError):
        load_program("func main {\n block a: cbr b\n block b: exit\n}")


def test_comments_and_semicolons():
    cfg = load_program("# header\nfunc main { # trailing\n block a: compute; compute r2 = r1 + 1 # x\n exit\n}")
    assert [i.op for i in cfg.blocks["main.a"].instructions] == [Op.COMPUTE, Op.COMPUTE, Op.EXIT]


def test_deterministic_serialization():
    a = load_program(corpus.CRC32_SOURCE).serialize()
    b = load_program(corpus.CRC32_SOURCE).serialize()
    assert a == b
    data = json.loads(a)
    assert set(data) == {"entry", "exits", "functions", "interproc_edges"}


def test_edges_and_kinds():
    cfg = load_program(corpus.SYRINGE_SOURCE)
    kinds = {e.kind for e in cfg.edges}
    assert {EdgeKind.COND_TAKEN, EdgeKind.COND_FALLTHROUGH, EdgeKind.CALL, EdgeKind.RETURN} <= kinds
    for e in cfg.edges:
        src = cfg.block_containing(e.src_addr)
        assert src is not None and src.end_addr == e.src_addr
        assert cfg.block_at(e.dst_addr) is not None


def test_cond_blocks_have_two_successors_exit_blocks_none():
    for src in (corpus.CRC32_SOURCE, corpus.SYRINGE_SOURCE, corpus.DISPATCH_SOURCE):
        cfg = load_program(src)
        for bid, blk in cfg.blocks.items():
            term = blk.terminator
            if term is not None and term.op is Op.COND_BRANCH:
                assert len(cfg.intra_successors(bid)) == 2
            if term is not None and term.op is Op.EXIT:
                assert cfg.intra_successors(bid) == ()


def test_set_operands_resolve():
    cfg = load_program(corpus.DISPATCH_SOURCE)
    even = cfg.blocks["on_even.e0"].start_addr
    odd = cfg.blocks["on_odd.o0"].start_addr
    assert cfg.static_indirect_targets["main.call_it"] == {even, odd}


def test_block_containing():
    cfg = load_program(corpus.CRC32_SOURCE)
    assert cfg.block_containing(0x10000443).id == "crc32pseudo.inner_body"
    assert cfg.block_at(0x10000443) is None
    assert cfg.block_containing(0x0) is None
