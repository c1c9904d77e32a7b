import pytest

from cfalab import corpus
from cfalab.ball_larus import ENTRY, EXIT, IrreducibleCFG, ball_larus_number
from cfalab.corpus import random_program
from cfalab.ir import load_program
from oracles import dag_paths


def _sums(bl):
    return sorted(sum(bl.increments[e] for e in path) for path in dag_paths(bl.dag, ENTRY, EXIT))


def test_straight_line():
    cfg = load_program(corpus.chain_source(4))
    bl = ball_larus_number(cfg, "main")
    assert bl.num_paths == 1
    assert set(bl.increments.values()) == {0}


def test_diamond():
    cfg = load_program(corpus.DIAMOND_SOURCE)
    bl = ball_larus_number(cfg, "main")
    assert bl.num_paths == 2
    assert _sums(bl) == [0, 1]


def test_loop_with_if_else_arms_distinct():
    cfg = load_program(corpus.alternating_loop_source(2))
    bl = ball_larus_number(cfg, "main")
    assert _sums(bl) == list(range(bl.num_paths))
    # simulate two iterations: even arm then odd arm
    inc = bl.increments
    (backedge,) = bl.backedge_resets
    exit_inc, reset = bl.backedge_resets[backedge]

    def iteration(arm_edge, arm):
        r = reset
        r += inc[("main.cond", "main.pick", "cond-fallthrough")]
        r += inc[arm_edge]
        r += inc[(arm, "main.latch", "jump" if arm == "main.even" else "fallthrough")]
        return r + exit_inc

    even = iteration(("main.pick", "main.even", "cond-fallthrough"), "main.even")
    odd = iteration(("main.pick", "main.odd", "cond-taken"), "main.odd")
    assert even != odd
    assert 0 <= even < bl.num_paths and 0 <= odd < bl.num_paths


def test_irreducible_rejected():
    src = """
func main {
  block a: cbr c if r1
  block b: cbr c if r2
  block c: cbr b if r3
  block d: exit
}
"""
    cfg = load_program(src)
    with pytest.raises(IrreducibleCFG, match="irreducible-cfg"):
        ball_larus_number(cfg, "main")


def test_unknown_function():
    cfg = load_program(corpus.DIAMOND_SOURCE)
    with pytest.raises(KeyError):
        ball_larus_number(cfg, "nope")


def _cases():
    for name, src in corpus.bundled_sources().items():
        yield name, load_program(src)
    for seed in range(100):
        yield f"random-{seed}", load_program(random_program(seed).source)


@pytest.mark.parametrize("name, cfg", list(_cases()), ids=lambda x: x if isinstance(x, str) else "")
def test_path_sums_are_a_bijection(name, cfg):
    for fname, fn in cfg.functions.items():
        if len(fn.blocks) > 12:
            continue
        bl = ball_larus_number(cfg, fname)
        assert _sums(bl) == list(range(bl.num_paths))
