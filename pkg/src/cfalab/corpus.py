"""Bundled programs and program generators.

* ``crc32_source``: nested-loop checksum benchmark; the repeat count is read
  from ``r0`` and every call runs an inner loop over a 1024-byte buffer.
* ``SYRINGE_SOURCE``: bolus dispensing for a syringe pump; ``r1`` is the
  bolus volume in microlitres (mL x 1000) and ``r2`` the command character.
* Small fixtures (diamond, loop, chain) and generators for the size and
  soundness experiments.
"""
from __future__ import annotations

import random
from dataclasses import dataclass

CRC32_INNER = 1024

# Block addresses of the three instrumented blocks are pinned.
CRC32_INNER_BODY = 0x10000441
CRC32_INNER_EXIT = 0x10000465
CRC32_OUTER_BODY = 0x10000495


def crc32_source(inner: int = CRC32_INNER) -> str:
    return f"""\
# crc32 benchmark: r0 = repeat count, r6 = running crc, r7 = data byte
func benchmark_body {{
  block entry: set r4 = 0; set r6 = 0xFFFFFFFF
  block outer_cond: cbr outer_done if r4 >= r0
  block outer_body @{CRC32_OUTER_BODY:#x}: compute r7 = r4 & 255; call crc32pseudo
  block outer_latch: compute; compute r4 = r4 + 1; jmp outer_cond
  block outer_done: exit
}}

func crc32pseudo {{
  block init: set r5 = 0
  block inner_cond: cbr inner_exit if r5 >= {inner}
  block inner_body @{CRC32_INNER_BODY:#x}:
    compute r6 = r6 ^ ((r7 + r5) & 255)
    compute r6 = (r6 >> 1) ^ (0xEDB88320 & -(r6 & 1))
    compute r5 = r5 + 1
    jmp inner_cond
  block inner_exit @{CRC32_INNER_EXIT:#x}: compute r6 = r6 ^ 0xFFFFFFFF; ret
}}
"""


CRC32_SOURCE = crc32_source()

# 16 microsteps x 200 steps/rev / 1.25 mm lead, 80 mm of travel per 30 mL:
# steps per uL = 20480 / 3000.
SYRINGE_SOURCE = """\
# syringe pump bolus: r1 = volume in uL, r2 = command ('+' 43, '-' 45)
func main {
  block read_cmd: compute r3 = (r1 * 20480) // 3000
  block check_plus: cbr check_minus if r2 != 43
  block push: set r5 = 1; call bolus
  block push_done: compute; jmp finish
  block check_minus: cbr finish if r2 != 45
  block pull: set r5 = 0; call bolus
  block pull_done: compute; jmp finish
  block finish: exit
}

func bolus {
  block init: set r4 = 0
  block inner_cond: cbr inner_exit if r4 >= r3
  block inner_body: compute r6 = r6 + r5; compute r4 = r4 + 1; jmp inner_cond
  block inner_exit: compute; ret
}
"""


def syringe_inputs(ml_bolus: float, command: str = "+") -> dict[str, int]:
    return {"r1": round(ml_bolus * 1000), "r2": ord(command)}


DIAMOND_SOURCE = """\
func main {
  block entry: cbr right if r1 & 1
  block left: compute r2 = r2 + 1; jmp join
  block right: compute r2 = r2 + 2
  block join: compute; exit
}
"""

LOOP_SOURCE = """\
func main {
  block entry: set r4 = 0
  block cond: cbr done if r4 >= r1
  block body: compute r4 = r4 + 1; jmp cond
  block done: compute; exit
}
"""

STRAIGHT_SOURCE = """\
func main {
  block a: compute r2 = r1 + 1
  block b: call helper
  block c: compute; exit
}

func helper {
  block h: compute r3 = r2 * 2; ret
}
"""


def chain_source(n: int = 6) -> str:
    lines = ["func main {"]
    for i in range(n - 1):
        lines.append(f"  block b{i}: compute; jmp b{i + 1}")
    lines.append(f"  block b{n - 1}: exit")
    lines.append("}")
    return "\n".join(lines) + "\n"


DISPATCH_SOURCE = """\
# handler table dispatch through a register
func main {
  block entry: set r4 = 0
  block cond: cbr done if r4 >= r1
  block pick: cbr odd if r4 & 1
  block even: set r8 = @on_even; jmp call_it
  block odd: set r8 = @on_odd
  block call_it: icall r8
  block latch: compute; compute r4 = r4 + 1; jmp cond
  block done: compute; exit
}

func on_even {
  block e0: compute r6 = r6 + 1; compute r6 = r6 ^ 3; ret
}

func on_odd {
  block o0: compute r6 = r6 + 5; compute r6 = r6 ^ 9; ret
}
"""

# Indirect target computed at run time: the static pass cannot see it.
COMPUTED_TARGET_SOURCE = """\
func main {
  block entry: set r8 = @target; compute r9 = r8 + 0
  block go: icall r9
  block done: compute; exit
}

func target {
  block t0: compute; ret
}
"""

IJMP_SOURCE = """\
func main {
  block entry: cbr second if r1 & 1
  block first: set r8 = @case_a; jmp go
  block second: set r8 = @case_b
  block go: ijmp r8
  block case_a: compute r2 = 1; jmp done
  block case_b: compute r2 = 2
  block done: compute; exit
}
"""


def unique_blocks_source(u: int, iterations: int = 1) -> str:
    """A program whose run reports exactly ``u`` distinct blocks.

    u = 0 is straight-line. u = 1 is a single taken branch. For u >= 2 a
    counted loop (body and exit report) holds u - 2 always-taken branches,
    each adding one reporting block per iteration.
    """
    if u == 0:
        return "func main {\n  block a: compute r2 = r1 + 1\n  block b: compute; exit\n}\n"
    if u == 1:
        return (
            "func main {\n  block a: cbr hit if 1\n  block miss: exit\n"
            "  block hit: compute; exit\n}\n"
        )
    lines = [
        "func main {",
        "  block entry: set r4 = 0",
        f"  block cond: cbr done if r4 >= {iterations}",
        "  block body: compute r5 = r5 + 1",
    ]
    for i in range(u - 2):
        lines += [
            f"  block c{i}: cbr a{i} if 1",
            f"  block f{i}: jmp j{i}",
            f"  block a{i}: compute r5 = r5 + {i + 1}",
            f"  block j{i}: compute",
        ]
    lines += ["  block latch: compute r4 = r4 + 1; jmp cond", "  block done: compute; exit", "}"]
    return "\n".join(lines) + "\n"


def loop_scaling_source(k: int) -> str:
    """Loop of ``k`` iterations calling ``tick`` through a register each time."""
    return f"""\
func main {{
  block entry: set r4 = 0; set r8 = @tick
  block cond: cbr done if r4 >= {k}
  block body: icall r8
  block latch: compute; compute r4 = r4 + 1; jmp cond
  block done: compute; exit
}}

func tick {{
  block t0: compute r6 = r6 + r4; ret
}}
"""


def alternating_loop_source(iterations: int) -> str:
    """Loop whose body alternates between two internal paths."""
    return f"""\
func main {{
  block entry: set r4 = 0
  block cond: cbr done if r4 >= {iterations}
  block pick: cbr odd if r4 & 1
  block even: compute r6 = r6 + 1; jmp latch
  block odd: compute r6 = r6 + 2
  block latch: compute r4 = r4 + 1; jmp cond
  block done: compute; exit
}}
"""


# ---------------------------------------------------------------------------
# Random structured programs
# ---------------------------------------------------------------------------


@dataclass
class RandomProgram:
    source: str
    inputs: dict[str, int]
    seed: int


class _Gen:
    def __init__(self, rng: random.Random, max_blocks: int, max_funcs: int, indirect: bool, max_trip: int, max_depth: int):
        self.rng = rng
        self.max_trip = max_trip
        self.max_depth = max_depth
        self.budget = max_blocks
        self.nfuncs = rng.randint(1, max_funcs)
        self.indirect = indirect
        self.counter = 12  # loop counters r12.. (r10/r11 are reserved)
        self.labels = 0

    def label(self, stem: str) -> str:
        self.labels += 1
        return f"{stem}{self.labels}"

    def cond(self, counters: list[str]) -> str:
        rng = self.rng
        if counters and rng.random() < 0.4:
            c = rng.choice(counters)
            return f"{c} & 1" if rng.random() < 0.5 else f"{c} % 3 == {rng.randint(0, 2)}"
        r = f"r{rng.randint(1, 4)}"
        return rng.choice([f"{r} & 1", f"{r} > {rng.randint(0, 6)}", f"({r} >> 1) & 1", f"{r} == {rng.randint(0, 7)}"])

    def body(self, fidx: int, blocks: list[list[str]], depth: int, counters: list[str]) -> None:
        """Append statements to ``blocks`` (the last entry is the open block)."""
        rng = self.rng
        for _ in range(rng.randint(1, 3)):
            choice = rng.random()
            callees = list(range(fidx + 1, self.nfuncs))
            if choice < 0.25 or self.budget < 2:
                blocks[-1].append(f"compute r{rng.randint(1, 9)} = r{rng.randint(1, 9)} + {rng.randint(1, 5)}")
            elif choice < 0.5 and self.budget >= 3 and depth < self.max_depth:
                self.if_else(fidx, blocks, depth, counters)
            elif choice < 0.7 and self.budget >= 3 and depth < self.max_depth and self.counter < 21:
                self.loop(fidx, blocks, depth, counters)
            elif callees and self.budget >= 1:
                callee = rng.choice(callees)
                if self.indirect and rng.random() < 0.4:
                    reg = f"r{rng.choice([8, 9])}"
                    blocks[-1].append(f"set {reg} = @f{callee}")
                    blocks[-1].append(f"icall {reg}")
                else:
                    blocks[-1].append(f"call f{callee}")
                self.budget -= 1
                blocks.append([f"#label {self.label('k')}", "compute"])  # continuation starts with a plain compute
            else:
                blocks[-1].append("compute")

    def if_else(self, fidx, blocks, depth, counters) -> None:
        rng = self.rng
        els, join = self.label("else"), self.label("join")
        blocks[-1].append(f"cbr {els} if {self.cond(counters)}")
        with_else = rng.random() < 0.7
        self.budget -= 3 if with_else else 2
        if with_else:
            then_blocks: list[list[str]] = [[f"#label {self.label('then')}"]]
            self.body(fidx, then_blocks, depth + 1, counters)
            then_blocks[-1].append(f"jmp {join}")
            blocks.extend(then_blocks)
            blocks.append([f"#label {els}"])
            self.body(fidx, blocks, depth + 1, counters)
            blocks.append([f"#label {join}"])
        else:
            # taken edge skips the then-part straight to the join
            blocks[-1][-1] = f"cbr {join} if {self.cond(counters)}"
            blocks.append([f"#label {els}"])
            self.body(fidx, blocks, depth + 1, counters)
            blocks.append([f"#label {join}"])

    def loop(self, fidx, blocks, depth, counters) -> None:
        rng = self.rng
        c = f"r{self.counter}"
        self.counter += 1
        cond, exit_ = self.label("lcond"), self.label("lexit")
        m = self.max_trip
        trip = rng.choice([str(rng.randint(0, m)), f"r{rng.randint(1, 4)} % {m + 1}"])
        blocks[-1].append(f"set {c} = 0")
        self.budget -= 3
        blocks.append([f"#label {cond}", f"cbr {exit_} if {c} >= {trip}"])
        blocks.append([f"#label {self.label('lbody')}"])
        self.body(fidx, blocks, depth + 1, counters + [c])
        blocks[-1].append(f"compute {c} = {c} + 1")
        blocks[-1].append(f"jmp {cond}")
        blocks.append([f"#label {exit_}"])

    def function(self, fidx: int) -> str:
        blocks: list[list[str]] = [[f"#label {self.label('b')}"]]
        self.budget -= 1
        early_exit = None
        if fidx == 0 and self.rng.random() < 0.25 and self.budget >= 3:
            early_exit = self.label("abort")
            blocks[-1].append(f"cbr {early_exit} if r{self.rng.randint(1, 4)} == 7")
            blocks.append([f"#label {self.label('go')}"])
            self.budget -= 2
        self.body(fidx, blocks, 0, [])
        blocks[-1].append("exit" if fidx == 0 else "ret")
        if early_exit:
            blocks.append([f"#label {early_exit}", "exit"])
        out = [f"func f{fidx} {{"]
        for blk in blocks:
            label = blk[0].split()[1]
            instrs = blk[1:] or ["compute"]
            out.append(f"  block {label}: " + "; ".join(instrs))
        out.append("}")
        return "\n".join(out)


def random_program(
    seed: int,
    max_blocks: int = 12,
    max_funcs: int = 3,
    indirect: bool = True,
    max_trip: int = 3,
    max_depth: int = 3,
) -> RandomProgram:
    """Structured random program (if/else, counted loops, calls, icalls).

    Calls only go to later functions, so there is no recursion; every loop
    has its own counter and a trip count of at most ``max_trip``; statements
    nest at most ``max_depth`` deep. Retries until the
    block count fits ``max_blocks``.
    """
    from .ir import load_program

    rng = random.Random(seed)
    for _ in range(200):
        gen = _Gen(rng, max_blocks, max_funcs, indirect, max_trip, max_depth)
        src = "\n\n".join(gen.function(i) for i in range(gen.nfuncs)) + "\n"
        cfg = load_program(src)
        if cfg.num_blocks <= max_blocks:
            inputs = {f"r{i}": rng.randint(0, 7) for i in range(1, 5)}
            return RandomProgram(src, inputs, seed)
    raise RuntimeError(f"could not fit a program into {max_blocks} blocks (seed {seed})")


def bundled_sources() -> dict[str, str]:
    """Every fixed program shipped with the package, by name."""
    return {
        "crc32": CRC32_SOURCE,
        "syringe": SYRINGE_SOURCE,
        "diamond": DIAMOND_SOURCE,
        "loop": LOOP_SOURCE,
        "straight": STRAIGHT_SOURCE,
        "chain6": chain_source(6),
        "dispatch": DISPATCH_SOURCE,
        "computed-target": COMPUTED_TARGET_SOURCE,
        "ijmp": IJMP_SOURCE,
        "alternating": alternating_loop_source(5),
        "loop-scaling": loop_scaling_source(10),
        "unique-u3": unique_blocks_source(3, 4),
    }
