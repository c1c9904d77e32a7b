"""Authenticator sizes for the same runs under five schemes.

Trace-based schemes grow with the number of executed branches; the
occurrence trace grows with the number of distinct reported blocks.

    python3 demos/size_comparison.py
"""
import sys

from cfalab import KeyPair, build_itl, compute_dominators, corpus, execute, load_program, plan_instrumentation
from cfalab.schemes import size_report, to_csv

keys = KeyPair.from_bytes(bytes(48))

programs = [(f"loop-k{k}", corpus.loop_scaling_source(k), {}) for k in (10, 100, 1000)]
programs += [
    ("unique-u3", corpus.unique_blocks_source(3, iterations=360), {}),
    ("unique-u73", corpus.unique_blocks_source(73, iterations=10), {}),
    ("crc32-rpt2", corpus.CRC32_SOURCE, {"r0": 2}),
    ("syringe", corpus.SYRINGE_SOURCE, corpus.syringe_inputs(0.010)),
]

rows = []
for name, src, inputs in programs:
    cfg = load_program(src)
    plan = plan_instrumentation(cfg, compute_dominators(cfg))
    report, log = execute(cfg, plan, build_itl(cfg), keys, bytes(16), inputs)
    rows.append(size_report(name, cfg, log, report))
sys.stdout.write(to_csv(rows))
