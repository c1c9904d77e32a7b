"""Syringe pump: an attacker adds seven extra dispense steps.

The prover reports per-block counts. Without knowing the requested bolus
the tampered run is still a legal path through the program, so the verifier
accepts it; once the verifier knows the input, the count no longer matches.

    python3 demos/syringe_attack.py
"""
from cfalab import KeyPair, build_itl, compute_dominators, corpus, execute, load_program, plan_instrumentation
from cfalab.attacks import parse_attack
from cfalab.executor import expected_counts
from cfalab.verifier import VerifierContext, verify

keys = KeyPair.from_bytes(bytes(range(48)))
nonce = bytes(16)
cfg = load_program(corpus.SYRINGE_SOURCE)
plan = plan_instrumentation(cfg, compute_dominators(cfg))
itl = build_itl(cfg)
inputs = corpus.syringe_inputs(0.010, "+")
body = cfg.blocks["bolus.inner_body"].start_addr

genuine, _ = execute(cfg, plan, itl, keys, nonce, inputs)
attack = parse_attack("loop-count-delta(inner_body,+7)", cfg)
tampered, _ = execute(cfg, plan, itl, keys, nonce, inputs, attack=attack)
print(f"dispense loop count: genuine {genuine.trace.counts[body]}, tampered {tampered.trace.counts[body]}")

blind = VerifierContext(cfg, plan, itl, keys, expected_nonce=nonce)
informed = VerifierContext(cfg, plan, itl, keys, expected_nonce=nonce,
                           expected_counts=expected_counts(cfg, plan, itl, inputs))
for label, ctx in (("structure only", blind), ("known input", informed)):
    g, t = verify(genuine, ctx), verify(tampered, ctx)
    print(f"{label:15s} genuine={g.reason:16s} tampered={t.reason}")
