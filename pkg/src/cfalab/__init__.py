"""Control-flow attestation over a small control-flow IR.

Typical flow::

    cfg = load_program(source)
    plan = plan_instrumentation(cfg, compute_dominators(cfg))
    itl = build_itl(cfg)
    report, log = execute(cfg, plan, itl, keys, nonce, inputs)
    verdict = verify(report, VerifierContext(cfg, plan, itl, keys, expected_nonce=nonce))
"""
from .attacks import AttackSpec, parse_attack
from .ball_larus import BallLarusNumbering, IrreducibleCFG, ball_larus_number
from .dominators import DominatorInfo, compute_dominators
from .engine import (
    AttestationKey,
    AttestationReport,
    KeyPair,
    MeasurementKey,
    OccurrenceTrace,
    init_engine,
    measure_step,
    sign_report,
)
from .executor import ExecutionFault, ExecutionLog, execute, expected_counts
from .instrument import (
    IndirectTargetList,
    InstrumentationPlan,
    LintReport,
    build_itl,
    plan_instrumentation,
    scan_code,
)
from .ir import ParseError, ProgramCFG, ValidationError, load_program
from .schemes import build_blast, build_cflat, build_naive, build_oat, size_report
from .verifier import (
    OracleBudgetExceeded,
    Verdict,
    VerifierContext,
    enumerate_paths_oracle,
    verify,
    verify_signature,
)

__all__ = [name for name in dir() if not name.startswith("_")]
