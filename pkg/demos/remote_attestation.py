"""One verifier, one prover, a TCP socket in between.

The verifier registers the dispatch program, the prover asks for a
challenge, runs, and submits its report. Sending the same report again is
refused because its nonce has already been used.

    python3 demos/remote_attestation.py
"""
import json
import tempfile
from pathlib import Path

from cfalab import KeyPair, build_itl, compute_dominators, corpus, execute, load_program, plan_instrumentation
from cfalab.protocol import VerifierClient, VerifierEndpoint, serve_in_thread
from cfalab.verifier import VerifierContext, artifact_digest

keys = KeyPair.from_bytes(bytes(range(48)))
cfg = load_program(corpus.DISPATCH_SOURCE)
plan = plan_instrumentation(cfg, compute_dominators(cfg))
itl = build_itl(cfg)
digest = artifact_digest(cfg, plan, itl)

with tempfile.TemporaryDirectory() as tmp:
    log_path = Path(tmp) / "sessions.jsonl"
    endpoint = VerifierEndpoint(log_path)
    endpoint.register(digest, VerifierContext(cfg, plan, itl, keys))
    server = serve_in_thread(endpoint)
    print("verifier listening on", server.address)
    try:
        with VerifierClient(server.address) as client:
            challenge = client.request_challenge(digest)
            print("nonce", challenge.nonce.hex())
            report, log = execute(cfg, plan, itl, keys, challenge.nonce, {"r1": 6})
            raw = report.to_bytes()
            print(f"report: {len(raw)} bytes, {log.l} attested events, auth {report.auth_size} bytes")
            print("first submission:", json.dumps(client.submit_report(raw)))
            print("replayed:        ", json.dumps(client.submit_report(raw)))
    finally:
        server.shutdown()
        server.server_close()
    print(len(log_path.read_text().splitlines()), "session log lines")
