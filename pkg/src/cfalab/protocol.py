"""Challenge-response transport between prover and verifier.

Frames are ``u32 big-endian length || type byte || body``; the length counts
the type byte and the body.

====  ==================  ==========================================
type  name                body
====  ==================  ==========================================
0x01  challenge-request   program digest (32 bytes)
0x02  challenge           nonce (16 bytes) || program digest (32 bytes)
0x03  report              canonical report bytes
0x04  verdict             UTF-8 JSON; errors carry an ``error`` field
====  ==================  ==========================================
"""
from __future__ import annotations

import json
import os
import secrets
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .engine import AttestationReport
from .verifier import Verdict, VerifierContext, verify

MSG_CHALLENGE_REQUEST = 0x01
MSG_CHALLENGE = 0x02
MSG_REPORT = 0x03
MSG_VERDICT = 0x04

MAX_FRAME = 64 * 1024 * 1024
ENV_ADDR = "CFA_VERIFIER_ADDR"
DEFAULT_ADDR = "127.0.0.1:7878"

_LEN = struct.Struct(">I")


class ProtocolError(RuntimeError):
    """An ``error`` reply or a malformed frame."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code


def parse_addr(addr: str | None) -> tuple[str, int]:
    addr = addr or os.environ.get(ENV_ADDR) or DEFAULT_ADDR
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def encode_frame(kind: int, body: bytes) -> bytes:
    return _LEN.pack(len(body) + 1) + bytes([kind]) + body


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise EOFError("connection closed")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> tuple[int, bytes]:
    (length,) = _LEN.unpack(_recv_exact(sock, 4))
    if length < 1 or length > MAX_FRAME:
        raise ProtocolError("bad-frame", f"length {length}")
    data = _recv_exact(sock, length)
    return data[0], data[1:]


# ---------------------------------------------------------------------------
# Verifier endpoint
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Challenge:
    nonce: bytes
    program_digest: bytes
    issued_at: float

    def to_bytes(self) -> bytes:
        return self.nonce + self.program_digest


@dataclass
class SessionRecord:
    challenge: Challenge
    report: bytes | None = None
    verdict: Verdict | None = None
    state: str = "issued"  # issued -> reported -> decided

    def to_json(self) -> dict:
        return {
            "nonce": self.challenge.nonce.hex(),
            "program_digest": self.challenge.program_digest.hex(),
            "issued_at": self.challenge.issued_at,
            "state": self.state,
            "report": None if self.report is None else self.report.hex(),
            "verdict": None if self.verdict is None else self.verdict.to_json(),
        }


class VerifierEndpoint:
    """In-process verifier service: registered programs and a session table.

    ``register`` takes a context template; each report is checked against a
    copy bound to the session's nonce. Session-table access is serialized,
    verification itself runs outside the lock.
    """

    def __init__(self, log_path: str | os.PathLike | None = None, rng: Callable[[int], bytes] | None = None):
        self._programs: dict[bytes, VerifierContext] = {}
        self._sessions: dict[bytes, SessionRecord] = {}
        self._lock = threading.Lock()
        self._log_lock = threading.Lock()
        self._log_path = Path(log_path) if log_path else None
        self._rng = rng or secrets.token_bytes

    def register(self, digest: bytes, template: VerifierContext) -> None:
        with self._lock:
            self._programs[bytes(digest)] = template

    def issue_challenge(self, program_digest: bytes) -> Challenge:
        with self._lock:
            if bytes(program_digest) not in self._programs:
                raise ProtocolError("unknown-program", program_digest.hex())
            while True:
                nonce = self._rng(16)
                if nonce not in self._sessions:
                    break
            ch = Challenge(nonce, bytes(program_digest), time.monotonic())
            self._sessions[nonce] = SessionRecord(ch)
        self._append_log(self._sessions[nonce])
        return ch

    def session(self, nonce: bytes) -> SessionRecord | None:
        with self._lock:
            return self._sessions.get(nonce)

    def submit_report(self, raw: bytes) -> Verdict:
        """Verify wire bytes against the session named by their nonce."""
        try:
            report = AttestationReport.from_bytes(raw)
        except ValueError:
            return Verdict(False, "bad-signature")
        with self._lock:
            rec = self._sessions.get(report.nonce)
            if rec is None:
                return Verdict(False, "stale-nonce")
            if rec.state != "issued":
                return Verdict(False, "nonce-consumed")
            rec.state = "reported"
            rec.report = bytes(raw)
            template = self._programs[rec.challenge.program_digest]
        ctx = VerifierContext(
            template.cfg,
            template.plan,
            template.itl,
            template.keys,
            expected_nonce=rec.challenge.nonce,
            expected_counts=template.expected_counts,
            node_budget=template.node_budget,
            witness_limit=template.witness_limit,
        )
        verdict = verify(report, ctx)
        with self._lock:
            rec.verdict = verdict
            rec.state = "decided"
        self._append_log(rec)
        return verdict

    def _append_log(self, rec: SessionRecord) -> None:
        if self._log_path is None:
            return
        entry = rec.to_json()
        entry["time"] = time.time()
        line = json.dumps(entry, sort_keys=True)
        with self._log_lock, open(self._log_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")


def verdict_payload(verdict: Verdict, with_witness: bool = False) -> dict:
    out = verdict.to_json()
    if not with_witness:
        out.pop("witness", None)
        out.pop("witness_truncated", None)
    return out


# ---------------------------------------------------------------------------
# TCP server and client
# ---------------------------------------------------------------------------


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        endpoint: VerifierEndpoint = self.server.endpoint  # type: ignore[attr-defined]
        sock = self.request
        while True:
            try:
                kind, body = read_frame(sock)
            except (EOFError, ConnectionError):
                return
            except ProtocolError as exc:
                self._send_error(exc.code, str(exc))
                return
            if kind == MSG_CHALLENGE_REQUEST:
                if len(body) != 32:
                    self._send_error("bad-request", "digest must be 32 bytes")
                    continue
                try:
                    ch = endpoint.issue_challenge(body)
                except ProtocolError as exc:
                    self._send_error(exc.code, body.hex())
                    continue
                sock.sendall(encode_frame(MSG_CHALLENGE, ch.to_bytes()))
            elif kind == MSG_REPORT:
                verdict = endpoint.submit_report(body)
                payload = json.dumps(verdict_payload(verdict), sort_keys=True).encode()
                sock.sendall(encode_frame(MSG_VERDICT, payload))
            else:
                self._send_error("bad-request", f"unexpected message type {kind:#04x}")

    def _send_error(self, code: str, detail: str) -> None:
        payload = json.dumps({"error": code, "detail": detail}, sort_keys=True).encode()
        try:
            self.request.sendall(encode_frame(MSG_VERDICT, payload))
        except OSError:
            pass


class VerifierServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr: tuple[str, int], endpoint: VerifierEndpoint):
        super().__init__(addr, _Handler)
        self.endpoint = endpoint

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"


def serve_in_thread(endpoint: VerifierEndpoint, addr: str = "127.0.0.1:0") -> VerifierServer:
    """Start a server on a background thread; call ``shutdown()`` when done."""
    server = VerifierServer(parse_addr(addr), endpoint)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server


class VerifierClient:
    def __init__(self, addr: str | None = None, timeout: float = 600.0):
        self.sock = socket.create_connection(parse_addr(addr), timeout=timeout)

    def close(self) -> None:
        self.sock.close()

    def __enter__(self) -> "VerifierClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _verdict_json(self, body: bytes) -> dict:
        data = json.loads(body.decode())
        if "error" in data:
            raise ProtocolError(data["error"], data.get("detail", ""))
        return data

    def request_challenge(self, program_digest: bytes) -> Challenge:
        self.sock.sendall(encode_frame(MSG_CHALLENGE_REQUEST, program_digest))
        kind, body = read_frame(self.sock)
        if kind == MSG_VERDICT:
            self._verdict_json(body)
        if kind != MSG_CHALLENGE or len(body) != 48:
            raise ProtocolError("bad-reply", f"type {kind:#04x}")
        return Challenge(body[:16], body[16:], time.monotonic())

    def submit_report(self, raw: bytes) -> dict:
        self.sock.sendall(encode_frame(MSG_REPORT, raw))
        kind, body = read_frame(self.sock)
        if kind != MSG_VERDICT:
            raise ProtocolError("bad-reply", f"type {kind:#04x}")
        return self._verdict_json(body)
