import csv
import io
import json

import pytest

from cfalab import corpus
from cfalab.cli import _endpoint_for, build_parser, main
from cfalab.protocol import serve_in_thread
from conftest import TEST_KEYS

NONCE_HEX = "00112233445566778899aabbccddeeff"


@pytest.fixture
def keyfile(tmp_path):
    path = tmp_path / "keys.bin"
    path.write_bytes(TEST_KEYS.to_bytes())
    return str(path)


def run_json(capsys, argv):
    code = main(argv)
    return code, json.loads(capsys.readouterr().out)


def test_keygen_is_seeded(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["keygen", str(a), "--seed", "3"]) == 0
    assert main(["keygen", str(b), "--seed", "3"]) == 0
    assert a.read_bytes() == b.read_bytes() and len(a.read_bytes()) == 48


def test_instrument_crc32(capsys):
    code, out = run_json(capsys, ["instrument", "builtin:crc32"])
    assert code == 0
    assert [s["addr"] for s in out["direct_sites"]] == ["0x10000441", "0x10000465", "0x10000495"]
    assert out["lint"]["clean"] and len(out["program_digest"]) == 64


def test_instrument_reserved_write(tmp_path, capsys):
    prog = tmp_path / "dirty.cfa"
    prog.write_text("func main {\n block a: set r10 = 1; exit\n}\n")
    code, out = run_json(capsys, ["instrument", str(prog)])
    assert code == 2
    assert out["lint"]["findings"][0]["rule"] == "reserved-register-write"
    assert main(["instrument", str(prog), "--reserved", "r20"]) == 0


def test_parse_error_exit_code(tmp_path, capsys):
    prog = tmp_path / "bad.cfa"
    prog.write_text("func main {\n block a: frob\n}\n")
    assert main(["instrument", str(prog)]) == 2
    assert "parse error at 2:" in capsys.readouterr().err


def test_attest_verify_round_trip(tmp_path, keyfile, capsys):
    rep = tmp_path / "r.bin"
    code, out = run_json(capsys, ["attest", "builtin:syringe", "--keys", keyfile, "--input", "r1=10",
                                  "--input", "r2=43", "--nonce", NONCE_HEX, "--out", str(rep)])
    assert code == 0 and out["auth_size"] == 32
    code, out = run_json(capsys, ["verify", str(rep), "builtin:syringe", "--keys", keyfile, "--nonce", NONCE_HEX])
    assert code == 0 and out["accepted"] and out["reason"] == "ok"
    code, out = run_json(capsys, ["verify", str(rep), "builtin:syringe", "--keys", keyfile, "--nonce", "00" * 16])
    assert code == 1 and out["reason"] == "stale-nonce"


def test_loop_attack_rejected_with_known_inputs(tmp_path, keyfile, capsys):
    rep = tmp_path / "r.bin"
    inputs = ["--input", "r1=10", "--input", "r2=43"]
    code, _ = run_json(capsys, ["attest", "builtin:syringe", "--keys", keyfile, *inputs, "--nonce", NONCE_HEX,
                                "--attack", "loop-count-delta(inner_body,+7)", "--out", str(rep)])
    assert code == 0
    code, out = run_json(capsys, ["verify", str(rep), "builtin:syringe", "--keys", keyfile, *inputs])
    assert code == 1 and out["reason"] == "trace-mismatch"


def test_signature_flip_attack(tmp_path, keyfile, capsys):
    rep = tmp_path / "r.bin"
    run_json(capsys, ["attest", "builtin:diamond", "--keys", keyfile, "--attack", "signature-flip(17)",
                      "--seed", "1", "--out", str(rep)])
    code, out = run_json(capsys, ["verify", str(rep), "builtin:diamond", "--keys", keyfile])
    assert code == 1 and out["reason"] == "bad-signature"


def test_bad_attack_spec(keyfile, capsys):
    assert main(["attest", "builtin:diamond", "--keys", keyfile, "--attack", "branch-swap(join)"]) == 2
    assert "conditional" in capsys.readouterr().err


def test_prover_fault_exit_code(tmp_path, keyfile, capsys):
    rep = tmp_path / "r.bin"
    code, out = run_json(capsys, ["attest", "builtin:loop", "--keys", keyfile, "--input", "r1=1000",
                                  "--fuel", "20", "--out", str(rep)])
    assert code == 4 and out["fault"] == "fuel-exhausted" and rep.exists()


def test_verify_search_exhausted(tmp_path, keyfile, capsys):
    rep = tmp_path / "r.bin"
    run_json(capsys, ["attest", "builtin:dispatch", "--keys", keyfile, "--input", "r1=30", "--out", str(rep)])
    code, out = run_json(capsys, ["verify", str(rep), "builtin:dispatch", "--keys", keyfile, "--budget", "2"])
    assert code == 3 and out["reason"] == "search-exhausted"


def test_compare_csv(tmp_path, capsys):
    out = tmp_path / "sizes.csv"
    assert main(["compare", "family:unique", "builtin:syringe", "--input", "r1=10", "--input", "r2=43",
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert [r["program"] for r in rows] == ["unique-u0", "unique-u3", "unique-u73", "syringe"]
    assert [r["occ"] for r in rows] == ["8", "32", "592", "32"]


def test_challenge_against_server(tmp_path, keyfile, capsys):
    args = build_parser().parse_args(["serve", "builtin:syringe", "--keys", keyfile,
                                      "--session-log", str(tmp_path / "s.jsonl")])
    endpoint, _ = _endpoint_for(args)
    server = serve_in_thread(endpoint)
    try:
        code, out = run_json(capsys, ["challenge", "builtin:syringe", "--keys", keyfile, "--addr", server.address,
                                      "--input", "r1=5", "--input", "r2=45", "--replay"])
    finally:
        server.shutdown()
        server.server_close()
    assert out["first"]["accepted"] is True
    assert out["replay"]["reason"] == "nonce-consumed"
    assert code == 1
    assert len((tmp_path / "s.jsonl").read_text().splitlines()) == 2
