import csv
import subprocess
import sys

from coat import attention as A
from coat import tensor as T
from coat.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_verify_attention_passes(capsys):
    code, out, _ = run(capsys, "verify", "--suite", "attention")
    assert code == 0
    assert "PASS factor_att_oracle" in out and "failed=0" in out


def test_verify_mutation_crpe_sign_flip(capsys, monkeypatch):
    real = A.crpe
    monkeypatch.setattr(A, "crpe", lambda *a, **k: T.mul(real(*a, **k), -1.0))
    code, out, _ = run(capsys, "verify", "--suite", "attention")
    assert code == 1
    fail = [ln for ln in out.splitlines() if ln.startswith("FAIL")]
    assert any(ln.split()[1] == "crpe_oracle" for ln in fail)
    assert len(fail[0].split()) == 4  # FAIL <check> <value> <tolerance>


def test_verify_f32_skips_gradients(capsys):
    code, out, _ = run(capsys, "verify", "--suite", "gradients", "--precision", "f32")
    assert code == 0 and out.startswith("SKIP gradients")


def test_params_table(capsys):
    code, out, _ = run(capsys, "params", "coat_lite_small")
    assert code == 0
    assert "s1" in out and "head" in out and "target 20M" in out and "deviation -0.82%" in out


def test_params_bad_name(capsys):
    code, _, err = run(capsys, "params", "coat_xl")
    assert code == 2 and "coat_lite_tiny" in err and "coat_small" in err


def test_forward_checksum_stable(capsys):
    _, a, _ = run(capsys, "forward", "coat_lite_tiny", "--size", "64")
    _, b, _ = run(capsys, "forward", "coat_lite_tiny", "--size", "64")
    _, c, _ = run(capsys, "forward", "coat_lite_tiny", "--size", "64", "--seed", "1")
    assert a == b and a != c
    assert "shape [1000]" in a and "checksum" in a


def test_forward_indivisible_size(capsys):
    code, _, err = run(capsys, "forward", "coat_lite_tiny", "--size", "100")
    assert code == 2 and "divisible by 32" in err


def test_forward_dump_and_load(capsys, tmp_path):
    base = tmp_path / "p"
    _, a, _ = run(capsys, "forward", "coat_lite_tiny", "--size", "64", "--seed", "4", "--dump-params", str(base))
    assert (tmp_path / "p.bin").exists() and (tmp_path / "p.manifest").exists()
    _, b, _ = run(capsys, "forward", "coat_lite_tiny", "--size", "64", "--seed", "9", "--load-params", str(base))
    assert a.splitlines()[-1] != b.splitlines()[-1]  # different input image from seed 9
    _, c, _ = run(capsys, "forward", "coat_lite_tiny", "--size", "64", "--seed", "4", "--load-params", str(base))
    assert a == c


def test_forward_load_missing_is_io_error(capsys, tmp_path):
    code, _, _ = run(capsys, "forward", "coat_lite_tiny", "--size", "64", "--load-params", str(tmp_path / "nope"))
    assert code == 3


def test_bench_writes_csv(capsys, tmp_path):
    out = tmp_path / "b.csv"
    code, text, _ = run(capsys, "bench", "--op", "factor_att", "--Ns", "64,128,256,512", "--C", "8",
                        "--repeats", "5", "--out", str(out))
    assert code == 0 and "time slope" in text
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["op", "N", "C", "M", "wall_ns", "peak_bytes"] and len(rows) == 5


def test_bench_missing_out(capsys):
    code, _, err = run(capsys, "bench", "--op", "factor_att")
    assert code == 2 and "--out" in err


def test_bench_unwritable_out(capsys, tmp_path):
    code, _, err = run(capsys, "bench", "--op", "crpe", "--Ns", "16,32", "--C", "4", "--repeats", "5",
                       "--out", str(tmp_path / "missing" / "b.csv"))
    assert code == 3 and "cannot write" in err


def test_bad_ns_is_usage_error(capsys):
    code, _, _ = run(capsys, "bench", "--Ns", "a,b", "--out", "x.csv")
    assert code == 2


def test_help_lists_flags():
    proc = subprocess.run([sys.executable, "-m", "coat", "forward", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for flag in ("--seed", "--size", "--precision", "--threads", "--dump-params", "--load-params"):
        assert flag in proc.stdout
