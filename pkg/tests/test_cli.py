import json
import subprocess
import sys

import pytest

from randbal.cli import main
from randbal.serialize import dumps, fmt

D1_CSV = "cluster_id,block_id,z,m,x\nc1,A,1,1,1\nc2,A,1,1,2\nc3,A,0,1,3\nc4,A,0,1,4\n"


@pytest.fixture
def d1_csv(tmp_path):
    p = tmp_path / "d1.csv"
    p.write_text(D1_CSV)
    return p


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_balance_report(d1_csv, capsys):
    code, out, _ = run(["balance", "--input", d1_csv, "--covariates", "x", "--mode", "exact"], capsys)
    assert code == 0
    rep = json.loads(out)
    assert set(rep) == {"version", "config", "seed", "design", "covariates", "omnibus"}
    # size column m comes first; it is constant here, hence degenerate
    assert [c["covariate"] for c in rep["covariates"]] == ["m", "x"]
    assert rep["covariates"][0]["degenerate"]
    x = rep["covariates"][1]
    assert x["d"] == -2.0
    assert x["var_d"] == pytest.approx(5 / 3, rel=1e-15)
    assert x["mid_p"]["p"] == pytest.approx(1 / 6, abs=1e-16)
    assert rep["omnibus"]["df"] == 1


def test_balance_mc_is_byte_identical(d1_csv, tmp_path, capsys):
    outs = []
    for name in ("a.json", "b.json"):
        argv = ["balance", "--input", d1_csv, "--mode", "mc", "--reps", "5000", "--seed", "11",
                "--out", tmp_path / name]
        assert run(argv, capsys)[0] == 0
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]


def test_balance_table_output(d1_csv, capsys):
    code, out, _ = run(["balance", "--input", d1_csv, "--table"], capsys)
    assert code == 0 and "d2 =" in out


def test_mc_needs_seed(d1_csv, capsys):
    code, _, err = run(["balance", "--input", d1_csv, "--mode", "mc", "--reps", "1000"], capsys)
    assert code == 1 and "--seed" in err


def test_missing_file_exit_1(tmp_path, capsys):
    code, _, err = run(["balance", "--input", tmp_path / "none.csv"], capsys)
    assert code == 1 and "error" in err


def test_usage_error_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["balance", "--weights", "bogus"])
    assert exc.value.code == 1


def test_degenerate_design_exit_2(tmp_path, capsys):
    p = tmp_path / "deg.csv"
    p.write_text("cluster_id,block_id,z,m,x\nc1,A,1,1,1\nc2,A,1,1,2\n")
    code, _, err = run(["balance", "--input", p], capsys)
    assert code == 2 and "warning" in err


def test_unit_format_with_interactions(tmp_path, capsys):
    p = tmp_path / "u.csv"
    p.write_text("cluster_id,block_id,z,a,b\nh1,A,1,1,0\nh1,A,1,0,1\nh2,A,0,1,1\n"
                 "h3,A,0,0,0\nh4,A,1,1,1\n")
    code, out, _ = run(["balance", "--input", p, "--format", "unit", "--interactions"], capsys)
    assert code == 0
    names = [c["covariate"] for c in json.loads(out)["covariates"]]
    assert names == ["m", "a", "b", "a*a", "a*b", "b*b"]


def test_design_compare(tmp_path, capsys):
    rows = ["cluster_id,block_id,z,m,x,size_band"]
    for i in range(8):
        rows.append(f"c{i},A,{int(i < 4)},{1 + i},{3 * i + (i % 3)},{'lo' if i < 4 else 'hi'}")
    p = tmp_path / "c.csv"
    p.write_text("\n".join(rows) + "\n")
    code, out, _ = run(["design-compare", "--input", p, "--candidates", "size_band",
                        "--treated-fraction", "0.5"], capsys)
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0] == "candidate,x"
    assert lines[1].startswith("none,") and lines[2].startswith("size_band,")


def test_design_compare_inconsistent_labels(tmp_path, capsys):
    p = tmp_path / "u.csv"
    p.write_text("cluster_id,block_id,z,v,band\nh1,A,1,1,a\nh1,A,1,0,b\nh2,A,0,1,a\n")
    code, _, err = run(["design-compare", "--input", p, "--format", "unit", "--candidates", "band"],
                       capsys)
    assert code == 1 and "conflicting" in err


def test_study_schema_error(tmp_path, capsys):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"kind": "size", "generator": {"name": "clinics"}, "tests": ["d2"],
                             "reps": 5, "seed": 1}))
    code, _, err = run(["study", p], capsys)
    assert code == 1 and "/reps" in err


def test_study_power_writes_csv(tmp_path, capsys):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"kind": "power", "blocks": [{"n": 2, "n_treated": 1, "m": 1, "count": 100}],
                             "beta": [0.0, 0.3], "weights": ["harmonic"], "reps": 500, "seed": 2}))
    code, out, _ = run(["study", p, "--out", tmp_path / "o"], capsys)
    assert code == 0
    text = (tmp_path / "o" / "power_curve.csv").read_text().splitlines()
    assert text[0] == "beta,weights,delta_hat,theory,power,stderr,rejections,reps"
    assert len(text) == 3


def test_json_float_format():
    assert fmt(0.1) == "0.10000000000000001"
    assert fmt(float("nan")) == ""
    assert json.loads(dumps({"b": 1 / 3, "a": [1, None]})) == {"a": [1, None], "b": 1 / 3}
    assert dumps({"x": 0.1}) == '{\n  "x": 0.10000000000000001\n}\n'


def test_console_entry_point(d1_csv):
    out = subprocess.run([sys.executable, "-m", "randbal.cli", "--version"], capture_output=True,
                         text=True)
    assert out.returncode == 0 and out.stdout.startswith("randbal ")
