import json
import subprocess
import sys

import jsonschema
import pytest

from helmdd.cli import build_parser, main
from helmdd.schemas import load as load_schema
from helmdd.stencil import WeightTable

SMALL = ["--set", "model.shape=[10,10,10]", "--set", "model.c0=1000.0", "--set", "pml.npml=4",
         "--frequency", "10"]


def test_run_verb_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["run", *SMALL, "--out", str(out), "--partition", "2x1x1", "--ovl", "2", "--tol", "1e-8",
                 "--oracle", "analytic"])
    assert code == 0
    text = capsys.readouterr().out
    assert "f=10 Hz" in text and "Err=" in text
    assert (out / "summary.json").exists() and (out / "f10Hz" / "convergence.csv").exists()


def test_run_verb_reads_toml(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(f'output = "{tmp_path / "t"}"\nfrequencies = [10.0]\n[model]\nshape = [8, 8, 8]\n'
                   '[pml]\nnpml = 3\n')
    assert main(["run", str(cfg), "--level", "none", "--max-iterations", "2"]) == 1
    summary = json.loads((tmp_path / "t" / "summary.json").read_text())
    assert summary["all_converged"] is False


@pytest.mark.parametrize("argv", [["run", "--set", "model.kind=\"marmousi\""],
                                  ["run", "--set", "frequencies=[]"],
                                  ["run", "--set", "colour=1"],
                                  ["run", "--set", "model.shape=[10,10,10]", "--set", "partition.interface=\"neumann\""],
                                  ["scaling", *SMALL, "--cases", "1x1x1", "2x1x1", "--frequency", "1", "2", "3"]])
def test_configuration_errors_exit_2(argv, tmp_path, capsys):
    assert main([*argv, "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_bad_partition_syntax_is_usage_error():
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args(["run", "--partition", "2x2"])
    assert info.value.code == 2


def test_sweep_verb(tmp_path, capsys):
    out = tmp_path / "sweep"
    code = main(["sweep", "--set", "model.shape=[7,7,7]", "--set", "model.c0=1000.0", "--set", "pml.npml=4",
                 "--frequency", "5", "10", "20", "--out", str(out), "--subdomain-size", "12", "--ovl", "2"])
    assert code == 0
    table = json.loads((out / "sweep.json").read_text())
    assert table["frequencies"] == [5.0, 10.0, 20.0] and len(table["iterations"]) == 3
    assert table["subdomains"][0] < table["subdomains"][-1]
    assert "growth exponent" in capsys.readouterr().out


def test_scaling_verb_emits_valid_json_lines(tmp_path):
    out = tmp_path / "scal"
    assert main(["scaling", *SMALL, "--out", str(out), "--ovl", "2", "--cases", "1x1x1", "2x1x1",
                 "--mode", "strong"]) == 0
    lines = (out / "scaling.jsonl").read_text().splitlines()
    assert len(lines) == 2
    recs = [json.loads(s) for s in lines]
    for r in recs:
        jsonschema.validate(r, load_schema("scaling_record"))
    assert recs[0]["workers"] == 1 and recs[0]["efficiency"] == 1.0


def test_fit_weights_verb(tmp_path):
    path = tmp_path / "w.json"
    assert main(["fit-weights", "--samples", "3", "--directions", "24", "-o", str(path)]) == 0
    t = WeightTable.load(path)
    assert len(t.G_values) == 3 and t.G_values[0] == 4.0 and t.G_values[-1] == 40.0


def test_oracle_then_compare(tmp_path, capsys):
    out = tmp_path / "ref"
    assert main(["oracle", *SMALL, "--method", "analytic", "--out", str(out), "--slice-csv"]) == 0
    header, data = out / "reference_f10Hz.json", out / "reference_f10Hz.bin"
    assert (out / "reference_f10Hz_slice.csv").exists()
    capsys.readouterr()
    assert main(["compare", str(header), str(data), str(header), str(data), "--wavelength", "100"]) == 0
    assert json.loads(capsys.readouterr().out) == {"err": [0.0]}


def test_compare_rejects_mismatched_grids(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["oracle", *SMALL, "--method", "analytic", "--out", str(a)])
    main(["oracle", "--set", "model.shape=[8,8,8]", "--set", "model.c0=1000.0", "--frequency", "10",
          "--method", "analytic", "--out", str(b)])
    code = main(["compare", str(a / "reference_f10Hz.json"), str(a / "reference_f10Hz.bin"),
                 str(b / "reference_f10Hz.json"), str(b / "reference_f10Hz.bin"), "--wavelength", "100"])
    assert code == 2


def test_console_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "helmdd.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for verb in ("run", "sweep", "scaling", "fit-weights", "oracle", "compare"):
        assert verb in res.stdout
