import csv
import json
import subprocess
import sys

import pytest

from mixcluster import cli, fitting
from mixcluster.gibbs import ChainFailure

CATEGORICAL = "X8,X9,X10,X11,X12,X13,X14"


def run(*argv):
    try:
        return cli.main([str(a) for a in argv])
    except SystemExit as exc:  # argparse usage errors
        return exc.code


def simulate(tmp_path, name="sim", *flags):
    out = tmp_path / name
    assert run("simulate", "--scenario", "eei", "--n", 600, "--seed", 7, "-o", out, *flags) == 0
    return out


def fit(tmp_path, sim, name, *flags):
    out = tmp_path / name
    code = run("fit", "--csv", sim / "data.csv", "--categorical", CATEGORICAL, "--chains", 2,
               "-T", 200, "--bootstrap", 10, "--seed", 1, "-o", out, *flags)
    return code, out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- simulate ---------------------------------------------------------------------


def test_simulate_writes_three_files(tmp_path):
    out = tmp_path / "s"
    assert run("simulate", "--scenario", "eee", "--censor", 40, "--n", 300, "--seed", 7, "-o", out) == 0
    assert sorted(p.name for p in out.iterdir()) == ["data.csv", "manifest.json", "truth.csv"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["censor_level"] == 40
    assert manifest["dominant"] == ["X1", "X2", "X3", "X4", "X8", "X9", "X10"]
    text = (out / "data.csv").read_text()
    assert "<" in text and ">" in text


def test_simulate_is_byte_identical(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for out in (a, b):
        assert run("simulate", "--scenario", "vvv", "--censor", 20, "--n", 200, "--seed", 3, "-o", out) == 0
    for name in ("data.csv", "truth.csv", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


@pytest.mark.parametrize("flags", [["--censor", 15], ["--scenario", "vvi"], ["--n", "many"]])
def test_simulate_usage_errors(tmp_path, flags):
    argv = ["simulate", "--scenario", "eei", "-o", tmp_path / "x"]
    if flags[0] == "--scenario":
        argv = ["simulate", "-o", tmp_path / "x"]
    assert run(*argv, *flags) == 2


# --- fit ---------------------------------------------------------------------------


def test_fit_recovers_planted_clusters(tmp_path, capsys):
    # desk scale: n=1000 with default chains, iterations and bootstrap
    sim = tmp_path / "desk"
    assert run("simulate", "--scenario", "eei", "--n", 1000, "--seed", 7, "-o", sim) == 0
    out = tmp_path / "fit"
    code = run("fit", "--csv", sim / "data.csv", "--categorical", CATEGORICAL, "--structure", "EEI",
               "-G", 3, "--seed", 1, "-o", out)
    assert code == 0
    for name in ("assignments.csv", "importance.csv", "parameters.csv", "diagnostics.txt", "manifest.json"):
        assert (out / name).exists()
    rows = read_rows(out / "assignments.csv")
    assert len(rows) == 1000
    assert all(abs(sum(float(r[f"p{g}"]) for g in (1, 2, 3)) - 1) < 1e-5 for r in rows)
    capsys.readouterr()
    assert run("evaluate", out / "assignments.csv", sim / "truth.csv") == 0
    report = capsys.readouterr().out
    ari = float(report.split("ARI:")[1].split()[0])
    assert ari >= 0.90
    diag = (out / "diagnostics.txt").read_text()
    assert "chains failed: 0" in diag and "MPSRF:" in diag


def test_fit_single_cluster(tmp_path):
    sim = simulate(tmp_path)
    code, out = fit(tmp_path, sim, "one", "--structure", "EEI", "-G", 1)
    assert code == 0
    assert {r["cluster"] for r in read_rows(out / "assignments.csv")} == {"1"}
    weights = [float(r["importance"]) for r in read_rows(out / "importance.csv")]
    assert len(weights) == 14
    # one centred cluster has nothing to separate: no variable rises above the 0.5 prior mean
    assert all(0 <= w < 0.5 for w in weights)


def test_fit_is_deterministic(tmp_path):
    sim = simulate(tmp_path)
    _, a = fit(tmp_path, sim, "a", "--structure", "VVV", "-G", 3)
    _, b = fit(tmp_path, sim, "b", "--structure", "VVV", "-G", 3)
    for name in ("assignments.csv", "importance.csv", "parameters.csv", "diagnostics.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_numbers_have_six_significant_digits(tmp_path):
    sim = simulate(tmp_path)
    _, out = fit(tmp_path, sim, "f", "--structure", "EEE", "-G", 2)
    for row in read_rows(out / "parameters.csv"):
        digits = row["value"].lstrip("-").split("e")[0].replace(".", "").lstrip("0")
        assert len(digits) <= 6


def test_fit_from_config_file(tmp_path):
    sim = simulate(tmp_path)
    conf = tmp_path / "run.conf"
    conf.write_text(
        f"# run\ncsv = {sim / 'data.csv'}\ncategorical = {CATEGORICAL}\nstructure = EEI\nG = 2\n"
        f"chains = 2\nT = 40\nbootstrap = 5\noutput = {tmp_path / 'conf-out'}\nhyper.omega = 50\n"
    )
    assert run("fit", "--config", conf) == 0
    manifest = json.loads((tmp_path / "conf-out" / "manifest.json").read_text())
    assert manifest["omega"] == 50.0
    assert manifest["config"]["t_star"] == 20


def test_unknown_config_key_is_usage_error(tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("colour = blue\n")
    assert run("fit", "--config", conf) == 2


def test_all_chains_failed_exit_code(tmp_path, monkeypatch, capsys):
    sim = simulate(tmp_path)

    def broken(data, structure, hyper, cfg, init):
        raise ChainFailure(cfg.chain_id, 3, "covariance not positive definite")

    monkeypatch.setattr(fitting, "run_chain", broken)
    code, _ = fit(tmp_path, sim, "dead", "--structure", "EEI", "-G", 2)
    assert code == 3
    assert "not positive definite" in capsys.readouterr().err


def test_partial_failure_is_reported(tmp_path, monkeypatch):
    sim = simulate(tmp_path)
    real = fitting.run_chain

    def flaky(data, structure, hyper, cfg, init):
        if cfg.chain_id == 1:
            raise ChainFailure(1, 7, "synthetic failure")
        return real(data, structure, hyper, cfg, init)

    monkeypatch.setattr(fitting, "run_chain", flaky)
    code, out = fit(tmp_path, sim, "half", "--structure", "EEI", "-G", 2)
    assert code == 0
    diag = (out / "diagnostics.txt").read_text()
    assert "chains failed: 1" in diag and "synthetic failure" in diag


def test_missing_file_is_io_error(tmp_path):
    assert run("fit", "--csv", tmp_path / "absent.csv", "-o", tmp_path / "o") == 4


def test_fit_needs_one_data_source(tmp_path):
    assert run("fit", "-o", tmp_path / "o") == 2


# --- select ------------------------------------------------------------------------


def test_select_grid_table(tmp_path):
    sim = simulate(tmp_path)
    out = tmp_path / "sel"
    code = run("select", "--csv", sim / "data.csv", "--categorical", CATEGORICAL, "--grid", "2-3",
               "--structures", "EEI", "--chains", 1, "-T", 40, "--bootstrap", 5, "-o", out)
    assert code == 0
    rows = read_rows(out / "selection.csv")
    assert [r["rank"] for r in rows] == ["1", "2"]
    assert sorted(r["G"] for r in rows) == ["2", "3"]
    icl = [float(r["ICL"]) for r in rows]
    assert icl == sorted(icl)


@pytest.mark.parametrize("grid", ["2-x", "4-2", "0,1", ""])
def test_select_malformed_grid(tmp_path, grid):
    sim = simulate(tmp_path)
    assert run("select", "--csv", sim / "data.csv", "--grid", grid, "-o", tmp_path / "o") == 2


# --- evaluate ----------------------------------------------------------------------


def labels_file(path, labels, column="cluster"):
    path.write_text(f"row,{column}\n" + "".join(f"{i + 1},{v}\n" for i, v in enumerate(labels)))
    return path


def ari_of(capsys, a, b):
    capsys.readouterr()
    assert run("evaluate", a, b) == 0
    return float(capsys.readouterr().out.split("ARI:")[1].split()[0])


def test_evaluate_identical(tmp_path, capsys):
    a = labels_file(tmp_path / "a.csv", [1, 1, 2, 3, 3])
    assert ari_of(capsys, a, a) == 1.0


def test_evaluate_four_point_example(tmp_path, capsys):
    a = labels_file(tmp_path / "a.csv", [1, 1, 2, 2])
    b = labels_file(tmp_path / "b.csv", [1, 2, 1, 2], "label")
    assert ari_of(capsys, a, b) == -0.5


def test_evaluate_row_mismatch(tmp_path):
    a = labels_file(tmp_path / "a.csv", [1, 1, 2, 2])
    b = labels_file(tmp_path / "b.csv", [1, 2, 1], "label")
    assert run("evaluate", a, b) == 2


def test_console_script_entry(tmp_path):
    out = tmp_path / "entry"
    proc = subprocess.run(
        [sys.executable, "-c", "import sys; from mixcluster.cli import main; sys.exit(main())",
         "simulate", "--scenario", "eei", "--censor", "15", "-o", str(out)],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 2
    assert "censor" in proc.stderr
    assert not out.exists()
