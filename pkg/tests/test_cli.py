import csv
import subprocess
import sys

import numpy as np
import pytest

from photon_unmix import cli, formats
from photon_unmix.solver import SolverError

SMALL = ["--set", "scene.height=12", "--set", "scene.width=10"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_simulate_is_reproducible(tmp_path):
    args = ["simulate", "--seed", 7, "--set", "scene.kind=constant", "--set", "scene.height=2",
            "--set", "scene.width=2", "--set", "simulation.sbr=1"]
    assert run(*args, "--out", tmp_path / "a.pecd") == 0
    assert run(*args, "--out", tmp_path / "b.pecd") == 0
    assert (tmp_path / "a.pecd").read_bytes() == (tmp_path / "b.pecd").read_bytes()
    assert run(*args, "--out", tmp_path / "c.pecd", "--seed", 8) == 0
    assert (tmp_path / "a.pecd").read_bytes() != (tmp_path / "c.pecd").read_bytes()


def test_noiseless_pipeline_recovers_truth(tmp_path):
    t = tmp_path
    common = ["--set", "scene.kind=constant", "--set", "scene.height=8", "--set", "scene.width=8",
              "--set", "scene.alpha=0.8", "--set", "scene.depth=4.0", "--set", "simulation.ppp=10"]
    assert run("simulate", *common, "--out", t / "d.pecd", "--labels", t / "d.pecl", "--truth", t / "truth") == 0
    assert run("unmix", t / "d.pecd", *common, "--out", t / "r.puwr", "--alpha", t / "a0.fgrd",
               "--diagnostics", t / "diag.csv") == 0
    assert run("estimate", t / "r.puwr", *common, "--alpha", t / "a.fgrd", "--depth", t / "z.fgrd",
               "--trace", t / "trace.csv") == 0
    z, unit = formats.read_grid(t / "z.fgrd")
    assert unit == formats.UNIT_METER and np.abs(z - 4.0).max() < 0.02
    a, _ = formats.read_grid(t / "a.fgrd")
    assert abs(a.mean() - 0.8) < 0.1
    assert (t / "z.pgm").exists() and (t / "truth_depth.pgm").exists()
    assert (t / "diag.csv").read_text().startswith("iteration,")
    assert run("evaluate", "--truth-depth", t / "truth_depth.fgrd", "--depth", t / "z.fgrd",
               "--truth-alpha", t / "truth_alpha.fgrd", "--alpha", t / "a.fgrd", "--out", t / "e.csv") == 0
    rows = list(csv.reader(open(t / "e.csv")))
    assert rows[0] == ["image", "metric", "value"] and float(rows[2][2]) < 0.02


def test_evaluate_identity(tmp_path):
    formats.write_grid(tmp_path / "x.fgrd", np.full((3, 3), 5.0))
    assert run("evaluate", "--truth-alpha", tmp_path / "x.fgrd", "--alpha", tmp_path / "x.fgrd",
               "--truth-depth", tmp_path / "x.fgrd", "--depth", tmp_path / "x.fgrd", "--out", tmp_path / "e.csv") == 0
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert float(rows[1][2]) == -300.0 and float(rows[2][2]) == 0.0


def test_ncl_table_and_mc(tmp_path):
    assert run("ncl-table", "--set", "ncl.max_rate=5", "--out", tmp_path / "n.csv") == 0
    assert (tmp_path / "n.csv").read_text().count("\n") > 10
    assert run("mc", "--set", "mc.trials=200", "--set", "mc.rates=2,5", "--set", "mc.n_cls=2,3",
               "--out", tmp_path / "c.csv") == 0
    assert len(list(csv.reader(open(tmp_path / "c.csv")))) == 1 + 2 * 2 * 2
    assert run("mc", "--kind", "threshold", "--set", "mc.threshold_trials=20", "--set", "mc.alpha_points=3",
               "--set", "mc.sbrs=1", "--out", tmp_path / "t.csv") == 0
    assert len(list(csv.reader(open(tmp_path / "t.csv")))) == 4


def test_sweep_command(tmp_path):
    assert run("sweep", *SMALL, "--set", "sweep.sbr_values=1", "--set", "sweep.ppp_values=3",
               "--set", "sweep.trials=1", "--set", "sweep.beta_alpha_grid=1", "--set", "sweep.beta_z_grid=100",
               "--out", tmp_path / "s.csv", "--dump-dir", tmp_path) == 0
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0][:4] == ["sbr", "ppp", "trial", "method"] and len(rows) == 4
    assert list(tmp_path.rglob("*.pgm"))


def test_config_file_and_overrides(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[scene]\nkind = constant\nheight = 3\nwidth = 4\n[simulation]\nppp = 5\n")
    cfg = cli.load_config(ini, ["simulation.ppp=7"])
    assert cfg["scene.height"] == 3 and cfg["simulation.ppp"] == 7.0 and cfg["scene.kind"] == "constant"
    assert run("simulate", "--config", ini, "--out", tmp_path / "d.pecd") == 0
    assert formats.read_detections(tmp_path / "d.pecd").width == 4


@pytest.mark.parametrize("argv", [
    ["simulate", "--set", "scene.colour=red"],
    ["simulate", "--set", "unmix.tau_fa=banana"],
    ["simulate", "--set", "unmix.tau_fa=2"],
    ["simulate", "--set", "scene.kind=teapot"],
    ["simulate", "--threads", "0"],
    ["simulate", "--config", "/nonexistent.ini"],
])
def test_config_errors_exit_2(tmp_path, argv):
    assert run(*argv, "--out", tmp_path / "d.pecd") == 2


def test_missing_input_and_output_dir_exit_2(tmp_path):
    assert run("unmix", tmp_path / "nope.pecd", "--out", tmp_path / "r.puwr") == 2
    assert run("simulate", *SMALL, "--out", tmp_path / "no" / "dir" / "d.pecd") == 2


def test_corrupt_data_exit_3(tmp_path):
    (tmp_path / "bad.pecd").write_bytes(b"PECD garbage")
    assert run("unmix", tmp_path / "bad.pecd", "--out", tmp_path / "r.puwr") == 3
    formats.write_grid(tmp_path / "a.fgrd", np.zeros((2, 2)))
    formats.write_grid(tmp_path / "b.fgrd", np.zeros((3, 2)))
    assert run("evaluate", "--truth-alpha", tmp_path / "a.fgrd", "--alpha", tmp_path / "b.fgrd",
               "--out", tmp_path / "e.csv") == 3


def test_solver_failure_exit_4(tmp_path, monkeypatch):
    assert run("simulate", *SMALL, "--out", tmp_path / "d.pecd") == 0
    assert run("unmix", tmp_path / "d.pecd", "--out", tmp_path / "r.puwr") == 0

    def boom(*a, **k):
        raise SolverError("diverged")

    monkeypatch.setattr(cli, "reflectivity_pml", boom)
    assert run("estimate", tmp_path / "r.puwr", "--alpha", tmp_path / "a.fgrd", "--depth", tmp_path / "z.fgrd") == 4
    assert not (tmp_path / "a.fgrd").exists()


def test_threads_do_not_change_outputs(tmp_path):
    outs = {}
    for threads in (1, 4):
        d = tmp_path / f"t{threads}"
        d.mkdir()
        base = [*SMALL, "--set", "simulation.sbr=0.5", "--seed", 3, "--threads", threads]
        assert run("simulate", *base, "--out", d / "d.pecd", "--labels", d / "d.pecl") == 0
        assert run("unmix", d / "d.pecd", *base, "--out", d / "r.puwr") == 0
        assert run("estimate", d / "r.puwr", *base, "--alpha", d / "a.fgrd", "--depth", d / "z.fgrd") == 0
        outs[threads] = {p.name: p.read_bytes() for p in sorted(d.iterdir())}
    assert outs[1] == outs[4]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "photon_unmix", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
