import csv

import numpy as np
import pytest

from chac.cli import ConfigError, RunConfig, main, parse_config, write_vtk

HEADER = "step,t,mass_rho,energy,dissipation_interval,energy_identity_residual,newton_iters,newton_residual"
FAST = ["--set", "mesh_k=2", "--set", "T=0.005"]  # 20 steps on 64 dofs


def test_empty_config_gives_defaults(tmp_path):
    p = tmp_path / "empty.cfg"
    p.write_text("")
    assert parse_config(p) == RunConfig()
    cfg = RunConfig()
    assert (cfg.tau_factor, cfg.T, cfg.D, cfg.l22) == (0.001, 0.1, 0.062, 1000.0)


def test_single_override(tmp_path):
    p = tmp_path / "a.cfg"
    p.write_text("# comment\nmesh_k = 3   # trailing\n\n")
    cfg = parse_config(p)
    assert cfg.mesh_k == 3 and cfg.tau == pytest.approx(0.001 / 8)
    assert parse_config(p, ["T=0.05"]).T == 0.05


def test_validation_errors(tmp_path):
    p = tmp_path / "b.cfg"
    p.write_text("mesh_k = 0\n")
    with pytest.raises(ConfigError, match="mesh_k"):
        parse_config(p)
    p.write_text("T = 0.1\nmesh_k 3\n")
    with pytest.raises(ConfigError, match=r"b\.cfg:2"):
        parse_config(p)
    p.write_text("\nmesh_k = 2.5\n")
    with pytest.raises(ConfigError, match=":2: mesh_k expects int"):
        parse_config(p)
    p.write_text("colour = red\n")
    with pytest.raises(ConfigError) as info:
        parse_config(p)
    assert "valid keys" in str(info.value) and "tau_factor" in str(info.value)
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "missing.cfg")
    with pytest.raises(ConfigError):
        parse_config(None, ["mesh_k"])


def test_simulate_outputs(tmp_path):
    out = tmp_path / "run"
    assert main(["simulate", "--out", str(out), *FAST, "--set", "snapshot_every=10"]) == 0
    lines = (out / "timeseries.csv").read_text().splitlines()
    assert lines[0] == HEADER
    assert len(lines) == 21
    rows = list(csv.DictReader(lines))
    assert [int(r["step"]) for r in rows] == list(range(1, 21))
    assert float(rows[-1]["t"]) == pytest.approx(0.005)
    # 17 significant digits: parsed values equal the in-process diagnostics exactly
    cfg = parse_config(None, ["mesh_k=2", "T=0.005"])
    from chac.fespace import build_space
    from chac.mesh import build_periodic_mesh
    from chac.scheme import default_initial_data, run

    space = build_space(build_periodic_mesh(4, level=2))
    _, ref = run(space, cfg.model_params(), cfg.time_grid(), default_initial_data(), opts=cfg.newton_opts())
    for r, d in zip(rows, ref):
        assert tuple(type(v)(r[k]) for k, v in zip(r, d.values())) == d.values()
    assert sorted(p.name for p in out.glob("*.vtk")) == [
        "snapshot_000000.vtk", "snapshot_000010.vtk", "snapshot_000020.vtk"]
    info = (out / "run_config.txt").read_text()
    assert "tau = 0.00025" in info and "# initial: mass_rho = 0.5" in info


def test_simulate_bit_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["simulate", "--out", str(tmp_path / name), *FAST, "--set", "snapshot_every=20"]) == 0
    for f in ("timeseries.csv", "snapshot_000020.vtk"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_vtk_structure(tmp_path, space2, rng):
    rho = rng.standard_normal(space2.n_dofs)
    path = tmp_path / "s.vtk"
    write_vtk(path, space2, {"rho": rho, "eta": -rho})
    lines = path.read_text().splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0"
    assert lines[2:4] == ["ASCII", "DATASET UNSTRUCTURED_GRID"]
    assert lines[4] == "POINTS 25 double"
    cells_at = lines.index("CELLS 32 128")
    cells = np.array([list(map(int, l.split())) for l in lines[cells_at + 1:cells_at + 33]])
    assert np.all(cells[:, 0] == 3) and cells[:, 1:].max() == 24
    types_at = lines.index("CELL_TYPES 32")
    assert set(lines[types_at + 1:types_at + 33]) == {"5"}
    assert "POINT_DATA 25" in lines
    start = lines.index("SCALARS rho double 1") + 2
    vals = np.array(lines[start:start + 25], dtype=float)
    pts = np.array([list(map(float, l.split()))[:2] for l in lines[5:30]])
    from chac.fespace import evaluate_points

    np.testing.assert_allclose(vals, evaluate_points(space2, rho, pts), atol=1e-14)
    assert "SCALARS eta double 1" in lines


def test_converge_outputs(tmp_path, capsys):
    out = tmp_path / "conv"
    code = main(["converge", "--out", str(out), "--k-min", "1", "--k-max", "3", "--set", "T=0.002"])
    assert code == 0
    lines = (out / "convergence.csv").read_text().splitlines()
    assert lines[0] == "k,h,tau,err_rho,eoc_rho,err_eta,eoc_eta,err_mu_rho,eoc_mu_rho,err_mu_eta,eoc_mu_eta"
    first = lines[1].split(",")
    assert first[0] == "1" and first[4] == first[6] == first[8] == first[10] == ""
    assert all(c != "" for c in lines[2].split(","))
    text = capsys.readouterr().out
    assert "err_rho" in text and len(text.strip().splitlines()) == 3


def test_check_passes(capsys):
    assert main(["check", "--set", "mesh_k=2"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 3 and all(l.startswith("PASS") for l in out)


def test_exit_codes(tmp_path, capsys):
    assert main(["check", "--set", "bogus=1"]) == 1
    assert main(["simulate", "--out", str(tmp_path), "--set", "T=0.1234567"]) == 1
    assert main(["converge", "--out", str(tmp_path), "--k-min", "3", "--k-max", "2"]) == 1
    assert main(["check", "--set", "mesh_k=2", "--set", "newton_max_iter=1"]) == 2
    assert main(["simulate", "--out", str(tmp_path), *FAST, "--set", "newton_max_iter=1"]) == 2
    assert "did not converge" in capsys.readouterr().err


def test_out_dir_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("CHAC_OUT_DIR", str(tmp_path / "env"))
    assert main(["simulate", "--set", "mesh_k=2", "--set", "T=0.0005", "--set", "snapshot_every=0"]) == 0
    assert (tmp_path / "env" / "timeseries.csv").exists()
    assert not list((tmp_path / "env").glob("*.vtk"))
