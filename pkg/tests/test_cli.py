import csv
import json

import numpy as np
import pytest

from plates import cli
from plates.errors import ConfigError
from plates.experiments import load_state

SMALL = {
    "mesh": {"type": "disk", "refinements": 2},
    "thetas": [0.5, 5, 20],
    "optimizer": {"g_tol": 1e-7, "max_iters": 300},
}


def _write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def test_defaults_resolve():
    cfg = cli.resolve_config({})
    assert cfg["mesh"] == {"type": "disk", "radius": 1.0, "refinements": 5}
    assert cfg["optimizer"]["metric"] == "GaussNewton"
    assert cfg["init"]["perturbation"]["amplitude"] == 1e-3
    layer = cfg["material"]["layers"][0]
    assert layer["prestrain_lin"] == [1.0, 1.0, 0.0]


def test_partial_sections_are_filled():
    cfg = cli.resolve_config({"optimizer": {"g_tol": 1e-5}, "mesh": {"type": "disk", "refinements": 1}})
    assert cfg["optimizer"]["g_tol"] == 1e-5 and cfg["optimizer"]["rho"] == 0.25
    assert cfg["mesh"]["radius"] == 1.0


@pytest.mark.parametrize(
    "raw, path",
    [
        ({"bogus": 1}, "<root>"),
        ({"mesh": {"type": "disk", "refinements": -1}}, "mesh"),
        ({"thetas": [1, -2]}, "thetas"),
        ({"optimizer": {"metric": "H3"}}, "optimizer/metric"),
        ({"init": {"perturbation": {"amplitude": -1}}}, "init/perturbation/amplitude"),
        ({"material": {"layers": [{"t_lo": 0, "t_hi": 1}]}}, "material/layers/0"),
        ({"workers": 0}, "workers"),
        ({"init": {"kind": "file"}}, "init/path"),
    ],
)
def test_schema_errors_name_the_field(raw, path):
    with pytest.raises(ConfigError) as info:
        cli.resolve_config(raw)
    assert f"config field {path}" in str(info.value)


def test_load_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        cli.load_config(str(bad))
    with pytest.raises(ConfigError):
        cli.load_config(str(tmp_path / "missing.json"))
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        cli.load_config(str(bad))


def test_theta_ranges():
    lin = cli.build_thetas(cli.resolve_config({"thetas": {"start": 0, "stop": 10, "count": 3}}))
    assert lin == [0.0, 5.0, 10.0]
    log = cli.build_thetas(cli.resolve_config({"thetas": {"start": 1, "stop": 100, "count": 3, "spacing": "log"}}))
    assert np.allclose(log, [1, 10, 100])
    with pytest.raises(ConfigError):
        cli.build_thetas(cli.resolve_config({"thetas": {"start": 0, "stop": 1, "count": 2, "spacing": "log"}}))


def test_workers_env_cap(monkeypatch):
    monkeypatch.delenv("PLATES_THREADS", raising=False)
    assert cli.workers_from_env(4) == 4
    monkeypatch.setenv("PLATES_THREADS", "2")
    assert cli.workers_from_env(4) == 2 and cli.workers_from_env(1) == 1
    monkeypatch.setenv("PLATES_THREADS", "x")
    with pytest.raises(ConfigError):
        cli.workers_from_env(4)


def test_form3_stiffness():
    cfg = cli.resolve_config({"material": {"layers": [
        {"t_lo": -0.5, "t_hi": 0.5, "stiffness": {"form3": [3, 1, 0, 3, 0, 1]}}]}})
    M = cli.build_stack(cfg).layers[0].stiffness
    assert np.array_equal(M, [[3, 1, 0], [1, 3, 0], [0, 0, 1]])


def test_moduli_command_zero_prestrain(tmp_path, capsys):
    cfg = {"material": {"layers": [{"t_lo": -0.5, "t_hi": 0.5, "stiffness": {"mu": 1, "lambda": 1}}]}}
    out = tmp_path / "m.json"
    assert cli.main(["moduli", "--config", _write(tmp_path, cfg), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["gamma"] == pytest.approx(0.0, abs=1e-14)
    assert np.allclose(rep["lvk_minimizer"]["sym_grad_u"], 0) and np.allclose(rep["lvk_minimizer"]["hessian_v"], 0)
    assert rep["lki_minimizers"]["kind"] == "point"
    assert "-0 " not in capsys.readouterr().out


def test_moduli_command_prototypical_is_a_circle(tmp_path, capsys):
    assert cli.main(["moduli", "--config", _write(tmp_path, {})]) == 0
    text = capsys.readouterr().out
    rep = json.loads(text[text.index("{"):])
    assert np.allclose(rep["lvk_minimizer"]["hessian_v"], [1, 1, 0])
    assert rep["lki_minimizers"]["kind"] in ("circle", "ellipse")
    assert "gamma:" in text


def test_mesh_command(tmp_path, capsys):
    cfg = {"mesh": {"type": "disk", "refinements": 1}}
    out = tmp_path / "m.txt"
    assert cli.main(["mesh", "--config", _write(tmp_path, cfg), "--out", str(out)]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["n_nodes"] == 19
    cfg2 = {"mesh": {"type": "file", "path": str(out)}}
    assert cli.main(["mesh", "--config", _write(tmp_path, cfg2, "c2.json")]) == 0
    assert json.loads(capsys.readouterr().out) == stats


@pytest.fixture(scope="module")
def sweep_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("sweep")
    cfg = dict(SMALL, output_dir=str(tmp / "out"))
    assert cli.main(["sweep", "--config", _write(tmp, cfg)]) == 0
    return tmp / "out"


def test_sweep_csv(sweep_dir):
    with open(sweep_dir / "records.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == cli.CSV_COLUMNS
    assert len(rows) == 4
    for row, theta in zip(rows[1:], SMALL["thetas"]):
        assert float(row[0]) == theta
        assert row[2] in ("0", "1")
        vals = [float(v) for v in row]
        assert np.isfinite(vals).all()
        assert 0 <= vals[7] <= 1


def test_sweep_states_and_vtk(sweep_dir):
    from plates.mesh import disk_mesh

    mesh = disk_mesh(1.0, 2)
    for k in range(3):
        st = load_state(sweep_dir / "states" / f"theta_{k:03d}.txt")
        assert st.n_nodes == mesh.n_nodes
        lines = (sweep_dir / "vtk" / f"theta_{k:03d}.vtk").read_text().splitlines()
        assert lines[0] == "# vtk DataFile Version 3.0" and lines[2] == "ASCII"
        assert f"POINTS {mesh.n_nodes} double" in lines
        assert f"CELLS {mesh.n_tris} {4 * mesh.n_tris}" in lines
        i = lines.index("VECTORS z double")
        z = np.array([[float(v) for v in l.split()[:2]] for l in lines[i + 1:i + 1 + mesh.n_nodes]])
        assert np.allclose(z, st.z, atol=1e-10)
        assert "SCALARS curl double 1" in lines


def test_sweep_rerun_from_resolved_config_is_identical(sweep_dir, tmp_path):
    resolved = json.loads((sweep_dir / "resolved_config.json").read_text())
    assert resolved == cli.resolve_config(resolved)
    resolved["output_dir"] = str(tmp_path / "again")
    assert cli.main(["sweep", "--config", _write(tmp_path, resolved)]) == 0

    def strip_time(path):
        with open(path) as fh:
            return [row[:-1] for row in csv.reader(fh)]

    assert strip_time(sweep_dir / "records.csv") == strip_time(tmp_path / "again" / "records.csv")
    a = (sweep_dir / "states" / "theta_002.txt").read_text()
    assert a == (tmp_path / "again" / "states" / "theta_002.txt").read_text()


def test_sweep_exit_codes(tmp_path, capsys):
    assert cli.main(["sweep", "--config", _write(tmp_path, {"thetas": "many"})]) == 1
    blocker = tmp_path / "file"
    blocker.write_text("")
    cfg = dict(SMALL, output_dir=str(blocker / "sub"))
    assert cli.main(["sweep", "--config", _write(tmp_path, cfg)]) == 1
    cfg = dict(SMALL, thetas=[100.0], optimizer={"metric": "L2Lumped", "max_backtracks": 1},
               mu_eps_exponent=0.0, output_dir=str(tmp_path / "fail"))
    assert cli.main(["sweep", "--config", _write(tmp_path, cfg, "f.json")]) == 2
    err = capsys.readouterr().err
    assert "config field thetas" in err


def test_verify_passes_and_detects_fault(capsys):
    assert cli.main(["verify"]) == 0
    assert "FAIL" not in capsys.readouterr().out
    assert cli.main(["verify", "--inject-fault"]) == 1
    assert "FAIL" in capsys.readouterr().out
