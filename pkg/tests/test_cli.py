import json
import subprocess
import sys

import numpy as np
import pytest

from ncchi_mpm.cli import EXIT_DATA, EXIT_NONCONV, EXIT_OK, EXIT_USAGE, main
from ncchi_mpm.synthetic import default_phantom
from ncchi_mpm.volume_io import read_volume


@pytest.fixture
def synth_dir(tmp_path):
    spec = tmp_path / "phantom.json"
    default_phantom((8, 8, 8), seed=3).dump(spec)
    out = tmp_path / "data"
    assert main(["synth", "--spec", str(spec), "--out", str(out), "--snr", "20",
                 "--echoes", "4"]) == EXIT_OK
    return out


def volumes(d):
    return sorted(str(p) for p in d.glob("*_e*.nii"))


def test_synth_outputs(synth_dir):
    names = volumes(synth_dir)
    assert len(names) == 12
    meta = json.loads((synth_dir / "synth.json").read_text())
    assert meta["rng"] == "numpy.random.Philox"
    assert meta["noise"]["family"] == "ncchi" and meta["noise"]["snr"] == 20
    side = json.loads((synth_dir / "MTw_e02.json").read_text())
    assert side["mt_pulse"] == 1 and side["run"] == "MTw" and side["echo"] == 1
    assert read_volume(synth_dir / "truth" / "R1.nii").dims == (8, 8, 8)


def test_pipeline(synth_dir, tmp_path):
    vols = volumes(synth_dir)
    noise = tmp_path / "noise.json"
    assert main(["noise-estimate", *vols, "--out", str(noise)]) == EXIT_OK
    rep = json.loads(noise.read_text())
    sigma = json.loads((synth_dir / "synth.json").read_text())["noise"]["sigma"]
    assert rep["background"]["nu"] * rep["background"]["sigma2"] == pytest.approx(
        2 * sigma**2, rel=0.1)

    maps = tmp_path / "maps"
    mask = str(synth_dir / "truth" / "mask.nii")
    assert main(["fit", *vols, "--noise", str(noise), "--mask", mask, "--out", str(maps),
                 "--threads", "2"]) == EXIT_OK
    for name in ("R1", "R2s", "PD", "MTsat", "convergence", "objective", "iterations"):
        assert (maps / f"{name}.nii").exists()
    meta = json.loads((maps / "fit.json").read_text())
    assert meta["runs"] == ["MTw"] * 4 + ["PDw"] * 4 + ["T1w"] * 4 and meta["n_nonconverged"] == 0
    gm = read_volume(synth_dir / "truth" / "labels.nii").data == 2
    for name in ("R1", "R2s"):
        est = read_volume(maps / f"{name}.nii").data
        truth = read_volume(synth_dir / "truth" / f"{name}.nii").data
        assert np.median(est[gm]) == pytest.approx(np.median(truth[gm]), rel=0.1)

    pred = tmp_path / "pred.nii"
    assert main(["predict", "--maps", str(maps), "--sidecar", str(synth_dir / "T1w_e01.json"),
                 "--noise", str(noise), "--mask", mask, "--out", str(pred)]) == EXIT_OK
    p = read_volume(pred).data
    obs = read_volume(synth_dir / "T1w_e01.nii").data
    m = read_volume(mask).data > 0
    assert np.sqrt(np.mean((p[m] - obs[m]) ** 2)) < 3 * sigma
    assert json.loads((tmp_path / "pred.json").read_text())["flip_deg"] == pytest.approx(21.0)

    cfg = tmp_path / "xval.json"
    cfg.write_text(json.dumps({"volumes": vols, "noise": str(noise), "mask": mask}))
    for fmt, out in (("csv", tmp_path / "x.csv"), ("json", tmp_path / "x.json")):
        assert main(["xval", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    lines = (tmp_path / "x.csv").read_text().splitlines()
    assert lines[0].startswith("contrast,held_out_echo,mse_gauss,mse_ncchi,diff")
    assert len(lines) == 1 + 12
    assert set(json.loads((tmp_path / "x.json").read_text())["summary"]) == {"PDw", "T1w", "MTw"}


def test_fit_is_byte_deterministic_across_threads(synth_dir, tmp_path):
    vols = volumes(synth_dir)[4:]  # PDw and T1w runs
    outs = []
    for i, threads in enumerate(("1", "3", "1")):
        out = tmp_path / f"m{i}"
        assert main(["--threads", threads, "fit", *vols, "--likelihood", "gauss", "--gzip",
                     "--out", str(out), "--reg-weights", "1,1,1,1"]) in (EXIT_OK, EXIT_NONCONV)
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert outs[0] == outs[1] == outs[2]


def test_threads_from_environment(synth_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("NCCHI_MPM_THREADS", "2")
    out = tmp_path / "m"
    assert main(["fit", *volumes(synth_dir), "--likelihood", "gauss", "--out", str(out)]) == 0
    monkeypatch.setenv("NCCHI_MPM_THREADS", "many")
    assert main(["fit", *volumes(synth_dir), "--likelihood", "gauss", "--out", str(out)]) == 1


def test_usage_errors(synth_dir, tmp_path, capsys):
    vols = volumes(synth_dir)
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        main(["fit", "--bogus"])
    assert e.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        main(["fit", *vols, "--out", "x", "--reg-weights", "1,2"])
    assert e.value.code == EXIT_USAGE
    # nc-chi fitting needs a noise model
    assert main(["fit", *vols, "--out", str(tmp_path / "m")]) == EXIT_USAGE
    assert main(["fit", *vols, "--out", str(tmp_path / "m"), "--threads", "0"]) == EXIT_USAGE
    assert main(["fit", *vols, "--sidecars", "a.json", "--out", str(tmp_path / "m"),
                 "--likelihood", "gauss"]) == EXIT_USAGE
    assert "ncchi-mpm fit:" in capsys.readouterr().err


def test_data_errors(synth_dir, tmp_path):
    vols = volumes(synth_dir)
    out = str(tmp_path / "m")
    assert main(["fit", *vols, str(tmp_path / "missing.nii"), "--likelihood", "gauss",
                 "--out", out]) == EXIT_DATA
    bad = tmp_path / "bad.nii"
    bad.write_bytes(b"\x00" * 400)
    assert main(["noise-estimate", str(bad), "--out", "-"]) == EXIT_DATA
    (synth_dir / "PDw_e01.json").write_text(json.dumps({"tr_s": 0.025, "te_s": 0.0023}))
    assert main(["fit", *vols, "--likelihood", "gauss", "--out", out]) == EXIT_DATA
    assert main(["xval", "--config", str(tmp_path / "none.json"), "--out", "-"]) == EXIT_DATA


def test_dimension_mismatch_names_file(tmp_path, capsys):
    spec = tmp_path / "p.json"
    default_phantom((6, 6, 6)).dump(spec)
    main(["synth", "--spec", str(spec), "--out", str(tmp_path / "a"), "--noiseless"])
    default_phantom((5, 6, 6)).dump(spec)
    main(["synth", "--spec", str(spec), "--out", str(tmp_path / "b"), "--noiseless"])
    odd = str(tmp_path / "b" / "T1w_e01.nii")
    rc = main(["fit", *volumes(tmp_path / "a")[1:], odd, "--likelihood", "gauss",
               "--out", str(tmp_path / "m")])
    assert rc == EXIT_DATA and odd in capsys.readouterr().err


def test_nonconvergence_exit(synth_dir, tmp_path):
    noise = tmp_path / "n.json"
    main(["noise-estimate", *volumes(synth_dir), "--out", str(noise)])
    rc = main(["fit", *volumes(synth_dir), "--noise", str(noise), "--max-iters", "1",
               "--out", str(tmp_path / "m")])
    assert rc == EXIT_NONCONV
    rc = main(["noise-estimate", *volumes(synth_dir), "--out", "-", "--max-iters", "2",
               "--no-select"])
    assert rc == EXIT_NONCONV


def test_json_logs_and_flag_positions(synth_dir, tmp_path):
    out = tmp_path / "m"
    proc = subprocess.run([sys.executable, "-m", "ncchi_mpm", "fit", *volumes(synth_dir),
                           "--likelihood", "gauss", "--out", str(out), "--log-json", "-v",
                           "--threads", "2"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    lines = [json.loads(l) for l in proc.stderr.splitlines() if l.strip()]
    assert lines and all({"level", "logger", "msg"} <= set(l) for l in lines)


def test_solver_config_file_and_override(synth_dir, tmp_path):
    cfg = tmp_path / "solver.json"
    cfg.write_text(json.dumps({"likelihood": "gauss", "max_iters": 1, "tol": 1e-3}))
    out = tmp_path / "m"
    main(["fit", *volumes(synth_dir), "--config", str(cfg), "--max-iters", "30",
          "--out", str(out)])
    solver = json.loads((out / "fit.json").read_text())["solver"]
    assert solver["max_iters"] == 30 and solver["tol"] == 1e-3 and solver["likelihood"] == "gauss"
    cfg.write_text(json.dumps({"likelihood": "poisson"}))
    assert main(["fit", *volumes(synth_dir), "--config", str(cfg), "--out", str(out)]) == 1
