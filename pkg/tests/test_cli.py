import json

import numpy as np
import pytest
from click.testing import CliRunner

from pnp import core
from pnp.cli import main


@pytest.fixture()
def runner():
    return CliRunner()


def _write_json(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


def test_simulate_rigid_round_trip(runner, tmp_path):
    cfg = _write_json(tmp_path / "rigid.json", {
        "n_nodes": 10, "z_min": 0.0, "z_max": 1.0,
        "dt": 0.02, "n_steps": 99, "angular_freq": 2.0,
        "amplitude": 0.5, "noise_std": 0.01,
    })
    out = tmp_path / "field.csv"
    result = runner.invoke(main, ["simulate", "--system", "rigid",
                                  "--config", cfg, "--seed", "5",
                                  "--out", str(out)])
    assert result.exit_code == 0, result.output
    field = core.read_field_csv(out)
    assert field.n_times == 100
    assert field.grid.n_nodes == 10


def test_simulate_wave_profile_selection(runner, tmp_path):
    cfg = _write_json(tmp_path / "wave.json", {
        "n_nodes": 20, "z_max": 4.0, "dt": 0.02, "n_steps": 50,
        "damping": 0.03,
        "initial_profile": {"kind": "gaussian_bump", "center": 2.0,
                            "width": 0.4, "amplitude": 0.2},
    })
    out = tmp_path / "wave.csv"
    result = runner.invoke(main, ["simulate", "--system", "wave",
                                  "--config", cfg, "--out", str(out)])
    assert result.exit_code == 0, result.output
    field = core.read_field_csv(out)
    assert np.abs(field.values[:, 0]).max() == 0.0


def test_cli_configuration_error_exits_nonzero(runner, tmp_path):
    cfg = _write_json(tmp_path / "bad.json", {
        "n_nodes": 20, "dt": 10.0, "n_steps": 5,   # CFL violation
    })
    result = runner.invoke(main, ["simulate", "--system", "wave",
                                  "--config", cfg,
                                  "--out", str(tmp_path / "x.csv")])
    assert result.exit_code != 0
    assert "CFL" in result.output


def test_nominal_calibrate_detect_flow(runner, tmp_path):
    sim_cfg = _write_json(tmp_path / "rigid.json", {
        "n_nodes": 10, "dt": 0.02, "n_steps": 399, "angular_freq": 2.0,
        "amplitude": 0.5, "noise_std": 0.02,
    })
    train_csv = tmp_path / "train.csv"
    calib_csv = tmp_path / "calib.csv"
    wave_csv = tmp_path / "wave.csv"
    for seed, out in [(1, train_csv), (2, calib_csv)]:
        assert runner.invoke(main, ["simulate", "--system", "rigid",
                                    "--config", sim_cfg, "--seed", str(seed),
                                    "--out", str(out)]).exit_code == 0
    wave_cfg = _write_json(tmp_path / "wave.json", {
        "n_nodes": 10, "dt": 0.02, "n_steps": 199, "damping": 0.03,
        "initial_profile": {"kind": "half_sine", "amplitude": 0.5},
    })
    assert runner.invoke(main, ["simulate", "--system", "wave",
                                "--config", wave_cfg,
                                "--out", str(wave_csv)]).exit_code == 0

    nom_cfg = _write_json(tmp_path / "nom.json",
                          {"history_h": 10, "horizon_w": 5,
                           "ridge_lambda": 1e-6})
    model_json = tmp_path / "model.json"
    result = runner.invoke(main, ["train-nominal", "--in", str(train_csv),
                                  "--config", nom_cfg,
                                  "--out", str(model_json)])
    assert result.exit_code == 0, result.output

    calib_json = tmp_path / "calib.json"
    result = runner.invoke(main, ["calibrate", "--model", str(model_json),
                                  "--calib-data", str(calib_csv),
                                  "--delta", "0.1",
                                  "--out", str(calib_json)])
    assert result.exit_code == 0, result.output

    report_json = tmp_path / "report.json"
    result = runner.invoke(main, ["detect", "--model", str(model_json),
                                  "--calib", str(calib_json),
                                  "--in", str(wave_csv),
                                  "--report", str(report_json)])
    assert result.exit_code == 0, result.output
    payload = json.loads(report_json.read_text())
    assert payload["verdict"] == "OOD"
    assert set(payload) >= {"scores", "threshold_C", "flags",
                            "flagged_fraction", "verdict"}


def test_preprocess_train_predict_flow(runner, tmp_path):
    wave_cfg = _write_json(tmp_path / "wave.json", {
        "n_nodes": 12, "z_max": 4.0, "dt": 0.02, "n_steps": 119,
        "damping": 0.03,
        "initial_profile": {"kind": "gaussian_bump", "center": 2.0,
                            "width": 0.6, "amplitude": 0.2},
    })
    wave_csv = tmp_path / "wave.csv"
    assert runner.invoke(main, ["simulate", "--system", "wave",
                                "--config", wave_cfg,
                                "--out", str(wave_csv)]).exit_code == 0

    pre_cfg = _write_json(tmp_path / "pre.json", {
        "smoother": {"gp_lengthscale_t": 0.6, "gp_lengthscale_z": 0.7,
                     "gp_signal_var": 0.05, "gp_noise_var": 1e-8},
        "time_stride": 6,
    })
    traj_csv = tmp_path / "traj.csv"
    result = runner.invoke(main, ["preprocess", "--in", str(wave_csv),
                                  "--config", pre_cfg,
                                  "--out", str(traj_csv)])
    assert result.exit_code == 0, result.output
    traj = core.read_trajectory_csv(traj_csv)
    assert traj.derivs is not None

    gp_cfg = _write_json(tmp_path / "gp.json", {
        "optimizer": {"max_iters": 3},
    })
    model_path = tmp_path / "gpdphs.json"
    result = runner.invoke(main, ["train-gpdphs", "--trajectory", str(traj_csv),
                                  "--config", gp_cfg,
                                  "--out", str(model_path)])
    assert result.exit_code == 0, result.output

    init_csv = tmp_path / "init.csv"
    with open(init_csv, "w") as fh:
        fh.write("z,p,q\n")
        for z in np.linspace(0, 4, 12):
            r = z - 2.0
            q = -0.2 * r / 0.6 ** 2 * np.exp(-0.5 * (r / 0.6) ** 2)
            fh.write(f"{float(z)!r},0.0,{float(q)!r}\n")
    out_csv = tmp_path / "forecast.csv"
    result = runner.invoke(main, ["predict", "--model", str(model_path),
                                  "--init", str(init_csv), "--dt", "0.02",
                                  "--steps", "10", "--out", str(out_csv)])
    assert result.exit_code == 0, result.output
    forecast = core.read_field_csv(out_csv)
    assert forecast.n_times == 11

    # ensemble mode emits the uncertainty-band columns
    band_csv = tmp_path / "band.csv"
    result = runner.invoke(main, ["predict", "--model", str(model_path),
                                  "--init", str(init_csv), "--dt", "0.02",
                                  "--steps", "5", "--samples", "3",
                                  "--seed", "1", "--out", str(band_csv)])
    assert result.exit_code == 0, result.output
    header = band_csv.read_text().splitlines()[0]
    assert header == "t,z,s_mean,s_std"


def test_run_id_control(runner, tmp_path):
    cfg = _write_json(tmp_path / "exp.json", {"test_regime": "nominal"})
    out_dir = tmp_path / "out"
    result = runner.invoke(main, ["run", "--config", cfg,
                                  "--out-dir", str(out_dir), "--no-figures"])
    assert result.exit_code == 0, result.output
    assert (out_dir / "report.json").exists()
    assert (out_dir / "mse_over_time.csv").exists()
    assert (out_dir / "scores.csv").exists()
    assert not (out_dir / "mse_over_time.png").exists()
    assert "verdict: ID" in result.output
