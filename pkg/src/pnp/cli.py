"""Command-line interface.

Subcommands mirror the pipeline stages: simulate the two regimes,
preprocess a field into states, train the nominal and physics models,
calibrate and run the conformal gate, forecast, and run the whole
experiment.
"""

from __future__ import annotations

import json
from pathlib import Path

import click
import numpy as np

from pnp import conformal, gpdphs, integrate, nominal, preprocess, simulate
from pnp import core
from pnp.core import PnpError, SpatialGrid, StateSnapshot


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _grid_from_config(raw: dict) -> SpatialGrid:
    return SpatialGrid(raw.get("n_nodes", 50), raw.get("z_min", 0.0),
                       raw.get("z_max", 1.0))


class _Group(click.Group):
    """Translates package errors into clean CLI failures (exit code 1)."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except PnpError as exc:
            raise click.ClickException(str(exc)) from exc


@click.group(cls=_Group)
def main():
    """Conformal OOD gating with a physics-consistent GP fallback."""


@main.command(name="simulate")
@click.option("--system", type=click.Choice(["wave", "rigid"]), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def simulate_cmd(system, config_path, seed, out_path):
    """Generate a ground-truth deflection field as CSV (t,z,s)."""
    raw = _load_json(config_path)
    grid = _grid_from_config(raw)
    if system == "wave":
        profile_raw = raw.get("initial_profile", {"kind": "half_sine", "amplitude": 1.0})
        if profile_raw.get("kind") == "gaussian_bump":
            profile = simulate.GaussianBump(profile_raw["center"],
                                            profile_raw["width"],
                                            profile_raw.get("amplitude", 1.0))
        else:
            profile = simulate.HalfSinePluck(profile_raw.get("amplitude", 1.0))
        params = simulate.WaveParams(
            grid=grid, dt=raw["dt"], n_steps=raw["n_steps"],
            wave_speed_sq=raw.get("wave_speed_sq", 1.0),
            damping=raw.get("damping", 0.0),
            initial_profile=profile)
        field = simulate.simulate_wave(params, seed)
    else:
        params = simulate.RigidOscillatorParams(
            grid=grid, dt=raw["dt"], n_steps=raw["n_steps"],
            angular_freq=raw.get("angular_freq", 1.0),
            amplitude=raw.get("amplitude", 1.0),
            noise_std=raw.get("noise_std", 0.0))
        field = simulate.simulate_rigid(params, seed)
    noise_std = raw.get("obs_noise_std", 0.0)
    if noise_std:
        field = simulate.add_observation_noise(field, noise_std, seed + 1)
    core.write_field_csv(field, out_path)
    click.echo(f"wrote {field.n_times}x{field.grid.n_nodes} field to {out_path}")


@main.command(name="preprocess")
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def preprocess_cmd(in_path, config_path, out_path):
    """Smooth a field and emit states with derivatives (t,z,p,q,dpdt,dqdt)."""
    raw = _load_json(config_path)
    field = core.read_field_csv(in_path)
    cfg = preprocess.SmootherConfig(**raw.get("smoother", {}))
    stride = raw.get("time_stride", 1)
    work = preprocess.kalman_smooth(field, cfg)
    gp = preprocess.fit_surface_gp(preprocess.subsample_time(work, stride), cfg)
    n_e = raw.get("n_spatial_points", field.grid.n_nodes)
    # subsampling may drop the last few frames; stay inside the fitted span
    times = field.times[field.times <= gp.t_max]
    traj = preprocess.augment_spatial(gp, times, n_e)
    core.write_trajectory_csv(traj, out_path)
    click.echo(f"wrote {len(traj)} states on {n_e} nodes to {out_path}")


@main.command(name="train-nominal")
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def train_nominal_cmd(in_path, config_path, out_path):
    """Fit the linear autoregressive reference predictor."""
    raw = _load_json(config_path)
    field = core.read_field_csv(in_path)
    cfg = nominal.PredictorConfig(
        history_h=raw.get("history_h", 10),
        horizon_w=raw.get("horizon_w", 5),
        ridge_lambda=raw.get("ridge_lambda", 1e-6),
        n_nodes=field.grid.n_nodes)
    model = nominal.train_nominal(field, cfg, split=raw.get("split", 1.0))
    nominal.save_model(model, out_path)
    click.echo(f"trained nominal model (train RMSE {model.train_rmse:.3e}) "
               f"-> {out_path}")


@main.command(name="calibrate")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--calib-data", "calib_path", type=click.Path(exists=True), required=True)
@click.option("--delta", type=float, default=0.1, show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def calibrate_cmd(model_path, calib_path, delta, out_path):
    """Calibrate the conformal threshold on held-out nominal data."""
    model = nominal.load_model(model_path)
    field = core.read_field_csv(calib_path)
    scores = conformal.window_scores(model, field)
    calib = conformal.calibrate(scores, delta)
    conformal.save_calibration(calib, out_path)
    click.echo(f"calibrated on {scores.size} windows: C = {calib.threshold_C:.6g}")


@main.command(name="detect")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--calib", "calib_path", type=click.Path(exists=True), required=True)
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
@click.option("--report", "report_path", type=click.Path(), required=True)
def detect_cmd(model_path, calib_path, in_path, report_path):
    """Score sliding windows of new data and decide ID vs OOD."""
    model = nominal.load_model(model_path)
    calib = conformal.load_calibration(calib_path)
    field = core.read_field_csv(in_path)
    gate = conformal.gate_trajectory(model, field, calib)
    payload = {
        "scores": gate.scores.tolist(),
        "threshold_C": gate.threshold_C,
        "flags": gate.flags.astype(int).tolist(),
        "flagged_fraction": gate.flagged_fraction,
        "verdict": gate.verdict,
    }
    with open(report_path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
    click.echo(f"verdict: {gate.verdict} "
               f"({gate.flagged_fraction:.0%} of windows flagged)")


@main.command(name="train-gpdphs")
@click.option("--trajectory", "traj_path", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def train_gpdphs_cmd(traj_path, config_path, out_path):
    """Train the physics-consistent GP on a state trajectory."""
    raw = _load_json(config_path)
    traj = core.read_trajectory_csv(traj_path)
    X = traj.stacked_states()
    Xdot = traj.stacked_derivs()
    if "init" in raw:
        init_raw = dict(raw["init"])
        if isinstance(init_raw.get("noise_var"), list):
            init_raw["noise_var"] = tuple(init_raw["noise_var"])
        init = gpdphs.DPHSKernelParams(**init_raw)
    else:
        init = gpdphs.default_kernel_init(X, Xdot, traj.grid,
                                          split_noise=raw.get("split_noise", True))
    opt = gpdphs.OptimizerConfig(**raw.get("optimizer", {}))
    model = gpdphs.train(X, Xdot, traj.grid, init, opt)
    gpdphs.save_model(model, out_path)
    click.echo(f"trained GP-dPHS: damping c = {model.params.damping_c:.4g}, "
               f"final NLML = {model.nlml_trace[-1]:.2f}")


@main.command(name="predict")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--init", "init_path", type=click.Path(exists=True), required=True,
              help="CSV snapshot with header z,p,q")
@click.option("--dt", type=float, required=True)
@click.option("--steps", type=int, required=True)
@click.option("--samples", type=int, default=0, show_default=True,
              help="ensemble size; 0 = posterior mean only")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def predict_cmd(model_path, init_path, dt, steps, samples, seed, out_path):
    """Integrate the learned dynamics and emit the deflection forecast."""
    model = gpdphs.load_model(model_path)
    rows = np.genfromtxt(init_path, delimiter=",", names=True)
    x0 = StateSnapshot(np.atleast_1d(rows["p"]), np.atleast_1d(rows["q"]))
    cfg = integrate.IntegratorConfig(dt=dt, n_steps=steps)
    grid = model.operator.grid
    if samples <= 0:
        traj = integrate.integrate(model.mean_field(), x0, cfg, grid=grid)
        field = integrate.predict_deflection(traj)
        core.write_field_csv(field, out_path)
    else:
        ensemble = []
        for k in range(samples):
            fn = gpdphs.sample_field(model, seed + k)
            traj = integrate.integrate(fn, x0, cfg, grid=grid)
            ensemble.append(integrate.predict_deflection(traj).values)
        stack = np.array(ensemble)
        mean = stack.mean(axis=0)
        std = stack.std(axis=0)
        times = dt * np.arange(steps + 1)
        with open(out_path, "w") as fh:
            fh.write("t,z,s_mean,s_std\n")
            for i, t in enumerate(times):
                for j, z in enumerate(grid.nodes):
                    fh.write(f"{float(t)!r},{float(z)!r},"
                             f"{float(mean[i, j])!r},{float(std[i, j])!r}\n")
    click.echo(f"wrote forecast to {out_path}")


@main.command(name="run")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--out-dir", type=click.Path(), required=True)
@click.option("--figures/--no-figures", default=True, show_default=True)
def run_cmd(config_path, out_dir, figures):
    """Run the full experiment; exit code 0 iff all stages succeed."""
    from pnp import pipeline
    cfg = pipeline.ExperimentConfig.from_dict(_load_json(config_path))
    report = pipeline.run_experiment(cfg, out_dir=out_dir, figures=figures)
    click.echo(f"verdict: {report.verdict}")
    for method, agg in sorted(report.aggregate_mse.items()):
        click.echo(f"  {method} aggregate MSE: {agg:.6g}")
    click.echo(f"outputs in {out_dir}")


if __name__ == "__main__":
    main()
