"""Command-line surface wiring the toolkit into reproducible pipelines.

Subcommands: datagen, train, eval, simulate, stability, safety,
calibrate-idm, gradcheck. Exit codes: 0 success, 1 usage error, 2
data/validation error. All randomness flows from ``--seed``; with
``--threads 1`` (the default) identical invocations produce byte-identical
primary outputs.

Heavy imports are deferred into the handlers so ``--threads`` can pin the
BLAS thread pools before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

GRADCHECK_TOL = 1e-4

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


class CliError(Exception):
    """Data or validation failure; mapped to exit code 2."""


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _set_thread_env(n: int) -> None:
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"{text} is not a positive integer")
    return v


def _positive_float(text):
    v = float(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"{text} is not a positive number")
    return v


def _json_text(payload) -> str:
    return json.dumps(payload, sort_keys=True, indent=1) + "\n"


def _emit(payload, out_path) -> None:
    text = _json_text(payload)
    if out_path is not None:
        Path(out_path).write_text(text, encoding="utf-8", newline="\n")
    sys.stdout.write(text)


def _write_manifest(out_dir: Path, command: str, payload: dict) -> None:
    from . import __version__
    body = {"command": command, "version": __version__, **payload}
    (out_dir / "run.json").write_text(_json_text(body), encoding="utf-8",
                                      newline="\n")


def load_run_config(path):
    """Read a JSON run config with optional "model" and "train" sections.

    Unknown keys anywhere are rejected; values are range-checked later by the
    ModelConfig / TrainConfig constructors.
    """
    from . import network as net
    from . import training
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CliError(f"config {path}: top level must be a JSON object")
    unknown = set(cfg) - {"model", "train"}
    if unknown:
        raise CliError(f"config {path}: unknown keys {sorted(unknown)}")
    sections = []
    for name, cls in (("model", net.ModelConfig), ("train", training.TrainConfig)):
        section = cfg.get(name, {})
        if not isinstance(section, dict):
            raise CliError(f"config {path}: {name!r} must be a JSON object")
        allowed = {f.name for f in fields(cls)}
        bad = set(section) - allowed
        if bad:
            raise CliError(f"config {path}: unknown {name} keys {sorted(bad)}")
        sections.append(dict(section))
    return sections[0], sections[1]


def _model_config(model_kw):
    from . import network as net
    try:
        return net.ModelConfig(**model_kw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad model config: {exc}") from exc


def _load_records(path):
    from . import data
    rejects: list = []
    try:
        records = data.load_trajectories(path, rejects)
    except data.DataError as exc:
        raise CliError(str(exc)) from exc
    if rejects:
        print(f"skipped {len(rejects)} invalid platoon(s)", file=sys.stderr)
    if not records:
        raise CliError(f"{path}: no valid platoons")
    return records


def _all_windows(records, config, stride):
    from . import data
    windows = []
    for rec in records:
        windows.extend(data.extract_windows(
            rec, config.history_len, config.horizon, stride))
    return windows


# -- subcommand handlers ------------------------------------------------------------

def _cmd_datagen(args) -> int:
    from . import data
    try:
        records = data.generate_synthetic_platoons(
            args.platoons, n_followers=args.followers,
            duration_s=args.duration_s, seed=args.seed,
            noise_sigma=args.noise_sigma)
    except (ValueError, data.DataError) as exc:
        raise CliError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for rec in records:
        data.write_trajectories([rec], out / f"{rec.platoon_id}.csv")
    _write_manifest(out, "datagen", {
        "platoons": args.platoons, "followers": args.followers,
        "duration_s": args.duration_s, "noise_sigma": args.noise_sigma,
        "seed": args.seed})
    print(f"wrote {len(records)} platoons to {out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from . import network as net
    from . import training
    model_kw, train_kw = ({}, {}) if args.config is None \
        else load_run_config(args.config)
    for name in ("epochs", "batch_size", "lr", "alpha_kl", "seed"):
        value = getattr(args, name)
        if value is not None:
            train_kw[name] = value
    config = _model_config(model_kw)
    try:
        tcfg = training.TrainConfig(**train_kw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad training config: {exc}") from exc

    records = _load_records(args.data)
    if not 0.0 < args.val_ratio < 1.0:
        raise CliError(f"--val-ratio must be in (0, 1), got {args.val_ratio}")
    from . import data
    train_recs, val_recs, _ = data.split_dataset(
        records, (1.0 - args.val_ratio, args.val_ratio, 0.0), seed=tcfg.seed)
    if not train_recs or not val_recs:
        raise CliError(f"{len(records)} platoon(s) cannot fill both splits "
                       f"at --val-ratio {args.val_ratio}")
    train_w = _all_windows(train_recs, config, args.stride)
    val_w = _all_windows(val_recs, config, args.stride)
    if not train_w or not val_w:
        raise CliError("records are too short for the configured "
                       f"history_len={config.history_len} horizon={config.horizon}")

    params = net.init_params(config, seed=tcfg.seed)
    params.norm_mean, params.norm_std = net.fit_normalization(train_w)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = training.train(params, config, train_w, val_w, tcfg,
                            checkpoint_dir=str(out), log_stream=sys.stdout)
    _write_manifest(out, "train", {
        "model": asdict(config), "train": asdict(tcfg),
        "stride": args.stride, "val_ratio": args.val_ratio,
        "train_windows": len(train_w), "val_windows": len(val_w)})
    sys.stdout.write(json.dumps(
        {"best_epoch": result.best_epoch, "best_val": result.best_val,
         "status": result.status}, sort_keys=True) + "\n")
    if result.status != "completed":
        print(f"training {result.status}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def _predictions(params, config, windows, batch_size):
    """Deterministic open-loop predictions pooled over all windows."""
    from . import analysis
    from . import autodiff as ad
    from . import network as net
    from . import training
    import numpy as np
    F = config.horizon
    pv, ps, tv, ts, bv, bs = [], [], [], [], [], []
    with ad.no_grad():
        for hist, lead, targets in training.make_batches(windows, batch_size):
            out = net.model_forward(params, config, hist, lead)
            pv.append(out.result.v.data.reshape(-1, F))
            ps.append(out.result.s.data.reshape(-1, F))
            tv.append(targets[..., 0].reshape(-1, F))
            ts.append(targets[..., 1].reshape(-1, F))
            base_v, base_s = analysis.persistence_prediction(hist, F)
            bv.append(base_v.reshape(-1, F))
            bs.append(base_s.reshape(-1, F))
    cat = lambda chunks: np.concatenate(chunks, axis=0)
    return cat(pv), cat(ps), cat(tv), cat(ts), cat(bv), cat(bs)


def _cmd_eval(args) -> int:
    from . import analysis, training
    params, config = _load_checkpoint(args.checkpoint)
    records = _load_records(args.data)
    windows = _all_windows(records, config, args.stride)
    if not windows:
        raise CliError("no evaluation windows; records are too short")
    pv, ps, tv, ts, bv, bs = _predictions(params, config, windows,
                                          args.batch_size)
    # report the part of the standard lead-time grid the horizon covers
    horizons = tuple(h for h in analysis.HORIZONS_S
                     if int(round(h / config.dt)) <= config.horizon)
    try:
        model_table = analysis.horizon_metrics(pv, tv, ps, ts, dt=config.dt,
                                               horizons=horizons)
        base_table = analysis.horizon_metrics(bv, tv, bs, ts, dt=config.dt,
                                              horizons=horizons)
    except analysis.AnalysisError as exc:
        raise CliError(str(exc)) from exc
    improvement = {}
    for key, row in model_table.items():
        improvement[key] = {
            metric: 100.0 * (1.0 - row[metric] / base)
            for metric, base in base_table[key].items() if base > 0}
    report = {"platoons": len(records), "windows": len(windows),
              "horizons": model_table, "persistence": base_table,
              "improvement_pct": improvement}
    _emit(report, args.out)
    return EXIT_OK


def _load_checkpoint(path):
    from . import training
    try:
        return training.load_checkpoint(path)
    except training.CheckpointError as exc:
        raise CliError(str(exc)) from exc


def _run_to_record(record, run):
    """Rebuild a trajectory record from a closed-loop run (true leader row)."""
    from . import data
    lengths = record.lengths()
    vehicles = [data.VehicleSeries(run.lead_positions, run.lead_speeds,
                                   float(lengths[0]))]
    for i in range(run.speeds.shape[0]):
        vehicles.append(data.VehicleSeries(
            run.positions[i], run.speeds[i], float(lengths[i + 1])))
    return data.PlatoonRecord(record.platoon_id, run.dt, tuple(vehicles))


def _cmd_simulate(args) -> int:
    import numpy as np
    from . import data
    from . import simulate as sim
    params, config = _load_checkpoint(args.checkpoint)
    records = _load_records(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed) if args.stochastic else None
    summary = {}
    sim_records = []
    for rec in records:
        controller = sim.ModelController(params, config, rng=rng)
        try:
            run = sim.closed_loop_simulate(rec, controller,
                                           warmup_steps=args.warmup,
                                           replan_interval=args.replan)
        except sim.SimulationError as exc:
            raise CliError(f"{rec.platoon_id}: {exc}") from exc
        row = {"viable": run.viable, "collision_frame": run.collision_frame,
               "frames": run.duration, "clamp_count": run.clamp_count,
               "rmse_speed": None, "rmse_position": None}
        if run.duration > run.warmup_steps:
            report = sim.compare_runs(rec, run)
            sim.write_deviations_csv(report, out / f"dev_{rec.platoon_id}.csv")
            row["rmse_speed"] = report.rmse_speed
            row["rmse_position"] = report.rmse_position
        sim_records.append(_run_to_record(rec, run))
        summary[rec.platoon_id] = row
    data.write_trajectories(sim_records, out / "simulated.csv")
    viable = sum(1 for row in summary.values() if row["viable"])
    compared = [row["rmse_speed"] for row in summary.values()
                if row["rmse_speed"] is not None]
    overall = {
        "platoons": len(records), "viable": viable,
        "viable_fraction": viable / len(records),
        "mean_rmse_speed": float(np.mean(compared)) if compared else None,
        "platoon": summary}
    _write_manifest(out, "simulate", {
        "warmup": args.warmup, "replan": args.replan,
        "stochastic": args.stochastic, "seed": args.seed})
    _emit(overall, out / "summary.json")
    return EXIT_OK


def _cmd_stability(args) -> int:
    from . import analysis, data
    from . import autodiff as ad
    from . import network as net
    params, config = _load_checkpoint(args.checkpoint)
    records = _load_records(args.data)
    report = {}
    for rec in records:
        windows = data.extract_windows(rec, config.history_len,
                                       config.horizon, stride=1)
        if not windows:
            raise CliError(f"{rec.platoon_id}: too short for a window")
        w = windows[0]    # earliest snapshot: deterministic and warmup-free
        with ad.no_grad():
            out = net.model_forward(params, config, w.history[None],
                                    w.lead_future[None])
        spectrum = analysis.head_to_tail_gain(out.theta.data[0])
        margins = analysis.string_stability_margin(spectrum.theta_used)
        report[rec.platoon_id] = {
            "amplified": spectrum.amplified,
            "peak_gain": spectrum.peak_gain,
            "peak_omega": spectrum.peak_omega,
            "min_margin": float(margins.min()),
            "stable_vehicles": int((margins >= 0.0).sum()),
            "vehicles": int(margins.shape[0])}
        if args.spectra is not None:
            _write_spectrum_csv(Path(args.spectra), rec.platoon_id, spectrum)
    _emit(report, args.out)
    return EXIT_OK


def _write_spectrum_csv(out_dir: Path, platoon_id: str, spectrum) -> None:
    from . import data
    out_dir.mkdir(parents=True, exist_ok=True)
    n = spectrum.per_vehicle.shape[0]
    header = "omega_rad_s,chain_gain," + ",".join(
        f"vehicle_{i}_gain" for i in range(n))
    lines = [header]
    for j in range(spectrum.omega.shape[0]):
        row = [data._fmt(spectrum.omega[j]), data._fmt(spectrum.chain[j])]
        row += [data._fmt(spectrum.per_vehicle[i, j]) for i in range(n)]
        lines.append(",".join(row))
    (out_dir / f"spectrum_{platoon_id}.csv").write_text(
        "\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _pool_safety(records):
    """Finite PET and SSDD samples pooled over platoons."""
    import numpy as np
    from . import analysis
    pet, ssdd = [], []
    for rec in records:
        p = analysis.pet_series(rec.positions(), rec.lengths(), rec.dt)
        pet.append(p[np.isfinite(p)])
        ssdd.append(analysis.ssdd_series(rec.speeds(), rec.gaps()).ravel())
    return np.concatenate(pet), np.concatenate(ssdd)


def _cmd_safety(args) -> int:
    import numpy as np
    from . import analysis
    records = _load_records(args.data)
    try:
        pet, ssdd = _pool_safety(records)
    except analysis.AnalysisError as exc:
        raise CliError(str(exc)) from exc

    def _hist(samples, edges):
        counts, _ = np.histogram(np.clip(samples, edges[0], edges[-1]),
                                 bins=edges)
        return [int(c) for c in counts]

    report = {"data": {
        "platoons": len(records),
        "pet_samples": int(pet.size), "ssdd_samples": int(ssdd.size),
        "pet_hist": _hist(pet, analysis.PET_BIN_EDGES),
        "ssdd_hist": _hist(ssdd, analysis.SSDD_BIN_EDGES),
        "ssdd_unsafe_fraction": float(np.mean(ssdd < 0.0))}}
    if args.sim is not None:
        sim_records = _load_records(args.sim)
        try:
            sim_pet, sim_ssdd = _pool_safety(sim_records)
            report["sim"] = {
                "platoons": len(sim_records),
                "pet_samples": int(sim_pet.size),
                "ssdd_samples": int(sim_ssdd.size),
                "pet_hist": _hist(sim_pet, analysis.PET_BIN_EDGES),
                "ssdd_hist": _hist(sim_ssdd, analysis.SSDD_BIN_EDGES),
                "ssdd_unsafe_fraction": float(np.mean(sim_ssdd < 0.0))}
            report["divergence"] = {
                "pet": analysis.histogram_divergences(
                    pet, sim_pet, analysis.PET_BIN_EDGES),
                "ssdd": analysis.histogram_divergences(
                    ssdd, sim_ssdd, analysis.SSDD_BIN_EDGES)}
        except analysis.AnalysisError as exc:
            raise CliError(str(exc)) from exc
    _emit(report, args.out)
    return EXIT_OK


def _cmd_calibrate_idm(args) -> int:
    import numpy as np
    from . import data, idm
    records = _load_records(args.data)
    report = {}
    for ri, rec in enumerate(records):
        if args.vehicle is not None and \
                not 1 <= args.vehicle <= rec.n_followers:
            raise CliError(f"{rec.platoon_id}: vehicle {args.vehicle} is not "
                           f"a follower (1..{rec.n_followers})")
        indices = [args.vehicle] if args.vehicle is not None \
            else range(1, rec.n_followers + 1)
        rows = {}
        for vi in indices:
            obs = data.follower_observation(rec, vi)
            child = np.random.SeedSequence((args.seed, ri, vi))
            result = idm.calibrate_ga(obs, seed=int(child.generate_state(1)[0]),
                                      budget=args.budget)
            rows[str(vi)] = {"params": asdict(result.params),
                             "gap_rmse": result.fitness,
                             "generations": result.generations_used}
        report[rec.platoon_id] = rows
    _emit(report, args.out)
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from . import network as net
    if args.config is not None:
        model_kw, _ = load_run_config(args.config)
        config = _model_config(model_kw) if model_kw else net.desk_config()
    else:
        config = net.desk_config()
    max_err, n_params = net.gradcheck_model(config, seed=args.seed,
                                            step=args.step)
    max_err = float(max_err)
    _emit({"max_rel_error": max_err, "parameters": int(n_params),
           "tolerance": GRADCHECK_TOL, "passed": bool(max_err < GRADCHECK_TOL)},
          None)
    return EXIT_OK if max_err < GRADCHECK_TOL else EXIT_DATA


# -- parser ---------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="platoonkit",
                     description="platoon car-following toolkit")
    parser.add_argument("--threads", type=_positive_int, default=1,
                        help="BLAS thread cap; determinism needs 1")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic platoon corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--platoons", type=_positive_int, required=True)
    p.add_argument("--followers", type=_positive_int, default=6)
    p.add_argument("--duration-s", type=_positive_float, default=15.0)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_datagen)

    p = sub.add_parser("train", help="train a model on trajectory CSVs")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON run config (model/train sections)")
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--lr", type=_positive_float)
    p.add_argument("--alpha-kl", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--val-ratio", type=float, default=0.1)
    p.add_argument("--stride", type=_positive_int, default=1)
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("eval", help="open-loop horizon metrics vs persistence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--batch-size", type=_positive_int, default=64)
    p.add_argument("--stride", type=_positive_int, default=1)
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("simulate", help="closed-loop re-simulation of platoons")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--warmup", type=_positive_int)
    p.add_argument("--replan", type=_positive_int)
    p.add_argument("--stochastic", action="store_true",
                   help="sample latents instead of using their means")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_simulate)

    p = sub.add_parser("stability", help="string-stability spectra per platoon")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--spectra", help="directory for per-platoon spectrum CSVs")
    p.set_defaults(handler=_cmd_stability)

    p = sub.add_parser("safety", help="PET/SSDD histograms and divergences")
    p.add_argument("--data", required=True)
    p.add_argument("--sim", help="simulated trajectories to compare against")
    p.add_argument("--out")
    p.set_defaults(handler=_cmd_safety)

    p = sub.add_parser("calibrate-idm", help="fit IDM parameters per follower")
    p.add_argument("--data", required=True)
    p.add_argument("--vehicle", type=_positive_int,
                   help="calibrate one follower index instead of all")
    p.add_argument("--budget", type=_positive_int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(handler=_cmd_calibrate_idm)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--config", help="JSON config; desk-scale default")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=_positive_float, default=1e-6)
    p.set_defaults(handler=_cmd_gradcheck)
    return parser


def _data_error_types():
    from . import analysis, data, simulate, training
    return (CliError, data.DataError, training.CheckpointError,
            simulate.SimulationError, analysis.AnalysisError,
            ValueError, OSError)


def dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:     # --help
        return int(exc.code or 0)
    _set_thread_env(args.threads)
    try:
        return args.handler(args)
    except Exception as exc:
        if isinstance(exc, _data_error_types()):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
        raise


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
