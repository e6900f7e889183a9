"""Command-line entry point.

Every command is a pure function of (config file, input checkpoints, seed):
re-runs produce identical outputs.  Outputs land under
<out_dir>/<run_name>/{checkpoints,traces,samples,grids,reports}/ with a
manifest recording the config hash and seed.

Exit codes: 0 success, 2 config error, 3 numeric divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import functools
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import diagnostics, metrics, samplers, smc, training
from .autodiff import NonFiniteError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .datasets import composition_pair, oracle_for, product_gmm, sample as sample_dataset
from .fileio import read_csv, write_csv_atomic, write_text_atomic
from .models import EnergyModel, TeacherModel
from .rngstreams import stream
from .schedules import sigma_grid
from .smc import WeightCollapseError, composed_score

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _write_manifest(cfg: RunConfig, command: str) -> None:
    canonical = json.dumps(cfg.raw, sort_keys=True).encode()
    manifest = {
        "command": command,
        "config_sha256": hashlib.sha256(canonical).hexdigest(),
        "seed": cfg.seed,
        "run_name": cfg.run_name,
    }
    write_text_atomic(cfg.run_dir / "manifest.json", json.dumps(manifest, indent=2) + "\n")


def _write_samples_csv(path, xs: np.ndarray) -> None:
    write_csv_atomic(path, ["x1", "x2"][:xs.shape[1] if xs.size else 2],
                     [[float(v) for v in row] for row in xs])


def _load_model(path, kind: str, cfg: RunConfig):
    import dataclasses
    layout, params, sigma_data = load_checkpoint(path)
    schedule = dataclasses.replace(cfg.schedule, sigma_data=sigma_data)
    if kind == "teacher":
        return TeacherModel(layout, params, schedule)
    return EnergyModel(layout, params, schedule)


def _data_fn(cfg: RunConfig):
    return functools.partial(sample_dataset, cfg.dataset)


def _run_training(cfg: RunConfig, command: str, loss_kind: str,
                  teacher_path: str | None = None) -> None:
    import dataclasses
    train_cfg = dataclasses.replace(cfg.train, loss_kind=loss_kind)
    teacher = None
    init = None
    if loss_kind in ("distill_denoiser", "distill_score"):
        if teacher_path is None:
            raise ConfigError("distillation requires --teacher <checkpoint>")
        teacher = _load_model(teacher_path, "teacher", cfg)
        if teacher.layout != cfg.layout:
            raise ConfigError("teacher checkpoint layout does not match config model")
        init = teacher.params
        schedule = teacher.schedule
    else:
        schedule = cfg.schedule
    ckpt_dir = cfg.run_dir / "checkpoints"

    def on_checkpoint(it, ema):
        save_checkpoint(ckpt_dir / f"iter_{it:07d}.ckpt", cfg.layout, ema,
                        schedule.sigma_data)

    result = training.train(cfg.layout, schedule, _data_fn(cfg), train_cfg,
                            teacher=teacher, init=init,
                            checkpoint_every=cfg.checkpoint_every,
                            on_checkpoint=on_checkpoint)
    save_checkpoint(ckpt_dir / "ema.ckpt", cfg.layout, result.ema_params,
                    schedule.sigma_data)
    save_checkpoint(ckpt_dir / "last.ckpt", cfg.layout, result.params,
                    schedule.sigma_data)
    result.trace.to_csv(cfg.run_dir / "traces" / f"{loss_kind}.csv")
    if loss_kind in ("edsm", "distill_denoiser", "distill_score"):
        model = EnergyModel(cfg.layout, result.ema_params, schedule)
        s = cfg.eval.grid_sigma
        data = _data_fn(cfg)(4096, stream(cfg.seed, "grid-extent"))
        grid = metrics.GridSpec.around(data, pad=cfg.eval.grid_pad,
                                       resolution=cfg.eval.grid_resolution)
        metrics.export_density_grid(lambda p: -np.asarray(model.energy(p, s)),
                                    grid, cfg.run_dir / "grids" / "log_density.csv")
    _write_manifest(cfg, command)
    print(f"{command}: wrote {ckpt_dir / 'ema.ckpt'}")


def cmd_train_teacher(cfg: RunConfig, args) -> None:
    _run_training(cfg, "train-teacher", "dsm")


def cmd_train_edsm(cfg: RunConfig, args) -> None:
    _run_training(cfg, "train-edsm", "edsm")


def cmd_distill(cfg: RunConfig, args) -> None:
    kind = cfg.train.loss_kind
    if kind not in ("distill_denoiser", "distill_score"):
        kind = "distill_denoiser"
    _run_training(cfg, "distill", kind, teacher_path=args.teacher)


def cmd_sample(cfg: RunConfig, args) -> None:
    model = _load_model(args.checkpoint, cfg.sampler.model_kind, cfg)
    n = cfg.sampler.n_samples if args.n is None else args.n
    plan = cfg.step_plan()
    xs = samplers.generate(model.score, model.schedule, n, cfg.seed, plan=plan)
    _write_samples_csv(cfg.run_dir / "samples" / "samples.csv", xs)
    _write_manifest(cfg, "sample")
    print(f"sample: wrote {n} samples to {cfg.run_dir / 'samples' / 'samples.csv'}")


def _smc_models(cfg: RunConfig, args):
    spec = cfg.potential_spec()
    if cfg.smc.use_oracle:
        if cfg.dataset.kind == "composition_pair":
            p1, p2 = composition_pair(cfg.dataset.params.get("variant", "cross"))
            return spec, [p1, p2]
        oracle = oracle_for(cfg.dataset)
        if oracle is None:
            raise ConfigError(f"dataset kind {cfg.dataset.kind!r} has no analytic oracle")
        return spec, [oracle]
    paths = args.checkpoint or []
    if len(paths) < max(spec.n_models(), 1):
        raise ConfigError(f"{spec.kind} needs {max(spec.n_models(), 1)} checkpoint(s)")
    return spec, [_load_model(p, cfg.smc.model_kind, cfg) for p in paths]


def cmd_smc(cfg: RunConfig, args) -> None:
    spec, models = _smc_models(cfg, args)
    grid = sigma_grid(cfg.schedule)
    if spec.kind == "composition_product":
        score_fn = functools.partial(composed_score, models)
    else:
        score_fn = models[0].score
    denoiser_fn = models[0].denoise if spec.needs_denoiser() else None
    ens, report = smc.smc_run(score_fn, grid, spec, models, cfg.smc.n_particles,
                              cfg.smc.ess_threshold, cfg.seed,
                              denoiser_fn=denoiser_fn)
    xs = smc.emit_samples(ens, cfg.seed)
    _write_samples_csv(cfg.run_dir / "samples" / "smc_samples.csv", xs)
    report.to_csv(cfg.run_dir / "reports" / "smc_report.csv")
    if cfg.smc.also_plain_composed:
        plan = samplers.StepPlan(sigmas=grid, lam=1.0, solver="euler_sde")
        plain = samplers.generate(score_fn, cfg.schedule, cfg.smc.n_particles,
                                  cfg.seed, plan=plan)
        _write_samples_csv(cfg.run_dir / "samples" / "plain_samples.csv", plain)
    _write_manifest(cfg, "smc")
    print(f"smc: wrote {cfg.smc.n_particles} samples, "
          f"log Z = {report.log_z:.4f}")


def cmd_diagnose(cfg: RunConfig, args) -> None:
    model = _load_model(args.checkpoint, cfg.diagnose.model_kind, cfg)
    full = sigma_grid(cfg.schedule)[:-1]
    idx = np.unique(np.linspace(0, len(full) - 1, cfg.diagnose.n_sigmas).astype(int))
    rows = diagnostics.asymmetry_sweep(model, _data_fn(cfg), full[idx][::-1],
                                       cfg.diagnose.n_points,
                                       cfg.diagnose.n_probes, cfg.seed)
    diagnostics.sweep_to_csv(rows, cfg.run_dir / "reports" / "asymmetry.csv")
    _write_manifest(cfg, "diagnose")
    print(f"diagnose: wrote {cfg.run_dir / 'reports' / 'asymmetry.csv'}")


def cmd_eval(cfg: RunConfig, args) -> None:
    out = cfg.run_dir / "reports"
    if args.traces:
        a, b = args.traces
        trace_a = _trace_from_csv(a)
        trace_b = _trace_from_csv(b)
        rows = training.loss_variance_report(trace_a, trace_b)
        training.variance_report_to_csv(rows, out / "variance_report.csv")
        print(f"eval: wrote {out / 'variance_report.csv'}")
    elif args.samples:
        xs = _samples_from_csv(args.samples)
        if args.against:
            ys = _samples_from_csv(args.against)
        else:
            oracle = oracle_for(cfg.dataset)
            if oracle is None:
                raise ConfigError("no --against file and dataset has no oracle")
            ys = oracle.sample(len(xs), stream(cfg.seed, "eval-reference"))
        rng = stream(cfg.seed, "eval-slices")
        w1 = metrics.sliced_w1(xs, ys, cfg.eval.n_projections, rng)
        mean, cov = metrics.moments(xs)
        report = {"sliced_w1": w1, "mean": mean.tolist(), "cov": cov.tolist(),
                  "n": len(xs)}
        write_text_atomic(out / "eval.json", json.dumps(report, indent=2) + "\n")
        print(f"eval: sliced_w1 = {w1:.6f} -> {out / 'eval.json'}")
    else:
        raise ConfigError("eval needs --samples or --traces")
    _write_manifest(cfg, "eval")


def _trace_from_csv(path) -> training.LossTrace:
    header, rows = read_csv(path)
    if header != ["iter", "sigma_bucket", "loss", "grad_norm"]:
        raise ConfigError(f"{path}: not a loss trace CSV")
    trace = training.LossTrace(bucket_edges=np.array([]))
    buckets = sorted({int(r[1]) for r in rows})
    trace.bucket_edges = np.arange(len(buckets) + 1, dtype=np.float64)
    for r in rows:
        trace.iters.append(int(r[0]))
        trace.buckets.append(int(r[1]))
        trace.losses.append(float(r[2]))
        trace.grad_norms.append(float(r[3]))
    return trace


def _samples_from_csv(path) -> np.ndarray:
    header, rows = read_csv(path)
    if header[:2] != ["x1", "x2"]:
        raise ConfigError(f"{path}: not a samples CSV")
    return np.array([[float(v) for v in r] for r in rows])


def cmd_make_data(cfg: RunConfig, args) -> None:
    n = args.n or cfg.sampler.n_samples
    out = cfg.run_dir / "samples"
    if cfg.dataset.kind == "composition_pair":
        p1, p2 = composition_pair(cfg.dataset.params.get("variant", "cross"))
        prod = product_gmm(p1, p2)
        for name, g in [("factor1", p1), ("factor2", p2), ("product", prod)]:
            _write_samples_csv(out / f"{name}.csv",
                               g.sample(n, stream(cfg.seed, "make-data", name)))
        print(f"make-data: wrote factor1/factor2/product ({n} each) to {out}")
    else:
        xs = sample_dataset(cfg.dataset, n, stream(cfg.seed, "make-data"))
        _write_samples_csv(out / "data.csv", xs)
        print(f"make-data: wrote {n} samples to {out / 'data.csv'}")
    _write_manifest(cfg, "make-data")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edm2d",
        description="Train, distill, sample, and control 2D energy diffusion models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to the run config JSON")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--run-name", default=None)
        p.add_argument("--out-dir", default=None)
        p.add_argument("--workers", type=int, default=None)

    common(sub.add_parser("train-teacher", help="denoising regression for the teacher"))
    common(sub.add_parser("train-edsm", help="energy-head denoising regression"))
    p = sub.add_parser("distill", help="distill a teacher into an energy model")
    common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p = sub.add_parser("sample", help="generate samples from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=None)
    p = sub.add_parser("smc", help="potential-controlled generation")
    common(p)
    p.add_argument("--checkpoint", action="append", default=None)
    p = sub.add_parser("diagnose", help="Jacobian-asymmetry sweep")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("eval", help="compare samples or loss traces")
    common(p)
    p.add_argument("--samples", default=None)
    p.add_argument("--against", default=None)
    p.add_argument("--traces", nargs=2, default=None)
    p = sub.add_parser("make-data", help="write dataset samples as CSV")
    common(p)
    p.add_argument("--n", type=int, default=None)
    return parser


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "train-edsm": cmd_train_edsm,
    "distill": cmd_distill,
    "sample": cmd_sample,
    "smc": cmd_smc,
    "diagnose": cmd_diagnose,
    "eval": cmd_eval,
    "make-data": cmd_make_data,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        overrides = {"seed": args.seed, "run_name": args.run_name,
                     "out_dir": args.out_dir, "workers": args.workers}
        cfg = load_config(args.config, overrides)
        COMMANDS[args.command](cfg, args)
        return EXIT_OK
    except (ConfigError, CheckpointError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (training.TrainingDiverged, WeightCollapseError, NonFiniteError) as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
