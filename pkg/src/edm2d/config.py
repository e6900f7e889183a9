"""Run configuration: one JSON document per run.

Unknown keys anywhere in the document are a load error (catches typos).
Cross-field constraints (e.g. the deterministic solver requires lambda = 0)
are validated at load time.  CLI flags may override top-level scalar
fields only.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import DatasetSpec, estimate_sigma_data
from .models import MLPLayout
from .samplers import SOLVERS, StepPlan
from .schedules import NoiseSchedule, sigma_grid
from .smc import POTENTIAL_KINDS, PotentialSpec, constant_gammas, linear_gammas
from .training import TrainConfig

ENV_OUT_DIR = "EDM2D_OUT_DIR"


class ConfigError(ValueError):
    pass


def _check_keys(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")


def _get(obj: dict, key: str, default, types, where: str):
    val = obj.get(key, default)
    if val is None:
        return None
    if not isinstance(val, types):
        raise ConfigError(f"{where}.{key} has wrong type {type(val).__name__}")
    return val


@dataclass
class SamplerConfig:
    solver: str = "heun_ode"
    lam: float = 0.0
    n_samples: int = 4096
    model_kind: str = "energy"


@dataclass
class SMCConfig:
    n_particles: int = 4096
    ess_threshold: float = 0.5
    potential: dict = field(default_factory=lambda: {"kind": "unit"})
    use_oracle: bool = False
    also_plain_composed: bool = False
    model_kind: str = "energy"


@dataclass
class EvalConfig:
    grid_resolution: int = 200
    grid_pad: float = 0.5
    grid_sigma: float = 0.5
    n_projections: int = 128


@dataclass
class DiagnoseConfig:
    n_points: int = 16
    n_probes: int = 32
    n_sigmas: int = 12
    model_kind: str = "teacher"


@dataclass
class RunConfig:
    run_name: str
    out_dir: str
    seed: int
    workers: int
    dataset: DatasetSpec
    schedule: NoiseSchedule
    layout: MLPLayout
    train: TrainConfig
    checkpoint_every: int
    sampler: SamplerConfig
    smc: SMCConfig
    eval: EvalConfig
    diagnose: DiagnoseConfig
    raw: dict

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.run_name

    def step_plan(self) -> StepPlan:
        return StepPlan(sigmas=sigma_grid(self.schedule), lam=self.sampler.lam,
                        solver=self.sampler.solver)

    def potential_spec(self) -> PotentialSpec:
        return parse_potential(self.smc.potential, len(sigma_grid(self.schedule)),
                               self.schedule)


def parse_potential(obj: dict, n_grid: int, schedule: NoiseSchedule) -> PotentialSpec:
    _check_keys(obj, {"kind", "gamma", "variant", "box", "delta",
                      "resample_floor_sigma"}, "smc.potential")
    kind = _get(obj, "kind", "unit", str, "smc.potential")
    if kind not in POTENTIAL_KINDS:
        raise ConfigError(f"unknown potential kind {kind!r}")
    gammas = None
    if "gamma" in obj:
        g = obj["gamma"]
        _check_keys(g, {"kind", "value", "start", "end"}, "smc.potential.gamma")
        gkind = _get(g, "kind", "constant", str, "gamma")
        if gkind == "constant":
            gammas = constant_gammas(n_grid, float(g.get("value", 1.0)))
        elif gkind == "linear":
            gammas = linear_gammas(n_grid, float(g.get("start", 0.05)),
                                   float(g.get("end", 1.0)))
        else:
            raise ConfigError(f"unknown gamma schedule kind {gkind!r}")
    box_lo = box_hi = None
    if "box" in obj:
        box = obj["box"]
        if (not isinstance(box, list) or
                any(not isinstance(b, list) or len(b) != 2 for b in box)):
            raise ConfigError("smc.potential.box must be a list of [lo, hi] pairs")
        box_lo = tuple(-math.inf if b[0] is None else float(b[0]) for b in box)
        box_hi = tuple(math.inf if b[1] is None else float(b[1]) for b in box)
    floor = obj.get("resample_floor_sigma")
    if floor is None:
        # composition runs keep late-time diversity by not resampling at
        # small sigma; other kinds resample all the way down by default
        floor = 0.1 * schedule.sigma_data if kind == "composition_product" else 0.0
    try:
        return PotentialSpec(kind=kind, gammas=gammas,
                             variant=_get(obj, "variant", "", str, "smc.potential"),
                             box_lo=box_lo, box_hi=box_hi,
                             delta=float(obj.get("delta", 0.0)),
                             resample_floor_sigma=float(floor))
    except ValueError as e:
        raise ConfigError(str(e)) from e


def load_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return parse_config(raw, overrides)


def parse_config(raw: dict, overrides: dict | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = dict(raw)
    for key, val in (overrides or {}).items():
        if val is not None:
            if key in raw and isinstance(raw[key], (dict, list)):
                raise ConfigError(f"CLI flags may only override scalar fields ({key})")
            raw[key] = val
    _check_keys(raw, {"run_name", "out_dir", "seed", "workers", "dataset",
                      "schedule", "model", "train", "sampler", "smc", "eval",
                      "diagnose"}, "config")

    run_name = _get(raw, "run_name", "run", str, "config")
    out_dir = _get(raw, "out_dir", None, str, "config")
    if out_dir is None:
        out_dir = os.environ.get(ENV_OUT_DIR, "runs")
    seed = _get(raw, "seed", 0, int, "config")
    workers = _get(raw, "workers", 1, int, "config")
    if workers < 1:
        raise ConfigError("workers must be at least 1")

    dobj = raw.get("dataset", {"kind": "gmm"})
    _check_keys(dobj, {"kind", "params"}, "dataset")
    try:
        dataset = DatasetSpec(kind=_get(dobj, "kind", "gmm", str, "dataset"),
                              params=dobj.get("params", {}))
    except ValueError as e:
        raise ConfigError(str(e)) from e

    sobj = raw.get("schedule", {})
    _check_keys(sobj, {"sigma_min", "sigma_max", "sigma_data", "n_steps", "rho"},
                "schedule")
    sigma_data = sobj.get("sigma_data")
    if sigma_data is None:
        if dataset.kind == "composition_pair":
            sigma_data = 1.0
        else:
            sigma_data = estimate_sigma_data(dataset, seed)
    try:
        schedule = NoiseSchedule(
            sigma_min=float(sobj.get("sigma_min", 0.002)),
            sigma_max=float(sobj.get("sigma_max", 10.0)),
            sigma_data=float(sigma_data),
            n_steps=int(sobj.get("n_steps", 256)),
            rho=float(sobj.get("rho", 7.0)))
    except ValueError as e:
        raise ConfigError(str(e)) from e

    mobj = raw.get("model", {})
    _check_keys(mobj, {"hidden", "depth", "omega0"}, "model")
    layout = MLPLayout(data_dim=2,
                       hidden=int(mobj.get("hidden", 128)),
                       depth=int(mobj.get("depth", 4)),
                       omega0=float(mobj.get("omega0", 6.0)))

    tobj = raw.get("train", {})
    _check_keys(tobj, {"batch_size", "n_iters", "learning_rate", "warmup_iters",
                       "ema_rate", "grad_clip_norm", "loss_kind", "lr_decay",
                       "lr_floor_frac", "checkpoint_every"}, "train")
    clip = tobj.get("grad_clip_norm")
    try:
        train = TrainConfig(
            batch_size=int(tobj.get("batch_size", 256)),
            n_iters=int(tobj.get("n_iters", 20000)),
            learning_rate=float(tobj.get("learning_rate", 1e-3)),
            warmup_iters=int(tobj.get("warmup_iters", 1000)),
            ema_rate=float(tobj.get("ema_rate", 0.999)),
            grad_clip_norm=None if clip is None else float(clip),
            seed=seed,
            loss_kind=_get(tobj, "loss_kind", "dsm", str, "train"),
            lr_decay=_get(tobj, "lr_decay", "cosine", str, "train"),
            lr_floor_frac=float(tobj.get("lr_floor_frac", 0.02)))
    except ValueError as e:
        raise ConfigError(str(e)) from e
    checkpoint_every = int(tobj.get("checkpoint_every", 0))

    pobj = raw.get("sampler", {})
    _check_keys(pobj, {"solver", "lambda", "n_samples", "model_kind"}, "sampler")
    sampler = SamplerConfig(
        solver=_get(pobj, "solver", "heun_ode", str, "sampler"),
        lam=float(pobj.get("lambda", 0.0)),
        n_samples=int(pobj.get("n_samples", 4096)),
        model_kind=_get(pobj, "model_kind", "energy", str, "sampler"))
    if sampler.solver not in SOLVERS:
        raise ConfigError(f"unknown solver {sampler.solver!r}")
    if sampler.solver == "heun_ode" and sampler.lam != 0.0:
        raise ConfigError("heun_ode requires lambda = 0")
    if sampler.model_kind not in ("teacher", "energy"):
        raise ConfigError(f"unknown model kind {sampler.model_kind!r}")

    cobj = raw.get("smc", {})
    _check_keys(cobj, {"n_particles", "ess_threshold", "potential", "use_oracle",
                       "also_plain_composed", "model_kind"}, "smc")
    smc_cfg = SMCConfig(
        n_particles=int(cobj.get("n_particles", 4096)),
        ess_threshold=float(cobj.get("ess_threshold", 0.5)),
        potential=cobj.get("potential", {"kind": "unit"}),
        use_oracle=bool(cobj.get("use_oracle", False)),
        also_plain_composed=bool(cobj.get("also_plain_composed", False)),
        model_kind=_get(cobj, "model_kind", "energy", str, "smc"))
    if not 0 < smc_cfg.ess_threshold <= 1:
        raise ConfigError("smc.ess_threshold must lie in (0, 1]")

    eobj = raw.get("eval", {})
    _check_keys(eobj, {"grid_resolution", "grid_pad", "grid_sigma",
                       "n_projections"}, "eval")
    eval_cfg = EvalConfig(
        grid_resolution=int(eobj.get("grid_resolution", 200)),
        grid_pad=float(eobj.get("grid_pad", 0.5)),
        grid_sigma=float(eobj.get("grid_sigma", 0.5)),
        n_projections=int(eobj.get("n_projections", 128)))

    gobj = raw.get("diagnose", {})
    _check_keys(gobj, {"n_points", "n_probes", "n_sigmas", "model_kind"}, "diagnose")
    diag = DiagnoseConfig(
        n_points=int(gobj.get("n_points", 16)),
        n_probes=int(gobj.get("n_probes", 32)),
        n_sigmas=int(gobj.get("n_sigmas", 12)),
        model_kind=_get(gobj, "model_kind", "teacher", str, "diagnose"))

    cfg = RunConfig(run_name=run_name, out_dir=out_dir, seed=seed, workers=workers,
                    dataset=dataset, schedule=schedule, layout=layout, train=train,
                    checkpoint_every=checkpoint_every, sampler=sampler, smc=smc_cfg,
                    eval=eval_cfg, diagnose=diag, raw=raw)
    cfg.potential_spec()  # validate eagerly
    return cfg
