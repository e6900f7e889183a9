"""Training procedures: teacher denoising regression, the energy-head
variant of the same objective, and score/denoiser distillation, plus the
optimizer, EMA, warm-up, clipping, and the per-sigma-bucket loss trace.

All four losses share the weighting lambda(sigma) so their traces are
directly comparable.  Gradients flow through compiled loss programs; for
the energy-parameterized losses the program contains the recorded
gradient of the scalar head, so the parameter gradient is a
reverse-over-reverse (second order) quantity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape
from .fileio import write_csv_atomic
from .models import MLPLayout, TeacherModel, _coeffs, emit_backbone, emit_scalar_head, init_params
from .rngstreams import stream
from .schedules import NoiseSchedule, loss_weight, perturb, sample_train_sigmas

Array = np.ndarray

LOSS_KINDS = ("dsm", "edsm", "distill_denoiser", "distill_score")
N_SIGMA_BUCKETS = 4


class TrainingDiverged(RuntimeError):
    """Loss or gradient was non-finite on two consecutive iterations."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    n_iters: int = 20000
    learning_rate: float = 1e-3
    warmup_iters: int = 1000
    ema_rate: float = 0.999
    grad_clip_norm: float | None = None
    seed: int = 0
    loss_kind: str = "dsm"
    # "cosine" anneals to lr_floor_frac * learning_rate over n_iters after
    # warm-up; constant LR leaves an optimizer noise floor that dominates
    # the small-sigma fit at this problem scale
    lr_decay: str = "cosine"
    lr_floor_frac: float = 0.02

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.batch_size < 1 or self.n_iters < 0 or self.learning_rate <= 0:
            raise ValueError("batch_size, n_iters, learning_rate must be positive")
        if self.warmup_iters < 1:
            raise ValueError("warmup_iters must be at least 1")
        if not 0.0 <= self.ema_rate < 1.0:
            raise ValueError("ema_rate must lie in [0, 1)")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError(f"unknown lr decay {self.lr_decay!r}")
        if not 0.0 < self.lr_floor_frac <= 1.0:
            raise ValueError("lr_floor_frac must lie in (0, 1]")


@dataclass
class OptimizerState:
    m: Array
    v: Array
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "OptimizerState":
        return cls(m=np.zeros(n), v=np.zeros(n))


def clip_gradient(grads: Array, max_norm: float) -> Array:
    """Rescale to max_norm if the gradient is longer; non-finite is an error."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteError("gradient contains non-finite entries")
    norm = float(np.linalg.norm(grads))
    if norm > max_norm:
        return grads * (max_norm / norm)
    return grads


def optimizer_step(params: Array, grads: Array, state: OptimizerState,
                   config: TrainConfig, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> tuple[Array, OptimizerState]:
    """Adam with bias correction, linear LR warm-up, and optional cosine
    annealing over the configured run length."""
    if not np.all(np.isfinite(grads)):
        raise NonFiniteError("gradient contains non-finite entries")
    step = state.step + 1
    m = beta1 * state.m + (1 - beta1) * grads
    v = beta2 * state.v + (1 - beta2) * grads * grads
    m_hat = m / (1 - beta1 ** step)
    v_hat = v / (1 - beta2 ** step)
    lr = config.learning_rate * min(1.0, step / config.warmup_iters)
    if config.lr_decay == "cosine" and config.n_iters > 0:
        frac = min(1.0, step / config.n_iters)
        cos = 0.5 * (1.0 + math.cos(math.pi * frac))
        lr *= config.lr_floor_frac + (1.0 - config.lr_floor_frac) * cos
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, OptimizerState(m=m, v=v, step=step)


def ema_update(ema_params: Array, params: Array, rate: float) -> Array:
    if not 0.0 <= rate < 1.0:
        raise ValueError("ema rate must lie in [0, 1)")
    return rate * ema_params + (1.0 - rate) * params


# -- compiled loss programs ----------------------------------------------------

class _LossProgram:
    """One recorded tape computing the batch loss, the per-sample weighted
    losses, and the parameter gradient for a fixed (layout, kind, batch)."""

    def __init__(self, layout: MLPLayout, kind: str, batch: int):
        self.kind = kind
        tape = Tape()
        d = layout.data_dim
        xt = tape.input_slot("xt", (batch, d))
        cin = tape.input_slot("cin", (batch,))
        cnoise = tape.input_slot("cnoise", (batch,))
        target = tape.input_slot("target", (batch, d))
        x_pre = ad.rowmul(xt, cin)
        h = emit_backbone(tape, x_pre, cnoise, layout)
        if kind == "distill_score":
            # || grad E + teacher score ||^2, via grad E = -score path
            k1 = tape.input_slot("k1", (batch,))
            k2 = tape.input_slot("k2", (batch,))
            f = emit_scalar_head(h, x_pre)
            energy = ad.add(ad.mul(k1, ad.sqnorm(xt)), ad.scale(ad.mul(k2, f), -1.0))
            (grad_e,) = tape.grad(energy, [xt])
            resid = ad.add(grad_e, target)      # target = teacher score
            per = ad.sqnorm(resid)              # unweighted, per the loss definition
        else:
            cskip = tape.input_slot("cskip", (batch,))
            cout = tape.input_slot("cout", (batch,))
            lam = tape.input_slot("lam", (batch,))
            if kind == "dsm":
                net_out = h
            else:  # edsm / distill_denoiser route through the gradient head
                f = emit_scalar_head(h, x_pre)
                (net_out,) = tape.grad(f, [x_pre])
            denoised = ad.add(ad.rowmul(xt, cskip), ad.rowmul(net_out, cout))
            resid = ad.add(denoised, ad.scale(target, -1.0))  # target = x0 or teacher D
            per = ad.mul(lam, ad.sqnorm(resid))
        loss = ad.batch_mean(per)
        slots = [ad.Ref(tape, i) for i in tape.param_slots]
        pgrads = tape.grad(loss, slots)
        self.tape = tape
        self.loss_ref = loss
        self.per_ref = per
        self.pgrad_refs = pgrads
        self.n_params = layout.n_params

    def __call__(self, params: Array, inputs: dict[str, Array]) -> tuple[float, Array, Array]:
        vals = self.tape.run(inputs, params)
        loss = float(self.tape.value(vals, self.loss_ref))
        per = np.asarray(self.tape.value(vals, self.per_ref)).copy()
        grad = np.zeros(self.n_params)
        for slot_idx, gref in zip(self.tape.param_slots, self.pgrad_refs):
            off, shape = self.tape.aux[slot_idx]
            grad[off:off + math.prod(shape)] += np.asarray(vals[gref.idx]).ravel()
        return loss, per, grad


def _loss_inputs(kind: str, schedule: NoiseSchedule, x0: Array, eps: Array,
                 sigmas: Array, teacher=None) -> dict[str, Array]:
    xt = perturb(x0, sigmas, eps)
    c = _coeffs(sigmas, schedule.sigma_data)
    inputs = {"xt": xt, "cin": c["cin"], "cnoise": c["cnoise"]}
    if kind == "distill_score":
        inputs["k1"] = c["k1"]
        inputs["k2"] = c["k2"]
        inputs["target"] = np.asarray(teacher.score(xt, sigmas))
    else:
        inputs["cskip"] = c["cskip"]
        inputs["cout"] = c["cout"]
        inputs["lam"] = loss_weight(sigmas, schedule.sigma_data)
        if kind == "distill_denoiser":
            inputs["target"] = np.asarray(teacher.denoise(xt, sigmas))
        else:
            inputs["target"] = x0
    return inputs


def _eval_loss(kind: str, layout: MLPLayout, params: Array, schedule: NoiseSchedule,
               x0: Array, eps: Array, sigmas: Array, teacher=None) -> float:
    prog = _LossProgram(layout, kind, len(x0))
    loss, _, _ = prog(params, _loss_inputs(kind, schedule, x0, eps, sigmas, teacher))
    if not np.isfinite(loss):
        raise NonFiniteError("loss is non-finite")
    return loss


def dsm_loss(teacher: TeacherModel, x0: Array, eps: Array, sigmas: Array) -> float:
    """mean lambda(sigma) ||D(x0 + sigma*eps, sigma) - x0||^2."""
    return _eval_loss("dsm", teacher.layout, teacher.params, teacher.schedule,
                      x0, eps, sigmas)


def edsm_loss(student, x0: Array, eps: Array, sigmas: Array) -> float:
    """Same objective with the gradient-head denoiser in place of the
    unconstrained one; the gradient flows through a second-order path."""
    return _eval_loss("edsm", student.layout, student.params, student.schedule,
                      x0, eps, sigmas)


def distill_loss_denoiser(student, teacher, x0: Array, eps: Array, sigmas: Array) -> float:
    """mean lambda(sigma) ||D_student(x_sigma) - D_teacher(x_sigma)||^2."""
    return _eval_loss("distill_denoiser", student.layout, student.params,
                      student.schedule, x0, eps, sigmas, teacher)


def distill_loss_score(student, teacher, x_sigma: Array, sigmas: Array) -> float:
    """mean ||grad_x E(x_sigma) + teacher_score(x_sigma)||^2 (unweighted)."""
    prog = _LossProgram(student.layout, "distill_score", len(x_sigma))
    c = _coeffs(np.asarray(sigmas, dtype=np.float64), student.schedule.sigma_data)
    inputs = {"xt": np.asarray(x_sigma, dtype=np.float64), "cin": c["cin"],
              "cnoise": c["cnoise"], "k1": c["k1"], "k2": c["k2"],
              "target": np.asarray(teacher.score(x_sigma, sigmas))}
    loss, _, _ = prog(student.params, inputs)
    if not np.isfinite(loss):
        raise NonFiniteError("loss is non-finite")
    return loss


# -- loss trace and variance report --------------------------------------------

def sigma_bucket_edges(schedule: NoiseSchedule, n_buckets: int = N_SIGMA_BUCKETS) -> Array:
    """Quantile buckets of the log-uniform training sigma distribution
    (geometric spacing between sigma_min and sigma_max)."""
    ratio = schedule.sigma_max / schedule.sigma_min
    return schedule.sigma_min * ratio ** (np.arange(n_buckets + 1) / n_buckets)


@dataclass
class LossTrace:
    """Append-only per-iteration records of bucketed loss and grad norm."""

    bucket_edges: Array
    iters: list[int] = field(default_factory=list)
    buckets: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)

    def record(self, iteration: int, per_sample: Array, sigmas: Array,
               grad_norm: float) -> None:
        idx = np.clip(np.searchsorted(self.bucket_edges, sigmas, side="right") - 1,
                      0, len(self.bucket_edges) - 2)
        for b in range(len(self.bucket_edges) - 1):
            mask = idx == b
            val = float(np.mean(per_sample[mask])) if mask.any() else float("nan")
            self.iters.append(iteration)
            self.buckets.append(b)
            self.losses.append(val)
            self.grad_norms.append(float(grad_norm))

    def bucket_losses(self, b: int) -> Array:
        vals = np.array([l for bb, l in zip(self.buckets, self.losses) if bb == b])
        return vals[np.isfinite(vals)]

    def to_csv(self, path) -> None:
        write_csv_atomic(path, ["iter", "sigma_bucket", "loss", "grad_norm"],
                         zip(self.iters, self.buckets,
                             map(float, self.losses), map(float, self.grad_norms)))


def loss_variance_report(trace_a: LossTrace, trace_b: LossTrace) -> list[dict]:
    """Per-bucket loss variances and gradient-norm spikes of two runs on
    matched data/sigma streams."""
    if not np.allclose(trace_a.bucket_edges, trace_b.bucket_edges):
        raise ValueError("traces use different sigma buckets")
    rows = []
    for b in range(len(trace_a.bucket_edges) - 1):
        la, lb = trace_a.bucket_losses(b), trace_b.bucket_losses(b)
        var_a = float(np.var(la)) if len(la) > 1 else 0.0
        var_b = float(np.var(lb)) if len(lb) > 1 else 0.0
        rows.append({
            "sigma_bucket": b,
            "sigma_lo": float(trace_a.bucket_edges[b]),
            "sigma_hi": float(trace_a.bucket_edges[b + 1]),
            "var_a": var_a,
            "var_b": var_b,
            "var_ratio_b_over_a": var_b / var_a if var_a > 0 else float("inf"),
            "max_grad_norm_a": float(np.max(trace_a.grad_norms)) if trace_a.grad_norms else 0.0,
            "max_grad_norm_b": float(np.max(trace_b.grad_norms)) if trace_b.grad_norms else 0.0,
        })
    return rows


def variance_report_to_csv(rows: list[dict], path) -> None:
    header = list(rows[0].keys())
    write_csv_atomic(path, header, [[r[k] for k in header] for r in rows])


# -- training loop --------------------------------------------------------------

@dataclass
class TrainResult:
    params: Array
    ema_params: Array
    trace: LossTrace
    n_aborted_iters: int = 0


def train(layout: MLPLayout, schedule: NoiseSchedule, sample_fn, config: TrainConfig,
          teacher=None, init: Array | None = None,
          checkpoint_every: int = 0, on_checkpoint=None) -> TrainResult:
    """Run the configured number of iterations and return final + EMA params.

    sample_fn(n, rng) supplies clean data; the data/noise/sigma stream is
    keyed (seed, "train-data") so two runs with the same seed and batch
    size consume identical batches regardless of loss kind.  Iterations
    with a non-finite loss or gradient are recorded and skipped; two in a
    row raise TrainingDiverged.
    """
    if config.loss_kind in ("distill_denoiser", "distill_score") and teacher is None:
        raise ValueError(f"{config.loss_kind} requires a teacher")
    if init is not None:
        params = np.array(init, dtype=np.float64, copy=True)
    else:
        params = init_params(layout, stream(config.seed, "init"))
    ema = params.copy()
    opt = OptimizerState.zeros(layout.n_params)
    prog = _LossProgram(layout, config.loss_kind, config.batch_size)
    data_rng = stream(config.seed, "train-data")
    trace = LossTrace(bucket_edges=sigma_bucket_edges(schedule))
    aborted = 0
    consecutive_bad = 0
    for it in range(1, config.n_iters + 1):
        x0 = sample_fn(config.batch_size, data_rng)
        eps = data_rng.standard_normal(x0.shape)
        sigmas = sample_train_sigmas(schedule, config.batch_size, data_rng)
        inputs = _loss_inputs(config.loss_kind, schedule, x0, eps, sigmas, teacher)
        loss, per, grad = prog(params, inputs)
        grad_norm = float(np.linalg.norm(grad))
        ok = np.isfinite(loss) and np.isfinite(grad_norm)
        if ok and config.grad_clip_norm is not None:
            grad = clip_gradient(grad, config.grad_clip_norm)
        if ok:
            params, opt = optimizer_step(params, grad, opt, config)
            ema = ema_update(ema, params, config.ema_rate)
            consecutive_bad = 0
        else:
            aborted += 1
            consecutive_bad += 1
            if consecutive_bad >= 2:
                raise TrainingDiverged(f"non-finite loss/gradient at iterations "
                                       f"{it - 1} and {it}")
        trace.record(it, per, sigmas, grad_norm)
        if checkpoint_every and on_checkpoint and it % checkpoint_every == 0:
            on_checkpoint(it, ema)
    return TrainResult(params=params, ema_params=ema, trace=trace,
                       n_aborted_iters=aborted)
