"""Sine-MLP backbone, unconstrained teacher denoiser, and the energy model.

The teacher wraps the raw network h(x, t) with the usual input/output/skip
scalings: D(x, sigma) = c_skip*x + c_out*h(c_in*x, c_noise).

The energy model routes the same backbone through a scalar head
F(x_pre, t) = <h(x_pre, t), x_pre> and defines its denoiser via the
gradient of F, so its score is the exact negative gradient of a scalar
energy by construction.  grad F is always computed by the differentiation
engine; the hand formula grad F = h + J_h^T x_pre serves only as a test
oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Ref, Tape
from .schedules import NoiseSchedule

Array = np.ndarray


@dataclass(frozen=True)
class MLPLayout:
    """Shapes of the sine-MLP: d+1 inputs (coordinates + noise embedding),
    `depth` sine layers of width `hidden`, and an affine head back to d."""

    data_dim: int = 2
    hidden: int = 128
    depth: int = 4
    omega0: float = 6.0

    def param_specs(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(name, shape, offset) for every parameter tensor, in flat order."""
        h, d = self.hidden, self.data_dim
        specs: list[tuple[str, tuple[int, ...]]] = [
            ("w0x", (h, d)), ("w0t", (h,)), ("b0", (h,))]
        for k in range(1, self.depth):
            specs += [(f"w{k}", (h, h)), (f"b{k}", (h,))]
        specs += [("w_out", (d, h)), ("b_out", (d,))]
        out = []
        offset = 0
        for name, shape in specs:
            out.append((name, shape, offset))
            offset += math.prod(shape)
        return out

    @property
    def n_params(self) -> int:
        last_name, last_shape, last_off = self.param_specs()[-1]
        return last_off + math.prod(last_shape)

    @property
    def widths(self) -> list[int]:
        return [self.data_dim + 1] + [self.hidden] * self.depth + [self.data_dim]


def init_params(layout: MLPLayout, rng: np.random.Generator) -> Array:
    """Sine-net initialization.

    First layer weights are uniform in [-1/fan_in, 1/fan_in] scaled by
    omega0 (fan_in counts the noise input), with phases uniform in
    [-pi, pi]; deeper and output layers are uniform in
    [-sqrt(6/fan_in)/omega0, sqrt(6/fan_in)/omega0] with zero bias.
    """
    params = np.zeros(layout.n_params)
    fan_in0 = layout.data_dim + 1
    w0 = layout.omega0
    for name, shape, offset in layout.param_specs():
        n = math.prod(shape)
        if name in ("w0x", "w0t"):
            vals = rng.uniform(-1.0, 1.0, n) * (w0 / fan_in0)
        elif name == "b0":
            vals = rng.uniform(-np.pi, np.pi, n)
        elif name.startswith("w"):
            bound = math.sqrt(6.0 / shape[-1]) / w0
            vals = rng.uniform(-bound, bound, n)
        else:
            vals = np.zeros(n)
        params[offset:offset + n] = vals
    return params


def emit_backbone(tape: Tape, x: Ref, t: Ref, layout: MLPLayout) -> Ref:
    """Record h(x, t) on the tape.  x: (B, d) preconditioned input, t: (B,)."""
    slots = {name: tape.param_slot(off, shape)
             for name, shape, off in layout.param_specs()}
    batch = x.shape[0]
    h = ad.bias(ad.linear(x, slots["w0x"]), slots["b0"])
    h = ad.add(h, ad.rowmul(ad.bcast(slots["w0t"], batch), t))
    h = ad.sin(h)
    for k in range(1, layout.depth):
        h = ad.sin(ad.bias(ad.linear(h, slots[f"w{k}"]), slots[f"b{k}"]))
    return ad.bias(ad.linear(h, slots["w_out"]), slots["b_out"])


def emit_scalar_head(h: Ref, x_pre: Ref) -> Ref:
    """F = <h, x_pre> per sample: (B, d), (B, d) -> (B,)."""
    return ad.rowsum(ad.mul(h, x_pre))


def _as_batch(x) -> tuple[Array, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise ValueError(f"expected a point or a batch of points, got shape {x.shape}")
    return x, False


def _sigma_vec(sigma, batch: int) -> Array:
    s = np.asarray(sigma, dtype=np.float64)
    if s.ndim == 0:
        s = np.full(batch, float(s))
    if s.shape != (batch,):
        raise ValueError(f"sigma shape {s.shape} incompatible with batch {batch}")
    if np.any(s <= 0):
        raise ValueError("sigma must be positive for model evaluation")
    return s


def _coeffs(sigma: Array, sigma_data: float) -> dict[str, Array]:
    s2 = sigma * sigma + sigma_data * sigma_data
    c_skip = sigma_data * sigma_data / s2
    c_out = sigma * sigma_data / np.sqrt(s2)
    c_in = 1.0 / np.sqrt(s2)
    c_noise = np.log(sigma) / 4.0
    return {
        "cin": c_in, "cnoise": c_noise, "cskip": c_skip, "cout": c_out,
        "k1": (1.0 - c_skip) / (2.0 * sigma * sigma),
        "k2": c_out / (c_in * sigma * sigma),
    }


class _Compiled:
    """One recorded tape plus the refs callers read from it."""

    def __init__(self, tape: Tape, refs: dict[str, Ref]):
        self.tape = tape
        self.refs = refs


class TeacherModel:
    """Unconstrained preconditioned denoiser around the sine MLP."""

    def __init__(self, layout: MLPLayout, params: Array, schedule: NoiseSchedule):
        if params.shape != (layout.n_params,):
            raise ValueError("parameter vector does not match layout")
        self.layout = layout
        self.params = np.asarray(params, dtype=np.float64)
        self.schedule = schedule
        self._cache: dict[tuple, _Compiled] = {}

    @property
    def min_sigma(self) -> float:
        return self.schedule.sigma_min

    def _compiled(self, batch: int, variant: str) -> _Compiled:
        key = (batch, variant)
        if key not in self._cache:
            tape = Tape()
            d = self.layout.data_dim
            x = tape.input_slot("x", (batch, d))
            cin = tape.input_slot("cin", (batch,))
            cnoise = tape.input_slot("cnoise", (batch,))
            cskip = tape.input_slot("cskip", (batch,))
            cout = tape.input_slot("cout", (batch,))
            x_pre = ad.rowmul(x, cin)
            h = emit_backbone(tape, x_pre, cnoise, self.layout)
            denoised = ad.add(ad.rowmul(x, cskip), ad.rowmul(h, cout))
            refs = {"x": x, "denoised": denoised}
            if variant == "vjp":
                cot = tape.input_slot("cot", (batch, d))
                proj = ad.rowsum(ad.mul(denoised, cot))
                (refs["vjp_x"],) = tape.grad(proj, [x])
            self._cache[key] = _Compiled(tape, refs)
        return self._cache[key]

    def _run(self, x: Array, sigma, variant: str = "plain",
             extra: dict[str, Array] | None = None):
        xb, single = _as_batch(x)
        s = _sigma_vec(sigma, xb.shape[0])
        c = _coeffs(s, self.schedule.sigma_data)
        comp = self._compiled(xb.shape[0], variant)
        inputs = {"x": xb, "cin": c["cin"], "cnoise": c["cnoise"],
                  "cskip": c["cskip"], "cout": c["cout"]}
        if extra:
            inputs.update(extra)
        vals = comp.tape.run(inputs, self.params)
        return comp, vals, s, single

    def denoise(self, x, sigma) -> Array:
        comp, vals, _, single = self._run(x, sigma)
        out = comp.tape.value(vals, comp.refs["denoised"], check_finite=True)
        return out[0] if single else out

    def score(self, x, sigma) -> Array:
        comp, vals, s, single = self._run(x, sigma)
        xb, _ = _as_batch(x)
        d = comp.tape.value(vals, comp.refs["denoised"], check_finite=True)
        out = (d - xb) / (s * s)[:, None]
        return out[0] if single else out

    def score_jvp(self, x, sigma, direction) -> Array:
        """J_score @ v by a forward sweep over the denoiser tape."""
        xb, single = _as_batch(x)
        vb, _ = _as_batch(direction)
        s = _sigma_vec(sigma, xb.shape[0])
        c = _coeffs(s, self.schedule.sigma_data)
        comp = self._compiled(xb.shape[0], "plain")
        inputs = {"x": xb, "cin": c["cin"], "cnoise": c["cnoise"],
                  "cskip": c["cskip"], "cout": c["cout"]}
        _, tans = comp.tape.run_jvp(inputs, self.params, tangents={"x": vb})
        out = (tans[comp.refs["denoised"].idx] - vb) / (s * s)[:, None]
        return out[0] if single else out

    def score_vjp(self, x, sigma, cotangent) -> Array:
        """v^T J_score by a recorded reverse sweep."""
        xb, single = _as_batch(x)
        vb, _ = _as_batch(cotangent)
        comp, vals, s, _ = self._run(x, sigma, variant="vjp", extra={"cot": vb})
        vjp_d = comp.tape.value(vals, comp.refs["vjp_x"], check_finite=True)
        out = (vjp_d - vb) / (s * s)[:, None]
        return out[0] if single else out


class EnergyModel:
    """Energy-parameterized model: E, score = -grad E, and the gradient-head
    denoiser, all views of one scalar function."""

    def __init__(self, layout: MLPLayout, params: Array, schedule: NoiseSchedule):
        if params.shape != (layout.n_params,):
            raise ValueError("parameter vector does not match layout")
        self.layout = layout
        self.params = np.asarray(params, dtype=np.float64)
        self.schedule = schedule
        self._cache: dict[tuple, _Compiled] = {}

    @property
    def min_sigma(self) -> float:
        return self.schedule.sigma_min

    @classmethod
    def init_from_teacher(cls, teacher: TeacherModel) -> "EnergyModel":
        """Copy the teacher backbone parameters into a fresh energy model."""
        return cls(teacher.layout, teacher.params.copy(), teacher.schedule)

    # -- recorded programs -------------------------------------------------

    def _head_tape(self, batch: int, variant: str) -> _Compiled:
        """F and grad F as functions of the preconditioned input."""
        key = ("head", batch, variant)
        if key not in self._cache:
            tape = Tape()
            d = self.layout.data_dim
            x_pre = tape.input_slot("x_pre", (batch, d))
            t = tape.input_slot("t", (batch,))
            h = emit_backbone(tape, x_pre, t, self.layout)
            f = emit_scalar_head(h, x_pre)
            refs = {"x_pre": x_pre, "h": h, "f": f}
            if variant == "grad":
                (refs["grad_f"],) = tape.grad(f, [x_pre])
            self._cache[key] = _Compiled(tape, refs)
        return self._cache[key]

    def _denoise_tape(self, batch: int, variant: str) -> _Compiled:
        key = ("denoise", batch, variant)
        if key not in self._cache:
            tape = Tape()
            d = self.layout.data_dim
            x = tape.input_slot("x", (batch, d))
            cin = tape.input_slot("cin", (batch,))
            cnoise = tape.input_slot("cnoise", (batch,))
            cskip = tape.input_slot("cskip", (batch,))
            cout = tape.input_slot("cout", (batch,))
            x_pre = ad.rowmul(x, cin)
            h = emit_backbone(tape, x_pre, cnoise, self.layout)
            f = emit_scalar_head(h, x_pre)
            (grad_f,) = tape.grad(f, [x_pre])
            denoised = ad.add(ad.rowmul(x, cskip), ad.rowmul(grad_f, cout))
            refs = {"x": x, "denoised": denoised}
            self._cache[key] = _Compiled(tape, refs)
        return self._cache[key]

    def _energy_tape(self, batch: int, variant: str) -> _Compiled:
        key = ("energy", batch, variant)
        if key not in self._cache:
            tape = Tape()
            d = self.layout.data_dim
            x = tape.input_slot("x", (batch, d))
            cin = tape.input_slot("cin", (batch,))
            cnoise = tape.input_slot("cnoise", (batch,))
            k1 = tape.input_slot("k1", (batch,))
            k2 = tape.input_slot("k2", (batch,))
            x_pre = ad.rowmul(x, cin)
            h = emit_backbone(tape, x_pre, cnoise, self.layout)
            f = emit_scalar_head(h, x_pre)
            energy = ad.add(ad.mul(k1, ad.sqnorm(x)), ad.scale(ad.mul(k2, f), -1.0))
            refs = {"x": x, "energy": energy}
            if variant in ("score", "score_vjp"):
                (grad_e,) = tape.grad(energy, [x])
                refs["score"] = ad.scale(grad_e, -1.0)
                refs["grad_e"] = grad_e
            if variant == "score_vjp":
                cot = tape.input_slot("cot", (batch, d))
                proj = ad.rowsum(ad.mul(refs["score"], cot))
                (refs["vjp_x"],) = tape.grad(proj, [x])
            self._cache[key] = _Compiled(tape, refs)
        return self._cache[key]

    def _run_energy(self, x, sigma, variant: str, extra=None):
        xb, single = _as_batch(x)
        s = _sigma_vec(sigma, xb.shape[0])
        c = _coeffs(s, self.schedule.sigma_data)
        comp = self._energy_tape(xb.shape[0], variant)
        inputs = {"x": xb, "cin": c["cin"], "cnoise": c["cnoise"],
                  "k1": c["k1"], "k2": c["k2"]}
        if extra:
            inputs.update(extra)
        vals = comp.tape.run(inputs, self.params)
        return comp, vals, s, single

    # -- public views --------------------------------------------------------

    def scalar_head(self, x_pre, c_noise) -> Array:
        """F(x_pre, t) = <h(x_pre, t), x_pre>."""
        xb, single = _as_batch(x_pre)
        t = np.broadcast_to(np.asarray(c_noise, dtype=np.float64), (xb.shape[0],)).copy()
        comp = self._head_tape(xb.shape[0], "plain")
        vals = comp.tape.run({"x_pre": xb, "t": t}, self.params)
        out = comp.tape.value(vals, comp.refs["f"], check_finite=True)
        return out[0] if single else out

    def grad_scalar_head(self, x_pre, c_noise) -> Array:
        """grad of F w.r.t. x_pre, via the recorded reverse sweep."""
        xb, single = _as_batch(x_pre)
        t = np.broadcast_to(np.asarray(c_noise, dtype=np.float64), (xb.shape[0],)).copy()
        comp = self._head_tape(xb.shape[0], "grad")
        vals = comp.tape.run({"x_pre": xb, "t": t}, self.params)
        out = comp.tape.value(vals, comp.refs["grad_f"], check_finite=True)
        return out[0] if single else out

    def energy(self, x, sigma) -> Array:
        """Unnormalized negative log-density: p_sigma(x) proportional to exp(-E)."""
        comp, vals, _, single = self._run_energy(x, sigma, "plain")
        out = comp.tape.value(vals, comp.refs["energy"], check_finite=True)
        return out[0] if single else out

    def score(self, x, sigma) -> Array:
        comp, vals, _, single = self._run_energy(x, sigma, "score")
        out = comp.tape.value(vals, comp.refs["score"], check_finite=True)
        return out[0] if single else out

    def energy_gradient(self, x, sigma) -> Array:
        comp, vals, _, single = self._run_energy(x, sigma, "score")
        out = comp.tape.value(vals, comp.refs["grad_e"], check_finite=True)
        return out[0] if single else out

    def denoise(self, x, sigma) -> Array:
        """c_skip*x + c_out*gradF(c_in*x, c_noise) -- the gradient-head route."""
        xb, single = _as_batch(x)
        s = _sigma_vec(sigma, xb.shape[0])
        c = _coeffs(s, self.schedule.sigma_data)
        comp = self._denoise_tape(xb.shape[0], "plain")
        inputs = {"x": xb, "cin": c["cin"], "cnoise": c["cnoise"],
                  "cskip": c["cskip"], "cout": c["cout"]}
        vals = comp.tape.run(inputs, self.params)
        out = comp.tape.value(vals, comp.refs["denoised"], check_finite=True)
        return out[0] if single else out

    def score_jvp(self, x, sigma, direction) -> Array:
        xb, single = _as_batch(x)
        vb, _ = _as_batch(direction)
        s = _sigma_vec(sigma, xb.shape[0])
        c = _coeffs(s, self.schedule.sigma_data)
        comp = self._energy_tape(xb.shape[0], "score")
        inputs = {"x": xb, "cin": c["cin"], "cnoise": c["cnoise"],
                  "k1": c["k1"], "k2": c["k2"]}
        _, tans = comp.tape.run_jvp(inputs, self.params, tangents={"x": vb})
        out = np.asarray(tans[comp.refs["score"].idx])
        return out[0] if single else out

    def score_vjp(self, x, sigma, cotangent) -> Array:
        xb, single = _as_batch(x)
        vb, _ = _as_batch(cotangent)
        comp, vals, _, _ = self._run_energy(x, sigma, "score_vjp", extra={"cot": vb})
        out = comp.tape.value(vals, comp.refs["vjp_x"], check_finite=True)
        return out[0] if single else out
