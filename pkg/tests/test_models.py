import numpy as np
import pytest

from edm2d import autodiff as ad
from edm2d import models
from edm2d.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from edm2d.rngstreams import stream
from edm2d.schedules import NoiseSchedule

from conftest import rel_err


SCHED = NoiseSchedule(sigma_data=1.0)


def make_teacher(seed=0, hidden=16, depth=3):
    layout = models.MLPLayout(data_dim=2, hidden=hidden, depth=depth)
    params = models.init_params(layout, stream(seed, "init"))
    return models.TeacherModel(layout, params, SCHED)


def make_energy(seed=0, hidden=16, depth=3):
    layout = models.MLPLayout(data_dim=2, hidden=hidden, depth=depth)
    params = models.init_params(layout, stream(seed, "init"))
    return models.EnergyModel(layout, params, SCHED)


def zero_energy_model(hidden=8, depth=2, out_bias=None):
    """Backbone h identically equal to out_bias (zero weights everywhere)."""
    layout = models.MLPLayout(data_dim=2, hidden=hidden, depth=depth)
    params = np.zeros(layout.n_params)
    if out_bias is not None:
        name, shape, off = layout.param_specs()[-1]
        assert name == "b_out"
        params[off:off + 2] = out_bias
    return models.EnergyModel(layout, params, SCHED)


def test_teacher_zero_network_is_skip():
    layout = models.MLPLayout(data_dim=2, hidden=8, depth=2)
    teacher = models.TeacherModel(layout, np.zeros(layout.n_params), SCHED)
    x = np.array([[1.0, -2.0]])
    s = 0.7
    c_skip = 1.0 / (1.0 + s * s)
    np.testing.assert_allclose(teacher.denoise(x, s), c_skip * x, rtol=1e-12)


def test_teacher_small_sigma_returns_x():
    teacher = make_teacher()
    x = np.array([[0.4, 0.9]])
    d = teacher.denoise(x, 1e-6)
    assert np.abs(d - x).max() < 1e-4


def test_scalar_head_zero_input():
    m = make_energy()
    assert m.scalar_head(np.zeros(2), 0.3) == 0.0


def test_scalar_head_constant_backbone():
    # h == c: F = <c, x>, grad F = c
    m = zero_energy_model(out_bias=[0.7, -1.2])
    x = np.array([0.5, 2.0])
    assert abs(m.scalar_head(x, 0.1) - (0.7 * 0.5 - 1.2 * 2.0)) < 1e-14
    np.testing.assert_allclose(m.grad_scalar_head(x, 0.1), [0.7, -1.2], atol=1e-14)


def test_scalar_head_identity_backbone():
    # h(x) = x gives F = ||x||^2 and grad F = 2x; built directly on a tape
    tape = ad.Tape()
    x = tape.input_slot("x", (1, 2))
    f = models.emit_scalar_head(x, x)
    (gf,) = tape.grad(f, [x])
    xv = np.array([[0.3, -0.8]])
    vals = tape.run({"x": xv})
    assert abs(vals[f.idx][0] - (xv ** 2).sum()) < 1e-15
    np.testing.assert_allclose(vals[gf.idx], 2 * xv, rtol=1e-15)


def test_grad_head_matches_finite_differences():
    m = make_energy(seed=3)
    x = stream(3, "x").standard_normal(2)
    t = 0.2
    g = m.grad_scalar_head(x, t)
    h = 1e-6
    fd = np.array([
        (m.scalar_head(x + h * np.eye(2)[j], t) - m.scalar_head(x - h * np.eye(2)[j], t))
        / (2 * h) for j in range(2)])
    assert rel_err(g, fd) <= 1e-6


def test_grad_head_matches_hand_formula():
    # grad F = h + J_h^T x, with J_h^T x assembled from backbone jvps
    m = make_energy(seed=4, hidden=8, depth=2)
    x = stream(4, "x").standard_normal(2)
    t = -0.3
    tape = ad.Tape()
    xr = tape.input_slot("x", (1, 2))
    h_ref = models.emit_backbone(tape, xr, tape.constant(np.full(1, t)), m.layout)
    prog = ad.Program(tape, xr, h_ref, n_params=m.layout.n_params)
    h_val = tape.run({"x": x[None]}, m.params)[h_ref.idx][0]
    jcols = np.stack([prog.jvp(x[None], m.params, np.eye(2)[j][None])[0]
                      for j in range(2)], axis=1)
    hand = h_val + jcols.T @ x
    np.testing.assert_allclose(m.grad_scalar_head(x, t), hand, rtol=1e-10)


def test_energy_zero_head_is_gaussian():
    # F == 0: E = ||x||^2 / (2 (sigma^2 + sigma_d^2))
    m = zero_energy_model()
    x = np.array([[1.0, 2.0], [0.3, -0.4]])
    s = 0.9
    expected = (x ** 2).sum(axis=1) / (2 * (s * s + 1.0))
    np.testing.assert_allclose(m.energy(x, s), expected, rtol=1e-12)


def test_energy_zero_at_origin_when_head_zero():
    m = zero_energy_model()
    assert m.energy(np.zeros(2), 0.5) == 0.0


def test_tweedie_consistency():
    for seed in range(5):
        m = make_energy(seed=seed)
        rng = stream(seed, "tweedie")
        x = rng.standard_normal((8, 2))
        s = float(rng.uniform(0.05, 3.0))
        lhs = m.denoise(x, s)
        rhs = x - s * s * m.energy_gradient(x, s)
        assert rel_err(lhs, rhs) <= 1e-8


def test_score_is_negative_energy_gradient():
    m = make_energy(seed=6)
    x = stream(6, "sc").standard_normal((4, 2))
    s = 0.8
    score = m.score(x, s)
    ge = m.energy_gradient(x, s)
    assert np.abs(score + ge).max() <= 1e-8 * (1 + np.abs(score).max())


def test_score_zero_when_denoiser_is_x():
    # zero-parameter teacher at sigma -> 0: D = c_skip x + 0 -> score finite
    teacher = make_teacher()
    x = np.array([[0.2, 0.1]])
    d = teacher.denoise(x, 0.5)
    s = teacher.score(x, 0.5)
    np.testing.assert_allclose(s, (d - x) / 0.25, rtol=1e-12)


def test_sigma_zero_rejected():
    m = make_energy()
    with pytest.raises(ValueError):
        m.energy(np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        make_teacher().denoise(np.zeros(2), 0.0)


def test_init_from_teacher_copies_parameters():
    teacher = make_teacher(seed=7)
    student = models.EnergyModel.init_from_teacher(teacher)
    assert np.array_equal(student.params, teacher.params)
    # backbone outputs identical for any input
    x = stream(7, "cmp").standard_normal((3, 2))
    t = np.full(3, 0.1)
    tape = ad.Tape()
    xr = tape.input_slot("x", (3, 2))
    h_ref = models.emit_backbone(tape, xr, tape.constant(t), teacher.layout)
    ht = tape.run({"x": x}, teacher.params)[h_ref.idx]
    hs = tape.run({"x": x}, student.params)[h_ref.idx]
    np.testing.assert_array_equal(ht, hs)


def test_init_from_teacher_denoisers_differ():
    # the student routes through the gradient head, so D differs in general
    teacher = make_teacher(seed=8)
    student = models.EnergyModel.init_from_teacher(teacher)
    x = stream(8, "d").standard_normal((1, 2))
    dt = teacher.denoise(x, 0.5)
    dsn = student.denoise(x, 0.5)
    assert np.abs(dt - dsn).max() > 1e-8


def test_conservativity_structural():
    # normalized Jacobian asymmetry of the energy score field ~ roundoff
    from edm2d.diagnostics import hutchinson_asymmetry
    m = make_energy(seed=9)
    rng = stream(9, "cons")
    for _ in range(10):
        x = rng.standard_normal(2)
        s = float(rng.uniform(0.05, 3.0))
        est = hutchinson_asymmetry(m, x, s, n_probes=4, rng=rng)
        assert est.normalized <= 1e-10


def test_symmetric_dataset_model_score_antisymmetry():
    # a freshly initialized model has no such symmetry; verify the analytic
    # property holds for the trained-Gaussian closed form instead
    x = np.array([0.4, -1.0])
    s = 0.6
    score = lambda z: -z / (1 + s * s)
    np.testing.assert_allclose(score(-x), -score(x), rtol=1e-15)


def test_checkpoint_roundtrip(tmp_path):
    teacher = make_teacher(seed=10, hidden=8, depth=2)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, teacher.layout, teacher.params, 0.8)
    layout, params, sigma_data = load_checkpoint(path)
    assert layout == teacher.layout
    assert sigma_data == 0.8
    np.testing.assert_array_equal(params, teacher.params)


def test_checkpoint_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTPE" + b"\x00" * 64)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_layout_param_count():
    layout = models.MLPLayout(data_dim=2, hidden=128, depth=4)
    # (d+1)*128 + 128 biases + 3*(128*128+128) + 128*2+2
    expected = (3 * 128 + 128) + 3 * (128 * 128 + 128) + (2 * 128 + 2)
    assert layout.n_params == expected
