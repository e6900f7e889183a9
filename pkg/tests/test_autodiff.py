import numpy as np
import pytest

from edm2d import autodiff as ad
from edm2d.models import MLPLayout, emit_backbone, emit_scalar_head, init_params
from edm2d.rngstreams import stream

from conftest import central_diff, rel_err


def sqnorm_program():
    tape = ad.Tape()
    x = tape.input_slot("x", (1, 2))
    out = ad.vecsum(ad.sqnorm(x))
    return ad.Program(tape, x, out)


def test_evaluate_sqnorm():
    prog = sqnorm_program()
    assert prog.evaluate(np.array([[3.0, 4.0]])) == 25.0


def test_evaluate_sine():
    tape = ad.Tape()
    x = tape.input_slot("x", (1, 1))
    out = ad.vecsum(ad.rowsum(ad.sin(x)))
    prog = ad.Program(tape, x, out)
    assert prog.evaluate(np.array([[0.0]])) == 0.0


def test_evaluate_sum_of_sines():
    tape = ad.Tape()
    x = tape.input_slot("x", (1, 2))
    out = ad.vecsum(ad.rowsum(ad.sin(x)))
    prog = ad.Program(tape, x, out)
    val = prog.evaluate(np.array([[0.0, np.pi / 2]]))
    assert abs(val - 1.0) < 1e-15


def test_input_gradient_half_sqnorm():
    tape = ad.Tape()
    x = tape.input_slot("x", (1, 2))
    out = ad.scale(ad.vecsum(ad.sqnorm(x)), 0.5)
    prog = ad.Program(tape, x, out)
    _, g = prog.input_gradient(np.array([[3.0, 4.0]]))
    np.testing.assert_allclose(g, [[3.0, 4.0]])


def test_input_gradient_sin_product():
    # f(x) = sin(x1) * x2 -> grad = (cos(x1) x2, sin(x1))
    tape = ad.Tape()
    x = tape.input_slot("x", (1, 2))
    s = ad.sin(x)
    # pick out coordinates via constant masks
    m1 = tape.constant(np.array([[1.0, 0.0]]))
    m2 = tape.constant(np.array([[0.0, 1.0]]))
    sin_x1 = ad.vecsum(ad.rowsum(ad.mul(s, m1)))
    x2 = ad.vecsum(ad.rowsum(ad.mul(x, m2)))
    out = ad.mul(sin_x1, x2)
    prog = ad.Program(tape, x, out)
    val, g = prog.input_gradient(np.array([[0.0, 5.0]]))
    assert val == 0.0
    np.testing.assert_allclose(g, [[5.0, 0.0]])


def random_mlp_program(seed, width=8, depth=3, batch=1):
    layout = MLPLayout(data_dim=2, hidden=width, depth=depth, omega0=6.0)
    params = init_params(layout, stream(seed, "params"))
    tape = ad.Tape()
    x = tape.input_slot("x", (batch, 2))
    t = tape.constant(np.full(batch, 0.25))
    h = emit_backbone(tape, x, t, layout)
    out = ad.vecsum(emit_scalar_head(h, x))
    return ad.Program(tape, x, out, n_params=layout.n_params), params


def test_first_order_matches_finite_differences():
    for trial in range(20):
        prog, params = random_mlp_program(trial)
        x = stream(trial, "x").standard_normal((1, 2))
        _, g = prog.input_gradient(x, params)
        fd = central_diff(lambda z: prog.evaluate(z.reshape(1, 2), params), x.ravel())
        assert rel_err(g.ravel(), fd) <= 1e-6


def test_second_order_param_gradient_one_parameter():
    # E(x) = theta * ||x||^2 / 2, loss = ||grad E - x||^2 at x = (1, 1):
    # grad E = theta x, loss = (theta-1)^2 ||x||^2, d loss/d theta = 4(theta-1)
    tape = ad.Tape()
    x = tape.input_slot("x", (1, 2))
    theta = tape.param_slot(0, ())
    half = ad.scale(ad.vecsum(ad.sqnorm(x)), 0.5)
    energy = ad.mul(theta, half)
    (gx,) = tape.grad(energy, [x])
    loss = ad.vecsum(ad.sqnorm(gx - x))
    prog = ad.Program(tape, x, loss, n_params=1)
    for theta_val in (0.0, 0.7, 2.5):
        got = prog.param_gradient(np.array([[1.0, 1.0]]), np.array([theta_val]))
        np.testing.assert_allclose(got, [4 * (theta_val - 1.0)], rtol=1e-12)


def test_second_order_zero_when_target_matches():
    tape = ad.Tape()
    x = tape.input_slot("x", (1, 2))
    theta = tape.param_slot(0, ())
    energy = ad.mul(theta, ad.scale(ad.vecsum(ad.sqnorm(x)), 0.5))
    (gx,) = tape.grad(energy, [x])
    # target v = -grad E exactly: loss = ||grad E + v||^2 = 0
    loss = ad.vecsum(ad.sqnorm(gx - gx))
    prog = ad.Program(tape, x, loss, n_params=1)
    g = prog.param_gradient(np.array([[1.0, 1.0]]), np.array([1.3]))
    np.testing.assert_allclose(g, [0.0])


def second_order_loss_program(seed, width=8):
    """loss = ||grad_x E(x) - v||^2 for a random sine-MLP energy and target."""
    layout = MLPLayout(data_dim=2, hidden=width, depth=2, omega0=6.0)
    params = init_params(layout, stream(seed, "p2"))
    v = stream(seed, "target").standard_normal((1, 2))
    tape = ad.Tape()
    x = tape.input_slot("x", (1, 2))
    t = tape.constant(np.full(1, -0.5))
    h = emit_backbone(tape, x, t, layout)
    energy = emit_scalar_head(h, x)
    (gx,) = tape.grad(energy, [x], seed=tape.constant(np.ones(1)))
    loss = ad.vecsum(ad.sqnorm(gx - tape.constant(v)))
    return ad.Program(tape, x, loss, n_params=layout.n_params), params


def test_second_order_matches_finite_differences():
    for trial in range(5):
        prog, params = second_order_loss_program(trial)
        x = stream(trial, "x2").standard_normal((1, 2))
        got = prog.param_gradient(x, params)
        fd = central_diff(lambda p: prog.evaluate(x, p), params, h=1e-5)
        assert rel_err(got, fd) <= 1e-4


def test_jvp_linear_field():
    # field v(x) = A x -> jvp = A nu
    a = np.array([[2.0, -1.0], [0.5, 3.0]])
    tape = ad.Tape()
    x = tape.input_slot("x", (1, 2))
    mat = tape.constant(a)
    out = ad.linear(x, mat)
    prog = ad.Program(tape, x, out)
    nu = np.array([[1.0, 2.0]])
    np.testing.assert_allclose(prog.jvp(nu * 0 + [[0.3, 0.4]], None, nu), nu @ a.T)


def test_jvp_gradient_of_half_sqnorm_is_identity():
    tape = ad.Tape()
    x = tape.input_slot("x", (1, 2))
    f = ad.scale(ad.vecsum(ad.sqnorm(x)), 0.5)
    (gx,) = tape.grad(f, [x])
    prog = ad.Program(tape, x, gx)
    nu = np.array([[0.7, -0.2]])
    np.testing.assert_allclose(prog.jvp(np.array([[1.0, 2.0]]), None, nu), nu)


def test_jvp_matches_finite_differences():
    for trial in range(10):
        layout = MLPLayout(data_dim=2, hidden=8, depth=2, omega0=6.0)
        params = init_params(layout, stream(trial, "pj"))
        tape = ad.Tape()
        x = tape.input_slot("x", (1, 2))
        t = tape.constant(np.full(1, 0.1))
        out = emit_backbone(tape, x, t, layout)
        prog = ad.Program(tape, x, out, n_params=layout.n_params)
        xv = stream(trial, "xj").standard_normal((1, 2))
        nu = stream(trial, "nuj").standard_normal((1, 2))
        got = prog.jvp(xv, params, nu)
        h = 1e-5
        fwd = prog.tape.run({"x": xv + h * nu}, params)[out.idx]
        bwd = prog.tape.run({"x": xv - h * nu}, params)[out.idx]
        fd = (fwd - bwd) / (2 * h)
        assert rel_err(got, fd) <= 1e-6


def test_linearity_of_gradients():
    # grad(a f + b g) = a grad f + b grad g, exactly
    tape = ad.Tape()
    x = tape.input_slot("x", (1, 2))
    f = ad.vecsum(ad.sqnorm(x))
    g = ad.vecsum(ad.rowsum(ad.sin(x)))
    combo = ad.add(ad.scale(f, 2.0), ad.scale(g, -3.0))
    (gc,) = tape.grad(combo, [x])
    (gf,) = tape.grad(f, [x])
    (gg,) = tape.grad(g, [x])
    xv = np.array([[0.3, 1.2]])
    vals = tape.run({"x": xv})
    np.testing.assert_array_equal(vals[gc.idx], 2.0 * vals[gf.idx] - 3.0 * vals[gg.idx])


def test_gradient_field_jacobian_symmetric():
    # Jacobian of any engine-produced gradient field is symmetric
    for trial in range(10):
        prog, params = random_mlp_program(trial, width=8, depth=2)
        tape = prog.tape
        (gx,) = tape.grad(prog.out, [prog.x])
        field = ad.Program(tape, prog.x, gx, n_params=prog.n_params)
        xv = stream(trial, "xs").standard_normal((1, 2))
        nu = stream(trial, "nus").standard_normal((1, 2))
        jv = field.jvp(xv, params, nu)
        # v^T J via a second reverse sweep
        cot = tape.input_slot(f"cot{trial}", (1, 2))
        proj = ad.vecsum(ad.rowsum(ad.mul(gx, cot)))
        (vj_ref,) = tape.grad(proj, [prog.x])
        vals = tape.run({"x": xv, f"cot{trial}": nu}, params)
        vj = vals[vj_ref.idx]
        assert np.abs(jv - vj).max() <= 1e-10 * (1 + np.abs(jv).max())


def test_determinism_bitwise():
    prog, params = random_mlp_program(7)
    x = stream(7, "det").standard_normal((1, 2))
    v1, g1 = prog.input_gradient(x, params)
    v2, g2 = prog.input_gradient(x, params)
    assert v1 == v2
    assert np.array_equal(g1, g2)


def test_shape_mismatch_raises():
    prog = sqnorm_program()
    with pytest.raises(ValueError):
        prog.evaluate(np.zeros((1, 3)))


def test_non_finite_raises():
    prog = sqnorm_program()
    with pytest.raises(ad.NonFiniteError):
        prog.input_gradient(np.array([[np.nan, 1.0]]))


def test_add_shape_check():
    tape = ad.Tape()
    a = tape.constant(np.zeros((1, 2)))
    b = tape.constant(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        ad.add(a, b)
