import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairx.autodiff import (
    GraphError,
    NonFiniteError,
    Tape,
    check_gradient,
    gradient,
    tanh,
)


def test_polynomial_derivatives_up_to_third_order():
    t = Tape()
    x = t.input("x")
    f = x * x * x
    d1 = t.gradient(f, [x])[0]
    d2 = t.gradient(d1, [x])[0]
    d3 = t.gradient(d2, [x])[0]
    vals = t.evaluate([f, d1, d2, d3], {"x": 2.0})
    np.testing.assert_allclose(vals, [8.0, 12.0, 12.0, 6.0])


def test_tanh_derivative_at_zero():
    t = Tape()
    x = t.input("x")
    (g,) = gradient(t, tanh(x), ["x"])
    assert t.evaluate(g, {"x": 0.0}) == pytest.approx(1.0)


def test_product_rule_and_quotient():
    t = Tape()
    x, y = t.input("x"), t.input("y")
    f = x * y + x / y
    gx, gy = t.gradient(f, [x, y])
    vx, vy = t.evaluate([gx, gy], {"x": 3.0, "y": 2.0})
    assert vx == pytest.approx(2.0 + 0.5)
    assert vy == pytest.approx(3.0 - 3.0 / 4.0)


def test_evaluate_caches_node_values():
    t = Tape()
    x = t.input("x")
    h = t.exp(x)
    f = h + 1.0
    t.evaluate(f, {"x": 0.0})
    assert h.value == pytest.approx(1.0)
    assert f.value == pytest.approx(2.0)


def test_unreachable_target_has_zero_gradient():
    t = Tape()
    x, y = t.input("x"), t.input("y")
    (g,) = t.gradient(t.sigmoid(x), [y])
    assert t.evaluate(g, {"x": 0.3, "y": 1.0}) == 0.0


def test_unknown_slot_raises():
    t = Tape()
    x = t.input("x")
    with pytest.raises(GraphError):
        t.gradient(x * x, ["nope"])
    with pytest.raises(GraphError):
        t.evaluate(x * x, {"x": 1.0, "z": 2.0})


def test_foreign_node_rejected():
    t1, t2 = Tape(), Tape()
    x = t1.input("x")
    y = t2.input("y")
    with pytest.raises(GraphError):
        t1.gradient(x * x, [y])


def test_log_of_negative_reports_non_finite():
    t = Tape()
    x = t.input("x")
    with pytest.raises(NonFiniteError):
        t.evaluate(t.log(x), {"x": -1.0})
    prog = t.compile([t.log(x)])
    with pytest.raises(NonFiniteError) as info:
        prog.run({"x": -1.0})
    assert info.value.op == "log"


def test_non_finite_binding_rejected():
    t = Tape()
    x = t.input("x")
    with pytest.raises(GraphError):
        t.evaluate(x * 2.0, {"x": np.nan})


def test_positional_bindings_check_count():
    t = Tape()
    x, y = t.input("x"), t.input("y")
    assert t.evaluate(x - y, [5.0, 2.0]) == 3.0
    with pytest.raises(GraphError):
        t.evaluate(x - y, [5.0])


def test_lane_values_broadcast_and_reduce():
    t = Tape()
    x = t.input("x")
    w = t.param("w")
    f = t.lane_sum(t.tanh(w * x))
    (gw,) = t.gradient(f, [w])
    xs = np.linspace(-1, 1, 7)
    val, g = t.evaluate([f, gw], {"x": xs}, {"w": 0.7})
    np.testing.assert_allclose(val, np.tanh(0.7 * xs).sum())
    np.testing.assert_allclose(g, np.sum(xs * (1 - np.tanh(0.7 * xs) ** 2)))
    assert np.shape(g) == ()


def test_lane_sum_over_one_axis_keeps_shape():
    t = Tape()
    x = t.input("x")
    s = t.lane_sum(x * x, 1)
    (g,) = t.gradient(t.lane_sum(s * s), [x])
    v = np.arange(6.0).reshape(2, 3)
    sv, gv = t.evaluate([s, g], {"x": v})
    np.testing.assert_allclose(sv, (v * v).sum(axis=1, keepdims=True))
    # d/dx sum_r (sum_c x^2)^2 = 4 x (row sum of x^2)
    np.testing.assert_allclose(gv, 4 * v * (v * v).sum(axis=1, keepdims=True))


def test_second_order_mixed_partial():
    # f = x^2 y^3 -> d2f/dxdy = 6 x y^2
    t = Tape()
    x, y = t.input("x"), t.input("y")
    f = t.power(x, 2) * t.power(y, 3)
    (fx,) = t.gradient(f, [x])
    (fxy,) = t.gradient(fx, [y])
    assert t.evaluate(fxy, {"x": 1.5, "y": -2.0}) == pytest.approx(6 * 1.5 * 4.0)


def test_smooth_abs_matches_definition():
    t = Tape()
    x = t.input("x")
    f = t.abs_smooth(x, 1e-3)
    (g,) = t.gradient(f, [x])
    v, d = t.evaluate([f, g], {"x": -0.5})
    assert v == pytest.approx(np.sqrt(0.25 + 1e-6))
    assert d == pytest.approx(-0.5 / np.sqrt(0.25 + 1e-6))


def test_program_frees_intermediates_but_keeps_outputs():
    t = Tape()
    x = t.input("x")
    h = t.exp(x)
    f = t.lane_sum(h * h)
    prog = t.compile([f])
    out = prog.run({"x": np.ones(4)})
    assert out[0] == pytest.approx(4 * np.e ** 2)
    assert prog.values[h.index] is None


def test_check_gradient_flags_wrong_rule():
    t = Tape()
    x = t.input("x")
    f = t.sigmoid(x) * t.softplus(x)
    rep = check_gradient(t, f, {"x": 0.3})
    assert rep.ok
    assert rep.max_rel_error < 1e-6
    assert rep.failures() == []


def test_check_gradient_through_double_backprop():
    # penalty on an input gradient: g(w) = (d/dx tanh(w x))^2
    t = Tape()
    x, w = t.input("x"), t.param("w")
    (dx,) = t.gradient(t.tanh(w * x), [x])
    rep = check_gradient(t, dx * dx, {"x": 0.4}, {"w": 1.3}, slots=["w"])
    assert rep.ok, rep.failures()


def _random_expression(t, x, y, ops):
    nodes = [x, y]
    for i, op in enumerate(ops):
        a, b = nodes[-1], nodes[-2]
        if op == 0:
            nodes.append(a + b)
        elif op == 1:
            nodes.append(a * b)
        elif op == 2:
            nodes.append(t.tanh(a))
        elif op == 3:
            nodes.append(t.sigmoid(a) - b)
        elif op == 4:
            nodes.append(t.softplus(a))
        else:
            nodes.append(a / (1.0 + b * b))
    return nodes[-1]


@settings(max_examples=60, deadline=None)
@given(
    ops=st.lists(st.integers(0, 5), min_size=1, max_size=8),
    xv=st.floats(-1.5, 1.5),
    yv=st.floats(-1.5, 1.5),
)
def test_random_expressions_match_finite_differences(ops, xv, yv):
    t = Tape()
    x, y = t.input("x"), t.input("y")
    f = _random_expression(t, x, y, ops)
    rep = check_gradient(t, f, {"x": xv, "y": yv}, step=1e-6)
    for c in rep.checks:
        assert abs(c.analytic - c.numeric) <= 1e-6 * max(1.0, abs(c.numeric))


@settings(max_examples=30, deadline=None)
@given(ops=st.lists(st.integers(0, 5), min_size=1, max_size=6), xv=st.floats(-1, 1))
def test_second_derivative_matches_difference_of_first(ops, xv):
    t = Tape()
    x, y = t.input("x"), t.input("y")
    f = _random_expression(t, x, y, ops)
    (d1,) = t.gradient(f, [x])
    (d2,) = t.gradient(d1, [x])
    h = 1e-5
    prog = t.compile([d1, d2])
    up = prog.run({"x": xv + h, "y": 0.3}, check="none")[0]
    down = prog.run({"x": xv - h, "y": 0.3}, check="none")[0]
    an = prog.run({"x": xv, "y": 0.3}, check="none")[1]
    assert abs(an - (up - down) / (2 * h)) <= 1e-5 * max(1.0, abs(an))


def test_result_independent_of_input_memory_layout():
    from fairx.model import build_logit, init_params, param_nodes

    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 4))
    t = Tape()
    pn = param_nodes(t, [4, 6, 1])
    xs = [t.input(f"x{j}") for j in range(4)]
    z = build_logit(t, pn, xs)
    loss = t.lane_sum(t.sub(t.softplus(z), t.mul(t.input("y"), z)))
    prog = t.compile([loss] + t.gradient(loss, pn.flat))
    theta = init_params([4, 6, 1], seed=1).flat()
    y = (X[:, 0] > 0).astype(float).reshape(-1, 1, 1)
    strided = {f"x{j}": X[:, j].reshape(-1, 1, 1) for j in range(4)}
    packed = {k: v.copy() for k, v in strided.items()}
    assert not strided["x0"].flags.c_contiguous
    a = [float(v) for v in prog.run({**strided, "y": y}, theta)]
    b = [float(v) for v in prog.run({**packed, "y": y}, theta)]
    assert a == b
