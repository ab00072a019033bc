import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from quasicodazzi.chart import Chart, FDConfig, QuadratureRule, constant_field, expression_field, fd_partial, grad, \
    path_integrate_oneform, path_order_residual, quad_integrate, stencil
from quasicodazzi.errors import NonFiniteValue, ParseError, QuadratureFailure, StencilOutOfDomain, ValidationError
from quasicodazzi.expr import Expr, compile_array

LINE = Chart(("u",), (-2.0,), (2.0,), (0.5,))
PLANE = Chart(("u", "v"), (-1.0, -1.0), (3.0, 3.0), (0.5, 0.5))


class TestChart:
    def test_basepoint_defaults_to_centre(self):
        assert Chart(("a", "b"), (0, 0), (2, 4)).basepoint == (1.0, 2.0)

    @pytest.mark.parametrize("kwargs", [
        dict(names=("u", "u"), lo=(0, 0), hi=(1, 1)),
        dict(names=("u",), lo=(1,), hi=(0,)),
        dict(names=("u",), lo=(0,), hi=(1,), basepoint=(1,)),
        dict(names=("u",), lo=(0, 0), hi=(1,)),
        dict(names=(), lo=(), hi=()),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValidationError):
            Chart(**kwargs)

    def test_grid_and_margin(self):
        X = PLANE.grid(3, 0.5)
        assert X.shape == (9, 2)
        assert X.min() == -0.5 and X.max() == 2.5
        with pytest.raises(ValidationError):
            PLANE.grid(3, 2.5)

    def test_product_chart_names(self):
        P = PLANE.product()
        assert P.names == ("p_u", "p_v", "q_u", "q_v")
        assert P.dim == 4


class TestExpr:
    def test_power_and_functions(self):
        e = Expr.compile("2^3 + sqrt(u) - log(exp(v))", ["u", "v"])
        assert e(4.0, 1.5) == pytest.approx(8.5)

    def test_numeric_source(self):
        assert Expr.compile(3, []).evaluate() == 3.0

    @pytest.mark.parametrize("src", ["__import__('os')", "u.real", "u if v else 1", "lambda: 1", "foo(u)",
                                     "w + 1", "'s'", "u // 2", "1 +"])
    def test_rejects(self, src):
        with pytest.raises(ParseError):
            Expr.compile(src, ["u", "v"])

    def test_nonfinite_flagged(self):
        with pytest.raises(NonFiniteValue):
            Expr.compile("log(u)", ["u"]).evaluate(np.array([-1.0, 1.0]))

    def test_free_names(self):
        assert Expr.compile("a*u + sin(pi*b)", ["u", "a", "b"]).free_names() == {"a", "u", "b"}

    def test_compile_array_shape(self):
        ev = compile_array([["u", "1"], ["0", "u*v"]], ["u", "v"])
        out = ev(np.array([2.0, 3.0]), np.array([1.0, 1.0]))
        assert out.shape == (2, 2, 2)
        np.testing.assert_allclose(out[1], [[3.0, 1.0], [0.0, 3.0]])


class TestFiniteDifferences:
    def test_square_exact_central2(self):
        f = expression_field("u^2", LINE)
        d = fd_partial(f, 0, np.array([1.0]), FDConfig(step=1e-3, scheme="central2", richardson=False))
        assert abs(d - 2.0) < 1e-12

    def test_sine_central4_richardson(self):
        f = expression_field("sin(u)", LINE)
        assert abs(fd_partial(f, 0, np.array([0.0])) - 1.0) < 1e-10

    def test_constant(self):
        assert fd_partial(constant_field(5.0, LINE), 0, np.array([0.3])) == 0.0

    def test_stencil_leaves_box(self):
        with pytest.raises(StencilOutOfDomain):
            fd_partial(expression_field("u", LINE), 0, np.array([2.0]))

    def test_nonfinite_on_stencil(self):
        f = expression_field("u", LINE)
        bad = type(f)(lambda X: np.where(X[..., 0] > 0.5, np.nan, 1.0), (), LINE)
        with pytest.raises(NonFiniteValue):
            fd_partial(bad, 0, np.array([0.5]))

    def test_grad_layout(self):
        f = expression_field(["u*v", "u^2"], PLANE)
        g = grad(f)(np.array([[1.0, 2.0]]))
        # g[..., i, k] = d_i f_k
        np.testing.assert_allclose(g[0], [[2.0, 2.0], [1.0, 0.0]], atol=1e-9)

    def test_richardson_weights_consistent(self):
        for scheme in ("central2", "central4"):
            off, w = stencil(scheme, True)
            assert abs(np.sum(w)) < 1e-14
            assert abs(np.sum(w * off) - 1.0) < 1e-14

    def test_step_ladder(self):
        cfg = FDConfig()
        assert cfg.step_for(0) == 1e-5 and cfg.step_for(1) == 1e-3 and cfg.step_for(5) == 1e-2

    def test_step_validated_against_chart(self):
        with pytest.raises(ValidationError):
            FDConfig(step=0.5).validate_for(LINE)
        with pytest.raises(ValidationError):
            FDConfig(step=-1.0)

    @given(st.lists(st.floats(-3, 3), min_size=5, max_size=5), st.floats(-1.5, 1.5))
    def test_polynomials_of_low_degree_exact(self, coeffs, x):
        src = " + ".join(f"({c!r})*u^{k}" for k, c in enumerate(coeffs))
        f = expression_field(src, LINE)
        exact = sum(k * c * x ** (k - 1) for k, c in enumerate(coeffs) if k)
        d = fd_partial(f, 0, np.array([x]), FDConfig(step=1e-2, richardson=False))
        assert abs(d - exact) <= 1e-10 * max(1.0, abs(exact)) + 1e-11


class TestQuadrature:
    def test_finite_sum_normalised(self):
        rule = QuadratureRule("finite_sum", values=(0.0, 1.0), weights_=(0.5, 0.5))
        assert quad_integrate("1", rule) == 1.0

    def test_hermite_second_moment(self):
        rule = QuadratureRule("gauss_hermite", n=64)
        assert abs(quad_integrate("x^2*exp(-x^2/2)/sqrt(2*pi)", rule) - 1.0) < 1e-12

    def test_legendre_polynomial(self):
        rule = QuadratureRule("gauss_legendre", n=64, interval=(0.0, 1.0))
        assert abs(quad_integrate("3*x^2", rule) - 1.0) < 1e-14

    def test_location_scale_nodes(self):
        rule = QuadratureRule("gauss_hermite", n=20, loc="m", scale="s")
        val = quad_integrate(lambda x, m, s: (x - m) ** 2 * np.exp(-0.5 * ((x - m) / s) ** 2) / (s * np.sqrt(2 * np.pi)),
                             rule, {"m": 0.4, "s": 1.7})
        assert abs(val - 1.7**2) < 1e-12

    def test_overflow(self):
        with pytest.raises(NonFiniteValue):
            quad_integrate("exp(1000*x)", QuadratureRule("gauss_legendre", n=8, interval=(0.0, 1.0)))

    @pytest.mark.parametrize("kwargs", [dict(kind="gauss_legendre", n=1), dict(kind="finite_sum", values=(1.0, 1.0)),
                                        dict(kind="bogus"), dict(kind="gauss_legendre", interval=(1.0, 0.0))])
    def test_invalid_rules(self, kwargs):
        with pytest.raises(ValidationError):
            QuadratureRule(**kwargs)

    def test_negative_scale(self):
        with pytest.raises(QuadratureFailure):
            QuadratureRule("gauss_hermite", n=8, scale="s").nodes_weights({"s": -1.0})


class TestPathIntegrals:
    def test_exact_unit_form(self):
        a = constant_field([1.0], LINE)
        assert abs(path_integrate_oneform(a, [0.0], [1.0]) - 1.0) < 1e-14
        assert abs(path_order_residual(a, [0.0], [1.0])) < 1e-14

    def test_exact_product_form(self):
        a = expression_field(["v", "u"], PLANE)
        val = path_integrate_oneform(a, [0.0, 0.0], [1.0, 2.0], PLANE)
        assert abs(val - 2.0) < 1e-12
        assert abs(path_order_residual(a, [0.0, 0.0], [1.0, 2.0], PLANE)) < 1e-12

    def test_rotation_form_is_order_dependent(self):
        a = expression_field(["-v", "u"], PLANE)
        assert abs(path_order_residual(a, [0.0, 0.0], [1.0, 1.0]) - 2.0) < 1e-12

    def test_batched_endpoints(self):
        a = expression_field(["2*u", "1"], PLANE)
        ends = np.array([[1.0, 0.0], [2.0, 1.0]])
        np.testing.assert_allclose(path_integrate_oneform(a, np.zeros(2), ends), [1.0, 5.0], atol=1e-12)

    @given(st.tuples(*[st.floats(-1, 3)] * 6))
    def test_additive_under_concatenation(self, pts):
        a = expression_field(["v^2 + sin(u)", "2*u*v"], PLANE)
        p, q, r = np.array(pts[:2]), np.array(pts[2:4]), np.array(pts[4:])
        whole = path_integrate_oneform(a, p, r)
        split = path_integrate_oneform(a, p, q) + path_integrate_oneform(a, q, r)
        assert abs(whole - split) < 1e-10
