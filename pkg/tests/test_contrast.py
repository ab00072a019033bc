import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from factories import SQUARE, random_canonical, random_cubic, random_metric
from quasicodazzi.chart import Chart, QuadratureRule, constant_field, expression_field
from quasicodazzi.contrast import EguchiConfig, TwoPointFunction, contrast_check, diagonal_residuals, \
    eguchi_tensor, leibniz_residual, quasi_contrast_relations_check, rho_derivative, structure_from_contrast, \
    weak_contrast_from, weak_contrast_report
from quasicodazzi.errors import AsymmetricCubic, DegenerateMetric, NotAContrastCandidate, ParseError, ValidationError
from quasicodazzi.parabundle import canonical_from_codazzi
from quasicodazzi.statmfd import StatisticalModel, alpha_lowered, fisher_metric

LINE = Chart(("u",), (-1.0,), (1.0,), (0.2,))
BERN = Chart(("zeta",), (0.05,), (0.95,), (0.5,))
GAUSS = Chart(("mu", "sigma"), (-1.0, 0.5), (1.0, 2.0), (0.0, 1.0))

BERNOULLI_KL = "p_zeta*log(p_zeta/q_zeta) + (1 - p_zeta)*log((1 - p_zeta)/(1 - q_zeta))"
GAUSSIAN_KL = "log(q_sigma/p_sigma) + (p_sigma^2 + (p_mu - q_mu)^2)/(2*q_sigma^2) - 0.5"


def half_square(chart):
    return TwoPointFunction(chart, lambda P, Q: 0.5 * np.sum((P - Q) ** 2, axis=-1), name="half square")


class TestRhoDerivative:
    def test_quadratic(self):
        rho = half_square(LINE)
        p = np.array([0.3])
        assert rho_derivative(rho, [0], [0], p) == pytest.approx(-1.0, abs=1e-9)
        assert rho_derivative(rho, [0, 0], [], p) == pytest.approx(1.0, abs=1e-9)
        assert rho(p, p) == 0.0
        assert abs(rho_derivative(rho, [0], [], p)) < 1e-12

    def test_bernoulli_kl_fisher(self):
        rho = TwoPointFunction.from_expression(BERNOULLI_KL, BERN)
        assert rho_derivative(rho, [0], [0], np.array([0.5])) == pytest.approx(-4.0, abs=1e-8)

    def test_order_limit(self):
        with pytest.raises(ValidationError):
            rho_derivative(half_square(LINE), [0, 0, 0], [0, 0], np.array([0.0]))

    def test_unknown_names_rejected(self):
        with pytest.raises(ParseError):
            TwoPointFunction.from_expression("p_u - r_u", LINE)


class TestStructureFromContrast:
    def test_euclidean(self):
        cs = structure_from_contrast(half_square(SQUARE), SQUARE.grid(2, 0.3))
        X = SQUARE.grid(2, 0.3)
        np.testing.assert_allclose(cs.h(X), np.broadcast_to(np.eye(2), (4, 2, 2)), atol=1e-9)
        for f in (cs.C, cs.gamma_low, cs.gamma_star_low):
            assert np.max(np.abs(f(X))) < 1e-8

    def test_bernoulli_kl_is_mixture_pair(self):
        # KL(p||q) induces the mixture connection on the first slot
        rho = TwoPointFunction.from_expression(BERNOULLI_KL, BERN)
        cs = structure_from_contrast(rho)
        z = np.array([0.3])
        assert cs.h(z)[0, 0] == pytest.approx(100 / 21, abs=1e-8)
        assert abs(cs.gamma_low(z)[0, 0, 0]) < 1e-6
        assert cs.gamma_star_low(z)[0, 0, 0] == pytest.approx(-4000 / 441, abs=1e-5)
        g, g_star = cs.connections(z)
        model = StatisticalModel(BERN, "x*log(zeta) + (1 - x)*log(1 - zeta)", QuadratureRule("finite_sum", values=(0, 1)))
        assert abs(cs.gamma_low(z) - alpha_lowered(model, -1.0)(z)).max() < 1e-5
        assert abs(cs.gamma_star_low(z) - alpha_lowered(model, 1.0)(z)).max() < 1e-5
        assert g(z)[0, 0, 0] == pytest.approx(0.0, abs=1e-6)
        assert g_star(z)[0, 0, 0] == pytest.approx(-4000 / 441 * 21 / 100, abs=1e-5)

    def test_gaussian_kl(self):
        rho = TwoPointFunction.from_expression(GAUSSIAN_KL, GAUSS)
        cs = structure_from_contrast(rho)
        model = StatisticalModel(GAUSS, "-0.5*((x - mu)/sigma)^2 - log(sigma) - 0.5*log(2*pi)",
                                 QuadratureRule("gauss_hermite", n=24, loc="mu", scale="sigma"))
        X = np.array([[0.3, 1.4], [-0.2, 0.9]])
        assert np.max(np.abs(cs.h(X) - fisher_metric(model)(X))) < 1e-4
        assert np.max(np.abs(cs.gamma_low(X) - alpha_lowered(model, -1.0)(X))) < 1e-4
        assert np.max(np.abs(cs.gamma_star_low(X) - alpha_lowered(model, 1.0)(X))) < 1e-4
        assert leibniz_residual(rho, X) < 1e-5

    def test_not_a_contrast(self):
        rho = TwoPointFunction(LINE, lambda P, Q: (P - Q)[..., 0] + 1.0)
        with pytest.raises(NotAContrastCandidate):
            structure_from_contrast(rho, np.array([[0.0]]))
        assert not all(c.passed for c in contrast_check(rho, np.array([[0.0]])).values())

    def test_degenerate_gives_no_connections(self):
        h = expression_field([["u^2"]], LINE)
        rho = weak_contrast_from(h, constant_field([[[0.0]]], LINE))
        cs = structure_from_contrast(rho)
        with pytest.raises(DegenerateMetric):
            cs.connections(np.array([[0.0]]))


class TestWeakContrast:
    def test_identity_is_half_square(self):
        rho = weak_contrast_from(constant_field(np.eye(2), SQUARE), constant_field(np.zeros((2, 2, 2)), SQUARE))
        P, Q = np.array([0.3, -0.1]), np.array([-0.2, 0.4])
        assert rho(P, Q) == pytest.approx(0.5 * np.sum((P - Q) ** 2), abs=1e-14)

    def test_one_dimensional_cubic(self):
        rho = weak_contrast_from(constant_field([[1.0]], LINE), constant_field([[[6.0]]], LINE))
        # D = -3, so rho(p, q) = d^2/2 - d^3/2
        assert rho(np.array([0.5]), np.array([0.0])) == pytest.approx(0.125 - 0.0625, abs=1e-14)
        p = np.array([0.1])
        C = -rho_derivative(rho, [0], [0, 0], p) + rho_derivative(rho, [0, 0], [0], p)
        assert C == pytest.approx(6.0, abs=1e-8)

    def test_degenerate_metric(self):
        # h = diag(u^2, 1) with its flat-compatible cubic; rank drops on u = 0
        h = expression_field([["u^2", "0"], ["0", "1"]], SQUARE)
        C = expression_field([[["2*u", "0"], ["0", "0"]], [["0", "0"], ["0", "0"]]], SQUARE)
        rho = weak_contrast_from(h, C)
        X = np.array([[0.0, 0.0], [0.0, 0.5], [0.4, -0.3]])
        rep = weak_contrast_report(rho, h, C, X)
        assert all(c.passed for c in rep.values()), {k: c.residual for k, c in rep.items()}

    def test_asymmetric_cubic(self):
        C = np.zeros((2, 2, 2))
        C[1, 0, 0] = 1.0
        with pytest.raises(AsymmetricCubic):
            weak_contrast_from(constant_field(np.eye(2), SQUARE), constant_field(C, SQUARE))

    @given(st.integers(0, 2**32 - 1), st.booleans())
    def test_round_trip(self, seed, degenerate):
        rng = np.random.default_rng(seed)
        h = random_metric(rng, rank=1 if degenerate else None)
        C = random_cubic(rng)
        rho = weak_contrast_from(h, C)
        X = SQUARE.grid(2, 0.3)
        diag = diagonal_residuals(rho, X)
        assert max(diag.values()) < 1e-9
        cs = structure_from_contrast(rho)
        assert np.max(np.abs(cs.h(X) - h(X))) < 1e-6
        assert np.max(np.abs(cs.C(X) - C(X))) < 1e-6
        three = [-eguchi_tensor(rho, 1, 1, X), eguchi_tensor(rho, 2, 0, X), eguchi_tensor(rho, 0, 2, X)]
        assert max(np.max(np.abs(a - b)) for a in three for b in three) < 1e-7

    def test_leibniz_on_weak_contrast(self):
        rng = np.random.default_rng(4)
        rho = weak_contrast_from(random_metric(rng), random_cubic(rng))
        assert leibniz_residual(rho, SQUARE.grid(2, 0.3)) < 1e-5


class TestRelations:
    def test_flat_canonical(self):
        h = constant_field(np.eye(2), SQUARE)
        S = canonical_from_codazzi(h, constant_field(np.zeros((2, 2, 2)), SQUARE))
        rho = weak_contrast_from(h, constant_field(np.zeros((2, 2, 2)), SQUARE))
        rep = quasi_contrast_relations_check(S, rho, SQUARE.grid(2, 0.3))
        assert max(c.residual for c in rep.values()) < 1e-9

    def test_random_canonical(self):
        h, C, S = random_canonical(np.random.default_rng(9))
        rho = weak_contrast_from(S.metric(), S.generalized_cubic())
        rep = quasi_contrast_relations_check(S, rho, SQUARE.grid(2, 0.3))
        assert all(c.passed for c in rep.values()), {k: c.residual for k, c in rep.items()}

    def test_eguchi_config_steps(self):
        cfg = EguchiConfig()
        assert cfg.reach(4) > 0 and cfg.reach(2) > 0
