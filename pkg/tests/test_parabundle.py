import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from factories import SQUARE, random_canonical, random_forms, random_invertible, random_metric, random_quasi_codazzi
from quasicodazzi.chart import Chart, Field, constant_field, expression_field, map_field
from quasicodazzi.errors import DegenerateMetric, LagrangeViolated, RankDeficientPhi, SingularF, UnequalEigenRanks, \
    ValidationError
from quasicodazzi.parabundle import ParaHermitianBundle, QuasiCodazziStructure, bundle_curvature, \
    canonical_from_codazzi, canonical_minus_residual, curvature_duality_check, curvature_norms, \
    dual_bundle_connection, dual_involution_residual, eigen_split, induced_tm_connections, isomorphism_check, \
    lagrange_check, pairing_duality_residual, pullback_metric, quasi_codazzi_report, rank_drop_points, \
    structure_from_arrays, transport_structure
from quasicodazzi.statmfd import connections_from_cubic, dual_connection, lowered_levi_civita, nabla_metric

LINE = Chart(("t",), (-1.0,), (1.0,), (0.5,))
X2 = SQUARE.grid(3, 0.2)
WHITNEY2 = ParaHermitianBundle.whitney(SQUARE)


def zeros(chart, shape):
    return constant_field(np.zeros(shape), chart)


def cusp():
    phi = expression_field([["6*t"], ["3*t^2"]], LINE, name="Phi")
    z = zeros(LINE, (1, 1, 1))
    return QuasiCodazziStructure(ParaHermitianBundle.whitney(LINE), phi, z, z, allow_rank_drop=True)


def rotation_field(chart):
    """A smooth SO(4)-valued field built from two plane rotations."""
    def fn(X):
        a, b = X[..., 0], X[..., 1]
        R = np.zeros(X.shape[:-1] + (4, 4))
        c1, s1, c2, s2 = np.cos(a), np.sin(a), np.cos(b), np.sin(b)
        R[..., 0, 0], R[..., 0, 2], R[..., 2, 0], R[..., 2, 2] = c1, -s1, s1, c1
        R[..., 1, 1], R[..., 1, 3], R[..., 3, 1], R[..., 3, 3] = c2, -s2, s2, c2
        return R
    return Field(fn, (4, 4), chart, 0, "R")


def conjugated_bundle(F):
    b = WHITNEY2
    Finv = map_field(np.linalg.inv, F.shape, F)
    tau = map_field(lambda t, fi: np.swapaxes(fi, -1, -2) @ t @ fi, (4, 4), b.tau, Finv)
    inv = map_field(lambda i, f, fi: f @ i @ fi, (4, 4), b.I, F, Finv)
    return ParaHermitianBundle(SQUARE, tau, inv)


class TestBundle:
    def test_whitney_split(self):
        ep, em, res = eigen_split(WHITNEY2, X2)
        assert res == 0.0
        np.testing.assert_allclose(ep[0], np.vstack([np.eye(2), np.zeros((2, 2))]))
        np.testing.assert_allclose(em[0], np.vstack([np.zeros((2, 2)), np.eye(2)]))
        r = WHITNEY2.validate(X2)
        assert r["signature_defect"] == 0.0

    def test_rotated_involution(self):
        b = conjugated_bundle(rotation_field(SQUARE))
        _, _, res = eigen_split(b, X2)
        assert res < 1e-9
        assert max(v for k, v in b.validate(X2).items() if k != "not_identity") < 1e-9

    def test_unequal_ranks(self):
        tau = constant_field(np.eye(4), SQUARE)
        inv = constant_field(np.diag([1.0, 1.0, 1.0, -1.0]), SQUARE)
        with pytest.raises(UnequalEigenRanks):
            ParaHermitianBundle(SQUARE, tau, inv).validate(X2)

    def test_not_anti_invariant(self):
        inv = WHITNEY2.I
        with pytest.raises(ValidationError):
            ParaHermitianBundle(SQUARE, constant_field(np.eye(4), SQUARE), inv).validate(X2)

    def test_rank_mismatch(self):
        with pytest.raises(ValidationError):
            ParaHermitianBundle(LINE, WHITNEY2.tau, WHITNEY2.I)


class TestLagrange:
    def test_graph_of_symmetric_form(self):
        h = random_metric(np.random.default_rng(0))
        S = canonical_from_codazzi(h, zeros(SQUARE, (2, 2, 2)))
        assert lagrange_check(S.phi, S.bundle, X2) == 0.0

    def test_nonsymmetric_graph_rejected(self):
        A = np.array([[1.0, 2.0], [0.5, -1.0]])
        phi = constant_field(np.vstack([np.eye(2), A]), SQUARE)
        assert lagrange_check(phi, WHITNEY2, X2) == pytest.approx(1.5, abs=1e-14)

    def test_hessian_graph(self):
        # graph of the gradient of psi = u^4/12 + u v^2 / 2 + sin(v)
        phi = expression_field([["1", "0"], ["0", "1"], ["u^2", "v"], ["v", "u - sin(v)"]], SQUARE)
        assert lagrange_check(phi, WHITNEY2, X2) < 1e-9

    def test_rank_drop(self):
        S = cusp()
        X = np.array([[-0.5], [0.0], [0.5]])
        np.testing.assert_array_equal(rank_drop_points(S.phi, X), [[0.0]])
        with pytest.raises(RankDeficientPhi):
            lagrange_check(S.phi, S.bundle, X)
        assert lagrange_check(S.phi, S.bundle, X, allow_rank_drop=True) == 0.0


class TestDualConnection:
    def test_canonical_minus_represents_dual(self):
        h, C, S = random_canonical(np.random.default_rng(1))
        _, gs = connections_from_cubic(h, C)
        assert canonical_minus_residual(S, h, gs, X2) < 1e-7

    def test_frame_parallel_stays_parallel(self):
        w = dual_bundle_connection(zeros(SQUARE, (2, 2, 2)), WHITNEY2)
        assert np.max(np.abs(w(X2))) == 0.0

    @given(st.integers(0, 2**32 - 1))
    def test_involution(self, seed):
        rng = np.random.default_rng(seed)
        b = conjugated_bundle(rotation_field(SQUARE))
        S = structure_from_arrays(b, constant_field(np.vstack([np.eye(2), np.zeros((2, 2))]), SQUARE),
                                  random_forms(rng))
        assert dual_involution_residual(S, X2) < 1e-7
        assert pairing_duality_residual(S, X2) < 1e-7

    def test_curvature_of_rotation_form(self):
        w = expression_field([[["0", "0"], ["0", "0"]], [["0", "u"], ["-u", "0"]]], SQUARE)
        R = bundle_curvature(w)(np.array([0.2, 0.3]))
        np.testing.assert_allclose(R[0, 1], [[0.0, 1.0], [-1.0, 0.0]], atol=1e-9)
        np.testing.assert_allclose(R[1, 0], -R[0, 1], atol=1e-12)


class TestPullback:
    def test_euclidean(self):
        S = canonical_from_codazzi(constant_field(np.eye(2), SQUARE), zeros(SQUARE, (2, 2, 2)))
        h, res = pullback_metric(S, X2)
        np.testing.assert_array_equal(h, np.broadcast_to(np.eye(2), h.shape))
        f1, _ = S.half_pairings()
        np.testing.assert_allclose(f1(X2), 0.5 * h)
        assert res == 0.0

    def test_cusp(self):
        h, res = pullback_metric(cusp(), np.array([[0.7], [0.0]]))
        assert h[0, 0, 0] == pytest.approx(12.348, abs=1e-12)
        assert h[1, 0, 0] == 0.0 and res < 1e-12

    def test_non_lagrange(self):
        phi = constant_field(np.vstack([np.eye(2), [[0.0, 1.0], [0.0, 0.0]]]), SQUARE)
        S = structure_from_arrays(WHITNEY2, phi, zeros(SQUARE, (2, 2, 2)))
        with pytest.raises(LagrangeViolated):
            pullback_metric(S, X2)


class TestTorsionAndCubic:
    def test_relative_torsion_of_identity_map(self):
        A = np.zeros((2, 2, 2))
        A[0, 0, 1] = 1.0  # T^0_01 = Gamma^0_01 - Gamma^0_10
        h = constant_field(np.eye(2), SQUARE)
        S = canonical_from_codazzi(h, constant_field(A, SQUARE))
        T = S.relative_torsion(+1)(np.array([0.1, 0.2]))
        assert T[0, 0, 1] == pytest.approx(1.0, abs=1e-12)
        assert T[0, 1, 0] == pytest.approx(-1.0, abs=1e-12)
        assert abs(T[1]).max() == 0.0

    def test_cusp_cubic_and_kossowski(self):
        # Phi+ = 6t, Phi- = 3t^2: C = -2(18t^2 - 36t^2), Gamma = h'/2
        S = cusp()
        t = np.array([0.7])
        assert S.generalized_cubic()(t)[0, 0, 0] == pytest.approx(17.64, abs=1e-8)
        assert S.kossowski()(t)[0, 0, 0] == pytest.approx(26.46, abs=1e-8)
        assert S.kossowski_rhs()(t)[0, 0, 0] == pytest.approx(26.46, abs=1e-8)

    def test_canonical_cubic_is_covariant_derivative_of_metric(self):
        h, C, S = random_canonical(np.random.default_rng(2))
        g, _ = connections_from_cubic(h, C)
        assert np.max(np.abs(S.generalized_cubic()(X2) - nabla_metric(h, g)(X2))) < 1e-7
        assert np.max(np.abs(S.generalized_cubic()(X2) - C(X2))) < 1e-7

    def test_kossowski_on_warped_metric(self):
        h = expression_field([["1", "0"], ["0", "u^2"]], SQUARE)
        S = canonical_from_codazzi(h, zeros(SQUARE, (2, 2, 2)))
        assert np.max(np.abs(S.kossowski()(X2) - lowered_levi_civita(h)(X2))) < 1e-9


class TestCurvature:
    def test_duality(self):
        _, _, S = random_quasi_codazzi(np.random.default_rng(3))
        assert curvature_duality_check(S, X2) < 1e-5

    def test_independent_minus_connection_fails(self):
        w = expression_field([[["0", "0"], ["0", "0"]], [["0", "u"], ["-u", "0"]]], SQUARE)
        S = canonical_from_codazzi(constant_field(np.eye(2), SQUARE), zeros(SQUARE, (2, 2, 2)), wminus=w)
        assert curvature_duality_check(S, X2) > 0.5
        plus, minus = curvature_norms(S, X2)
        assert plus == 0.0 and minus > 0.5

    @given(st.integers(0, 2**32 - 1))
    def test_flat_iff_dual_flat(self, seed):
        rng = np.random.default_rng(seed)
        S = structure_from_arrays(WHITNEY2, constant_field(np.vstack([np.eye(2), np.eye(2)]), SQUARE),
                                  random_forms(rng))
        plus, minus = curvature_norms(S, X2)
        assert abs(plus - minus) < 1e-5


class TestReport:
    def test_canonical_passes(self):
        _, _, S = random_quasi_codazzi(np.random.default_rng(5))
        rep = quasi_codazzi_report(S, X2)
        assert all(c.passed for c in rep.values()), {k: c.residual for k, c in rep.items()}

    def test_torsion_in_plus_fails(self):
        A = np.zeros((2, 2, 2))
        A[1, 0, 1], A[1, 1, 0] = 0.5, -0.5
        S = canonical_from_codazzi(constant_field(np.eye(2), SQUARE), constant_field(A, SQUARE))
        rep = quasi_codazzi_report(S, X2)
        assert not rep["i"].passed
        assert rep["iii"].passed == rep["equiv_iii"].passed
        assert rep["iv"].passed == rep["equiv_iv"].passed
        assert rep["cubic_last_pair"].passed

    def test_degenerate_canonical(self):
        h = expression_field([["u^2", "0"], ["0", "1"]], SQUARE)
        z = zeros(SQUARE, (2, 2, 2))
        S = canonical_from_codazzi(h, z, wminus=z)
        X = SQUARE.grid(5, 0.2)
        assert np.any(X[..., 0] == 0.0)
        rep = quasi_codazzi_report(S, X)
        assert all(c.passed for c in rep.values()), {k: c.residual for k, c in rep.items()}

    @given(st.integers(0, 2**32 - 1))
    def test_torsion_pairing_identity(self, seed):
        # tau(T+, zeta-) - tau(zeta+, T-) equals the antisymmetrized cubic tensor
        rng = np.random.default_rng(seed)
        S = structure_from_arrays(WHITNEY2, constant_field(np.vstack([np.eye(2), np.eye(2)]), SQUARE),
                                  random_forms(rng))
        e1, e2 = (f(X2) for f in S.torsion_pairings())
        C = S.generalized_cubic()(X2)
        assert np.max(np.abs(-2 * (e1 - e2) - (C - np.swapaxes(C, -3, -2)))) < 1e-7

    @given(st.integers(0, 2**32 - 1))
    def test_cubic_last_pair_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        S = structure_from_arrays(WHITNEY2, constant_field(np.vstack([np.eye(2), np.eye(2)]), SQUARE),
                                  random_forms(rng))
        C = S.generalized_cubic()(X2)
        assert np.max(np.abs(C - np.swapaxes(C, -1, -2))) < 1e-9


class TestInducedConnections:
    def test_canonical_recovers_pair(self):
        h, C, S = random_canonical(np.random.default_rng(6))
        g, _ = connections_from_cubic(h, C)
        gp, gm = induced_tm_connections(S, X2)
        assert np.max(np.abs(gp(X2) - g(X2))) < 1e-7
        assert np.max(np.abs(gm(X2) - dual_connection(h, g)(X2))) < 1e-6

    def test_cusp(self):
        S = cusp()
        gp, _ = induced_tm_connections(S, np.array([[0.7]]))
        t = np.array([0.7])
        assert gp(t)[0, 0, 0] == pytest.approx(1 / 0.7, abs=1e-9)
        assert nabla_metric(S.metric(), gp)(t)[0, 0, 0] == pytest.approx(17.64, abs=1e-6)
        with pytest.raises(DegenerateMetric):
            induced_tm_connections(S, np.array([[0.0]]))


class TestIsomorphism:
    def test_identity(self):
        _, _, S = random_quasi_codazzi(np.random.default_rng(10))
        rep = isomorphism_check(constant_field(np.eye(4), SQUARE), S, S, X2)
        assert max(c.residual for c in rep.values()) < 1e-15

    def test_block_conjugation(self):
        h, C, S = random_canonical(np.random.default_rng(11))
        A = random_invertible(np.random.default_rng(12), 2)
        F = constant_field(np.block([[A, np.zeros((2, 2))], [np.zeros((2, 2)), np.linalg.inv(A).T]]), SQUARE)
        S2 = transport_structure(S, F)
        rep = isomorphism_check(F, S, S2, X2)
        assert all(c.passed for c in rep.values()), {k: c.residual for k, c in rep.items()}

    def test_singular(self):
        _, _, S = random_canonical(np.random.default_rng(13))
        F = constant_field(np.diag([1.0, 1.0, 1.0, 0.0]), SQUARE)
        with pytest.raises(SingularF):
            isomorphism_check(F, S, S, X2)
