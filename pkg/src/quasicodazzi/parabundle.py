"""Para-Hermitian vector bundles, Lagrange maps and quasi-Codazzi structures.

A bundle of rank ``2n`` over an ``n``-chart is stored in a global
trivialisation: ``tau`` and ``I`` are ``2n x 2n`` matrix fields.  Eigenframes
of ``I`` are obtained by projecting fixed reference vectors (chosen at the
basepoint) with ``P = (1 +/- I)/2``, which makes them smooth by construction.

Connections on the eigenbundles are stored as frame forms
``W[..., d, j, i]``: the ``e_j`` coefficient of ``nabla_{d_d} e_i``.  A
section ``e c`` then has ``nabla_d (e c) = e (d_d c + W_d c)``.

Index conventions for coefficient arrays (batch axes omitted):

* ``cplus[a, j]``: coefficient of ``Phi^+(d_j)`` on ``e^+_a``
* ``pairing[a, b] = tau(e^+_a, e^-_b)``
* covariant derivative ``V[i, a, j]``: coefficient of ``nabla_i Phi(d_j)``
* relative torsion ``T[a, i, j] = V[i, a, j] - V[j, a, i]``
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .chart import Chart, FDConfig, Field, constant_field, expression_field, grad, map_field
from .errors import (
    DegenerateMetric,
    LagrangeViolated,
    RankDeficientPhi,
    SingularF,
    UnequalEigenRanks,
    ValidationError,
)
from .statmfd import EPS_RANK, Check, codazzi_report

ANCHORS = {
    "bundle": "para-Hermitian vector bundle: involution, equal-rank eigenbundles, anti-invariant fiber metric",
    "lagrange": "image of the bundle map is Lagrange for omega = tau(., I .)",
    "half_pairing": "tau(eta+, zeta-) = tau(eta-, zeta+) = h/2",
    "dual": "dual connection on the minus eigenbundle",
    "torsion_plus": "relative torsion of the plus connection",
    "torsion_minus": "relative torsion of the minus connection",
    "cubic_symmetry": "generalized cubic tensor totally symmetric",
    "kossowski": "Kossowski pseudo-connection equals the tau split of covariant derivatives",
    "equiv_iii": "tau(T+, zeta-) = tau(zeta+, T-)  <=>  cubic tensor symmetric",
    "equiv_iv": "tau(T+, zeta-) = -tau(zeta+, T-)  <=>  Kossowski identity",
    "curvature_duality": "tau(R+ nu+, nu-) + tau(nu+, R- nu-) = 0",
    "iso": "isomorphism of quasi-Codazzi structures",
}


def _depth(*fields: Field) -> int:
    return max((f.depth for f in fields), default=0)


def _pick_reference(P: np.ndarray, n: int) -> np.ndarray:
    """n columns of projector P (at the basepoint) spanning its range, via pivoted QR."""
    _, r, piv = scipy.linalg.qr(P, pivoting=True)
    diag = np.abs(np.diag(r))
    if np.sum(diag > 1e-8 * max(diag[0], 1e-300)) < n:
        raise UnequalEigenRanks("eigenbundle rank below n at the basepoint")
    return P[:, np.sort(piv[:n])]


@dataclass
class ParaHermitianBundle:
    chart: Chart
    tau: Field
    I: Field
    name: str = ""
    _ref: tuple = field(default=None, repr=False)

    def __post_init__(self):
        m = self.tau.shape[0]
        if m % 2 or self.tau.shape != (m, m) or self.I.shape != (m, m):
            raise ValidationError("tau and I must be square fields of even size 2n")
        if m != 2 * self.chart.dim:
            raise ValidationError(f"bundle rank {m} must be twice the base dimension {self.chart.dim}")
        base = self.chart.base
        Iv = self.I(base)
        Pp, Pm = 0.5 * (np.eye(m) + Iv), 0.5 * (np.eye(m) - Iv)
        n = self.chart.dim
        self._ref = (_pick_reference(Pp, n), _pick_reference(Pm, n))
        self._fixed = None
        if self.I.constant is not None:
            # constant involution: frames and coefficient extraction are constant too
            ep, em = Pp @ self._ref[0], Pm @ self._ref[1]
            ext = [np.linalg.solve(e.T @ e, e.T @ P) for e, P in ((ep, Pp), (em, Pm))]
            self._fixed = (Pp, Pm, ep, em, ext[0], ext[1])

    @property
    def n(self) -> int:
        return self.chart.dim

    @classmethod
    def whitney(cls, chart: Chart) -> "ParaHermitianBundle":
        """TM + T*M with tau(X+a, Y+b) = b(X) + a(Y) and I(X+a) = X - a."""
        n = chart.dim
        z, e = np.zeros((n, n)), np.eye(n)
        tau = np.block([[z, e], [e, z]])
        inv = np.block([[e, z], [z, -e]])
        return cls(chart, constant_field(tau, chart, "tau"), constant_field(inv, chart, "I"), "whitney")

    def projectors(self, X):
        if self._fixed is not None:
            shape = np.shape(X)[:-1] + self._fixed[0].shape
            return np.broadcast_to(self._fixed[0], shape), np.broadcast_to(self._fixed[1], shape)
        Iv = self.I(X)
        eye = np.eye(Iv.shape[-1])
        return 0.5 * (eye + Iv), 0.5 * (eye - Iv)

    def frames_at(self, X):
        if self._fixed is not None:
            shape = np.shape(X)[:-1] + self._fixed[2].shape
            return np.broadcast_to(self._fixed[2], shape), np.broadcast_to(self._fixed[3], shape)
        Pp, Pm = self.projectors(X)
        return Pp @ self._ref[0], Pm @ self._ref[1]

    def frame_field(self, sign: int) -> Field:
        m = 2 * self.n
        k = 0 if sign > 0 else 1
        return Field(lambda X: self.frames_at(X)[k], (m, self.n), self.chart, self.I.depth, f"frame{'+-'[k]}")

    def pairing_at(self, X):
        ep, em = self.frames_at(X)
        return np.swapaxes(ep, -1, -2) @ self.tau(X) @ em

    def pairing_field(self) -> Field:
        return Field(self.pairing_at, (self.n, self.n), self.chart, _depth(self.tau, self.I), "pairing")

    def omega_at(self, X):
        return self.tau(X) @ self.I(X)

    def coefficients(self, X, vectors, sign: int):
        """Frame coefficients of the E^+ (sign>0) or E^- component of ambient vectors."""
        if self._fixed is not None:
            return self._fixed[4 if sign > 0 else 5] @ vectors
        Pp, Pm = self.projectors(X)
        ep, em = self.frames_at(X)
        P, e = (Pp, ep) if sign > 0 else (Pm, em)
        # frame columns are projections of pivoted reference vectors, so e^T e is well conditioned
        et = np.swapaxes(e, -1, -2)
        return np.linalg.solve(et @ e, et @ (P @ vectors))

    def residuals(self, X) -> dict[str, float]:
        X = np.asarray(X, dtype=float)
        Iv, tv = self.I(X), self.tau(X)
        m = Iv.shape[-1]
        eye = np.eye(m)
        ep, em = self.frames_at(X)
        tr = np.trace(0.5 * (eye + Iv), axis1=-2, axis2=-1)
        ev = np.linalg.eigvalsh(0.5 * (tv + np.swapaxes(tv, -1, -2)))
        scale = np.maximum(np.max(np.abs(ev), axis=-1), 1.0)
        npos = np.sum(ev > 1e-10 * scale[..., None], axis=-1)
        nneg = np.sum(ev < -1e-10 * scale[..., None], axis=-1)
        om = tv @ Iv
        return {
            "involution": float(np.max(np.abs(Iv @ Iv - eye))),
            "not_identity": float(np.max(np.abs(Iv - eye))),
            "rank_plus_minus_n": float(np.max(np.abs(tr - self.n))),
            "anti_invariance": float(np.max(np.abs(np.swapaxes(Iv, -1, -2) @ tv + tv @ Iv))),
            "tau_symmetry": float(np.max(np.abs(tv - np.swapaxes(tv, -1, -2)))),
            "signature_defect": float(np.max(np.abs(npos - self.n) + np.abs(nneg - self.n))),
            "omega_antisymmetry": float(np.max(np.abs(om + np.swapaxes(om, -1, -2)))),
            "eigen_plus": float(np.max(np.abs(Iv @ ep - ep))),
            "eigen_minus": float(np.max(np.abs(Iv @ em + em))),
        }

    def validate(self, X, tol: float = 1e-10) -> dict[str, float]:
        r = self.residuals(X)
        if r["rank_plus_minus_n"] > 1e-8:
            raise UnequalEigenRanks(f"eigenbundles of unequal rank (trace defect {r['rank_plus_minus_n']:.3e})")
        if r["not_identity"] < tol:
            raise ValidationError("involution equals the identity")
        for key in ("involution", "anti_invariance", "tau_symmetry", "signature_defect", "eigen_plus", "eigen_minus"):
            if r[key] > tol:
                raise ValidationError(f"bundle invariant {key} violated (residual {r[key]:.3e})")
        return r


def eigen_split(bundle: ParaHermitianBundle, X):
    """Smooth eigenframes (e+, e-) at X and their eigen-equation residual."""
    ep, em = bundle.frames_at(np.asarray(X, dtype=float))
    Iv = bundle.I(np.asarray(X, dtype=float))
    res = max(float(np.max(np.abs(Iv @ ep - ep))), float(np.max(np.abs(Iv @ em + em))))
    return ep, em, res


def rank_drop_points(phi: Field, X, rank_tol: float = 1e-10) -> np.ndarray:
    """Grid points where Phi has rank below n."""
    X = np.asarray(X, dtype=float)
    s = np.linalg.svd(phi(X), compute_uv=False)
    bad = s[..., -1] <= rank_tol * np.maximum(s[..., 0], 1.0)
    return X.reshape(-1, X.shape[-1])[bad.ravel()]


def lagrange_check(phi: Field, bundle: ParaHermitianBundle, X, rank_tol: float = 1e-10,
                   allow_rank_drop: bool = False) -> float:
    X = np.asarray(X, dtype=float)
    P = phi(X)
    drops = rank_drop_points(phi, X, rank_tol)
    if len(drops) and not allow_rank_drop:
        raise RankDeficientPhi(f"bundle map has rank below n at {drops[0].tolist()}", points=drops.tolist())
    om = bundle.omega_at(X)
    return float(np.max(np.abs(np.swapaxes(P, -1, -2) @ om @ P)))


# ---------------------------------------------------------------------------
# connections on the eigenbundles


def dual_bundle_connection(w: Field, bundle: ParaHermitianBundle, cfg: FDConfig = FDConfig(),
                           from_side: str = "plus") -> Field:
    """Frame forms of the tau-dual connection on the other eigenbundle.

    With a = tau(e+_a, e-_b): d a = W+^T a + a W-, so W- = a^{-1}(d a - W+^T a).
    From the minus side the same law holds with a transposed.
    """
    pair = bundle.pairing_field()
    if from_side == "minus":
        pair = map_field(lambda a: np.swapaxes(a, -1, -2), pair.shape, pair)
    da = grad(pair, cfg)

    def fn(X):
        a = pair(X)
        ainv = np.linalg.inv(a)
        W = w(X)
        return ainv[..., None, :, :] @ (da(X) - np.swapaxes(W, -1, -2) @ a[..., None, :, :])

    return Field(fn, w.shape, bundle.chart, _depth(da, w), "dual_forms")


def bundle_curvature(w: Field, cfg: FDConfig = FDConfig()) -> Field:
    """R[i, j] = d_i W_j - d_j W_i + W_i W_j - W_j W_i (matrix in the frame)."""
    dw = grad(w, cfg)
    n = w.shape[0]
    m = w.shape[1]

    def fn(X):
        W = w(X)
        d = dw(X)  # d[i, j] = d_i W_j
        WW = W[..., :, None, :, :] @ W[..., None, :, :, :]
        return d - np.swapaxes(d, -4, -3) + WW - np.swapaxes(WW, -4, -3)

    return Field(fn, (n, n, m, m), w.chart, dw.depth, "bundle_curvature")


# ---------------------------------------------------------------------------
# quasi-Codazzi structures


@dataclass
class QuasiCodazziStructure:
    bundle: ParaHermitianBundle
    phi: Field
    wplus: Field
    wminus: Field
    cfg: FDConfig = field(default_factory=FDConfig)
    name: str = ""
    # tolerate isolated points where Phi loses rank (parametrised curves with a cusp)
    allow_rank_drop: bool = False

    @property
    def chart(self) -> Chart:
        return self.bundle.chart

    @property
    def n(self) -> int:
        return self.bundle.n

    # coefficient fields ---------------------------------------------------
    def cplus(self) -> Field:
        b, phi = self.bundle, self.phi
        return Field(lambda X: b.coefficients(X, phi(X), +1), (self.n, self.n), self.chart,
                     _depth(phi, b.I), "Phi+")

    def cminus(self) -> Field:
        b, phi = self.bundle, self.phi
        return Field(lambda X: b.coefficients(X, phi(X), -1), (self.n, self.n), self.chart,
                     _depth(phi, b.I), "Phi-")

    def metric(self) -> Field:
        tau, phi = self.bundle.tau, self.phi
        return map_field(lambda t, p: np.swapaxes(p, -1, -2) @ t @ p, (self.n, self.n), tau, phi, name="h")

    def half_pairings(self) -> tuple[Field, Field]:
        """(tau(Phi+ Y, Phi- Z), tau(Phi- Y, Phi+ Z)) as n x n fields."""
        a = self.bundle.pairing_field()
        cp, cm = self.cplus(), self.cminus()
        f1 = map_field(lambda A, p, m: np.swapaxes(p, -1, -2) @ A @ m, (self.n, self.n), a, cp, cm)
        f2 = map_field(lambda A, p, m: np.swapaxes(m, -1, -2) @ np.swapaxes(A, -1, -2) @ p, (self.n, self.n), a, cp, cm)
        return f1, f2

    def covariant_phi(self, sign: int) -> Field:
        """V[i, a, j]: frame coefficients of nabla^{+/-}_i Phi^{+/-}(d_j)."""
        c = self.cplus() if sign > 0 else self.cminus()
        w = self.wplus if sign > 0 else self.wminus
        dc = grad(c, self.cfg)
        return map_field(lambda d, W, C: d + W @ C[..., None, :, :], (self.n,) * 3, dc, w, c, name="nabla Phi")

    # operations -------------------------------------------------------------
    def relative_torsion(self, sign: int) -> Field:
        V = self.covariant_phi(sign)
        return map_field(lambda v: np.swapaxes(v, -3, -2) - np.moveaxis(np.swapaxes(v, -3, -2), -1, -2),
                         (self.n,) * 3, V, name="relative torsion")

    def _tau_terms(self) -> tuple[Field, Field]:
        """t1[i,j,k] = tau(nabla+_i eta+_j, zeta-_k); t2[i,j,k] = tau(zeta+_k, nabla-_i eta-_j)."""
        a = self.bundle.pairing_field()
        Vp, Vm = self.covariant_phi(+1), self.covariant_phi(-1)
        cp, cm = self.cplus(), self.cminus()
        t1 = map_field(lambda A, v, m: np.einsum("...iaj,...ab,...bk->...ijk", v, A, m), (self.n,) * 3, a, Vp, cm)
        t2 = map_field(lambda A, v, p: np.einsum("...ak,...ab,...ibj->...ijk", p, A, v), (self.n,) * 3, a, Vm, cp)
        return t1, t2

    def generalized_cubic(self) -> Field:
        t1, t2 = self._tau_terms()
        return map_field(lambda x, y: -2.0 * (x - y), (self.n,) * 3, t1, t2, name="C")

    def kossowski(self) -> Field:
        """Six-term pseudo-connection with coordinate fields (bracket terms vanish)."""
        hp, _ = self.half_pairings()
        dhp = grad(hp, self.cfg)

        def fn(d):
            # d[i, j, k] = d_i tau(eta+_j, zeta-_k)
            # Gamma = X tau(eta+, zeta-) + Y tau(zeta+, xi-) - Z tau(xi+, eta-)
            return d + np.moveaxis(d, -1, -3) - np.moveaxis(d, -3, -1)

        return map_field(fn, (self.n,) * 3, dhp, name="Gamma")

    def kossowski_rhs(self) -> Field:
        t1, t2 = self._tau_terms()
        return map_field(lambda x, y: x + y, (self.n,) * 3, t1, t2)

    def torsion_pairings(self) -> tuple[Field, Field]:
        """E1[i,j,k] = tau(T+(d_i,d_j), zeta-_k); E2[i,j,k] = tau(zeta+_k, T-(d_i,d_j))."""
        a = self.bundle.pairing_field()
        Tp, Tm = self.relative_torsion(+1), self.relative_torsion(-1)
        cp, cm = self.cplus(), self.cminus()
        e1 = map_field(lambda A, t, m: np.einsum("...aij,...ab,...bk->...ijk", t, A, m), (self.n,) * 3, a, Tp, cm)
        e2 = map_field(lambda A, t, p: np.einsum("...ak,...ab,...bij->...ijk", p, A, t), (self.n,) * 3, a, Tm, cp)
        return e1, e2

    def curvatures(self) -> tuple[Field, Field]:
        return bundle_curvature(self.wplus, self.cfg), bundle_curvature(self.wminus, self.cfg)


def pullback_metric(S: QuasiCodazziStructure, X, lagrange_tol: float = 1e-9):
    """h at X plus the half-pairing residual; refuses non-Lagrange maps."""
    X = np.asarray(X, dtype=float)
    lag = lagrange_check(S.phi, S.bundle, X, allow_rank_drop=S.allow_rank_drop)
    if lag > lagrange_tol:
        raise LagrangeViolated(f"bundle map is not Lagrange (residual {lag:.3e})")
    h = S.metric()(X)
    f1, f2 = S.half_pairings()
    res = max(float(np.max(np.abs(f1(X) - 0.5 * h))), float(np.max(np.abs(f2(X) - 0.5 * h))))
    return h, res


def curvature_duality_check(S: QuasiCodazziStructure, X) -> float:
    X = np.asarray(X, dtype=float)
    Rp, Rm = S.curvatures()
    a = S.bundle.pairing_at(X)[..., None, None, :, :]
    return float(np.max(np.abs(np.swapaxes(Rp(X), -1, -2) @ a + a @ Rm(X))))


def curvature_norms(S: QuasiCodazziStructure, X) -> tuple[float, float]:
    Rp, Rm = S.curvatures()
    return float(np.max(np.abs(Rp(X)))), float(np.max(np.abs(Rm(X))))


def dual_involution_residual(S: QuasiCodazziStructure, X) -> float:
    back = dual_bundle_connection(S.wminus, S.bundle, S.cfg, from_side="minus")
    return float(np.max(np.abs(back(X) - S.wplus(X))))


def pairing_duality_residual(S: QuasiCodazziStructure, X) -> float:
    """max |d a - W+^T a - a W-| with a = tau(e+, e-): the two connections are tau-dual."""
    X = np.asarray(X, dtype=float)
    pair = S.bundle.pairing_field()
    da = grad(pair, S.cfg)(X)
    a = pair(X)[..., None, :, :]
    return float(np.max(np.abs(da - np.swapaxes(S.wplus(X), -1, -2) @ a - a @ S.wminus(X))))


def quasi_codazzi_report(S: QuasiCodazziStructure, X, tol: float = 1e-6, alg_tol: float = 1e-9) -> dict[str, Check]:
    X = np.asarray(X, dtype=float)
    Tp = S.relative_torsion(+1)(X)
    Tm = S.relative_torsion(-1)(X)
    C = S.generalized_cubic()(X)
    G = S.kossowski()(X)
    rhs = S.kossowski_rhs()(X)
    e1, e2 = (f(X) for f in S.torsion_pairings())
    return {
        "i": Check("relative torsion (plus)", float(np.max(np.abs(Tp))), tol, ANCHORS["torsion_plus"]),
        "ii": Check("relative torsion (minus)", float(np.max(np.abs(Tm))), tol, ANCHORS["torsion_minus"]),
        "iii": Check("cubic total symmetry", float(np.max(np.abs(C - np.swapaxes(C, -3, -2)))), tol,
                     ANCHORS["cubic_symmetry"]),
        "iv": Check("Kossowski identity", float(np.max(np.abs(G - rhs))), tol, ANCHORS["kossowski"]),
        "equiv_iii": Check("tau(T+,zeta-) - tau(zeta+,T-)", float(np.max(np.abs(e1 - e2))), tol, ANCHORS["equiv_iii"]),
        "equiv_iv": Check("tau(T+,zeta-) + tau(zeta+,T-)", float(np.max(np.abs(e1 + e2))), tol, ANCHORS["equiv_iv"]),
        "cubic_last_pair": Check("C(X,Y,Z) - C(X,Z,Y)", float(np.max(np.abs(C - np.swapaxes(C, -1, -2)))), alg_tol,
                                 ANCHORS["cubic_symmetry"]),
    }


def phi_invertible(S: QuasiCodazziStructure, X, sign: int, eps_rank: float = EPS_RANK) -> bool:
    c = (S.cplus() if sign > 0 else S.cminus())(np.asarray(X, dtype=float))
    s = np.linalg.svd(c, compute_uv=False)
    return bool(np.all(s[..., -1] > eps_rank * np.maximum(s[..., 0], 1.0)))


# ---------------------------------------------------------------------------
# builders


def structure_from_arrays(bundle: ParaHermitianBundle, phi: Field, wplus: Field, wminus: Field | None = None,
                          cfg: FDConfig = FDConfig(), name: str = "") -> QuasiCodazziStructure:
    if wminus is None:
        wminus = dual_bundle_connection(wplus, bundle, cfg)
    return QuasiCodazziStructure(bundle, phi, wplus, wminus, cfg, name)


def canonical_from_codazzi(h: Field, gamma: Field, gamma_star: Field | None = None, cfg: FDConfig = FDConfig(),
                           points=None, tol: float = 1e-5, wminus: Field | None = None,
                           name: str = "canonical") -> QuasiCodazziStructure:
    """Whitney-sum structure with Xi(X) = (X, h(X, .)/2), nabla+ = nabla.

    nabla- is the connection induced on T*M by duality with nabla+; for
    nondegenerate h it represents nabla* through h (checked separately by
    :func:`canonical_minus_residual`).  When ``points`` and ``gamma_star``
    are given the Codazzi conditions are verified first.
    """
    chart = h.chart
    n = chart.dim
    if points is not None and gamma_star is not None:
        rep = codazzi_report(h, gamma, gamma_star, points, cfg, tol)
        bad = [k for k, c in rep.items() if not c.passed]
        if bad:
            from .errors import ToleranceFailure

            raise ToleranceFailure(f"input is not a Codazzi structure: conditions {bad} fail")
    bundle = ParaHermitianBundle.whitney(chart)
    phi = map_field(lambda hv: np.concatenate([np.broadcast_to(np.eye(n), hv.shape), 0.5 * hv], axis=-2),
                    (2 * n, n), h, name="Xi")
    wplus = map_field(lambda g: np.einsum("...jdi->...dji", g), (n, n, n), gamma, name="W+")
    if wminus is None:
        wminus = map_field(lambda g: -np.einsum("...jdi->...dij", g), (n, n, n), gamma, name="W-")
    return QuasiCodazziStructure(bundle, phi, wplus, wminus, cfg, name)


def canonical_minus_residual(S: QuasiCodazziStructure, h: Field, gamma_star: Field, X) -> float:
    """max | nabla-_X h~(Y) - h~(nabla*_X Y) | over coordinate fields."""
    X = np.asarray(X, dtype=float)
    dh = grad(h, S.cfg)(X)  # d_d h_jk
    hv = h(X)
    Wm = S.wminus(X)  # Wm[d, k, l]: du^k coefficient of nabla_d du^l
    lhs = dh + np.einsum("...dkl,...jl->...djk", Wm, hv)
    rhs = np.einsum("...mdj,...mk->...djk", gamma_star(X), hv)
    return float(np.max(np.abs(lhs - rhs)))


def induced_tm_connections(S: QuasiCodazziStructure, X=None, eps_rank: float = EPS_RANK) -> tuple[Field, Field]:
    """Connections on TM with Phi+-(nabla~+-_X Y) = nabla+-_X Phi+-(Y); need h nondegenerate."""

    def make(sign):
        c = S.cplus() if sign > 0 else S.cminus()
        V = S.covariant_phi(sign)

        def fn(Xp):
            cv = c(Xp)
            s = np.linalg.svd(cv, compute_uv=False)
            bad = np.flatnonzero((s[..., -1] <= eps_rank * np.maximum(s[..., 0], 1.0)).ravel())
            if bad.size:
                pts = np.asarray(Xp).reshape(-1, Xp.shape[-1])
                raise DegenerateMetric(pts[bad[0]], float(s.reshape(-1, s.shape[-1])[bad[0], -1]))
            # gamma[k, i, j] = (c^{-1} V[i])[k, j]
            sol = np.linalg.inv(cv)[..., None, :, :] @ V(Xp)
            return np.swapaxes(sol, -3, -2)

        return Field(fn, (S.n,) * 3, S.chart, V.depth, "induced")

    gp, gm = make(+1), make(-1)
    if X is not None:
        gp(np.asarray(X, dtype=float))
        gm(np.asarray(X, dtype=float))
    return gp, gm


def transport_structure(S: QuasiCodazziStructure, F: Field, name: str = "") -> QuasiCodazziStructure:
    """Push a structure through a fiberwise isomorphism F (an ambient 2n x 2n field)."""
    b = S.bundle
    Finv = map_field(np.linalg.inv, F.shape, F)
    tau2 = map_field(lambda t, fi: np.swapaxes(fi, -1, -2) @ t @ fi, b.tau.shape, b.tau, Finv)
    I2 = map_field(lambda i, f, fi: f @ i @ fi, b.I.shape, b.I, F, Finv)
    bundle2 = ParaHermitianBundle(b.chart, tau2, I2, name or "transported")
    phi2 = map_field(lambda f, p: f @ p, S.phi.shape, F, S.phi)

    def frame_change(sign):
        e1 = b.frame_field(sign)
        e2 = bundle2.frame_field(sign)
        return map_field(lambda a, f, c: np.linalg.pinv(a) @ f @ c, (S.n, S.n), e2, F, e1)

    def forms(sign, w):
        M = frame_change(sign)
        dM = grad(M, S.cfg)

        def fn(X):
            Mv = M(X)
            Minv = np.linalg.inv(Mv)[..., None, :, :]
            return (Mv[..., None, :, :] @ w(X) - dM(X)) @ Minv

        return Field(fn, w.shape, S.chart, _depth(dM, w), f"W{'+-'[sign < 0]}")

    return QuasiCodazziStructure(bundle2, phi2, forms(+1, S.wplus), forms(-1, S.wminus), S.cfg, name or S.name)


def isomorphism_check(F: Field, S1: QuasiCodazziStructure, S2: QuasiCodazziStructure, X,
                      tol: float = 1e-6, cond_max: float = 1e10) -> dict[str, Check]:
    X = np.asarray(X, dtype=float)
    Fv = F(X)
    cond = np.linalg.cond(Fv)
    if not np.all(np.isfinite(cond)) or np.any(cond > cond_max):
        raise SingularF(f"F is not fiberwise invertible (condition number {float(np.max(cond)):.3e})")
    b1, b2 = S1.bundle, S2.bundle
    r1 = float(np.max(np.abs(Fv @ S1.phi(X) - S2.phi(X))))
    r2 = float(np.max(np.abs(Fv @ b1.I(X) - b2.I(X) @ Fv)))
    r3 = float(np.max(np.abs(np.swapaxes(Fv, -1, -2) @ b2.tau(X) @ Fv - b1.tau(X))))
    r4 = 0.0
    conj = 0.0
    R1 = S1.curvatures()
    R2 = S2.curvatures()
    for k, sign in enumerate((+1, -1)):
        e1, e2 = b1.frame_field(sign), b2.frame_field(sign)
        M = map_field(lambda a, f, c: np.linalg.pinv(a) @ f @ c, (S1.n, S1.n), e2, F, e1)
        dM = grad(M, S1.cfg)
        w1 = S1.wplus if sign > 0 else S1.wminus
        w2 = S2.wplus if sign > 0 else S2.wminus
        Mv = M(X)[..., None, :, :]
        r4 = max(r4, float(np.max(np.abs(dM(X) + w2(X) @ Mv - Mv @ w1(X)))))
        Mc = M(X)[..., None, None, :, :]
        conj = max(conj, float(np.max(np.abs(Mc @ R1[k](X) - R2[k](X) @ Mc))))
    dh = float(np.max(np.abs(S1.metric()(X) - S2.metric()(X))))
    dC = float(np.max(np.abs(S1.generalized_cubic()(X) - S2.generalized_cubic()(X))))
    a = ANCHORS["iso"]
    return {
        "i": Check("F Phi1 = Phi2", r1, tol, a),
        "ii": Check("F I1 = I2 F", r2, tol, a),
        "iii": Check("tau isometry", r3, tol, a),
        "iv": Check("connection equivariance", r4, tol, a),
        "h_equal": Check("h1 = h2", dh, tol, a),
        "C_equal": Check("C1 = C2", dC, tol, a),
        "curvature_conjugate": Check("F R1 = R2 F", conj, 1e-5, a),
    }


def canonical_isomorphism(S: QuasiCodazziStructure, eps_rank: float = EPS_RANK):
    """F = (Phi+)^{-1} + h~ (Phi-)^{-1}/2 and the canonical model it maps onto."""
    n = S.n
    b = S.bundle
    gp, gm = induced_tm_connections(S, eps_rank=eps_rank)
    h = S.metric()
    target = canonical_from_codazzi(h, gp, gm, S.cfg, name="canonical model")
    cp, cm = S.cplus(), S.cminus()

    def fn(X):
        Pp, Pm = b.projectors(X)
        ep, em = b.frames_at(X)
        top = np.linalg.inv(cp(X)) @ np.linalg.pinv(ep) @ Pp
        bot = 0.5 * h(X) @ np.linalg.inv(cm(X)) @ np.linalg.pinv(em) @ Pm
        return np.concatenate([top, bot], axis=-2)

    F = Field(fn, (2 * n, 2 * n), S.chart, _depth(cp, cm, h), "F")
    return F, target


# ---------------------------------------------------------------------------
# wavefronts in flat space


def _cofactor_normal(J: np.ndarray) -> np.ndarray:
    """Generalized cross product of the n columns of an (n+1) x n matrix."""
    m = J.shape[-2]
    out = []
    for k in range(m):
        minor = np.delete(J, k, axis=-2)
        out.append((-1) ** k * np.linalg.det(minor))
    return np.stack(out, axis=-1)


# coarser ladder for fronts: nu is already a derivative of f, so the torsion and
# cubic checks differentiate f three times
FRONT_FD = FDConfig(step=3e-3, nested_steps=(5e-3, 3e-2))


def front_structure(sources, chart: Chart, cfg: FDConfig = FRONT_FD, normal_hint=None,
                    singular_tol: float = 1e-10, smoothing_step: float = 1e-4,
                    name: str = "front") -> QuasiCodazziStructure:
    """Quasi-Codazzi structure of a front f: U -> R^{n+1} in flat space.

    The bundle is E = T + T over the rank-n bundle T orthogonal to the unit
    normal, with tau((a,b),(c,d)) = <a,d> + <b,c>, I = (id, -id), Phi = (df,
    dnu) in an orthonormal frame of T and the tangential connection on both
    halves.  Where the cofactor normal vanishes (the singular set), nu is the
    Richardson-extrapolated symmetric average of its neighbours.
    """
    n = chart.dim
    f = expression_field(list(sources), chart, name="front map")
    if f.shape != (n + 1,):
        raise ValidationError(f"front map needs {n + 1} components for a {n}-dimensional chart")
    # a coarse first step keeps roundoff in df small enough to differentiate nu again
    df = grad(f, cfg, step=max(cfg.step, 1e-3))  # (n, n+1): df[i] = d_i f

    base = chart.base
    N0 = _cofactor_normal(np.swapaxes(df(base), -1, -2))
    if normal_hint is None:
        if np.linalg.norm(N0) == 0:
            raise ValidationError("basepoint lies on the singular set; give a normal hint")
        hint = N0 / np.linalg.norm(N0)
    else:
        hint = np.asarray(normal_hint, dtype=float)

    def raw(X):
        N = _cofactor_normal(np.swapaxes(df(X), -1, -2))
        J = df(X)
        scale = np.prod(np.maximum(np.linalg.norm(J, axis=-1), 1e-300), axis=-1)
        nrm = np.linalg.norm(N, axis=-1)
        good = nrm > singular_tol * np.maximum(scale, 1.0)
        u = N / np.where(good, nrm, 1.0)[..., None]
        s = np.sign(np.einsum("...k,k->...", u, hint))
        s = np.where(s == 0, 1.0, s)
        return u * s[..., None], good, nrm

    def nu_fn(X):
        u, good, _ = raw(X)
        if np.all(good):
            return u
        bad = np.argwhere(~good)
        out = u.copy()
        for idx in map(tuple, bad):
            p = X[idx]
            best, best_dir = -1.0, 0
            for d in range(n):
                e = np.zeros(n)
                e[d] = smoothing_step
                _, _, nr = raw(np.stack([p + e, p - e]))
                if nr.min() > best:
                    best, best_dir = nr.min(), d
            e = np.zeros(n)
            e[best_dir] = smoothing_step
            pts = np.stack([p + e, p - e, p + e / 2, p - e / 2])
            v, ok, _ = raw(pts)
            if not np.all(ok):
                raise ValidationError(f"singular set is not a hypersurface near {p.tolist()}")
            # nu(p) = avg(h) + O(h^2); Richardson removes the h^2 term
            est = (4 * 0.5 * (v[2] + v[3]) - 0.5 * (v[0] + v[1])) / 3
            out[idx] = est / np.linalg.norm(est)
        return out

    nu = Field(nu_fn, (n + 1,), chart, df.depth, "nu")
    dnu = grad(nu, cfg)

    # orthonormal frame of nu^perp by projecting fixed ambient axes
    nb = nu(base)
    drop = int(np.argmax(np.abs(nb)))
    axes = [k for k in range(n + 1) if k != drop]

    def frame_fn(X):
        v = nu(X)
        vecs = []
        for k in axes:
            e = np.zeros(n + 1)
            e[k] = 1.0
            t = e - v * v[..., k:k + 1]
            for prev in vecs:
                t = t - prev * np.sum(prev * t, axis=-1, keepdims=True)
            vecs.append(t / np.linalg.norm(t, axis=-1, keepdims=True))
        return np.stack(vecs, axis=-1)  # (n+1, n)

    frame = Field(frame_fn, (n + 1, n), chart, nu.depth, "tangent frame")
    dframe = grad(frame, cfg)

    def phi_fn(X):
        t = frame(X)
        tt = np.swapaxes(t, -1, -2)
        a = tt @ np.swapaxes(df(X), -1, -2)  # (n, n): <d_j f, t_a>
        b = tt @ np.swapaxes(dnu(X), -1, -2)
        return np.concatenate([a, b], axis=-2)

    phi = Field(phi_fn, (2 * n, n), chart, max(dnu.depth, frame.depth), "Phi")

    def w_fn(X):
        t = frame(X)
        d = dframe(X)  # d[d, :, i] = d_d t_i
        return np.swapaxes(t, -1, -2)[..., None, :, :] @ d  # W[d, j, i] = <d_d t_i, t_j>

    w = Field(w_fn, (n, n, n), chart, dframe.depth, "tangential connection")
    bundle = ParaHermitianBundle.whitney(chart)
    S = QuasiCodazziStructure(bundle, phi, w, w, cfg, name)
    S.front = {"map": f, "normal": nu, "frame": frame}
    return S
