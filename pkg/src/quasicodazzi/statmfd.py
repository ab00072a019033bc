"""Metrics, affine connections and statistical models on a single chart.

Index conventions (batch axes omitted):

* metric ``h[i, j]``; cubic tensor ``C[i, j, k]``
* connection ``gamma[k, i, j]`` with ``nabla_{d_i} d_j = gamma[k, i, j] d_k``
* lowered connection ``low[i, j, k] = h(nabla_{d_i} d_j, d_k)``
* torsion ``T[k, i, j]``; curvature ``R[l, k, i, j]`` is the ``d_l`` component
  of ``R(d_i, d_j) d_k``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .chart import Chart, FDConfig, Field, grad, map_field
from .errors import (
    AsymmetricCubic,
    DegenerateMetric,
    DegenerateOnOpenSet,
    EigenvalueTrackingAmbiguous,
    NonFiniteValue,
    NotDegenerateAtOrigin,
    QuadratureFailure,
)
from .chart import QuadratureRule, _check_stencil, stencil
from .expr import Expr

EPS_RANK = 1e-8
EPS_SYM = 1e-9


# ---------------------------------------------------------------------------
# rank handling


def singular_values(hval: np.ndarray) -> np.ndarray:
    return np.linalg.svd(hval, compute_uv=False)


def rank_report(hval: np.ndarray, eps_rank: float = EPS_RANK) -> tuple[np.ndarray, np.ndarray]:
    """(rank, min singular value) per point.

    The cutoff is ``eps_rank * max(sigma_max, 1)``: purely relative cutoffs
    never flag a one-dimensional metric, so the scale is floored at one.
    """
    s = singular_values(hval)
    cut = eps_rank * np.maximum(s[..., 0], 1.0)
    return np.sum(s > cut[..., None], axis=-1), s[..., -1]


def require_nondegenerate(hval: np.ndarray, X: np.ndarray, eps_rank: float = EPS_RANK) -> None:
    n = hval.shape[-1]
    rank, smin = rank_report(hval.reshape(-1, n, n), eps_rank)
    bad = np.flatnonzero(rank < n)
    if bad.size:
        pts = np.asarray(X, dtype=float).reshape(-1, np.shape(X)[-1])
        raise DegenerateMetric(pts[bad[0]] if len(pts) > bad[0] else pts[0], float(smin[bad[0]]))


def safe_inverse(hval: np.ndarray, X: np.ndarray, eps_rank: float = EPS_RANK) -> np.ndarray:
    require_nondegenerate(hval, X, eps_rank)
    return np.linalg.inv(hval)


# ---------------------------------------------------------------------------
# connections


def lowered_levi_civita(h: Field, cfg: FDConfig = FDConfig()) -> Field:
    """Christoffel symbols of the first kind; defined for degenerate ``h`` too."""
    dh = grad(h, cfg)

    def fn(d):
        # d[i, j, k] = d_i h_jk ; low[i, j, k] = 1/2 (d_i h_jk + d_j h_ik - d_k h_ij)
        return 0.5 * (d + np.swapaxes(d, -3, -2) - np.moveaxis(d, -3, -1))

    return map_field(fn, h.shape + h.shape[:1], dh, name="levi_civita_lowered")


def raise_index(h: Field, low: Field, eps_rank: float = EPS_RANK) -> Field:
    """gamma[m, i, j] = h^{mk} low[i, j, k]; refuses degenerate points."""

    def fn(X):
        hv = h(X)
        inv = safe_inverse(hv, X, eps_rank)
        return np.einsum("...mk,...ijk->...mij", inv, low(X))

    return Field(fn, low.shape, h.chart, max(h.depth, low.depth), "raised")


def lower_index(h: Field, gamma: Field) -> Field:
    return map_field(lambda hv, g: np.einsum("...kij,...kl->...ijl", g, hv), gamma.shape, h, gamma, name="lowered")


def levi_civita(h: Field, cfg: FDConfig = FDConfig(), eps_rank: float = EPS_RANK) -> Field:
    return raise_index(h, lowered_levi_civita(h, cfg), eps_rank)


def dual_connection(h: Field, gamma: Field, cfg: FDConfig = FDConfig(), eps_rank: float = EPS_RANK) -> Field:
    """The connection solving X h(Y,Z) = h(nabla_X Y, Z) + h(Y, nabla*_X Z)."""
    dh = grad(h, cfg)

    def fn(X):
        hv = h(X)
        inv = safe_inverse(hv, X, eps_rank)
        # term[i, j, k] = d_i h_jk - gamma^l_ij h_lk = h(d_j, nabla*_i d_k)
        term = dh(X) - np.einsum("...lij,...lk->...ijk", gamma(X), hv)
        return np.einsum("...mj,...ijk->...mik", inv, term)

    return Field(fn, gamma.shape, h.chart, max(dh.depth, gamma.depth), "dual")


def duality_residual(h: Field, gamma: Field, gamma_star: Field, X, cfg: FDConfig = FDConfig()) -> float:
    X = np.asarray(X, dtype=float)
    hv = h(X)
    lhs = grad(h, cfg)(X)
    rhs = np.einsum("...lij,...lk->...ijk", gamma(X), hv) + np.einsum("...lik,...jl->...ijk", gamma_star(X), hv)
    return float(np.max(np.abs(lhs - rhs)))


def torsion(gamma: Field) -> Field:
    return map_field(lambda g: g - np.swapaxes(g, -1, -2), gamma.shape, gamma, name="torsion")


def curvature(gamma: Field, cfg: FDConfig = FDConfig()) -> Field:
    dg = grad(gamma, cfg)
    n = gamma.shape[0]

    def fn(X):
        g = gamma(X)
        d = dg(X)  # d[i, l, j, k] = d_i gamma^l_jk
        r = np.einsum("...iljk->...lkij", d) - np.einsum("...jlik->...lkij", d)
        r = r + np.einsum("...lim,...mjk->...lkij", g, g) - np.einsum("...ljm,...mik->...lkij", g, g)
        return r

    return Field(fn, (n, n, n, n), gamma.chart, dg.depth, "curvature")


def nabla_metric(h: Field, gamma: Field, cfg: FDConfig = FDConfig()) -> Field:
    """C = nabla h: C[i, j, k] = d_i h_jk - gamma^m_ij h_mk - gamma^m_ik h_jm."""
    dh = grad(h, cfg)

    def fn(hv, d, g):
        return d - np.einsum("...mij,...mk->...ijk", g, hv) - np.einsum("...mik,...jm->...ijk", g, hv)

    return map_field(fn, h.shape + h.shape[:1], h, dh, gamma, name="nabla_h")


def curvature_duality_residual(h: Field, gamma: Field, gamma_star: Field, X, cfg: FDConfig = FDConfig()) -> float:
    """max |h(R(X,Y)Z,W) + h(Z,R*(X,Y)W)| over coordinate fields."""
    X = np.asarray(X, dtype=float)
    hv = h(X)
    R = curvature(gamma, cfg)(X)
    Rs = curvature(gamma_star, cfg)(X)
    a = np.einsum("...lkij,...lw->...kwij", R, hv)
    b = np.einsum("...kl,...lwij->...kwij", hv, Rs)
    return float(np.max(np.abs(a + b)))


def cubic_asymmetry(Cv: np.ndarray) -> float:
    """Max deviation from total symmetry of a cubic array."""
    perms = [(0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
    ax = Cv.ndim - 3
    worst = 0.0
    for p in perms:
        worst = max(worst, float(np.max(np.abs(Cv - np.transpose(Cv, tuple(range(ax)) + tuple(ax + q for q in p))))))
    return worst


@dataclass
class Check:
    name: str
    residual: float
    tolerance: float
    anchor: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.residual < self.tolerance)

    def to_json(self) -> dict:
        return {"name": self.name, "anchor": self.anchor, "residual": self.residual,
                "tolerance": self.tolerance, "verdict": "pass" if self.passed else "fail"}


CODAZZI_ANCHOR = "dual connections: any two of the four conditions imply the rest"


def codazzi_report(h: Field, gamma: Field, gamma_star: Field | None, points, cfg: FDConfig = FDConfig(),
                   tol: float = 1e-5) -> dict[str, Check]:
    """Residuals of the four conditions (i) T=0, (ii) T*=0, (iii) C symmetric, (iv) mean = Levi-Civita."""
    X = np.asarray(points, dtype=float)
    if gamma_star is None:
        gamma_star = dual_connection(h, gamma, cfg)
    T = torsion(gamma)(X)
    Ts = torsion(gamma_star)(X)
    C = nabla_metric(h, gamma, cfg)(X)
    lc = levi_civita(h, cfg)(X)
    mean = 0.5 * (gamma(X) + gamma_star(X))
    return {
        "i": Check("torsion of nabla", float(np.max(np.abs(T))), tol, CODAZZI_ANCHOR),
        "ii": Check("torsion of dual", float(np.max(np.abs(Ts))), tol, CODAZZI_ANCHOR),
        "iii": Check("C = nabla h symmetric in first pair", float(np.max(np.abs(C - np.swapaxes(C, -3, -2)))), tol,
                     CODAZZI_ANCHOR),
        "iv": Check("mean connection is Levi-Civita", float(np.max(np.abs(mean - lc))), tol, CODAZZI_ANCHOR),
    }


def verdict_pattern(report: dict[str, Check]) -> tuple[bool, bool, bool, bool]:
    return tuple(report[k].passed for k in ("i", "ii", "iii", "iv"))  # type: ignore[return-value]


def consistent_with_two_of_four(pattern) -> bool:
    """Any two conditions imply the rest: exactly 2 or 3 passing verdicts is impossible."""
    return sum(pattern) not in (2, 3)


def connections_from_cubic(h: Field, C: Field, cfg: FDConfig = FDConfig(), points=None,
                           eps_sym: float = EPS_SYM, eps_rank: float = EPS_RANK) -> tuple[Field, Field]:
    """The mutually dual torsion-free pair h(nabla_X Y, Z) = LC -/+ C/2."""
    if points is not None:
        asym = cubic_asymmetry(C(np.asarray(points, dtype=float)))
        if asym > eps_sym:
            raise AsymmetricCubic(f"cubic tensor not totally symmetric (residual {asym:.3e})")
    low0 = lowered_levi_civita(h, cfg)
    low = map_field(lambda a, c: a - 0.5 * c, low0.shape, low0, C)
    low_s = map_field(lambda a, c: a + 0.5 * c, low0.shape, low0, C)
    return raise_index(h, low, eps_rank), raise_index(h, low_s, eps_rank)


# ---------------------------------------------------------------------------
# statistical models


@dataclass
class StatisticalModel:
    """Parametric family ``p(x; zeta) = exp(l(x, zeta))`` on a quadrature sample space.

    Scores are finite differences of ``l`` in the parameters with
    ``score_step`` (coarser than the generic default: the score enters third
    moments, and 1e-3 balances truncation against cancellation).
    """

    chart: Chart
    logdensity: str
    rule: QuadratureRule
    sample_var: str = "x"
    score_step: float = 1e-3
    name: str = ""
    _expr: Expr = field(init=False, repr=False)

    def __post_init__(self):
        self._expr = Expr.compile(self.logdensity, [self.sample_var] + list(self.chart.names))

    def params(self, zeta) -> dict:
        return dict(zip(self.chart.names, map(float, zeta)))

    def nodes(self, zeta) -> tuple[np.ndarray, np.ndarray]:
        return self.rule.nodes_weights(self.params(zeta))

    def loglik(self, x: np.ndarray, Z: np.ndarray) -> np.ndarray:
        """l at fixed nodes ``x`` for parameter batch ``Z`` (..., n) -> (..., N)."""
        Z = np.asarray(Z, dtype=float)
        args = [Z[..., i, None] for i in range(Z.shape[-1])]
        return np.asarray(self._expr(x, *args), dtype=float) + np.zeros(Z.shape[:-1] + x.shape)

    def _pointwise(self, zeta):
        zeta = np.asarray(zeta, dtype=float)
        x, w = self.nodes(zeta)
        L = Field(lambda Z: self.loglik(x, Z), x.shape, self.chart, 0, "loglik")
        dL = grad(L, step=self.score_step)
        ddL = grad(dL, step=self.score_step)
        l0 = L(zeta)
        s = dL(zeta)  # (n, N)
        ss = ddL(zeta)  # (n, n, N)
        p = np.exp(l0)
        for arr in (p, s, ss):
            if not np.all(np.isfinite(arr)):
                raise QuadratureFailure(f"non-finite log-density derivatives at {zeta.tolist()}")
        return w * p, s, ss

    def normalization(self, zeta) -> float:
        wp, _, _ = self._pointwise(zeta)
        return float(np.sum(wp))

    def moments(self, zeta, alphas=()) -> dict:
        wp, s, ss = self._pointwise(zeta)
        out = {
            "g": np.einsum("x,ix,jx->ij", wp, s, s),
            "C": np.einsum("x,ix,jx,kx->ijk", wp, s, s, s),
        }
        for a in alphas:
            inner = ss + 0.5 * (1.0 - a) * np.einsum("ix,jx->ijx", s, s)
            out[("alpha", a)] = np.einsum("x,ijx,kx->ijk", wp, inner, s)
        return out

    def _batched(self, key, shape, depth, alpha=None) -> Field:
        def fn(Z):
            flat = Z.reshape(-1, Z.shape[-1])
            rows = [self.moments(z, () if alpha is None else (alpha,))[key] for z in flat]
            return np.array(rows).reshape(Z.shape[:-1] + shape)

        return Field(fn, shape, self.chart, depth, f"{self.name}:{key}")


def fisher_metric(model: StatisticalModel) -> Field:
    n = model.chart.dim
    return model._batched("g", (n, n), 1)


def model_cubic(model: StatisticalModel) -> Field:
    n = model.chart.dim
    return model._batched("C", (n, n, n), 1)


def alpha_lowered(model: StatisticalModel, alpha: float) -> Field:
    n = model.chart.dim
    return model._batched(("alpha", float(alpha)), (n, n, n), 2, float(alpha))


def alpha_connection(model: StatisticalModel, alpha: float, eps_rank: float = EPS_RANK) -> Field:
    return raise_index(fisher_metric(model), alpha_lowered(model, alpha), eps_rank)


def alpha_duality_check(model: StatisticalModel, alpha: float, points, cfg: FDConfig = FDConfig(),
                        eps_rank: float = EPS_RANK) -> float:
    """max |d_i g_jk - G(a)_{ij,k} - G(-a)_{ik,j}| over the points."""
    X = np.asarray(points, dtype=float)
    g = fisher_metric(model)
    require_nondegenerate(g(X), X, eps_rank)
    dg = grad(g, cfg)(X)
    a = alpha_lowered(model, alpha)(X)
    b = alpha_lowered(model, -alpha)(X)
    return float(np.max(np.abs(dg - a - np.swapaxes(b, -1, -2))))


# ---------------------------------------------------------------------------
# degeneracy blow-up probe


@dataclass
class ProbeResult:
    t: np.ndarray
    min_singular: np.ndarray
    eigenvalue: np.ndarray
    ratio: np.ndarray
    omega: np.ndarray
    theta: np.ndarray
    exponent: float
    fit_window: tuple[float, float]

    def rows(self) -> list[dict]:
        return [
            {"t": float(t), "min_singular_value": float(s), "eigenvalue": float(l), "ratio": float(r),
             "omega": float(o), "theta": float(th)}
            for t, s, l, r, o, th in zip(self.t, self.min_singular, self.eigenvalue, self.ratio, self.omega, self.theta)
        ]


def dual_blowup_probe(h: Field, gamma: Field | None, curve: Callable, t_values, cfg: FDConfig = FDConfig(),
                      eps_rank: float = EPS_RANK, fit_window=(1e-4, 1e-2), gap_tol: float = 1e-12) -> ProbeResult:
    """Track the eigenvalue of h vanishing at c(0) and return (X lambda)/lambda along c.

    Any smooth dual connection would make this ratio equal omega + theta for
    bounded connection forms, so divergence like 1/t shows none exists.
    ``curve`` maps an array of t to points (..., n).
    """
    t = np.sort(np.asarray(t_values, dtype=float))
    if np.any(t <= 0):
        raise ValueError("probe samples must be positive")
    h0 = h(curve(np.array(0.0)))
    lam0, vec0 = np.linalg.eigh(h0)
    scale = max(1.0, float(np.max(np.abs(lam0))))
    zero = np.abs(lam0) <= eps_rank * scale
    if not np.any(zero):
        raise NotDegenerateAtOrigin(f"metric nondegenerate at c(0) (eigenvalues {lam0.tolist()})")
    if np.sum(zero) > 1:
        raise EigenvalueTrackingAmbiguous("several eigenvalues vanish at c(0)")
    prev_val, prev_vec = lam0[zero][0], vec0[:, zero][:, 0]

    ds = cfg.step
    off, w = stencil(cfg.scheme, cfg.richardson)
    pts = curve(t)
    dc = np.tensordot(w, curve(t[None, :] + (off * ds)[:, None]), axes=(0, 0)) / ds  # dc/dt
    hs = h(pts)
    dh = np.tensordot(w, h(curve(t[None, :] + (off * ds)[:, None])), axes=(0, 0)) / ds  # d/dt h(c(t))
    if h.chart is not None:
        _check_stencil(h.chart, curve(t[None, :] + (off * ds)[:, None]))
    gam = gamma(pts) if gamma is not None else None

    lam, ratio, omega, smin = [], [], [], []
    for m in range(len(t)):
        vals, vecs = np.linalg.eigh(hs[m])
        dist = np.abs(vals - prev_val)
        order = np.argsort(dist)
        j = order[0]
        if len(vals) > 1 and abs(vals[order[1]] - vals[j]) <= gap_tol * max(1.0, abs(vals[j])):
            raise EigenvalueTrackingAmbiguous(f"eigenvalues cross near t={t[m]:.3e}")
        v = vecs[:, j]
        if v @ prev_vec < 0:
            v = -v
        lv = vals[j]
        s = singular_values(hs[m])[-1]
        if abs(lv) <= 1e-15 * max(1.0, float(np.max(np.abs(vals)))):
            raise DegenerateOnOpenSet(f"metric degenerate at sampled t={t[m]:.3e}; probe needs nondegeneracy for t>0")
        dl = float(v @ dh[m] @ v)  # Hellmann-Feynman
        lam.append(lv)
        ratio.append(dl / lv)
        om = float(np.einsum("k,kij,i,j->", v, gam[m], dc[m], v)) if gam is not None else 0.0
        omega.append(om)
        smin.append(s)
        prev_val, prev_vec = lv, v
    ratio = np.array(ratio)
    if not np.all(np.isfinite(ratio)):
        raise NonFiniteValue("non-finite blow-up ratio")
    sel = (t >= fit_window[0] * (1 - 1e-12)) & (t <= fit_window[1] * (1 + 1e-12))
    if np.sum(sel) < 2:
        sel = np.ones_like(t, dtype=bool)
    slope = float(np.polyfit(np.log(t[sel]), np.log(np.abs(ratio[sel])), 1)[0])
    omega = np.array(omega)
    return ProbeResult(t, np.array(smin), np.array(lam), ratio, omega, ratio - omega, slope, tuple(fit_window))
