"""Two-point functions on M x M and their Eguchi derivatives.

``rho[X1..Xk | Y1..Yl]`` differentiates ``rho(p, q)`` k times in the first
argument and l times in the second, then restricts to the diagonal.  With
coordinate fields this is a mixed partial on the product chart, computed by
a tensor-product finite-difference stencil.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .chart import Chart, FDConfig, Field, _check_stencil, grad, stencil
from .errors import AsymmetricCubic, NonFiniteValue, NotAContrastCandidate, ValidationError
from .expr import compile_array
from .statmfd import EPS_SYM, Check, cubic_asymmetry, raise_index, require_nondegenerate

ANCHORS = {
    "P1": "-rho[XY|Z] = Gamma(X,Y,Z) - C(X,Y,Z)/2",
    "P2": "-rho[Z|XY] = Gamma(X,Y,Z) + C(X,Y,Z)/2",
    "C1": "tau(nabla+_X eta+, zeta-) = -rho[XY|Z]/2",
    "C2": "tau(zeta+, nabla-_X eta-) = -rho[Z|XY]/2",
    "R1": "tau(R+(X,Y)zeta+, Phi-W) via second covariant derivatives and rho[XYZ|W]",
    "R2": "tau(Phi+W, R-(X,Y)zeta-) via second covariant derivatives and rho[W|XYZ]",
    "diag": "contrast conditions rho(p,p) = 0 and rho[X|-] = rho[-|X] = 0",
    "weak": "weak contrast: -rho[X|Y] = h, rho[XY|-] = rho[-|XY] = h, -rho[Z|XY] + rho[XY|Z] = C",
}


@dataclass(frozen=True)
class EguchiConfig:
    """Stencils for mixed derivatives: one rule up to order 3, a cheaper one at order 4."""

    step: float = 1e-3
    scheme: str = "central4"
    richardson: bool = True
    high_step: float = 1e-3
    high_scheme: str = "central2"

    def rule(self, order: int):
        if order >= 4:
            off, w = stencil(self.high_scheme, False)
            return self.high_step, off, w
        off, w = stencil(self.scheme, self.richardson)
        return self.step, off, w

    def reach(self, order: int) -> float:
        h, off, _ = self.rule(order)
        return order * h * float(np.max(np.abs(off)))


@dataclass
class TwoPointFunction:
    chart: Chart
    fn: Callable  # (P, Q) batched -> scalar per point
    source: str | None = None
    name: str = ""

    @classmethod
    def from_expression(cls, source: str, chart: Chart, params: dict | None = None,
                        prefixes=("p_", "q_"), name: str = "") -> "TwoPointFunction":
        params = dict(params or {})
        names = [prefixes[0] + c for c in chart.names] + [prefixes[1] + c for c in chart.names]
        ev = compile_array(source, names + list(params))
        pvals = [float(v) for v in params.values()]
        n = chart.dim

        def fn(P, Q):
            coords = [P[..., i] for i in range(n)] + [Q[..., i] for i in range(n)]
            with np.errstate(all="ignore"):
                return ev(*coords, *pvals)

        return cls(chart, fn, source, name)

    @property
    def product_chart(self) -> Chart:
        return self.chart.product()

    def __call__(self, P, Q) -> np.ndarray:
        P, Q = np.broadcast_arrays(np.asarray(P, dtype=float), np.asarray(Q, dtype=float))
        out = np.broadcast_to(np.asarray(self.fn(P, Q), dtype=float), P.shape[:-1])
        if not np.all(np.isfinite(out)):
            raise NonFiniteValue(f"non-finite value of two-point function {self.name or self.source!r}")
        return out


def _product_stencil(offsets: np.ndarray, weights: np.ndarray, k: int):
    O = np.stack(np.meshgrid(*([offsets] * k), indexing="ij"), axis=-1).reshape(-1, k)
    W = np.prod(np.stack(np.meshgrid(*([weights] * k), indexing="ij"), axis=-1).reshape(-1, k), axis=-1)
    return O, W


def rho_derivative(rho: TwoPointFunction, left: Sequence[int], right: Sequence[int], point,
                   cfg: EguchiConfig = EguchiConfig()) -> np.ndarray:
    """rho[d_left... | d_right...] on the diagonal at ``point`` (batched)."""
    X = np.asarray(point, dtype=float)
    n = rho.chart.dim
    if X.shape[-1] != n:
        raise ValidationError(f"point has {X.shape[-1]} coordinates, chart has {n}")
    slots = [int(i) for i in left] + [n + int(j) for j in right]
    if any(not 0 <= s < 2 * n for s in slots):
        raise ValidationError("derivative index out of range")
    k = len(slots)
    if k > 4:
        raise ValidationError("Eguchi derivatives above total order 4 are not supported")
    Z0 = np.concatenate([X, X], axis=-1)
    if k == 0:
        return rho(X, X)
    h, off, w = cfg.rule(k)
    O, W = _product_stencil(off, w, k)
    disp = np.zeros((len(O), 2 * n))
    for s, slot in enumerate(slots):
        disp[:, slot] += O[:, s] * h
    Z = Z0[..., None, :] + disp
    _check_stencil(rho.product_chart, Z)
    vals = rho(Z[..., :n], Z[..., n:])
    return vals @ W / h**k


def eguchi_tensor(rho: TwoPointFunction, n_left: int, n_right: int, point,
                  cfg: EguchiConfig = EguchiConfig()) -> np.ndarray:
    """All coordinate components: out[..., i1..ik, j1..jl] = rho[d_i.. | d_j..]."""
    X = np.asarray(point, dtype=float)
    n = rho.chart.dim
    order = n_left + n_right
    out = np.empty(X.shape[:-1] + (n,) * order)
    cache: dict[tuple, np.ndarray] = {}
    for idx in itertools.product(range(n), repeat=order):
        # mixed partials commute within each slot group
        key = (tuple(sorted(idx[:n_left])), tuple(sorted(idx[n_left:])))
        if key not in cache:
            cache[key] = rho_derivative(rho, key[0], key[1], X, cfg)
        out[(...,) + idx] = cache[key]
    return out


def tensor_field(rho: TwoPointFunction, n_left: int, n_right: int, cfg: EguchiConfig = EguchiConfig(),
                 sign: float = 1.0, name: str = "") -> Field:
    n = rho.chart.dim
    return Field(lambda X: sign * eguchi_tensor(rho, n_left, n_right, X, cfg), (n,) * (n_left + n_right),
                 rho.chart, 1, name)


def diagonal_residuals(rho: TwoPointFunction, points, cfg: EguchiConfig = EguchiConfig()) -> dict[str, float]:
    X = np.asarray(points, dtype=float)
    return {
        "value": float(np.max(np.abs(rho(X, X)))),
        "first_slot": float(np.max(np.abs(eguchi_tensor(rho, 1, 0, X, cfg)))),
        "second_slot": float(np.max(np.abs(eguchi_tensor(rho, 0, 1, X, cfg)))),
    }


def contrast_check(rho: TwoPointFunction, points, cfg: EguchiConfig = EguchiConfig(),
                   value_tol: float = 1e-10, grad_tol: float = 1e-6) -> dict[str, Check]:
    r = diagonal_residuals(rho, points, cfg)
    a = ANCHORS["diag"]
    return {
        "value": Check("rho(p,p)", r["value"], value_tol, a),
        "first_slot": Check("rho[X|-]", r["first_slot"], grad_tol, a),
        "second_slot": Check("rho[-|X]", r["second_slot"], grad_tol, a),
    }


@dataclass
class ContrastStructure:
    """(h, C) and the lowered connections induced by a contrast function."""

    rho: TwoPointFunction
    h: Field
    C: Field
    gamma_low: Field
    gamma_star_low: Field

    def connections(self, X=None) -> tuple[Field, Field]:
        """Raised (nabla, nabla*) components; need h nondegenerate."""
        if X is not None:
            X = np.asarray(X, dtype=float)
            require_nondegenerate(self.h(X), X)
        return raise_index(self.h, self.gamma_low), raise_index(self.h, self.gamma_star_low)


def structure_from_contrast(rho: TwoPointFunction, points=None, cfg: EguchiConfig = EguchiConfig(),
                            value_tol: float = 1e-10, grad_tol: float = 1e-6) -> ContrastStructure:
    if points is not None:
        rep = contrast_check(rho, points, cfg, value_tol, grad_tol)
        bad = {k: c.residual for k, c in rep.items() if not c.passed}
        if bad:
            raise NotAContrastCandidate(f"diagonal conditions fail: {bad}", residuals=bad)
    n = rho.chart.dim
    h = tensor_field(rho, 1, 1, cfg, -1.0, "h")

    def low(X):
        return -eguchi_tensor(rho, 2, 1, X, cfg)

    def star(X):
        # rho[k|ij] stored as [k, i, j]; Gamma*_{ij,k} = -rho[k|ij]
        return -np.moveaxis(eguchi_tensor(rho, 1, 2, X, cfg), -3, -1)

    gl = Field(low, (n,) * 3, rho.chart, 1, "Gamma_low")
    gs = Field(star, (n,) * 3, rho.chart, 1, "Gamma*_low")

    def cubic(X):
        return star(X) - low(X)

    return ContrastStructure(rho, h, Field(cubic, (n,) * 3, rho.chart, 1, "C"), gl, gs)


def weak_contrast_from(h: Field, C: Field, cfg: FDConfig = FDConfig(), points=None,
                       eps_sym: float = EPS_SYM, name: str = "weak contrast") -> TwoPointFunction:
    """rho(p,q) = h(q)(d,d)/2 + D(q)(d,d,d)/6 with d = p - q.

    D = (dh_ijk + dh_jik + dh_kij - C_ijk)/2 makes the Eguchi relations hold
    identically; h is never inverted, so degenerate metrics are fine.
    """
    chart = h.chart
    X = chart.grid(3, 0.1 * chart.min_edge) if points is None else np.asarray(points, dtype=float)
    asym = cubic_asymmetry(C(X))
    if asym > eps_sym:
        raise AsymmetricCubic(f"cubic tensor not totally symmetric (residual {asym:.3e})", residual=asym)
    dh = grad(h, cfg)

    def D(Q):
        d = dh(Q)
        return 0.5 * (d + np.swapaxes(d, -3, -2) + np.moveaxis(d, -3, -1) - C(Q))

    def fn(P, Q):
        delta = P - Q
        quad = np.einsum("...ij,...i,...j->...", h(Q), delta, delta)
        cub = np.einsum("...ijk,...i,...j,...k->...", D(Q), delta, delta, delta)
        return 0.5 * quad + cub / 6.0

    return TwoPointFunction(chart, fn, None, name)


def weak_contrast_report(rho: TwoPointFunction, h: Field, C: Field, points, cfg: EguchiConfig = EguchiConfig(),
                         tol: float = 1e-6) -> dict[str, Check]:
    X = np.asarray(points, dtype=float)
    hv, Cv = h(X), C(X)
    h1 = -eguchi_tensor(rho, 1, 1, X, cfg)
    h2 = eguchi_tensor(rho, 2, 0, X, cfg)
    h3 = eguchi_tensor(rho, 0, 2, X, cfg)
    c = -np.moveaxis(eguchi_tensor(rho, 1, 2, X, cfg), -3, -1) + eguchi_tensor(rho, 2, 1, X, cfg)
    diag = diagonal_residuals(rho, X, cfg)
    a = ANCHORS["weak"]
    return {
        "diagonal": Check("rho(p,p), rho[X|-], rho[-|X]", max(diag.values()), tol, ANCHORS["diag"]),
        "h_mixed": Check("-rho[X|Y] = h", float(np.max(np.abs(h1 - hv))), tol, a),
        "h_left": Check("rho[XY|-] = h", float(np.max(np.abs(h2 - hv))), tol, a),
        "h_right": Check("rho[-|XY] = h", float(np.max(np.abs(h3 - hv))), tol, a),
        "cubic": Check("-rho[Z|XY] + rho[XY|Z] = C", float(np.max(np.abs(c - Cv))), tol, a),
    }


def leibniz_residual(rho: TwoPointFunction, points, cfg: EguchiConfig = EguchiConfig(), step: float = 1e-3) -> float:
    """max |X rho[Y|Z] - rho[XY|Z] - rho[Y|XZ]| over coordinate fields."""
    X = np.asarray(points, dtype=float)
    mixed = tensor_field(rho, 1, 1, cfg)
    d = grad(mixed, FDConfig(step=step), step=step)(X)  # d[x, y, z]
    a = eguchi_tensor(rho, 2, 1, X, cfg)  # [x, y, z]
    b = eguchi_tensor(rho, 1, 2, X, cfg)  # [y, x, z]
    return float(np.max(np.abs(d - a - np.swapaxes(b, -3, -2))))


def quasi_contrast_relations_check(S, rho: TwoPointFunction, points, cfg: EguchiConfig = EguchiConfig(),
                                   tol: float = 1e-5, tol4: float = 1e-4) -> dict[str, Check]:
    """Relations between a quasi-Codazzi structure and a weak contrast function on its (h, C)."""
    X = np.asarray(points, dtype=float)
    G = S.kossowski()(X)
    C = S.generalized_cubic()(X)
    t1, t2 = (f(X) for f in S._tau_terms())
    left = eguchi_tensor(rho, 2, 1, X, cfg)  # rho[ab|c]
    right = np.moveaxis(eguchi_tensor(rho, 1, 2, X, cfg), -3, -1)  # rho[c|ab] at [a, b, c]
    out = {
        "P1": Check("-rho[XY|Z] vs Gamma - C/2", float(np.max(np.abs(-left - (G - 0.5 * C)))), tol, ANCHORS["P1"]),
        "P2": Check("-rho[Z|XY] vs Gamma + C/2", float(np.max(np.abs(-right - (G + 0.5 * C)))), tol, ANCHORS["P2"]),
        "C1": Check("tau(nabla+ eta+, zeta-) vs -rho[XY|Z]/2", float(np.max(np.abs(t1 + 0.5 * left))), tol,
                    ANCHORS["C1"]),
        "C2": Check("tau(zeta+, nabla- eta-) vs -rho[Z|XY]/2", float(np.max(np.abs(t2 + 0.5 * right))), tol,
                    ANCHORS["C2"]),
    }
    a = S.bundle.pairing_at(X)
    cp, cm = S.cplus()(X), S.cminus()(X)
    Rp, Rm = (R(X) for R in S.curvatures())
    rho31 = eguchi_tensor(rho, 3, 1, X, cfg)  # [x, y, z, w]
    rho13 = eguchi_tensor(rho, 1, 3, X, cfg)  # [w, x, y, z]
    for key, sign in (("R1", +1), ("R2", -1)):
        w = S.wplus if sign > 0 else S.wminus
        V = S.covariant_phi(sign)
        dV = grad(V, S.cfg)
        Vv = V(X)
        U = dV(X) + np.einsum("...xab,...ybz->...xyaz", w(X), Vv)  # nabla_x nabla_y Phi(d_z)
        if sign > 0:
            lhs = np.einsum("...xyab,...bz,...ac,...cw->...xyzw", Rp, cp, a, cm)
            sec = np.einsum("...xyaz,...ac,...cw->...xyzw", U, a, cm)
            rr = rho31
        else:
            lhs = np.einsum("...aw,...ac,...xycb,...bz->...xyzw", cp, a, Rm, cm)
            sec = np.einsum("...aw,...ac,...xycz->...xyzw", cp, a, U)
            rr = np.moveaxis(rho13, -4, -1)
        rhs = sec - np.swapaxes(sec, -4, -3) + 0.5 * rr - 0.5 * np.swapaxes(rr, -4, -3)
        out[key] = Check(f"curvature identity {key}", float(np.max(np.abs(lhs - rhs))), tol4, ANCHORS[key])
    return out
