"""Quasi-Hessian reconstruction from a quasi-Codazzi structure with flat connections.

Parallel frames of the eigenbundles are found by integrating the frame
equation ``dPsi/du_d = -W_d Psi`` along the axis staircase from the chart
basepoint.  Expressed in a parallel frame, ``Phi`` is a closed vector-valued
one-form whose integral ``f = (f+, f-)`` is a Lagrange immersion into
``R^n x R^n``; ``z`` with ``dz = f- . df+`` lifts it to a Legendre immersion.
All three are carried through one batched RK4 sweep.

Two embeddings of the same structure differ by an affine Legendre
equivalence ``(x, p, z) -> (A x + b, A' p + b', z + c.x + d)``; it is fit
from overlap samples without imposing ``A' = A^-T`` or ``b' = A' c``, which
are then checked.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .chart import Chart, FDConfig, Field, _check_stencil, grad, staircase_nodes
from .errors import (
    IllConditionedOverlap,
    IntegrabilityViolated,
    NonConstantOffset,
    NonConstantPairing,
    NonFiniteValue,
    NotFlat,
    PathDependence,
    PreconditionError,
    ValidationError,
)
from .parabundle import QuasiCodazziStructure, bundle_curvature, curvature_duality_check, quasi_codazzi_report
from .statmfd import Check

RK4_STEPS = 256

ANCHORS = {
    "flat": "parallel frame exists for a curvature-free connection",
    "path": "parallel transport independent of the path on a flat connection",
    "pairing": "tau(e+_i, e-_j) is constant for dual parallel frames and normalised to delta_ij",
    "integrability": "integrability condition d_i Phi_kj - d_j Phi_ki = 0",
    "df": "df(d_i) = Phi(d_i) in the parallel frame",
    "legendre": "dz = sum p_i dx_i along the lift",
    "gl_cross": "quadrature of the frame one-form agrees with the ODE sweep",
    "metric": "h = 2 sum df+ (.) df- in a normalised frame",
    "transition": "affine Legendre equivalence: A' = (A^T)^-1, b' = A' c",
    "overlap": "L composed with the embedding of U equals the embedding of V",
    "cocycle": "transitions compose to the identity around chart triples",
}


# ---------------------------------------------------------------------------
# the staircase sweep


def _rk4_propagators(B: np.ndarray, h: float) -> np.ndarray:
    """One classical RK4 step of Y' = Y B(s) is Y -> Y M; M for every step at once.

    ``B`` holds the generator at the half-step nodes (2K+1 of them).
    """
    B0, Bh, B1 = B[0:-1:2], B[1::2], B[2::2]
    eye = np.eye(B.shape[-1])
    K1 = B0
    K2 = (eye + 0.5 * h * K1) @ Bh
    K3 = (eye + 0.5 * h * K2) @ Bh
    K4 = (eye + h * K3) @ B1
    return eye + h / 6.0 * (K1 + 2 * K2 + 2 * K3 + K4)


def _sweep(S: QuasiCodazziStructure, chart: Chart, X, psi0_plus, psi0_minus, order=None, steps: int = RK4_STEPS,
           lift: bool = True):
    """RK4 along the staircase from chart.base to each X.

    The inverse frame Q = Psi^-1 obeys dQ = Q W and f obeys df = Q c, a
    linear system in the augmented state [[Q, f], [0, 1]].  z = int p.dx is
    accumulated by composite Simpson over the RK4 nodes.  The step is
    (segment length)/steps per point, so outputs are smooth in X.

    Returns Psi+, Psi- and f+, f-, z (zeros when ``lift`` is false).
    """
    X = np.asarray(X, dtype=float)
    n = chart.dim
    order = list(range(n)) if order is None else list(order)
    batch = X.shape[:-1]
    cp, cm = S.cplus(), S.cminus()
    host = S.chart

    def initial(psi0):
        Y = np.zeros(batch + (n + 1, n + 1))
        Y[..., :n, :n] = np.linalg.inv(np.asarray(psi0, dtype=float))
        Y[..., n, n] = 1.0
        return Y

    Y = [initial(psi0_plus), initial(psi0_minus)]
    z = np.zeros(batch)
    half = np.arange(2 * steps + 1) / (2 * steps)
    simpson = np.ones(steps + 1)
    simpson[1:-1:2], simpson[2:-1:2] = 4.0, 2.0
    simpson /= 3.0 * steps
    cur = np.broadcast_to(np.asarray(chart.base, dtype=float), X.shape).copy()
    for d in order:
        delta = X[..., d] - cur[..., d]
        e = np.zeros(n)
        e[d] = 1.0
        nodes = cur[None] + (half.reshape((-1,) + (1,) * len(batch)) * delta[None])[..., None] * e
        _check_stencil(host, nodes)
        scale = delta[None, ..., None, None]
        gens = []
        for w, c in ((S.wplus, cp), (S.wminus, cm)):
            B = np.zeros(nodes.shape[:-1] + (n + 1, n + 1))
            B[..., :n, :n] = w(nodes)[..., d, :, :]
            if lift:
                B[..., :n, n] = c(nodes)[..., :, d]
            gens.append(B * scale)
        M = [_rk4_propagators(B, 1.0 / steps) for B in gens]
        traj = [np.empty((steps + 1,) + Y[0].shape), np.empty((steps + 1,) + Y[0].shape)]
        for s in range(2):
            traj[s][0] = Y[s]
            for k in range(steps):
                traj[s][k + 1] = traj[s][k] @ M[s][k]
            Y[s] = traj[s][-1]
        if lift:
            # dz/ds = p . dx/ds with dx/ds = Q+ c+ delta at the integer nodes
            dx = np.einsum("k...ij,k...j->k...i", traj[0][..., :n, :n], gens[0][0::2][..., :n, n])
            p = traj[1][..., :n, n]
            z = z + np.tensordot(simpson, np.sum(p * dx, axis=-1), axes=(0, 0))
        cur = cur.copy()
        cur[..., d] = X[..., d]
    if not all(np.all(np.isfinite(y)) for y in Y) or not np.all(np.isfinite(z)):
        raise NonFiniteValue("non-finite value while integrating the frame equation")
    pp = np.linalg.inv(Y[0][..., :n, :n])
    pm = np.linalg.inv(Y[1][..., :n, :n])
    return [pp, pm, Y[0][..., :n, n], Y[1][..., :n, n], z]


# ---------------------------------------------------------------------------
# parallel frames


@dataclass
class ParallelFrame:
    """Coefficient matrices Psi+- of parallel frames in the bundle's eigenframes."""

    S: QuasiCodazziStructure
    chart: Chart
    psi0_plus: np.ndarray
    psi0_minus: np.ndarray
    checks: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.chart.dim

    def evaluate(self, X, order=None):
        pp, pm, *_ = _sweep(self.S, self.chart, X, self.psi0_plus, self.psi0_minus, order, lift=False)
        return pp, pm

    def field(self, sign: int) -> Field:
        k = 0 if sign > 0 else 1
        return Field(lambda X: self.evaluate(X)[k], (self.n, self.n), self.S.chart, 0, f"parallel{'+-'[k]}")

    def pairing(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        pp, pm = self.evaluate(X)
        return np.swapaxes(pp, -1, -2) @ self.S.bundle.pairing_at(X) @ pm


def flatness_check(S: QuasiCodazziStructure, X, tol: float = 1e-5) -> dict[str, Check]:
    X = np.asarray(X, dtype=float)
    out = {}
    for key, w in (("plus", S.wplus), ("minus", S.wminus)):
        R = bundle_curvature(w, S.cfg)(X)
        out[key] = Check(f"curvature norm ({key})", float(np.max(np.abs(R))) if R.size else 0.0, tol, ANCHORS["flat"])
    return out


def parallel_frame(S: QuasiCodazziStructure, chart: Chart | None = None, points=None, init_plus=None,
                   init_minus=None, flat_tol: float = 1e-5, path_tol: float = 1e-6) -> ParallelFrame:
    """Raw (unnormalised) parallel frames starting from the given basepoint values."""
    chart = chart or S.chart
    n = chart.dim
    X = chart.grid(3, 0.05 * chart.min_edge) if points is None else np.asarray(points, dtype=float)
    flat = flatness_check(S, X, flat_tol)
    for key, c in flat.items():
        if not c.passed:
            raise NotFlat(f"connection on E{'+' if key == 'plus' else '-'} is not flat "
                          f"(curvature norm {c.residual:.3e})", residual=c.residual)
    p0 = np.eye(n) if init_plus is None else np.asarray(init_plus, dtype=float)
    m0 = np.eye(n) if init_minus is None else np.asarray(init_minus, dtype=float)
    fr = ParallelFrame(S, chart, p0, m0)
    a = fr.evaluate(X)
    b = fr.evaluate(X, order=list(range(n))[::-1])
    path = max(float(np.max(np.abs(a[0] - b[0]))), float(np.max(np.abs(a[1] - b[1]))))
    if path > path_tol:
        raise PathDependence(f"parallel transport depends on the path (residual {path:.3e})", residual=path)
    fr.checks = dict(flat)
    fr.checks["path"] = Check("path independence of the frames", path, path_tol, ANCHORS["path"])
    fr.checks["parallel"] = Check("covariant derivative of the frames", _parallel_residual(fr, X), 1e-6,
                                  ANCHORS["flat"])
    return fr


def _parallel_residual(fr: ParallelFrame, X) -> float:
    """max |d Psi + W Psi| by finite differences of the sweep output."""
    cfg = FDConfig(step=1e-4, scheme="central4", richardson=False)
    worst = 0.0
    for sign, w in ((+1, fr.S.wplus), (-1, fr.S.wminus)):
        F = fr.field(sign)
        d = grad(F, cfg)(X)
        worst = max(worst, float(np.max(np.abs(d + w(X) @ F(X)[..., None, :, :]))))
    return worst


def normalize_dual_pairing(fr: ParallelFrame, points=None, tol: float = 1e-8, side: str = "minus") -> ParallelFrame:
    """Rescale one half so that tau(e+_i, e-_j) = delta_ij.

    The pairing of two parallel frames is constant when the connections are
    dual; a point-dependent pairing raises NonConstantPairing.
    """
    chart = fr.chart
    X = chart.grid(3, 0.05 * chart.min_edge) if points is None else np.asarray(points, dtype=float)
    K = fr.pairing(X)
    K0 = fr.pairing(np.asarray(chart.base, dtype=float))
    spread = float(np.max(np.abs(K - K0)))
    if spread > tol * max(1.0, float(np.max(np.abs(K0)))):
        raise NonConstantPairing(f"pairing of parallel frames varies by {spread:.3e}", residual=spread)
    if side == "minus":
        out = ParallelFrame(fr.S, chart, fr.psi0_plus, fr.psi0_minus @ np.linalg.inv(K0))
    elif side == "plus":
        out = ParallelFrame(fr.S, chart, fr.psi0_plus @ np.linalg.inv(K0).T, fr.psi0_minus)
    else:
        raise ValidationError(f"side must be 'plus' or 'minus', not {side!r}")
    out.checks = dict(fr.checks)
    res = float(np.max(np.abs(out.pairing(X) - np.eye(fr.n))))
    out.checks["pairing"] = Check("tau(e+_i, e-_j) - delta_ij", res, tol, ANCHORS["pairing"])
    return out


# ---------------------------------------------------------------------------
# embeddings


@dataclass
class LagrangeEmbedding:
    frame: ParallelFrame
    checks: dict = field(default_factory=dict)

    @property
    def S(self) -> QuasiCodazziStructure:
        return self.frame.S

    @property
    def chart(self) -> Chart:
        return self.frame.chart

    @property
    def n(self) -> int:
        return self.chart.dim

    def evaluate(self, X, order=None) -> dict[str, np.ndarray]:
        X = np.asarray(X, dtype=float)
        key = (X.shape, X.tobytes(), None if order is None else tuple(order))
        cache = self.__dict__.setdefault("_cache", {})
        if key not in cache:
            fr = self.frame
            pp, pm, fp, fm, z = _sweep(fr.S, fr.chart, X, fr.psi0_plus, fr.psi0_minus, order)
            if len(cache) > 16:
                cache.clear()
            cache[key] = {"psi_plus": pp, "psi_minus": pm, "x": fp, "p": fm, "z": z}
        return dict(cache[key])

    def differential(self, X) -> tuple[np.ndarray, np.ndarray]:
        """(df+, df-) as n x n matrices [k, j] = d_j f_k, from the frame one-form."""
        X = np.asarray(X, dtype=float)
        ev = self.evaluate(X)
        jp = np.linalg.solve(ev["psi_plus"], self.S.cplus()(X))
        jm = np.linalg.solve(ev["psi_minus"], self.S.cminus()(X))
        return jp, jm

    def metric(self, X) -> np.ndarray:
        jp, jm = self.differential(X)
        return 2.0 * np.swapaxes(jp, -1, -2) @ jm

    def sample(self, k: int = 5) -> dict:
        X = self.chart.grid(k)
        ev = self.evaluate(X)
        return {"u": X, "x": ev["x"], "p": ev["p"], "z": ev["z"]}


def integrability_residual(S: QuasiCodazziStructure, fr: ParallelFrame, X) -> float:
    """max |d_i Phi_kj - d_j Phi_ki| of Phi in the parallel frame, for both halves."""
    X = np.asarray(X, dtype=float)
    pp, pm = fr.evaluate(X)
    worst = 0.0
    for psi, sign in ((pp, +1), (pm, -1)):
        T = S.relative_torsion(sign)(X)  # [a, i, j]
        Tt = np.moveaxis(T, -3, -1)  # [i, j, a]
        worst = max(worst, float(np.max(np.abs(np.linalg.solve(psi[..., None, None, :, :], Tt[..., None])))))
    return worst


def local_embedding(S: QuasiCodazziStructure, chart: Chart | None = None, points=None, frame: ParallelFrame | None = None,
                    int_tol: float = 1e-5, tol: float = 1e-6) -> LagrangeEmbedding:
    chart = chart or S.chart
    X = chart.grid(3, 0.05 * chart.min_edge) if points is None else np.asarray(points, dtype=float)
    if frame is None:
        frame = normalize_dual_pairing(parallel_frame(S, chart, X), X)
    integ = integrability_residual(S, frame, X)
    if integ > int_tol:
        raise IntegrabilityViolated(f"integrability condition fails (residual {integ:.3e})", residual=integ)
    emb = LagrangeEmbedding(frame)
    checks = dict(frame.checks)
    checks["integrability"] = Check("integrability of Phi", integ, int_tol, ANCHORS["integrability"])

    fd = FDConfig(step=1e-4, scheme="central4", richardson=False)
    n = chart.dim
    comp = Field(lambda Y: _stack(emb.evaluate(Y)), (2 * n + 1,), S.chart, 0, "lift")
    d = grad(comp, fd)(X)  # [i, c]
    jp, jm = emb.differential(X)
    dfx, dfp, dz = d[..., :n], d[..., n:2 * n], d[..., 2 * n]
    df_res = max(float(np.max(np.abs(np.swapaxes(dfx, -1, -2) - jp))),
                 float(np.max(np.abs(np.swapaxes(dfp, -1, -2) - jm))))
    ev = emb.evaluate(X)
    leg = float(np.max(np.abs(dz - np.einsum("...k,...ik->...i", ev["p"], dfx))))
    checks["df"] = Check("df - Phi (parallel frame)", df_res, tol, ANCHORS["df"])
    checks["legendre"] = Check("dz - p.dx", leg, tol, ANCHORS["legendre"])
    rev = emb.evaluate(X, order=list(range(n))[::-1])
    pr = max(float(np.max(np.abs(ev[k] - rev[k]))) for k in ("x", "p", "z"))
    checks["path_embedding"] = Check("embedding path independence", pr, tol, ANCHORS["path"])
    hres = float(np.max(np.abs(emb.metric(X) - S.metric()(X))))
    checks["metric"] = Check("2 df+ . df- - h", hres, tol, ANCHORS["metric"])
    checks["gl_cross"] = Check("quadrature vs sweep for f", _gl_cross_check(emb, X[..., :1, :] if X.ndim > 1 else X),
                               tol, ANCHORS["gl_cross"])
    for key, c in checks.items():
        if key in ("df", "legendre", "path_embedding") and not c.passed:
            exc = PathDependence if key == "path_embedding" else IntegrabilityViolated
            raise exc(f"embedding check {key} failed (residual {c.residual:.3e})", residual=c.residual)
    emb.checks = checks
    return emb


def _stack(ev: dict) -> np.ndarray:
    return np.concatenate([ev["x"], ev["p"], ev["z"][..., None]], axis=-1)


def _gl_cross_check(emb: LagrangeEmbedding, X) -> float:
    """f from Gauss-Legendre quadrature of the frame one-form (frames from the sweep)."""
    X = np.asarray(X, dtype=float).reshape(-1, emb.n)[:3]
    base = np.broadcast_to(np.asarray(emb.chart.base, dtype=float), X.shape)

    def oneform(P):
        jp, jm = emb.differential(P)
        return np.concatenate([jp, jm], axis=-2)  # (..., 2n, n): row k is the one-form of f_k

    P, W, axes = staircase_nodes(base, X)
    vals = oneform(P)  # (m, batch, 2n, n)
    comp = np.take_along_axis(vals, axes.reshape(-1, 1, 1, 1), axis=-1)[..., 0]
    quad = np.sum(W[..., None] * comp, axis=0)
    ev = emb.evaluate(X)
    return float(np.max(np.abs(quad - np.concatenate([ev["x"], ev["p"]], axis=-1))))


# ---------------------------------------------------------------------------
# affine Legendre equivalences


@dataclass
class AffineLegendreEquivalence:
    A: np.ndarray
    b: np.ndarray
    A_dual: np.ndarray
    b_dual: np.ndarray
    c: np.ndarray
    d: float
    residuals: dict = field(default_factory=dict)

    @classmethod
    def identity(cls, n: int) -> "AffineLegendreEquivalence":
        z = np.zeros(n)
        return cls(np.eye(n), z, np.eye(n), z.copy(), z.copy(), 0.0)

    def apply(self, x, p, z):
        x, p = np.asarray(x, dtype=float), np.asarray(p, dtype=float)
        return (x @ self.A.T + self.b, p @ self.A_dual.T + self.b_dual, np.asarray(z) + x @ self.c + self.d)

    def compose(self, first: "AffineLegendreEquivalence") -> "AffineLegendreEquivalence":
        """self after first."""
        A2, A1 = self.A, first.A
        return AffineLegendreEquivalence(
            A2 @ A1, A2 @ first.b + self.b,
            self.A_dual @ first.A_dual, self.A_dual @ first.b_dual + self.b_dual,
            first.c + A1.T @ self.c, float(first.d + self.c @ first.b + self.d),
        )

    def constraint_residuals(self) -> dict[str, float]:
        return {
            "A_dual": float(np.max(np.abs(self.A_dual - np.linalg.inv(self.A).T))),
            "b_dual": float(np.max(np.abs(self.b_dual - self.A_dual @ self.c))),
        }

    def distance(self, other: "AffineLegendreEquivalence") -> float:
        return max(
            float(np.max(np.abs(self.A - other.A))), float(np.max(np.abs(self.b - other.b))),
            float(np.max(np.abs(self.A_dual - other.A_dual))), float(np.max(np.abs(self.b_dual - other.b_dual))),
            float(np.max(np.abs(self.c - other.c))), abs(self.d - other.d),
        )

    def to_json(self) -> dict:
        return {"A": self.A, "b": self.b, "A_dual": self.A_dual, "b_dual": self.b_dual, "c": self.c, "d": self.d,
                "residuals": dict(self.residuals)}


def _fit_linear(src: np.ndarray, dst: np.ndarray, cond_max: float):
    """Least-squares M with M src_j = dst_j over stacked columns (n x m each)."""
    S = np.concatenate(list(src.reshape(-1, *src.shape[-2:])), axis=-1)
    D = np.concatenate(list(dst.reshape(-1, *dst.shape[-2:])), axis=-1)
    G = S @ S.T
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > cond_max:
        raise IllConditionedOverlap(f"overlap samples do not determine A (condition {cond:.3e})", condition=cond)
    M = np.linalg.lstsq(S.T, D.T, rcond=None)[0].T
    return M, float(np.max(np.abs(M @ S - D)))


def transition(emb_u: LagrangeEmbedding, emb_v: LagrangeEmbedding, samples, offset_tol: float = 1e-6,
               cond_max: float = 1e6) -> AffineLegendreEquivalence:
    """The equivalence L with L(f_U, z_U) = (f_V, z_V) on the overlap samples."""
    X = np.asarray(samples, dtype=float).reshape(-1, emb_u.n)
    n = emb_u.n
    if len(X) < n + 1:
        raise IllConditionedOverlap(f"need at least {n + 1} overlap samples, got {len(X)}")
    eu, ev = emb_u.evaluate(X), emb_v.evaluate(X)
    ju_p, ju_m = emb_u.differential(X)
    jv_p, jv_m = emb_v.differential(X)
    A, ra = _fit_linear(ju_p, jv_p, cond_max)
    Ad, rad = _fit_linear(ju_m, jv_m, cond_max)
    offs_b = ev["x"] - eu["x"] @ A.T
    offs_bd = ev["p"] - eu["p"] @ Ad.T
    b, bd = offs_b.mean(axis=0), offs_bd.mean(axis=0)
    dev = max(float(np.max(np.abs(offs_b - b))), float(np.max(np.abs(offs_bd - bd))))
    if dev > offset_tol:
        raise NonConstantOffset(f"translation parts vary over the overlap by {dev:.3e}", residual=dev)
    design = np.concatenate([eu["x"], np.ones((len(X), 1))], axis=-1)
    dz = ev["z"] - eu["z"]
    if np.linalg.cond(design.T @ design) > cond_max**2:
        raise IllConditionedOverlap("overlap samples do not determine (c, d)")
    sol = np.linalg.lstsq(design, dz, rcond=None)[0]
    c, d = sol[:n], float(sol[n])
    zres = float(np.max(np.abs(design @ sol - dz)))
    L = AffineLegendreEquivalence(A, b, Ad, bd, c, d)
    xs, ps, zs = L.apply(eu["x"], eu["p"], eu["z"])
    over = max(float(np.max(np.abs(xs - ev["x"]))), float(np.max(np.abs(ps - ev["p"]))),
               float(np.max(np.abs(zs - ev["z"]))))
    L.residuals = {"fit_A": ra, "fit_A_dual": rad, "offset_spread": dev, "fit_z": zres, "overlap": over,
                   **L.constraint_residuals()}
    return L


def overlap_box(c1: Chart, c2: Chart):
    lo = np.maximum(c1.lo_arr, c2.lo_arr)
    hi = np.minimum(c1.hi_arr, c2.hi_arr)
    if np.any(hi <= lo):
        return None
    return lo, hi


def overlap_samples(c1: Chart, c2: Chart, k: int = 5, margin_frac: float = 0.1):
    box = overlap_box(c1, c2)
    if box is None:
        return None
    lo, hi = box
    m = margin_frac * (hi - lo)
    axes = [np.linspace(a + e, b - e, k) for a, b, e in zip(lo, hi, m)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(lo))


@dataclass
class QuasiHessianAtlas:
    names: list
    embeddings: dict
    transitions: dict
    checks: dict

    def to_json(self, k: int = 5) -> dict:
        charts = []
        for name in self.names:
            e = self.embeddings[name]
            s = e.sample(k)
            charts.append({"name": name, **e.chart.to_json(),
                           "samples": {"u": s["u"].reshape(-1, e.n), "x": s["x"].reshape(-1, e.n),
                                       "p": s["p"].reshape(-1, e.n), "z": s["z"].reshape(-1)},
                           "checks": {key: c.to_json() for key, c in e.checks.items()}})
        return {
            "charts": charts,
            "transitions": [{"from": u, "to": v, **L.to_json()} for (u, v), L in self.transitions.items()],
            "checks": {key: c.to_json() for key, c in self.checks.items()},
        }


def build_atlas(S: QuasiCodazziStructure, charts: dict[str, Chart], points=None, samples: int = 5,
                tol: float = 1e-6, def_tol: float = 1e-8) -> QuasiHessianAtlas:
    """Embeddings per chart, transitions per overlapping pair and the cocycle check."""
    X = S.chart.grid(3, 0.05 * S.chart.min_edge) if points is None else np.asarray(points, dtype=float)
    checks = {}
    dual = curvature_duality_check(S, X)
    checks["curvature_duality"] = Check("curvature duality", dual, 1e-5, "tau(R+ nu+, nu-) + tau(nu+, R- nu-) = 0")
    rep = quasi_codazzi_report(S, X)
    for key in ("i", "ii", "iii", "iv"):
        checks[f"quasi_codazzi_{key}"] = rep[key]
    checks.update({f"flat_{k}": c for k, c in flatness_check(S, X).items()})
    failed = [k for k, c in checks.items() if not c.passed]
    if failed:
        raise PreconditionError(f"structure is not dually flat quasi-Codazzi: {failed}", failed=failed)
    names = list(charts)
    embeddings = {}
    for name in names:
        ch = charts[name]
        if not (np.all(ch.lo_arr >= S.chart.lo_arr) and np.all(ch.hi_arr <= S.chart.hi_arr)):
            raise ValidationError(f"chart {name!r} is not contained in the structure's chart")
        try:
            embeddings[name] = local_embedding(S, ch, ch.grid(3, 0.05 * ch.min_edge), tol=tol)
        except Exception as exc:  # re-raise with the chart name attached
            if hasattr(exc, "details"):
                exc.args = (f"chart {name!r}: {exc.args[0] if exc.args else ''}",)
            raise
    transitions = {}
    for u, v in itertools.permutations(names, 2):
        pts = overlap_samples(charts[u], charts[v], samples)
        if pts is None:
            continue
        L = transition(embeddings[u], embeddings[v], pts)
        transitions[(u, v)] = L
        checks[f"transition_{u}_{v}"] = Check(f"Legendre constraints {u}->{v}",
                                         max(L.residuals["A_dual"], L.residuals["b_dual"]), def_tol, ANCHORS["transition"])
        checks[f"overlap_{u}_{v}"] = Check(f"overlap agreement {u}->{v}", L.residuals["overlap"], tol,
                                           ANCHORS["overlap"])
    for u, v, w in itertools.permutations(names, 3):
        if (u, v) in transitions and (v, w) in transitions and (u, w) in transitions:
            comp = transitions[(v, w)].compose(transitions[(u, v)])
            checks[f"cocycle_{u}_{v}_{w}"] = Check(f"cocycle {u}->{v}->{w}", comp.distance(transitions[(u, w)]),
                                                   tol, ANCHORS["cocycle"])
    return QuasiHessianAtlas(names, embeddings, transitions, checks)
