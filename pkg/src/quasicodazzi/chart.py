"""Charts, batched fields, finite differences, quadrature and path integrals.

All fields in the package are *batched*: a field of value shape ``S`` maps a
point array of shape ``B + (n,)`` to an array of shape ``B + S``.  Derivative
fields put the derivative index directly after the batch axes, so
``grad(h)(x)[..., i, j, k]`` is the partial of ``h_jk`` along coordinate ``i``.

Nested differentiation amplifies rounding noise by roughly ``1/step`` per
level, so every field records its ``depth`` (the number of finite-difference
levels already inside it) and :meth:`FDConfig.step_for` picks a coarser step
for deeper levels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteValue, QuadratureFailure, StencilOutOfDomain, ValidationError
from .expr import Expr, compile_array


@dataclass(frozen=True)
class Chart:
    names: tuple[str, ...]
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    basepoint: tuple[float, ...] | None = None

    def __post_init__(self):
        n = len(self.names)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        if self.basepoint is None:
            mid = tuple(0.5 * (a + b) for a, b in zip(self.lo, self.hi))
            object.__setattr__(self, "basepoint", mid)
        else:
            object.__setattr__(self, "basepoint", tuple(float(v) for v in self.basepoint))
        if n == 0:
            raise ValidationError("chart needs at least one coordinate")
        if len(set(self.names)) != n:
            raise ValidationError(f"coordinate names not distinct: {self.names}")
        if not (len(self.lo) == len(self.hi) == len(self.basepoint) == n):
            raise ValidationError("box and basepoint must match the number of coordinates")
        for a, b in zip(self.lo, self.hi):
            if not a < b:
                raise ValidationError(f"empty interval [{a}, {b}]")
        for a, b, p in zip(self.lo, self.hi, self.basepoint):
            if not a < p < b:
                raise ValidationError(f"basepoint {self.basepoint} not strictly inside the box")

    @classmethod
    def box(cls, names: Sequence[str], intervals, basepoint=None) -> "Chart":
        intervals = list(intervals)
        return cls(tuple(names), tuple(i[0] for i in intervals), tuple(i[1] for i in intervals), basepoint)

    @property
    def dim(self) -> int:
        return len(self.names)

    @property
    def lo_arr(self) -> np.ndarray:
        return np.array(self.lo)

    @property
    def hi_arr(self) -> np.ndarray:
        return np.array(self.hi)

    @property
    def base(self) -> np.ndarray:
        return np.array(self.basepoint)

    @property
    def min_edge(self) -> float:
        return float(np.min(self.hi_arr - self.lo_arr))

    def contains(self, X, slack: float = 0.0) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.all((X >= self.lo_arr - slack) & (X <= self.hi_arr + slack), axis=-1)

    def grid(self, k: int = 5, margin: float = 0.0) -> np.ndarray:
        """Tensor grid of ``k**n`` points in the box shrunk by ``margin``."""
        lo, hi = self.lo_arr + margin, self.hi_arr - margin
        if np.any(lo > hi):
            raise ValidationError(f"margin {margin} larger than half the box")
        axes = [np.linspace(a, b, k) if k > 1 else np.array([0.5 * (a + b)]) for a, b in zip(lo, hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def sub(self, lo, hi, basepoint=None) -> "Chart":
        return Chart(self.names, tuple(lo), tuple(hi), basepoint)

    def product(self, prefixes=("p_", "q_")) -> "Chart":
        """Chart on M x M with prefixed coordinate names (for two-point functions)."""
        names = tuple(p + s for p in prefixes for s in self.names)
        return Chart(names, self.lo * len(prefixes), self.hi * len(prefixes), self.basepoint * len(prefixes))

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "names": list(self.names),
            "box": [[a, b] for a, b in zip(self.lo, self.hi)],
            "basepoint": list(self.basepoint),
        }


# ---------------------------------------------------------------------------
# finite differences

_BASE_STENCILS = {
    "central2": (np.array([-1.0, 1.0]), np.array([-0.5, 0.5]), 2),
    "central4": (np.array([-2.0, -1.0, 1.0, 2.0]), np.array([1.0, -8.0, 8.0, -1.0]) / 12.0, 4),
}


@lru_cache(maxsize=None)
def stencil(scheme: str, richardson: bool) -> tuple[np.ndarray, np.ndarray]:
    """Offsets and weights (in units of the step) for a first derivative."""
    try:
        off, w, order = _BASE_STENCILS[scheme]
    except KeyError:
        raise ValidationError(f"unknown FD scheme {scheme!r}") from None
    if not richardson:
        return off.copy(), w.copy()
    # D = (2^p D(h/2) - D(h)) / (2^p - 1); D(h/2) has offsets off/2, weights 2w
    f = 2.0**order
    acc: dict[float, float] = {}
    for o, c in zip(off / 2, 2 * w * f / (f - 1)):
        acc[o] = acc.get(o, 0.0) + c
    for o, c in zip(off, -w / (f - 1)):
        acc[o] = acc.get(o, 0.0) + c
    keys = sorted(k for k, v in acc.items() if v != 0.0)
    return np.array(keys), np.array([acc[k] for k in keys])


@dataclass(frozen=True)
class FDConfig:
    step: float = 1e-5
    scheme: str = "central4"
    richardson: bool = True
    nested_steps: tuple[float, ...] = (1e-3, 1e-2)

    def __post_init__(self):
        if not self.step > 0:
            raise ValidationError("FD step must be positive")
        stencil(self.scheme, self.richardson)

    def step_for(self, depth: int) -> float:
        if depth <= 0:
            return self.step
        ladder = self.nested_steps
        return max(self.step, ladder[min(depth, len(ladder)) - 1])

    def reach(self, depth: int) -> float:
        """Half-width of the stencil used to differentiate a depth-``depth`` field."""
        off, _ = stencil(self.scheme, self.richardson)
        return float(np.max(np.abs(off))) * self.step_for(depth)

    def margin(self, levels: int) -> float:
        """Total reach of ``levels`` nested derivatives starting from depth 0."""
        return sum(self.reach(d) for d in range(levels))

    def validate_for(self, chart: Chart) -> None:
        if not self.step < chart.min_edge / 10:
            raise ValidationError(f"FD step {self.step} not below a tenth of the shortest box edge")

    def to_json(self) -> dict:
        return {"step": self.step, "scheme": self.scheme, "richardson": self.richardson}


class Field:
    """A batched smooth field on a chart."""

    def __init__(self, fn: Callable, shape: tuple = (), chart: Chart | None = None, depth: int = 0, name: str = ""):
        self.fn = fn
        self.shape = tuple(shape)
        self.chart = chart
        self.depth = depth
        self.name = name
        self.constant = None  # value array when the field is known to be constant

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.asarray(self.fn(X), dtype=float)
        expected = X.shape[:-1] + self.shape
        if out.shape != expected:
            out = np.broadcast_to(out, expected)
        return out

    def at(self, point) -> np.ndarray:
        return self(np.asarray(point, dtype=float))

    def __repr__(self):
        return f"Field({self.name or 'anon'}, shape={self.shape}, depth={self.depth})"


def constant_field(value, chart: Chart | None = None, name: str = "") -> Field:
    value = np.asarray(value, dtype=float)

    def fn(X):
        return np.broadcast_to(value, X.shape[:-1] + value.shape).copy()

    f = Field(fn, value.shape, chart, 0, name)
    f.constant = value
    return f


def expression_field(sources, chart: Chart, params: dict | None = None, name: str = "") -> Field:
    """Field whose components are expression sources in the chart coordinates."""
    params = dict(params or {})
    variables = list(chart.names) + list(params)
    ev = compile_array(sources, variables)
    pvals = [float(v) for v in params.values()]
    n = chart.dim

    def fn(X):
        coords = [X[..., i] for i in range(n)]
        with np.errstate(all="ignore"):
            out = ev(*coords, *pvals)
        if not np.all(np.isfinite(out)):
            raise NonFiniteValue(f"non-finite value in field {name or sources!r}")
        return out

    return Field(fn, ev.shape, chart, 0, name)


def _check_stencil(chart: Chart | None, Xs: np.ndarray) -> None:
    if chart is None:
        return
    slack = 1e-12 * max(1.0, float(np.max(np.abs(chart.hi_arr - chart.lo_arr))))
    inside = chart.contains(Xs, slack)
    if not np.all(inside):
        bad = Xs[~inside][0]
        raise StencilOutOfDomain(f"stencil node {bad.tolist()} outside chart box", point=bad)


def _combine(w: np.ndarray, vals: np.ndarray, axis: int) -> np.ndarray:
    """sum_m w_m vals_m over a symmetric stencil, pairing +/- offsets so constants cancel exactly."""
    k = len(w) // 2
    v = np.moveaxis(vals, axis, 0)
    return np.tensordot(w[k:], v[k:] - v[:k][::-1], axes=(0, 0))


def _resolve(cfg: FDConfig, depth: int, step, scheme, richardson):
    h = cfg.step_for(depth) if step is None else float(step)
    off, w = stencil(scheme or cfg.scheme, cfg.richardson if richardson is None else richardson)
    return h, off, w


def fd_partial(f: Field, direction: int, point, cfg: FDConfig = FDConfig(), chart: Chart | None = None,
               step: float | None = None, scheme: str | None = None, richardson: bool | None = None) -> np.ndarray:
    """Partial derivative of ``f`` along one coordinate at ``point`` (batched)."""
    X = np.asarray(point, dtype=float)
    chart = chart if chart is not None else f.chart
    h, off, w = _resolve(cfg, f.depth, step, scheme, richardson)
    e = np.zeros(X.shape[-1])
    e[direction] = 1.0
    Xs = X[None, ...] + (off * h).reshape((-1,) + (1,) * X.ndim) * e
    _check_stencil(chart, Xs)
    vals = f(Xs)
    if not np.all(np.isfinite(vals)):
        raise NonFiniteValue("non-finite value on FD stencil")
    return _combine(w, vals, 0) / h


def grad(f: Field, cfg: FDConfig = FDConfig(), step: float | None = None, scheme: str | None = None,
         richardson: bool | None = None, chart: Chart | None = None) -> Field:
    """Field of all first partials; derivative index placed after the batch axes."""
    chart = chart if chart is not None else f.chart
    h, off, w = _resolve(cfg, f.depth, step, scheme, richardson)
    offsets = off * h

    def fn(X):
        n = X.shape[-1]
        eye = np.eye(n)
        # Xs[i, m, ...] = X + offsets[m] e_i
        Xs = X[None, None, ...] + (eye[:, None, :] * offsets[None, :, None]).reshape(
            (n, len(offsets)) + (1,) * (X.ndim - 1) + (n,))
        _check_stencil(chart, Xs)
        vals = f(Xs)
        if not np.all(np.isfinite(vals)):
            raise NonFiniteValue("non-finite value on FD stencil")
        d = _combine(w, vals, 1) / h  # (n, batch..., shape...)
        nb = X.ndim - 1
        return np.moveaxis(d, 0, nb)

    if chart is None:
        raise ValidationError("grad needs a field attached to a chart")
    return Field(fn, (chart.dim,) + f.shape, chart, f.depth + 1, f"d({f.name})")


def map_field(fn: Callable, shape: tuple, *inputs: Field, chart: Chart | None = None, name: str = "") -> Field:
    """Pointwise combination of fields; depth is the max of the inputs."""
    chart = chart if chart is not None else next((f.chart for f in inputs if f.chart is not None), None)

    def wrapped(X):
        return fn(*(f(X) for f in inputs))

    return Field(wrapped, shape, chart, max((f.depth for f in inputs), default=0), name)


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature on a finite set, an interval or the real line.

    ``gauss_hermite`` integrates over the whole line after the affine change
    ``x = loc + scale * t``; ``loc`` and ``scale`` may be expressions in model
    parameters so the nodes follow a location-scale family.
    """

    kind: str
    n: int = 64
    values: tuple[float, ...] = ()
    weights_: tuple[float, ...] = ()
    interval: tuple[float, float] = (0.0, 1.0)
    loc: str | float = 0.0
    scale: str | float = 1.0
    _nodes: np.ndarray = field(default=None, repr=False, compare=False)
    _weights: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind == "finite_sum":
            x = np.asarray(self.values, dtype=float)
            if x.size < 1 or len(set(x.tolist())) != x.size:
                raise ValidationError("finite sample space needs distinct values")
            w = np.ones_like(x) if not self.weights_ else np.asarray(self.weights_, dtype=float)
            if w.shape != x.shape:
                raise ValidationError("finite_sum weights must match values")
            object.__setattr__(self, "n", int(x.size))
        elif self.kind == "gauss_legendre":
            if self.n < 2:
                raise ValidationError("quadrature needs at least 2 nodes")
            a, b = map(float, self.interval)
            if not a < b:
                raise ValidationError("empty quadrature interval")
            t, w = np.polynomial.legendre.leggauss(self.n)
            x = 0.5 * (b - a) * t + 0.5 * (a + b)
            w = 0.5 * (b - a) * w
        elif self.kind == "gauss_hermite":
            if self.n < 2:
                raise ValidationError("quadrature needs at least 2 nodes")
            # probabilists' rule: sum w g(t) ~ int g(t) exp(-t^2/2) dt
            x, w = np.polynomial.hermite_e.hermegauss(self.n)
        else:
            raise ValidationError(f"unknown quadrature kind {self.kind!r}")
        object.__setattr__(self, "_nodes", x)
        object.__setattr__(self, "_weights", w)
        self.self_test()

    def self_test(self) -> None:
        x, w = self._nodes, self._weights
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(w))):
            raise QuadratureFailure("non-finite nodes or weights")
        if self.kind == "gauss_legendre":
            a, b = map(float, self.interval)
            c, r = 0.5 * (a + b), 0.5 * (b - a)
            for k in range(0, min(2 * self.n - 1, 12) + 1):
                exact = 0.0 if k % 2 else 2 * r ** (k + 1) / (k + 1)
                got = float(np.sum(w * (x - c) ** k))
                if abs(got - exact) > 1e-12 * max(1.0, abs(exact)):
                    raise QuadratureFailure(f"Gauss-Legendre not exact on degree {k}")
        elif self.kind == "gauss_hermite":
            for k in range(0, min(2 * self.n - 1, 12) + 1):
                exact = 0.0 if k % 2 else np.sqrt(2 * np.pi) * _double_factorial(k - 1)
                got = float(np.sum(w * x**k))
                if abs(got - exact) > 1e-10 * max(1.0, abs(exact)):
                    raise QuadratureFailure(f"Gauss-Hermite not exact on degree {k}")

    def _affine(self, params: dict | None) -> tuple[float, float]:
        params = params or {}
        vals = []
        for s in (self.loc, self.scale):
            if isinstance(s, str):
                e = Expr.compile(s, list(params))
                vals.append(float(e(*params.values())))
            else:
                vals.append(float(s))
        if not vals[1] > 0:
            raise QuadratureFailure("Gauss-Hermite scale must be positive")
        return vals[0], vals[1]

    def nodes_weights(self, params: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Nodes and weights such that ``sum w f(x)`` approximates ``int f dx`` (or the finite sum)."""
        if self.kind == "gauss_hermite":
            loc, scale = self._affine(params)
            t, w = self._nodes, self._weights
            return loc + scale * t, scale * w * np.exp(0.5 * t * t)
        return self._nodes.copy(), self._weights.copy()

    def to_json(self) -> dict:
        out: dict = {"kind": self.kind, "nodes": self.n}
        if self.kind == "finite_sum":
            out["values"] = list(self.values)
        elif self.kind == "gauss_legendre":
            out["interval"] = list(self.interval)
        else:
            out["loc"], out["scale"] = self.loc, self.scale
        return out


def _double_factorial(k: int) -> float:
    return float(np.prod(np.arange(k, 0, -2))) if k > 0 else 1.0


def quad_integrate(f, rule: QuadratureRule, params: dict | None = None) -> float:
    """Weighted node sum of ``f``.

    ``f`` is either a callable ``f(x, **params)`` vectorised over nodes or an
    expression source in the sample variable ``x`` and the parameter names.
    """
    params = dict(params or {})
    x, w = rule.nodes_weights(params)
    if isinstance(f, (str, int, float)):
        e = Expr.compile(f, ["x"] + list(params))
        vals = e.evaluate(x, *[np.full_like(x, float(v)) for v in params.values()], check=False)
    else:
        with np.errstate(all="ignore"):
            vals = np.broadcast_to(np.asarray(f(x, **params), dtype=float), x.shape)
    terms = w * vals
    if not np.all(np.isfinite(terms)):
        raise NonFiniteValue("non-finite integrand at a quadrature node")
    return float(np.sum(terms))


# ---------------------------------------------------------------------------
# path integration of one-forms

_GL_T, _GL_W = np.polynomial.legendre.leggauss(64)


def staircase_nodes(start, end, order=None):
    """Gauss-Legendre nodes on the axis-aligned staircase path.

    Returns (points, weights, axis) arrays: ``points`` has shape
    ``(n_segments*64,) + batch + (n,)``, ``weights`` the matching
    ``(n_segments*64,) + batch`` factors (including the signed segment
    length) and ``axis`` the coordinate moved along each node.
    """
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    start, end = np.broadcast_arrays(start, end)
    n = start.shape[-1]
    order = list(range(n)) if order is None else list(order)
    s = 0.5 * (_GL_T + 1.0)
    pts, wts, axes = [], [], []
    cur = start.copy()
    for i in order:
        a, b = cur[..., i], end[..., i]
        seg = np.broadcast_to(cur, (len(s),) + cur.shape).copy()
        seg[..., i] = a[None] + s.reshape((-1,) + (1,) * a.ndim) * (b - a)[None]
        pts.append(seg)
        wts.append(0.5 * _GL_W.reshape((-1,) + (1,) * a.ndim) * (b - a)[None])
        axes.extend([i] * len(s))
        cur = cur.copy()
        cur[..., i] = b
    return np.concatenate(pts, 0), np.concatenate(wts, 0), np.array(axes)


def path_integrate_oneform(a: Field | Callable, start, end, chart: Chart | None = None, order=None) -> np.ndarray:
    """Integral of ``sum a_i du_i`` along the staircase path (batched over endpoints)."""
    P, W, axes = staircase_nodes(start, end, order)
    if chart is not None:
        _check_stencil(chart, P)
    vals = np.asarray(a(P), dtype=float)  # (m, batch..., n)
    if not np.all(np.isfinite(vals)):
        raise NonFiniteValue("non-finite one-form value on path")
    comp = np.take_along_axis(vals, axes.reshape((-1,) + (1,) * (vals.ndim - 1)), axis=-1)[..., 0]
    return np.sum(W * comp, axis=0)


def path_order_residual(a: Field | Callable, start, end, chart: Chart | None = None) -> np.ndarray:
    """Coordinate-order minus reversed-order integral: an integrability residual."""
    n = np.asarray(start).shape[-1]
    fwd = path_integrate_oneform(a, start, end, chart)
    rev = path_integrate_oneform(a, start, end, chart, order=list(range(n))[::-1])
    return fwd - rev
