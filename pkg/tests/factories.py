"""Random smooth test objects built from numpy closures."""

from __future__ import annotations

import itertools

import numpy as np

from quasicodazzi.chart import Chart, Field, constant_field, map_field
from quasicodazzi.parabundle import canonical_from_codazzi, transport_structure
from quasicodazzi.statmfd import connections_from_cubic

SQUARE = Chart(("u", "v"), (-1.0, -1.0), (1.0, 1.0), (0.1, -0.2))


def _affine_coeffs(rng, shape, scale=0.3):
    return rng.normal(size=shape), scale * rng.normal(size=(2,) + shape)


def _affine_eval(c0, c1, X):
    return c0 + np.tensordot(X, c1, axes=([-1], [0]))


def random_metric(rng, chart=SQUARE, rank=None) -> Field:
    """h = B^T B (+ I if full rank) with B affine in the coordinates; rank-deficient when rank < n."""
    n = chart.dim
    r = n if rank is None else rank
    b0, b1 = _affine_coeffs(rng, (r, n))

    def fn(X):
        B = _affine_eval(b0, b1, X)
        h = np.swapaxes(B, -1, -2) @ B
        return h + np.eye(n) if rank is None else h

    return Field(fn, (n, n), chart, 0, "h")


def symmetrize3(T: np.ndarray) -> np.ndarray:
    k = T.ndim - 3
    lead = tuple(range(k))
    return sum(np.transpose(T, lead + tuple(k + i for i in p)) for p in itertools.permutations(range(3))) / 6


def random_cubic(rng, chart=SQUARE, scale=0.5) -> Field:
    n = chart.dim
    c0, c1 = _affine_coeffs(rng, (n, n, n))
    c0, c1 = scale * c0, scale * c1
    return Field(lambda X: symmetrize3(_affine_eval(c0, c1, X)), (n, n, n), chart, 0, "C")


def random_antisymmetric_torsion(rng, chart=SQUARE, scale=0.3) -> Field:
    """A^k_ij antisymmetric in (i, j), constant."""
    n = chart.dim
    A = scale * rng.normal(size=(n, n, n))
    A = A - np.swapaxes(A, -1, -2)
    return constant_field(A, chart, "torsion part")


def random_invertible(rng, m: int, cond_max: float = 20.0) -> np.ndarray:
    while True:
        F = np.eye(m) + 0.4 * rng.normal(size=(m, m))
        if np.linalg.cond(F) < cond_max:
            return F


def add_fields(a: Field, b: Field) -> Field:
    return map_field(lambda x, y: x + y, a.shape, a, b)


def random_canonical(rng, chart=SQUARE, rank=None):
    """(h, C, S) with S the canonical structure of the Codazzi pair built from (h, C)."""
    h = random_metric(rng, chart, rank)
    C = random_cubic(rng, chart)
    g, gs = connections_from_cubic(h, C)
    return h, C, canonical_from_codazzi(h, g, gs)


def random_quasi_codazzi(rng, chart=SQUARE):
    """A canonical structure pushed through a constant random frame change, so tau and I are not standard."""
    h, C, S = random_canonical(rng, chart)
    F = constant_field(random_invertible(rng, 2 * chart.dim), chart, "F")
    return h, C, transport_structure(S, F)


def random_forms(rng, chart=SQUARE, scale=0.3) -> Field:
    """Affine connection forms W[d, j, i] on a rank-n bundle."""
    n = chart.dim
    w0, w1 = _affine_coeffs(rng, (n, n, n), scale)
    return Field(lambda X: _affine_eval(scale * w0, w1, X), (n, n, n), chart, 0, "W")
