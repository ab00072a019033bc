"""A small arithmetic expression language compiled to numpy callables.

Sources may use ``+ - * / ^`` (``^`` is exponentiation), parentheses, numeric
literals, the constant ``pi`` and the functions exp, log, sin, cos, sqrt,
tanh, abs.  Anything else is rejected at parse time, so a scene file can
never execute arbitrary Python.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteValue, ParseError

FUNCTIONS: dict[str, Callable] = {
    "exp": np.exp,
    "log": np.log,
    "sin": np.sin,
    "cos": np.cos,
    "sqrt": np.sqrt,
    "tanh": np.tanh,
    "abs": np.abs,
}
CONSTANTS = {"pi": np.pi}

_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)
_UNARY = (ast.UAdd, ast.USub)


def _check(node: ast.AST, variables: set[str], source: str) -> None:
    if isinstance(node, ast.Expression):
        _check(node.body, variables, source)
    elif isinstance(node, ast.BinOp):
        if not isinstance(node.op, _BINOPS):
            raise ParseError(f"operator {type(node.op).__name__} not allowed in {source!r}")
        _check(node.left, variables, source)
        _check(node.right, variables, source)
    elif isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, _UNARY):
            raise ParseError(f"unary operator not allowed in {source!r}")
        _check(node.operand, variables, source)
    elif isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS:
            raise ParseError(f"unknown function in {source!r}")
        if len(node.args) != 1 or node.keywords:
            raise ParseError(f"functions take exactly one argument: {source!r}")
        _check(node.args[0], variables, source)
    elif isinstance(node, ast.Name):
        if node.id not in variables and node.id not in CONSTANTS:
            raise ParseError(f"unknown name {node.id!r} in {source!r}")
    elif isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ParseError(f"only numeric literals allowed in {source!r}")
    else:
        raise ParseError(f"unsupported syntax {type(node).__name__} in {source!r}")


@dataclass(frozen=True)
class Expr:
    """Compiled expression over an ordered tuple of variable names."""

    source: str
    variables: tuple[str, ...]
    _fn: Callable = field(repr=False, compare=False, default=None)

    @classmethod
    def compile(cls, source: str | float | int, variables: Sequence[str]) -> "Expr":
        if isinstance(source, (int, float)) and not isinstance(source, bool):
            source = repr(float(source))
        if not isinstance(source, str):
            raise ParseError(f"expression must be a string or number, got {type(source).__name__}")
        text = source.replace("^", "**")
        try:
            tree = ast.parse(text.strip(), mode="eval")
        except SyntaxError as exc:
            raise ParseError(f"cannot parse {source!r}: {exc.msg}") from None
        names = tuple(variables)
        _check(tree, set(names), source)
        code = compile(tree, "<expr>", "eval")
        namespace = {"__builtins__": {}, **FUNCTIONS, **CONSTANTS}

        def fn(*args):
            return eval(code, namespace, dict(zip(names, args)))

        return cls(source, names, fn)

    @property
    def arity(self) -> int:
        return len(self.variables)

    def free_names(self) -> set[str]:
        tree = ast.parse(self.source.replace("^", "**").strip(), mode="eval")
        return {n.id for n in ast.walk(tree) if isinstance(n, ast.Name)} - set(FUNCTIONS) - set(CONSTANTS)

    def __call__(self, *args):
        with np.errstate(all="ignore"):
            out = self._fn(*args)
        return out

    def evaluate(self, *args, check: bool = True):
        """Evaluate and broadcast to the common shape of the arguments."""
        out = self(*args)
        shape = np.broadcast_shapes(*(np.shape(a) for a in args)) if args else ()
        out = np.broadcast_to(np.asarray(out, dtype=float), shape)
        if check and not np.all(np.isfinite(out)):
            raise NonFiniteValue(f"non-finite value of {self.source!r}")
        return out


def compile_array(sources, variables: Sequence[str]):
    """Compile a nested list of expression sources into an evaluator.

    The returned callable maps coordinate arrays (each of batch shape B) to
    an array of shape ``B + S`` where ``S`` is the nesting shape of
    ``sources``.
    """
    arr = np.asarray(sources, dtype=object)
    shape = arr.shape
    flat = [Expr.compile(s, variables) for s in arr.ravel()]

    def evaluate(*coords):
        batch = np.broadcast_shapes(*(np.shape(c) for c in coords)) if coords else ()
        vals = [np.broadcast_to(np.asarray(e(*coords), dtype=float), batch) for e in flat]
        out = np.stack(vals, axis=-1) if vals else np.zeros(batch + (0,))
        return out.reshape(batch + shape)

    evaluate.shape = shape
    evaluate.exprs = flat
    return evaluate
