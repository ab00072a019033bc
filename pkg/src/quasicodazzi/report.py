"""Verification reports and their deterministic renderings."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .statmfd import Check

FLOAT_DIGITS = 17


def _num(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return '"nan"'
    if math.isinf(x):
        return '"inf"' if x > 0 else '"-inf"'
    if x == 0.0:
        return "0.0"  # folds -0.0 so sign noise cannot change the bytes
    return format(x, f".{FLOAT_DIGITS - 1}e")


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON with every float at 17 significant digits and keys in insertion order."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, Check):
        obj = obj.to_json()
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (np.floating, float)):
        return _num(obj)
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if obj is None:
        return "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.number, str, bool)) for v in obj):
            return "[" + ", ".join(dumps(v, indent, _level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + dumps(v, indent, _level + 1) for v in obj) + "\n" + end + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


@dataclass
class Result:
    """Checks and summary data for one command on one object."""

    command: str
    object: str
    checks: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)  # csv name -> list of row dicts
    files: dict = field(default_factory=dict)  # extra json name -> payload
    error: dict | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and all(c.passed for c in self.checks.values())

    def to_json(self) -> dict:
        out = {"command": self.command, "object": self.object, "passed": self.passed,
               "checks": [{"key": k, **c.to_json()} for k, c in self.checks.items()]}
        if self.data:
            out["data"] = self.data
        if self.error:
            out["error"] = self.error
        return out


@dataclass
class Report:
    scene: str
    config: dict
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_json(self) -> dict:
        return {"tool": "quasicodazzi", "scene": self.scene, "config": self.config, "passed": self.passed,
                "results": [r.to_json() for r in self.results]}

    def json(self) -> str:
        return dumps(self.to_json()) + "\n"

    def text(self) -> str:
        lines = [f"scene {self.scene}  " + "  ".join(f"{k}={v}" for k, v in self.config.items())]
        for r in self.results:
            lines.append(f"{r.command} {r.object}: {'PASS' if r.passed else 'FAIL'}")
            for k, c in r.checks.items():
                lines.append(f"  [{'pass' if c.passed else 'FAIL'}] {k:<24} {c.residual:.3e} < {c.tolerance:.1e}"
                             f"  {c.name}  ({c.anchor})")
            if r.error:
                lines.append(f"  error ({r.error['type']}, exit {r.error['exit_code']}): {r.error['message']}")
        lines.append("overall: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines) + "\n"


def table_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = list(rows[0])
    w.writerow(keys)
    for r in rows:
        w.writerow([format(float(r[k]), ".17g") if isinstance(r[k], (float, np.floating)) else r[k] for k in keys])
    return buf.getvalue()
