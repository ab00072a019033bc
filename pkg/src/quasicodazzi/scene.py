"""JSON scene files: named objects that reference each other by name.

A scene looks like::

    {"version": 1,
     "config": {"fd_step": 1e-5, "tol": 1e-5, "grid": 3},
     "objects": {"M": {"type": "chart", "coords": ["t"], "box": [[-1, 1]]}, ...},
     "suite": [["codazzi-check", "cod"], ...]}

Objects are built lazily in dependency order.  :func:`load_scene` builds all
of them once so that every object's own invariants are checked at load time;
problems are collected and raised together as one :class:`ValidationError`.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .chart import Chart, FDConfig, Field, QuadratureRule, constant_field, expression_field
from .contrast import TwoPointFunction
from .errors import ParseError, QCError, ValidationError
from .parabundle import (
    FRONT_FD,
    ParaHermitianBundle,
    QuasiCodazziStructure,
    canonical_from_codazzi,
    canonical_isomorphism,
    dual_bundle_connection,
    front_structure,
    transport_structure,
)
from .statmfd import (
    StatisticalModel,
    alpha_connection,
    connections_from_cubic,
    dual_connection,
    fisher_metric,
    levi_civita,
    model_cubic,
    nabla_metric,
)

SCENE_VERSION = 1
GALLERY = ("gaussian", "bernoulli", "degenerate-reparam", "degenerate-line", "cusp", "quartic-potential",
           "cuspidal-edge")

DEFAULT_CONFIG = {"fd_step": 1e-5, "tol": None, "grid": 3}

# which keys of each object type hold references, and the types they may name
REFS = {
    "chart": {},
    "field": {"chart": ("chart",)},
    "connection": {"chart": ("chart",), "metric": ("field", "model"), "of": ("connection",), "model": ("model",),
                   "cubic": ("field", "model")},
    "model": {"chart": ("chart",)},
    "codazzi": {"metric": ("field", "model"), "connection": ("connection",), "dual": ("connection",)},
    "contrast": {"chart": ("chart",), "metric": ("field", "model", "codazzi", "structure", "front"),
                 "cubic": ("field", "model", "codazzi", "structure", "front"), "structure": ("structure", "front"),
                 "model": ("model",)},
    "probe": {"metric": ("field", "model"), "connection": ("connection",)},
    "bundle": {"chart": ("chart",)},
    "structure": {"bundle": ("bundle",), "canonical_from": ("codazzi",), "transport_of": ("structure",)},
    "front": {"chart": ("chart",)},
    "atlas": {"structure": ("structure", "front")},
    "isomorphism": {"source": ("structure", "front"), "target": ("structure", "front")},
}


@dataclass
class Codazzi:
    chart: Chart
    metric: Field
    connection: Field
    dual: Field | None


@dataclass
class Contrast:
    rho: TwoPointFunction
    kind: str  # "expression" or "weak"
    metric: Field | None = None
    cubic: Field | None = None
    structure: QuasiCodazziStructure | None = None
    model: StatisticalModel | None = None
    alpha: float = -1.0


@dataclass
class Probe:
    metric: Field
    connection: Field | None
    curve: Any
    t_values: np.ndarray
    fit_window: tuple
    expect_exponent: float = -1.0


@dataclass
class AtlasJob:
    structure: QuasiCodazziStructure
    charts: dict
    samples: int = 5
    expect: dict | None = None


@dataclass
class Isomorphism:
    F: Field
    source: QuasiCodazziStructure
    target: QuasiCodazziStructure


@dataclass
class Entry:
    name: str
    type: str
    spec: dict
    line: int | None = None
    value: Any = None
    built: bool = False


@dataclass
class Scene:
    name: str
    version: int
    config: dict
    entries: dict = field(default_factory=dict)
    suite: list = field(default_factory=list)
    _stack: list = field(default_factory=list, repr=False)

    # -- access -----------------------------------------------------------
    def names(self, *types: str) -> list[str]:
        return [k for k, e in self.entries.items() if not types or e.type in types]

    def entry(self, name: str) -> Entry:
        if name not in self.entries:
            raise ValidationError(f"unknown object {name!r}", object=name)
        return self.entries[name]

    def get(self, name: str):
        e = self.entry(name)
        if not e.built:
            if name in self._stack:
                cycle = " -> ".join(self._stack[self._stack.index(name):] + [name])
                raise ValidationError(f"reference cycle {cycle}", object=name)
            self._stack.append(name)
            try:
                e.value = BUILDERS[e.type](self, e)
            finally:
                self._stack.pop()
            e.built = True
        return e.value

    def fd(self) -> FDConfig:
        return FDConfig(step=float(self.config["fd_step"]))

    # -- typed resolution of references -------------------------------------
    def metric(self, name: str) -> Field:
        e, v = self.entry(name), self.get(name)
        if e.type == "model":
            return fisher_metric(v)
        if e.type == "codazzi":
            return v.metric
        if e.type in ("structure", "front"):
            return v.metric()
        return v

    def cubic(self, name: str) -> Field:
        e, v = self.entry(name), self.get(name)
        if e.type == "model":
            return model_cubic(v)
        if e.type == "codazzi":
            return nabla_metric(v.metric, v.connection, self.fd())
        if e.type in ("structure", "front"):
            return v.generalized_cubic()
        return v

    def structure(self, name: str) -> QuasiCodazziStructure:
        return self.get(name)


# ---------------------------------------------------------------------------
# builders


def _req(e: Entry, key: str):
    if key not in e.spec:
        raise ValidationError(f"object {e.name!r} ({e.type}) needs key {key!r}", object=e.name)
    return e.spec[key]


def _chart_of(scene: Scene, e: Entry) -> Chart:
    return scene.get(_req(e, "chart"))


def _inline_chart(spec: dict, where: str, names=None) -> Chart:
    coords = spec.get("coords", names)
    if coords is None or "box" not in spec:
        raise ValidationError(f"{where}: chart needs 'coords' and 'box'")
    box = spec["box"]
    if len(box) != len(coords) or any(len(iv) != 2 for iv in box):
        raise ValidationError(f"{where}: box must list one [lo, hi] per coordinate")
    bp = spec.get("basepoint")
    return Chart(tuple(coords), tuple(iv[0] for iv in box), tuple(iv[1] for iv in box),
                 None if bp is None else tuple(bp))


def _build_chart(scene, e):
    return _inline_chart(e.spec, f"chart {e.name!r}")


def _build_field(scene, e):
    ch = _chart_of(scene, e)
    f = expression_field(_req(e, "components"), ch, e.spec.get("params"), e.name)
    X = np.vstack([ch.grid(3, 0.05 * ch.min_edge), ch.base[None]])
    vals = f(X)
    kind = e.spec.get("kind", "tensor")
    if kind == "metric":
        n = ch.dim
        if f.shape != (n, n):
            raise ValidationError(f"metric {e.name!r} must be {n}x{n}, got {f.shape}", object=e.name)
        asym = float(np.max(np.abs(vals - np.swapaxes(vals, -1, -2))))
        if asym > 1e-12:
            raise ValidationError(f"metric {e.name!r} is not symmetric (residual {asym:.3e})", object=e.name)
    shape = e.spec.get("shape")
    if shape is not None and tuple(shape) != f.shape:
        raise ValidationError(f"field {e.name!r} has shape {f.shape}, declared {tuple(shape)}", object=e.name)
    return f


def _build_connection(scene, e):
    kind = e.spec.get("kind", "components")
    cfg = scene.fd()
    if kind == "components":
        ch = _chart_of(scene, e)
        n = ch.dim
        comps = e.spec.get("components", 0.0)
        if comps == 0 or comps == 0.0:
            return constant_field(np.zeros((n, n, n)), ch, e.name)
        g = expression_field(comps, ch, e.spec.get("params"), e.name)
        if g.shape != (n, n, n):
            raise ValidationError(f"connection {e.name!r} must have shape {(n, n, n)}, got {g.shape}",
                                  object=e.name)
        return g
    if kind == "levi_civita":
        return levi_civita(scene.metric(_req(e, "metric")), cfg)
    if kind == "dual":
        return dual_connection(scene.metric(_req(e, "metric")), scene.get(_req(e, "of")), cfg)
    if kind == "alpha":
        return alpha_connection(scene.get(_req(e, "model")), float(_req(e, "alpha")))
    if kind == "from_cubic":
        h = scene.metric(_req(e, "metric"))
        C = scene.cubic(_req(e, "cubic"))
        ch = h.chart
        nab, nab_star = connections_from_cubic(h, C, cfg, points=ch.grid(3, 0.1 * ch.min_edge))
        return nab if e.spec.get("side", "primal") == "primal" else nab_star
    raise ValidationError(f"connection {e.name!r}: unknown kind {kind!r}", object=e.name)


def _build_model(scene, e):
    ch = _chart_of(scene, e)
    s = dict(_req(e, "sample"))
    kind = s.pop("kind", None)
    rule_kw = {"kind": kind}
    if "n" in s:
        rule_kw["n"] = int(s.pop("n"))
    if "values" in s:
        rule_kw["values"] = tuple(s.pop("values"))
    if "weights" in s:
        rule_kw["weights_"] = tuple(s.pop("weights"))
    if "interval" in s:
        rule_kw["interval"] = tuple(s.pop("interval"))
    for key in ("loc", "scale"):
        if key in s:
            rule_kw[key] = s.pop(key)
    if s:
        raise ValidationError(f"model {e.name!r}: unknown sample keys {sorted(s)}", object=e.name)
    rule = QuadratureRule(**rule_kw)
    m = StatisticalModel(ch, _req(e, "logdensity"), rule, e.spec.get("variable", "x"),
                         float(e.spec.get("score_step", 1e-3)), e.name)
    for z in (ch.base, ch.lo_arr + 0.05 * (ch.hi_arr - ch.lo_arr), ch.hi_arr - 0.05 * (ch.hi_arr - ch.lo_arr)):
        total = m.normalization(z)
        if abs(total - 1.0) > float(e.spec.get("normalization_tol", 1e-8)):
            raise ValidationError(f"model {e.name!r} does not integrate to 1 at {z.tolist()} (got {total:.12g})",
                                  object=e.name)
    return m


def _build_codazzi(scene, e):
    h = scene.metric(_req(e, "metric"))
    g = scene.get(_req(e, "connection"))
    d = scene.get(e.spec["dual"]) if e.spec.get("dual") else None
    if g.shape != (h.chart.dim,) * 3:
        raise ValidationError(f"codazzi {e.name!r}: connection shape {g.shape} does not match the chart",
                              object=e.name)
    return Codazzi(h.chart, h, g, d)


def _build_contrast(scene, e):
    cf = e.spec.get("construct_from")
    if cf is None:
        ch = _chart_of(scene, e)
        rho = TwoPointFunction.from_expression(_req(e, "expression"), ch, e.spec.get("params"), name=e.name)
        rho(ch.base, ch.base)  # finite at the basepoint
        model = scene.get(e.spec["model"]) if e.spec.get("model") else None
        return Contrast(rho, "expression", model=model, alpha=float(e.spec.get("alpha", -1.0)))
    from .contrast import weak_contrast_from

    if not isinstance(cf, dict):
        raise ValidationError(f"contrast {e.name!r}: construct_from must be an object", object=e.name)
    S = None
    if cf.get("structure"):
        S = scene.structure(cf["structure"])
        h, C = S.metric(), S.generalized_cubic()
    else:
        if not cf.get("metric") or not cf.get("cubic"):
            raise ValidationError(f"contrast {e.name!r}: construct_from needs 'structure' or 'metric' + 'cubic'",
                                  object=e.name)
        h, C = scene.metric(cf["metric"]), scene.cubic(cf["cubic"])
    ch = h.chart
    rho = weak_contrast_from(h, C, scene.fd(), ch.grid(3, 0.1 * ch.min_edge), name=e.name)
    return Contrast(rho, "weak", h, C, S)


def _build_probe(scene, e):
    h = scene.metric(_req(e, "metric"))
    g = scene.get(e.spec["connection"]) if e.spec.get("connection") else None
    curve_src = _req(e, "curve")
    n = h.chart.dim
    if len(curve_src) != n:
        raise ValidationError(f"probe {e.name!r}: curve needs {n} components", object=e.name)
    curve_chart = Chart(("t",), (-1.0,), (1.0,))
    cf = expression_field(list(curve_src), curve_chart, name=f"{e.name}:curve")

    def curve(t):
        t = np.asarray(t, dtype=float)
        return cf(t[..., None])

    lo, hi = e.spec.get("t_range", [1e-4, 1e-2])
    k = int(e.spec.get("samples", 21))
    if not 0 < lo < hi:
        raise ValidationError(f"probe {e.name!r}: t_range must satisfy 0 < lo < hi", object=e.name)
    t = np.geomspace(lo, hi, k)
    fw = tuple(e.spec.get("fit_window", [lo, hi]))
    return Probe(h, g, curve, t, fw, float(e.spec.get("expect_exponent", -1.0)))


def _build_bundle(scene, e):
    ch = _chart_of(scene, e)
    if e.spec.get("kind", "whitney") == "whitney":
        B = ParaHermitianBundle.whitney(ch)
    else:
        tau = expression_field(_req(e, "tau"), ch, e.spec.get("params"), f"{e.name}:tau")
        inv = expression_field(_req(e, "involution"), ch, e.spec.get("params"), f"{e.name}:I")
        B = ParaHermitianBundle(ch, tau, inv, e.name)
    B.validate(np.vstack([ch.grid(3, 0.05 * ch.min_edge), ch.base[None]]))
    return B


def _build_structure(scene, e):
    cfg = scene.fd()
    if e.spec.get("canonical_from"):
        cod = scene.get(e.spec["canonical_from"])
        return canonical_from_codazzi(cod.metric, cod.connection, cod.dual, cfg, name=e.name)
    if e.spec.get("transport_of"):
        S0 = scene.structure(e.spec["transport_of"])
        F = expression_field(_req(e, "map"), S0.chart, e.spec.get("params"), f"{e.name}:F")
        m = 2 * S0.n
        if F.shape != (m, m):
            raise ValidationError(f"structure {e.name!r}: transport map must be {m}x{m}", object=e.name)
        S = transport_structure(S0, F, e.name)
        S.transport = (F, S0)
        return S
    B = scene.get(_req(e, "bundle"))
    ch = B.chart
    n = ch.dim
    params = e.spec.get("params")
    phi = expression_field(_req(e, "phi"), ch, params, f"{e.name}:Phi")
    if phi.shape != (2 * n, n):
        raise ValidationError(f"structure {e.name!r}: Phi must be {2 * n}x{n}, got {phi.shape}", object=e.name)

    def forms(key):
        src = e.spec.get(key, 0.0)
        if src == 0 or src == 0.0:
            return constant_field(np.zeros((n, n, n)), ch, f"{e.name}:{key}")
        w = expression_field(src, ch, params, f"{e.name}:{key}")
        if w.shape != (n, n, n):
            raise ValidationError(f"structure {e.name!r}: {key} must have shape {(n, n, n)}", object=e.name)
        return w

    wplus = forms("plus")
    dual = e.spec.get("minus") == "dual" or bool(e.spec.get("dual_of_plus"))
    wminus = dual_bundle_connection(wplus, B, cfg) if dual else forms("minus")
    S = QuasiCodazziStructure(B, phi, wplus, wminus, cfg, e.name,
                              allow_rank_drop=bool(e.spec.get("allow_rank_drop", False)))
    return S


def _build_front(scene, e):
    ch = _chart_of(scene, e)
    cfg = FRONT_FD if "fd_step" not in e.spec else FDConfig(step=float(e.spec["fd_step"]),
                                                            nested_steps=FRONT_FD.nested_steps)
    S = front_structure(_req(e, "map"), ch, cfg, e.spec.get("normal_hint"), name=e.name)
    S.allow_rank_drop = bool(e.spec.get("allow_rank_drop", False))
    if e.spec.get("expect_metric") is not None:
        S.front["expect_metric"] = expression_field(e.spec["expect_metric"], ch, name=f"{e.name}:expected h")
    return S


def _build_atlas(scene, e):
    S = scene.structure(_req(e, "structure"))
    charts = {}
    raw = _req(e, "charts")
    if not isinstance(raw, dict) or not raw:
        raise ValidationError(f"atlas {e.name!r}: charts must be a non-empty object", object=e.name)
    for cname, spec in raw.items():
        if isinstance(spec, str):
            if scene.entry(spec).type != "chart":
                raise ValidationError(f"atlas {e.name!r}: {spec!r} is not a chart", object=e.name)
            charts[cname] = scene.get(spec)
        else:
            charts[cname] = _inline_chart(spec, f"atlas {e.name!r} chart {cname!r}", S.chart.names)
    for cname, c in charts.items():
        if c.names != S.chart.names:
            raise ValidationError(f"atlas {e.name!r}: chart {cname!r} uses other coordinates", object=e.name)
        if not (np.all(c.lo_arr >= S.chart.lo_arr) and np.all(c.hi_arr <= S.chart.hi_arr)):
            raise ValidationError(f"atlas {e.name!r}: chart {cname!r} leaves the structure's domain", object=e.name)
    return AtlasJob(S, charts, int(e.spec.get("samples", 5)), e.spec.get("expect"))


def _build_isomorphism(scene, e):
    S1 = scene.structure(_req(e, "source"))
    if e.spec.get("to_canonical"):
        F, S2 = canonical_isomorphism(S1)
        return Isomorphism(F, S1, S2)
    S2 = scene.structure(_req(e, "target"))
    if e.spec.get("map") is not None:
        F = expression_field(e.spec["map"], S1.chart, e.spec.get("params"), f"{e.name}:F")
    elif getattr(S2, "transport", (None, None))[1] is S1:
        F = S2.transport[0]
    else:
        raise ValidationError(f"isomorphism {e.name!r} needs a 'map' or a target transported from the source",
                              object=e.name)
    return Isomorphism(F, S1, S2)


BUILDERS = {
    "chart": _build_chart,
    "field": _build_field,
    "connection": _build_connection,
    "model": _build_model,
    "codazzi": _build_codazzi,
    "contrast": _build_contrast,
    "probe": _build_probe,
    "bundle": _build_bundle,
    "structure": _build_structure,
    "front": _build_front,
    "atlas": _build_atlas,
    "isomorphism": _build_isomorphism,
}


# ---------------------------------------------------------------------------
# loading


def _references(e: Entry) -> list[tuple[str, str, tuple]]:
    out = []
    spec = dict(e.spec)
    if e.type == "contrast" and isinstance(spec.get("construct_from"), dict):
        spec = {**spec, **spec["construct_from"]}
    for key, types in REFS.get(e.type, {}).items():
        v = spec.get(key)
        if isinstance(v, str):
            out.append((key, v, types))
    if e.type == "atlas" and isinstance(spec.get("charts"), dict):
        for cname, v in spec["charts"].items():
            if isinstance(v, str):
                out.append((f"charts.{cname}", v, ("chart",)))
    return out


def _line_of(text: str | None, name: str) -> int | None:
    if not text:
        return None
    m = re.search(r'"' + re.escape(name) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def parse_scene(data: Any, name: str = "<scene>", text: str | None = None, build: bool = True) -> Scene:
    """Validate a decoded scene document; every problem is reported together."""
    if not isinstance(data, dict):
        raise ValidationError("scene must be a JSON object")
    problems = []
    version = data.get("version")
    if version != SCENE_VERSION:
        problems.append(f"unsupported or missing version {version!r} (expected {SCENE_VERSION})")
    unknown = set(data) - {"version", "config", "objects", "suite", "description"}
    if unknown:
        problems.append(f"unknown top-level keys {sorted(unknown)}")
    config = dict(DEFAULT_CONFIG)
    cfg_in = data.get("config", {}) or {}
    bad_cfg = set(cfg_in) - set(DEFAULT_CONFIG)
    if bad_cfg:
        problems.append(f"unknown config keys {sorted(bad_cfg)}")
    config.update({k: v for k, v in cfg_in.items() if k in DEFAULT_CONFIG})
    objects = data.get("objects", {}) or {}
    if not isinstance(objects, dict):
        problems.append("'objects' must map names to object specs")
        objects = {}
    scene = Scene(name, version, config)
    for oname, spec in objects.items():
        where = _line_of(text, oname)
        tag = f"object {oname!r}" + (f" (line {where})" if where else "")
        if not isinstance(spec, dict) or spec.get("type") not in BUILDERS:
            t = spec.get("type") if isinstance(spec, dict) else None
            problems.append(f"{tag}: unknown type {t!r}")
            continue
        scene.entries[oname] = Entry(oname, spec["type"], spec, where)
    for e in scene.entries.values():
        for key, ref, types in _references(e):
            tag = f"object {e.name!r}" + (f" (line {e.line})" if e.line else "")
            if ref not in scene.entries:
                problems.append(f"{tag}: {key} references unknown object {ref!r}")
            elif scene.entries[ref].type not in types:
                problems.append(f"{tag}: {key} must name a {' or '.join(types)}, {ref!r} is a "
                                f"{scene.entries[ref].type}")
    for item in data.get("suite", []) or []:
        if (not isinstance(item, list) or len(item) != 2 or not all(isinstance(s, str) for s in item)):
            problems.append(f"suite entry {item!r} must be [command, object]")
        elif item[1] not in scene.entries:
            problems.append(f"suite entry {item!r} references unknown object {item[1]!r}")
        else:
            scene.suite.append(tuple(item))
    if problems:
        raise ValidationError("; ".join(problems), problems=problems)
    if build:
        failed: dict[str, str] = {}
        for e in scene.entries.values():
            try:
                scene.get(e.name)
            except QCError as exc:
                tag = f"object {e.name!r}" + (f" (line {e.line})" if e.line else "")
                msg = str(exc)
                if not any(msg.endswith(v) for v in failed.values()):
                    problems.append(f"{tag}: {msg}")
                failed[e.name] = msg
                scene._stack.clear()
        if problems:
            raise ValidationError("; ".join(problems), problems=problems)
    return scene


def gallery_path(name: str) -> Path:
    return Path(str(resources.files("quasicodazzi") / "gallery" / f"{name}.json"))


def resolve_scene_path(spec: str) -> Path:
    """A file path, or the name of a shipped gallery scene."""
    p = Path(spec)
    if p.exists():
        return p
    key = spec.removeprefix("gallery:")
    if key in GALLERY:
        return gallery_path(key)
    raise ValidationError(f"no scene file {spec!r} and no gallery scene of that name")


def load_scene(path: str | Path, build: bool = True) -> Scene:
    p = resolve_scene_path(str(path))
    try:
        text = p.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {p}: {exc.strerror}") from None
    return loads_scene(text, p.stem, build)


def loads_scene(text: str, name: str = "<scene>", build: bool = True) -> Scene:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno) from None
    return parse_scene(data, name, text, build)
