"""Command line: run verification commands on scene objects and emit reports.

Exit codes: 0 all checks pass, 1 usage, 2 parse/validate, 3 precondition,
4 tolerance failure, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .chart import expression_field, grad
from .contrast import (
    EguchiConfig,
    contrast_check,
    leibniz_residual,
    quasi_contrast_relations_check,
    structure_from_contrast,
    weak_contrast_report,
)
from .errors import QCError
from .parabundle import (
    ANCHORS as BUNDLE_ANCHORS,
    isomorphism_check,
    lagrange_check,
    pairing_duality_residual,
    curvature_duality_check,
    pullback_metric,
    quasi_codazzi_report,
    rank_drop_points,
)
from .quasihessian import build_atlas
from .report import Report, Result, dumps, table_csv
from .scene import GALLERY, Scene, load_scene
from .statmfd import (
    EPS_RANK,
    Check,
    alpha_duality_check,
    alpha_lowered,
    codazzi_report,
    consistent_with_two_of_four,
    cubic_asymmetry,
    dual_blowup_probe,
    fisher_metric,
    model_cubic,
    singular_values,
    verdict_pattern,
)

# points per work unit; fixed so that results never depend on --jobs
CHUNK = 4

ANCHORS = {
    "fisher": "Fisher metric g_ij = E[d_i l d_j l] and cubic C_ijk = E[d_i l d_j l d_k l]",
    "normalization": "statistical model integrates to one",
    "alpha": "the dual of the alpha-connection is the (-alpha)-connection",
    "two_of_four": "any two of the four Codazzi conditions imply the rest",
    "contrast_metric": "contrast metric -rho[X|Y] agrees with the Fisher metric",
    "contrast_connection": "contrast connection -rho[XY|Z] agrees with the alpha-connection",
    "leibniz": "X rho[Y|Z] = rho[XY|Z] + rho[Y|XZ]: the contrast connections are dual",
    "blowup": "no smooth dual connection: (X lambda)/lambda diverges like 1/t at a degenerate point",
    "expect_metric": "pullback metric matches its closed form",
    "expect_embedding": "reconstructed Legendre embedding matches its closed form up to affine changes",
}


def _tol_or(cmd_tol, default):
    return default if cmd_tol is None else cmd_tol


def grid_points(chart, k: int) -> np.ndarray:
    return chart.grid(k, 0.1 * chart.min_edge)


def sweep(fn, X: np.ndarray, jobs: int) -> list:
    chunks = [X[i:i + CHUNK] for i in range(0, len(X), CHUNK)]
    if jobs <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, chunks))


def merge(parts: list[dict]) -> dict:
    """Worst residual per check over the work units."""
    out = {}
    for part in parts:
        for k, c in part.items():
            if k not in out or c.residual > out[k].residual or np.isnan(c.residual):
                out[k] = c
    return out


def _point_rows(chart, X, **arrays) -> list[dict]:
    rows = []
    for m, x in enumerate(X):
        row = {name: float(v) for name, v in zip(chart.names, x)}
        for label, arr in arrays.items():
            a = np.asarray(arr[m])
            if a.ndim == 0:
                row[label] = float(a)
            else:
                for idx in np.ndindex(a.shape):
                    row[label + "_" + "".join(map(str, idx))] = float(a[idx])
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# commands


def cmd_fisher(scene: Scene, name: str, opts) -> Result:
    m = scene.get(name)
    X = grid_points(m.chart, opts.grid)
    g, C = fisher_metric(m), model_cubic(m)
    r = Result("fisher", name)

    def unit(Xc):
        gv, Cv = g(Xc), C(Xc)
        norm = max(abs(m.normalization(z) - 1.0) for z in Xc)
        ev = np.linalg.eigvalsh(gv)
        scale = np.maximum(np.max(np.abs(ev), axis=-1), 1.0)
        neg = float(np.max(np.maximum(-ev[..., 0] / scale, 0.0)))
        return {
            "normalization": Check("sum of p w - 1", norm, 1e-8, ANCHORS["normalization"]),
            "metric_symmetry": Check("g - g^T", float(np.max(np.abs(gv - np.swapaxes(gv, -1, -2)))), 1e-12,
                                     ANCHORS["fisher"]),
            "positive_semidefinite": Check("negative eigenvalue part", neg, 1e-10, ANCHORS["fisher"]),
            "cubic_symmetry": Check("C total symmetry", cubic_asymmetry(Cv), 1e-12, ANCHORS["fisher"]),
        }, (gv, Cv)

    parts = sweep(unit, X, opts.jobs)
    r.checks = merge([p[0] for p in parts])
    gv = np.concatenate([p[1][0] for p in parts])
    Cv = np.concatenate([p[1][1] for p in parts])
    smin = singular_values(gv)[..., -1]
    scale = np.maximum(singular_values(gv)[..., 0], 1.0)
    degenerate = X[smin <= EPS_RANK * scale]
    r.data = {"basepoint": list(m.chart.basepoint), "metric_at_basepoint": g(m.chart.base),
              "cubic_at_basepoint": C(m.chart.base), "min_singular_value": float(np.min(smin)),
              "degenerate_points": degenerate}
    r.tables["fisher"] = _point_rows(m.chart, X, g=gv, C=Cv, min_singular=smin)
    return r


def cmd_alpha_check(scene: Scene, name: str, opts) -> Result:
    m = scene.get(name)
    X = grid_points(m.chart, opts.grid)
    alphas = scene.entry(name).spec.get("alphas", [-1.0, 0.0, 0.7, 1.0])
    tol = _tol_or(opts.tol, 1e-5)
    cfg = scene.fd()
    r = Result("alpha-check", name)

    def unit(Xc):
        return {f"alpha_{a:g}": Check(f"d g - G(a) - G(-a), a={a:g}", alpha_duality_check(m, a, Xc, cfg), tol,
                                      ANCHORS["alpha"]) for a in alphas}

    r.checks = merge(sweep(unit, X, opts.jobs))
    r.data = {"alphas": [float(a) for a in alphas], "grid_points": len(X)}
    return r


def cmd_codazzi_check(scene: Scene, name: str, opts) -> Result:
    cod = scene.get(name)
    X = grid_points(cod.chart, opts.grid)
    tol = _tol_or(opts.tol, 1e-5)
    cfg = scene.fd()
    r = Result("codazzi-check", name)
    r.checks = merge(sweep(lambda Xc: codazzi_report(cod.metric, cod.connection, cod.dual, Xc, cfg, tol), X,
                           opts.jobs))
    pattern = verdict_pattern(r.checks)
    r.checks["two_of_four"] = Check("verdict pattern consistent", 0.0 if consistent_with_two_of_four(pattern) else 1.0,
                                    0.5, ANCHORS["two_of_four"])
    r.data = {"verdicts": {k: bool(v) for k, v in zip(("i", "ii", "iii", "iv"), pattern)}}
    return r


def cmd_contrast_extract(scene: Scene, name: str, opts) -> Result:
    c = scene.get(name)
    if c.kind != "expression":
        raise QCError(f"contrast-extract needs a contrast given by an expression; {name!r} is built from (h, C)")
    rho = c.rho
    X = grid_points(rho.chart, opts.grid)
    tol = _tol_or(opts.tol, 1e-5)
    ecfg = EguchiConfig()
    r = Result("contrast-extract", name)
    cs = structure_from_contrast(rho)

    def unit(Xc):
        out = contrast_check(rho, Xc, ecfg)
        hv, Cv = cs.h(Xc), cs.C(Xc)
        out["metric_symmetry"] = Check("-rho[X|Y] symmetric", float(np.max(np.abs(hv - np.swapaxes(hv, -1, -2)))),
                                       tol, ANCHORS["leibniz"])
        out["cubic_symmetry"] = Check("C total symmetry", cubic_asymmetry(Cv), tol, ANCHORS["leibniz"])
        out["leibniz"] = Check("X rho[Y|Z] - rho[XY|Z] - rho[Y|XZ]", leibniz_residual(rho, Xc, ecfg), tol,
                               ANCHORS["leibniz"])
        if c.model is not None:
            out["fisher"] = Check("-rho[X|Y] - g", float(np.max(np.abs(hv - fisher_metric(c.model)(Xc)))), tol,
                                  ANCHORS["contrast_metric"])
            a = c.alpha
            out["connection"] = Check(f"Gamma - G({a:g})",
                                      float(np.max(np.abs(cs.gamma_low(Xc) - alpha_lowered(c.model, a)(Xc)))),
                                      tol, ANCHORS["contrast_connection"])
            out["dual_connection"] = Check(f"Gamma* - G({-a:g})",
                                           float(np.max(np.abs(cs.gamma_star_low(Xc)
                                                               - alpha_lowered(c.model, -a)(Xc)))),
                                           tol, ANCHORS["contrast_connection"])
        return out, (hv, Cv)

    parts = sweep(unit, X, opts.jobs)
    r.checks = merge([p[0] for p in parts])
    hv = np.concatenate([p[1][0] for p in parts])
    Cv = np.concatenate([p[1][1] for p in parts])
    b = rho.chart.base
    r.data = {"metric_at_basepoint": cs.h(b), "cubic_at_basepoint": cs.C(b)}
    r.tables["contrast"] = _point_rows(rho.chart, X, h=hv, C=Cv)
    return r


def cmd_contrast_build(scene: Scene, name: str, opts) -> Result:
    c = scene.get(name)
    if c.kind != "weak":
        raise QCError(f"contrast-build needs a contrast with construct_from; {name!r} is an expression")
    rho = c.rho
    X = grid_points(rho.chart, opts.grid)
    tol = _tol_or(opts.tol, 1e-6)
    r = Result("contrast-build", name)

    def unit(Xc):
        out = weak_contrast_report(rho, c.metric, c.cubic, Xc, tol=tol)
        if c.structure is not None:
            rel = quasi_contrast_relations_check(c.structure, rho, Xc, tol=max(tol, 1e-5), tol4=max(tol, 1e-4))
            out.update({f"relation_{k}": v for k, v in rel.items()})
        return out

    r.checks = merge(sweep(unit, X, opts.jobs))
    hv = c.metric(X)
    r.data = {"min_singular_value_of_h": float(np.min(singular_values(hv)[..., -1]))}
    return r


def cmd_blowup_probe(scene: Scene, name: str, opts) -> Result:
    p = scene.get(name)
    res = dual_blowup_probe(p.metric, p.connection, p.curve, p.t_values, scene.fd(), fit_window=p.fit_window)
    r = Result("blowup-probe", name)
    tol = _tol_or(opts.tol, 1e-2)
    r.checks["exponent"] = Check(f"fitted exponent - ({p.expect_exponent:g})", abs(res.exponent - p.expect_exponent),
                                 tol, ANCHORS["blowup"])
    k = int(np.argmin(np.abs(np.log(res.t / 1e-3))))
    r.data = {"exponent": res.exponent, "fit_window": list(res.fit_window),
              "t_nearest_1e-3": float(res.t[k]), "ratio_at_t": float(res.ratio[k])}
    r.tables["probe"] = res.rows()
    return r


def _structure_checks(S, Xc, tol) -> dict:
    out = {}
    res = S.bundle.residuals(Xc)
    worst = max(v for k, v in res.items() if k != "not_identity")
    out["bundle"] = Check("para-Hermitian invariants", worst, 1e-10, BUNDLE_ANCHORS["bundle"])
    out["lagrange"] = Check("Phi^T omega Phi", lagrange_check(S.phi, S.bundle, Xc, allow_rank_drop=S.allow_rank_drop),
                            1e-9, BUNDLE_ANCHORS["lagrange"])
    _, half = pullback_metric(S, Xc)
    out["half_pairing"] = Check("tau(eta+,zeta-) - h/2", half, 1e-9, BUNDLE_ANCHORS["half_pairing"])
    out["duality"] = Check("d tau(e+,e-) - tau(nabla e+,e-) - tau(e+,nabla e-)", pairing_duality_residual(S, Xc),
                           max(tol, 1e-6), BUNDLE_ANCHORS["dual"])
    out.update(quasi_codazzi_report(S, Xc, tol))
    out["curvature_duality"] = Check("tau(R+ ., .) + tau(., R- .)", curvature_duality_check(S, Xc), 1e-5,
                                     BUNDLE_ANCHORS["curvature_duality"])
    return out


def cmd_quasi_codazzi_check(scene: Scene, name: str, opts) -> Result:
    S = scene.structure(name)
    X = grid_points(S.chart, opts.grid)
    tol = _tol_or(opts.tol, 1e-6)
    r = Result("quasi-codazzi-check", name)

    def unit(Xc):
        return _structure_checks(S, Xc, tol), (S.metric()(Xc), S.generalized_cubic()(Xc))

    parts = sweep(unit, X, opts.jobs)
    r.checks = merge([p[0] for p in parts])
    hv = np.concatenate([p[1][0] for p in parts])
    Cv = np.concatenate([p[1][1] for p in parts])
    drops = rank_drop_points(S.phi, X)
    r.data = {"rank_drop_points": drops, "min_singular_value_of_h": float(np.min(singular_values(hv)[..., -1]))}
    r.tables["structure"] = _point_rows(S.chart, X, h=hv, C=Cv)
    return r


def cmd_iso_check(scene: Scene, name: str, opts) -> Result:
    iso = scene.get(name)
    X = grid_points(iso.source.chart, opts.grid)
    tol = _tol_or(opts.tol, 1e-6)
    r = Result("iso-check", name)
    r.checks = merge(sweep(lambda Xc: isomorphism_check(iso.F, iso.source, iso.target, Xc, tol), X, opts.jobs))
    return r


def _affine_fit_residual(rec: np.ndarray, ref: np.ndarray) -> float:
    """max residual of rec ~ ref A + b (least squares over the samples)."""
    M = np.hstack([ref, np.ones((len(ref), 1))])
    coef, *_ = np.linalg.lstsq(M, rec, rcond=None)
    return float(np.max(np.abs(M @ coef - rec)))


def cmd_reconstruct(scene: Scene, name: str, opts) -> Result:
    job = scene.get(name)
    S = job.structure
    tol = _tol_or(opts.tol, 1e-6)
    atlas = build_atlas(S, job.charts, grid_points(S.chart, 3), job.samples, tol)
    r = Result("reconstruct", name)
    r.checks.update(atlas.checks)
    for cname, emb in atlas.embeddings.items():
        r.checks.update({f"{cname}:{k}": c for k, c in emb.checks.items()})
    if job.expect:
        for cname, emb in atlas.embeddings.items():
            s = emb.sample(job.samples)
            U = s["u"].reshape(-1, emb.n)
            exp = {k: expression_field(job.expect[k], emb.chart)(U) for k in ("x", "p") if k in job.expect}
            res = 0.0
            # f is determined up to the affine maps of the double fibration
            for k, ref in exp.items():
                res = max(res, _affine_fit_residual(s[k].reshape(len(U), -1), ref.reshape(len(U), -1)))
            if "z" in job.expect:
                zref = expression_field(job.expect["z"], emb.chart)(U).reshape(-1, 1)
                zrec = s["z"].reshape(-1, 1)
                M = np.hstack([s["x"].reshape(len(U), -1), np.ones((len(U), 1))])
                coef, *_ = np.linalg.lstsq(M, zrec - zref, rcond=None)
                res = max(res, float(np.max(np.abs(M @ coef - (zrec - zref)))))
            r.checks[f"{cname}:expected"] = Check("embedding vs closed form (affine)", res, tol,
                                                  ANCHORS["expect_embedding"])
    payload = atlas.to_json(job.samples)
    r.files["atlas"] = payload
    r.data = {"charts": list(atlas.names),
              "transitions": [{"from": u, "to": v, **L.to_json()} for (u, v), L in atlas.transitions.items()]}
    return r


def cmd_front(scene: Scene, name: str, opts) -> Result:
    S = scene.structure(name)
    if not hasattr(S, "front"):
        raise QCError(f"object {name!r} is not a front")
    X = grid_points(S.chart, opts.grid)
    tol = _tol_or(opts.tol, 1e-6)
    r = Result("front", name)
    expect = S.front.get("expect_metric")

    def unit(Xc):
        out = _structure_checks(S, Xc, tol)
        hv = S.metric()(Xc)
        if expect is not None:
            out["expected_metric"] = Check("h - closed form", float(np.max(np.abs(hv - expect(Xc)))), tol,
                                           ANCHORS["expect_metric"])
        return out, hv

    parts = sweep(unit, X, opts.jobs)
    r.checks = merge([p[0] for p in parts])
    hv = np.concatenate([p[1] for p in parts])
    df = grad(S.front["map"], S.cfg, step=max(S.cfg.step, 1e-3))(X)
    rank = np.linalg.matrix_rank(np.swapaxes(df, -1, -2), tol=1e-8)
    singular = X[rank < S.n]
    r.data = {"singular_grid_points": singular, "grid_points": len(X)}
    r.tables["front"] = _point_rows(S.chart, X, h=hv, singular=(rank < S.n).astype(float))
    return r


COMMANDS = {
    "fisher": (cmd_fisher, ("model",)),
    "alpha-check": (cmd_alpha_check, ("model",)),
    "codazzi-check": (cmd_codazzi_check, ("codazzi",)),
    "contrast-extract": (cmd_contrast_extract, ("contrast",)),
    "contrast-build": (cmd_contrast_build, ("contrast",)),
    "blowup-probe": (cmd_blowup_probe, ("probe",)),
    "quasi-codazzi-check": (cmd_quasi_codazzi_check, ("structure", "front")),
    "iso-check": (cmd_iso_check, ("isomorphism",)),
    "reconstruct": (cmd_reconstruct, ("atlas",)),
    "front": (cmd_front, ("front",)),
}


# ---------------------------------------------------------------------------
# driver


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="quasicodazzi", description="Verify statistical-manifold and quasi-Codazzi scenes.")
    p.add_argument("command", choices=list(COMMANDS) + ["suite", "list"])
    p.add_argument("--scene", help="scene file, or a gallery name such as 'cusp'")
    p.add_argument("--object", action="append", help="object name (repeatable; default: all of the right type)")
    p.add_argument("--fd-step", type=float, dest="fd_step")
    p.add_argument("--tol", type=float)
    p.add_argument("--grid", type=int)
    p.add_argument("--out", type=Path)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--format", choices=("json", "text"), default="json")
    return p


def _error_entry(exc: BaseException) -> dict:
    code = getattr(exc, "exit_code", 5)
    return {"type": type(exc).__name__, "exit_code": code, "message": str(exc)}


def run(command: str, scene: Scene, objects: list[str] | None, opts) -> Report:
    """Execute one command (or a scene's suite) and collect the results."""
    jobs = []
    if command == "suite":
        jobs = [(c, o) for c, o in scene.suite if not objects or o in objects]
    else:
        types = COMMANDS[command][1]
        names = objects or scene.names(*types)
        for o in names:
            if scene.entry(o).type not in types:
                raise UsageError(f"{command} needs an object of type {' or '.join(types)}; {o!r} is "
                                 f"{scene.entry(o).type}")
            jobs.append((command, o))
    if not jobs:
        raise UsageError(f"scene {scene.name!r} has no objects for {command}")
    config = {"fd_step": float(scene.config["fd_step"]), "tol": scene.config.get("tol"),
              "grid": int(scene.config["grid"])}
    rep = Report(scene.name, config)
    for cmd, o in jobs:
        fn = COMMANDS[cmd][0]
        try:
            rep.results.append(fn(scene, o, opts))
        except QCError as exc:
            res = Result(cmd, o)
            res.error = _error_entry(exc)
            rep.results.append(res)
    return rep


def exit_code(rep: Report) -> int:
    codes = [r.error["exit_code"] for r in rep.results if r.error]
    if codes:
        return max(codes) if 5 in codes else min(codes)
    return 0 if rep.passed else 4


def write_outputs(rep: Report, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(rep.json())
    multi = len(rep.results) > 1
    for r in rep.results:
        stem = f"{r.command}-{r.object}-" if multi else ""
        for tname, rows in r.tables.items():
            (out / f"{stem}{tname}.csv").write_text(table_csv(rows))
        for fname, payload in r.files.items():
            (out / f"{stem}{fname}.json").write_text(dumps(payload) + "\n")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        if args.grid is not None and args.grid < 1:
            raise UsageError("--grid must be at least 1")
        if args.command == "list":
            print("\n".join(GALLERY))
            return 0
        if not args.scene:
            raise UsageError("--scene is required")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        scene = load_scene(args.scene)
    except QCError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    for key in ("fd_step", "tol", "grid"):
        if getattr(args, key) is not None:
            scene.config[key] = getattr(args, key)
    if args.tol is None:
        args.tol = scene.config.get("tol")
    args.grid = int(scene.config["grid"])
    try:
        rep = run(args.command, scene, args.object, args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except QCError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    if args.out is not None:
        write_outputs(rep, args.out)
    sys.stdout.write(rep.json() if args.format == "json" else rep.text())
    return exit_code(rep)


if __name__ == "__main__":
    sys.exit(main())
