"""Experiment orchestration and the command-line front end.

The run pipeline chains classification, spectral value, simulation, envelope
fit, and verdict: the spectral sign decides which side of the stability
dichotomy the kernel fit must land on, and disagreement is an inconsistency
(exit code 2).  All numeric failure modes downgrade to 'inconclusive' entries
instead of aborting the run.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from typing import Optional

import numpy as np

from . import envelopes, feynman_kac, kato, processes, spectral
from .errors import FKLabError
from .functionals import MeasureSpec, compensator_NF
from .processes import stable_levy_coeff
from .serialize import (
    envelope_from_json,
    load_config,
    measure_from_json,
    process_from_json,
)

__all__ = ["run", "report", "main", "effective_constraint_diagonal"]


# ---------------------------------------------------------------------------
# the effective creation-side measure
# ---------------------------------------------------------------------------


def jump_compensator_density(F, spec) -> float:
    """Constant density of 2 N(e^F - F - 1 + F_pos) for a magnitude-profile F
    on the translation-invariant stable kernel."""
    a = spec.alpha_stable_index
    K = stable_levy_coeff(a)

    def G(x, y):
        z = abs(x - y)
        fp = float(F.magnitude_pos(np.array([z]))[0])
        fn = float(F.magnitude_neg(np.array([z]))[0])
        f = fp - fn
        return math.exp(f) - f - 1.0 + fp

    def J(x, y):
        return K * abs(x - y) ** (-1.0 - a)

    return 2.0 * compensator_NF(0.0, G, J)


def effective_constraint_diagonal(disc, mu: MeasureSpec, F, u, spec) -> np.ndarray:
    """Mass diagonal of the creation-side measure: the positive perturbation
    part plus the jump compensator plus half the squared gradient of u."""
    b = disc.measure_diagonal(mu, part="pos") if mu is not None else np.zeros(disc.n)
    if F is not None and not F.is_zero and spec.is_stable:
        const = jump_compensator_density(F, spec)
        b = b + disc.density_diagonal(lambda r: np.full_like(np.asarray(r, dtype=float), const))
    if u is not None and u.kind == "resolvent_potential" and u.potential_signed is not None:
        h = disc.h

        def grad_sq(r):
            r = np.asarray(r, dtype=float)
            up = (u.potential_signed(r + h) - u.potential_signed(np.maximum(r - h, 0.0))) / (2 * h)
            return 0.5 * up * up

        b = b + disc.density_diagonal(grad_sq)
    return b


def _build_u(recipe, spec):
    if recipe is None:
        return None
    if recipe["kind"] == "resolvent_potential":
        return kato.build_resolvent_potential_u(recipe["nu1"], recipe["nu2"],
                                                recipe["alpha"], spec)
    from .functionals import PotentialU

    return PotentialU(kind="ell_beta", beta=recipe["beta"], eps=recipe["eps"])


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


def _default_pairs(spec) -> list:
    if spec.dim == 1:
        xs = [-1.0, -0.5, 0.0, 0.5, 1.0]
        return [(a, b) for a in xs for b in xs if a <= b][:15]
    pts = [tuple(0.0 for _ in range(spec.dim))]
    for r in (0.5, 1.0, 1.5, 2.0):
        p = [0.0] * spec.dim
        p[0] = r
        pts.append(tuple(p))
    return [(pts[i], pts[j]) for i in range(len(pts)) for j in range(i, len(pts))][:15]


def _classify_hypotheses(cfg) -> tuple:
    """Kato-lattice checks of the perturbation parts; warnings never abort."""
    spec = cfg["process"]
    mu = cfg["mu"]
    hyp = []
    flags = {}
    try:
        if mu is not None and not mu.is_zero:
            if mu.radial_pos is not None:
                pos = MeasureSpec(mu.radial_pos, None, mu.support_radius, "pos-part")
                rep = kato.classify(pos, spec)
                flags["mu_pos"] = rep.flags
                hyp.append({
                    "name": "creation part in the Kato lattice",
                    "status": "surrogate",
                    "flags": rep.flags,
                })
                if processes.is_transient(spec):
                    curve, verdict = kato.green_tight_check(
                        pos, spec, [2 * mu.support_radius, 4 * mu.support_radius])
                    hyp.append({
                        "name": "creation part Green-tight (restriction curve)",
                        "status": "surrogate",
                        "verdict": verdict,
                    })
            if mu.radial_neg is not None:
                neg = MeasureSpec(mu.radial_neg, None, mu.support_radius, "neg-part")
                rep = kato.classify(neg, spec)
                flags["mu_neg"] = rep.flags
                hyp.append({
                    "name": "killing part Green-bounded",
                    "status": "surrogate",
                    "flags": rep.flags,
                })
    except FKLabError as exc:
        hyp.append({"name": "class checks", "status": "inconclusive", "error": str(exc)})
    return hyp, flags


def _fit_to_dict(v) -> dict:
    return {
        "C1": v.C1, "c1": v.c1, "C2": v.C2, "c2": v.c2, "k": v.k,
        "passed_upper": v.passed_upper, "passed_lower": v.passed_lower,
        "violations": len(v.violation_points),
        "slope_upper": v.slope_upper, "slope_lower": v.slope_lower,
    }


def run(cfg) -> dict:
    """Execute one experiment config; returns the report bundle."""
    if isinstance(cfg, (str, dict)):
        cfg = load_config(cfg)
    mode = cfg["mode"]
    if mode == "single_op":
        return _run_single_op(cfg)

    spec = cfg["process"]
    tuning = cfg["tuning"]
    dt = float(tuning.get("dt", 0.01))
    seed = cfg["seed"]
    n_paths = cfg["n_paths"]
    mu = cfg["mu"]
    F = cfg["F"]
    u = _build_u(cfg["u"], spec)
    bundle = {"mode": mode, "seed": seed, "n_paths": n_paths, "entries": {}}

    if mode == "theorem_1_3" and not processes.is_transient(spec):
        raise FKLabError("this mode needs a transient process")

    hyp, class_flags = _classify_hypotheses(cfg)
    bundle["hypotheses"] = hyp
    bundle["class_flags"] = class_flags

    # spectral stage
    lam = None
    try:
        disc = spectral.assemble(spec, u, mu, F, cfg["mesh"])
        b1 = effective_constraint_diagonal(disc, mu, F, u, spec)
        alpha = cfg["alpha"] if mode == "corollary_1_5" else 0.0
        if np.any(b1 > 0):
            res = spectral.lambda_Q(disc, b1, alpha=alpha)
            lam = res.lam
            bundle["spectral"] = {
                "lambda": res.lam, "alpha": res.alpha, "mesh": list(res.mesh),
                "residual": res.residual, "converged": res.converged,
            }
        else:
            bundle["spectral"] = {"lambda": None, "note": "no creation part"}
    except FKLabError as exc:
        bundle["spectral"] = {"lambda": None, "error": str(exc)}

    # simulation + fit stage
    pairs = cfg["pairs"] if cfg["pairs"] else _default_pairs(spec)
    bandwidth = tuning.get("bandwidth")
    kernel = feynman_kac.fk_kernel(spec, u, mu, F, cfg["t_values"], pairs,
                                   n_paths=n_paths, bandwidth=bandwidth, seed=seed, dt=dt)
    bundle["kernel"] = kernel

    fam = cfg["envelope"]
    fit0 = fitk = None
    if fam is not None:
        ci_factor = float(tuning.get("ci_factor", 1.0))
        slope_tol = float(tuning.get("slope_tol", 0.02))
        try:
            fit0 = envelopes.fit_envelope(kernel, fam, allow_k=False,
                                          ci_factor=ci_factor, slope_tol=slope_tol)
            bundle["fit_k0"] = _fit_to_dict(fit0)
            fitk = envelopes.fit_envelope(kernel, fam, allow_k=True,
                                          ci_factor=ci_factor, slope_tol=slope_tol)
            bundle["fit_with_k"] = _fit_to_dict(fitk)
        except FKLabError as exc:
            bundle["fit_error"] = str(exc)

    # optional gauge / resolvent stages
    if tuning.get("gauge_points"):
        try:
            g = feynman_kac.gauge(spec, None if u is None else u, mu, F,
                                  tuning["gauge_points"],
                                  truncation_radius=float(tuning.get("r_cut", 20.0)),
                                  n_paths=n_paths, seed=seed + 1, dt=dt,
                                  check_tail_bias=False)
            bundle["gauge"] = g
        except FKLabError as exc:
            bundle["gauge_error"] = str(exc)
    if tuning.get("resolvent_probes"):
        try:
            bundle["resolvent"] = feynman_kac.resolvent_A(
                spec, u, mu, F, 0.0, [0.0] * spec.dim, tuning["resolvent_probes"],
                float(tuning.get("resolvent_horizon", 64.0)),
                n_paths=n_paths, seed=seed + 2, dt=dt)
        except FKLabError as exc:
            bundle["resolvent_error"] = str(exc)

    bundle["verdict"], bundle["verdict_detail"] = _verdict(mode, lam, fit0, fitk, bundle)
    return bundle


def _verdict(mode, lam, fit0, fitk, bundle) -> tuple:
    if fit0 is None and fitk is None:
        return "inconclusive", "no envelope fit was possible"
    if mode == "theorem_1_3":
        if lam is None:
            return "inconclusive", "spectral stage unavailable"
        if lam > 1e-6:
            if fit0 is not None and fit0.passed:
                return "consistent", (
                    f"spectral value {lam:.4g} > 0 and the two-sided fit passed with k = 0")
            return "inconsistent", (
                f"spectral value {lam:.4g} > 0 but the k = 0 fit failed")
        if lam < -1e-6:
            upper_failed = fit0 is None or not fit0.passed_upper
            k_pos = fitk is not None and fitk.k > 0
            if upper_failed and k_pos:
                return "consistent", (
                    f"spectral value {lam:.4g} < 0: the k = 0 upper fit failed and the "
                    f"refit found k = {fitk.k:.4g} (compare |lambda| = {abs(lam):.4g})")
            return "inconsistent", (
                f"spectral value {lam:.4g} < 0 but the k = 0 upper fit passed")
        return "inconclusive", "spectral value is numerically zero"
    # corollary_1_5 / theorem_1_7: a finite k must restore the two-sided bound
    if fitk is not None and fitk.passed:
        return "consistent", f"two-sided fit passed with k = {fitk.k:.4g}"
    if fitk is not None:
        return "inconsistent", "no finite k restored the two-sided bound"
    return "inconclusive", "fit unavailable"


def _run_single_op(cfg) -> dict:
    op = cfg.get("op") or {}
    name = op.get("name")
    args = {k: v for k, v in op.items() if k != "name"}
    if name == "phi_big":
        phi = envelopes.ScalingFunction.power(float(args.get("beta", 2.0)))
        val = envelopes.phi_big(float(args["s"]), float(args["t"]), phi)
    elif name == "transition_density":
        spec = process_from_json(args["process"])
        val = processes.transition_density(spec, float(args["t"]), args["x"], args["y"])
    elif name == "resolvent_kernel":
        spec = process_from_json(args["process"])
        val = processes.resolvent_kernel(spec, float(args["alpha"]), args["x"], args["y"])
    elif name == "eval_envelope":
        fam = envelope_from_json(args["family"])
        val = envelopes.eval_envelope(fam, float(args["t"]), args["x"], args["y"])
    else:
        raise FKLabError(f"unknown single op {name!r}")
    return {"mode": "single_op", "op": name, "value": val, "verdict": "consistent",
            "verdict_detail": "single operation evaluated", "entries": {}}


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_csv(path: str, header: list, rows: list) -> None:
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def _json_ready(obj):
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def report(bundle: dict, output_dir: str, envelope=None) -> list:
    """Write the report file set; returns the list of files written."""
    if not bundle or "verdict" not in bundle:
        raise FKLabError("empty bundle: nothing to report")
    os.makedirs(output_dir, exist_ok=True)
    written = []

    summary = {k: v for k, v in bundle.items() if k not in ("kernel", "gauge", "entries")}
    if "kernel" in bundle:
        k = bundle["kernel"]
        summary["kernel_meta"] = {
            "n_paths": k.n_paths, "bandwidth": k.bandwidth, "bias_bound": k.bias_bound,
            "t_values": k.t_values, "n_pairs": len(k.pairs),
        }
    if "gauge" in bundle:
        g = bundle["gauge"]
        summary["gauge_meta"] = {
            "verdict": g.verdict, "truncation_radius": g.truncation_radius,
            "tail_bias_bound": g.tail_bias_bound, "growth_ratio": g.growth_ratio,
        }
    path = os.path.join(output_dir, "summary.json")
    with open(path, "w") as f:
        json.dump(_json_ready(summary), f, sort_keys=True, indent=2)
        f.write("\n")
    written.append(path)

    if "spectral" in bundle:
        path = os.path.join(output_dir, "spectral.json")
        with open(path, "w") as f:
            json.dump(_json_ready(bundle["spectral"]), f, sort_keys=True, indent=2)
            f.write("\n")
        written.append(path)

    if "kernel" in bundle:
        k = bundle["kernel"]
        dim = len(k.pairs[0][0])
        header = (["t"] + [f"x{i+1}" for i in range(dim)] + [f"y{i+1}" for i in range(dim)]
                  + ["value", "ci", "bias"])
        rows = []
        for i, t in enumerate(k.t_values):
            for j, (a, b) in enumerate(k.pairs):
                rows.append([t, *a, *b, float(k.values[i, j]), float(k.ci_half_width[i, j]),
                             k.bias_bound])
        path = os.path.join(output_dir, "kernel.csv")
        _write_csv(path, header, rows)
        written.append(path)

        if envelope is not None:
            for i, t in enumerate(k.t_values):
                rows = []
                for j, (a, b) in enumerate(k.pairs):
                    d = float(np.linalg.norm(np.subtract(a, b)))
                    env = envelopes.envelope_profile(envelope, t, d, x=a)
                    ratio = float(k.values[i, j] / env) if env > 0 else math.inf
                    rows.append([d, float(k.values[i, j]), env, ratio])
                path = os.path.join(output_dir, f"ratio_t{t:g}.csv")
                _write_csv(path, ["d", "value", "envelope", "ratio"], rows)
                written.append(path)

    if "gauge" in bundle:
        g = bundle["gauge"]
        dim = len(g.points[0])
        header = [f"x{i+1}" for i in range(dim)] + ["h", "ci", "tail_bias"]
        rows = [[*p, float(g.h_hat[i]), float(g.ci[i]), g.tail_bias_bound]
                for i, p in enumerate(g.points)]
        path = os.path.join(output_dir, "gauge.csv")
        _write_csv(path, header, rows)
        written.append(path)

    if "resolvent" in bundle:
        path = os.path.join(output_dir, "resolvent.json")
        with open(path, "w") as f:
            json.dump(_json_ready(bundle["resolvent"]), f, sort_keys=True, indent=2)
            f.write("\n")
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def _dump_paths(spec, cfg, out_path: str, n_dump: int) -> None:
    dt = float(cfg["tuning"].get("dt", 0.01))
    horizon = max(cfg["t_values"])
    rows = []
    for pid in range(n_dump):
        p = processes.sample_path(spec, [0.0] * spec.dim, horizon, dt, seed=cfg["seed"] + pid)
        jump_times = {t for t, _, _ in p.jumps}
        for i, t in enumerate(p.times):
            rows.append([pid, float(t), *[float(v) for v in p.positions[i]],
                         int(t in jump_times), int(p.killed_at is not None)])
    _write_csv(out_path, ["path_id", "time"] + [f"x{i+1}" for i in range(spec.dim)]
               + ["is_jump", "killed"], rows)


def main(argv: Optional[list] = None) -> int:
    parser = argparse.ArgumentParser(prog="fklab",
                                     description="Feynman-Kac stability laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a full experiment config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--dump-paths", type=int, default=0,
                       help="also write the first N simulated paths as CSV")

    p_spec = sub.add_parser("spectral", help="spectral stage only")
    p_spec.add_argument("--config", required=True)
    p_spec.add_argument("--out", default=None)

    p_kato = sub.add_parser("kato-classify", help="classify a measure")
    p_kato.add_argument("--measure", required=True)
    p_kato.add_argument("--process", required=True)
    p_kato.add_argument("--out", default=None)

    for name in ("fk-kernel", "gauge", "resolvent"):
        p = sub.add_parser(name, help=f"{name} stage only")
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)

    p_env = sub.add_parser("envelope-eval", help="evaluate an envelope family")
    p_env.add_argument("--family", required=True)
    p_env.add_argument("--t", type=float, required=True)
    p_env.add_argument("--x", required=True, help="comma-separated coordinates")
    p_env.add_argument("--y", required=True)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except FKLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if args.command == "run":
        cfg = load_config(args.config)
        bundle = run(cfg)
        files = report(bundle, cfg["output_dir"], envelope=cfg.get("envelope"))
        if args.dump_paths and cfg["mode"] != "single_op":
            path = os.path.join(cfg["output_dir"], "paths.csv")
            _dump_paths(cfg["process"], cfg, path, args.dump_paths)
            files.append(path)
        print(f"verdict: {bundle['verdict']} ({bundle.get('verdict_detail', '')})")
        for f in files:
            print(f"wrote {f}")
        return 0 if bundle["verdict"] in ("consistent", "inconclusive") else 2

    if args.command == "spectral":
        cfg = load_config(args.config)
        spec = cfg["process"]
        u = _build_u(cfg["u"], spec)
        disc = spectral.assemble(spec, u, cfg["mu"], cfg["F"], cfg["mesh"])
        b1 = effective_constraint_diagonal(disc, cfg["mu"], cfg["F"], u, spec)
        res = spectral.lambda_Q(disc, b1, alpha=cfg["alpha"])
        meshes = cfg["tuning"].get("mesh_ladder")
        out = {
            "lambda": res.lam, "alpha": res.alpha, "residual": res.residual,
            "converged": res.converged, "mesh": list(res.mesh),
        }
        if meshes:
            def problem(mesh):
                d = spectral.assemble(spec, u, cfg["mu"], cfg["F"], tuple(mesh))
                bb = effective_constraint_diagonal(d, cfg["mu"], cfg["F"], u, spec)
                return spectral.lambda_Q(d, bb, alpha=cfg["alpha"]).lam

            out["mesh_study"] = spectral.mesh_study(problem, [tuple(m) for m in meshes])
        text = json.dumps(_json_ready(out), sort_keys=True, indent=2)
        _emit(text, args.out)
        return 0

    if args.command == "kato-classify":
        with open(args.measure) as f:
            mu = measure_from_json(json.load(f))
        with open(args.process) as f:
            spec = process_from_json(json.load(f))
        rep = kato.classify(mu, spec)
        out = {
            "flags": rep.flags,
            "sup_R_alpha": rep.sup_R_alpha,
            "limit_estimate": rep.limit_estimate,
            "decay_exponent": rep.decay_exponent,
        }
        if processes.is_transient(spec):
            curve, verdict = kato.green_tight_check(
                mu, spec, [2 * mu.support_radius, 4 * mu.support_radius, 8 * mu.support_radius])
            out["tightness_curve"] = curve
            out["tight"] = verdict
        _emit(json.dumps(_json_ready(out), sort_keys=True, indent=2), args.out)
        return 0

    if args.command == "fk-kernel":
        cfg = load_config(args.config)
        spec = cfg["process"]
        u = _build_u(cfg["u"], spec)
        pairs = cfg["pairs"] if cfg["pairs"] else _default_pairs(spec)
        kernel = feynman_kac.fk_kernel(
            spec, u, cfg["mu"], cfg["F"], cfg["t_values"], pairs,
            n_paths=cfg["n_paths"], bandwidth=cfg["tuning"].get("bandwidth"),
            seed=cfg["seed"], dt=float(cfg["tuning"].get("dt", 0.01)))
        bundle = {"verdict": "consistent", "kernel": kernel, "mode": "fk-kernel"}
        outdir = args.out or cfg["output_dir"]
        for f in report(bundle, outdir, envelope=cfg.get("envelope")):
            print(f"wrote {f}")
        return 0

    if args.command == "gauge":
        cfg = load_config(args.config)
        spec = cfg["process"]
        pts = cfg["tuning"].get("gauge_points") or [[0.0] * spec.dim]
        g = feynman_kac.gauge(
            spec, None, cfg["mu"], cfg["F"], pts,
            truncation_radius=float(cfg["tuning"].get("r_cut", 20.0)),
            n_paths=cfg["n_paths"], seed=cfg["seed"],
            dt=float(cfg["tuning"].get("dt", 0.01)), check_tail_bias=False)
        bundle = {"verdict": "consistent", "gauge": g, "mode": "gauge"}
        outdir = args.out or cfg["output_dir"]
        for f in report(bundle, outdir):
            print(f"wrote {f}")
        print(f"gauge verdict: {g.verdict}")
        return 0

    if args.command == "resolvent":
        cfg = load_config(args.config)
        spec = cfg["process"]
        u = _build_u(cfg["u"], spec)
        probes = cfg["tuning"].get("resolvent_probes") or [[1.0] + [0.0] * (spec.dim - 1)]
        table = feynman_kac.resolvent_A(
            spec, u, cfg["mu"], cfg["F"], cfg["alpha"], [0.0] * spec.dim, probes,
            float(cfg["tuning"].get("resolvent_horizon", 64.0)),
            n_paths=cfg["n_paths"], seed=cfg["seed"],
            dt=float(cfg["tuning"].get("dt", 0.01)))
        _emit(json.dumps(_json_ready(table), sort_keys=True, indent=2), args.out)
        return 0

    if args.command == "envelope-eval":
        with open(args.family) as f:
            fam = envelope_from_json(json.load(f))
        x = [float(v) for v in args.x.split(",")]
        y = [float(v) for v in args.y.split(",")]
        print(repr(envelopes.eval_envelope(fam, args.t, x, y)))
        return 0

    raise FKLabError(f"unknown command {args.command!r}")


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        with open(out, "w") as f:
            f.write(text)
            f.write("\n")
        print(f"wrote {out}")
    else:
        print(text)


if __name__ == "__main__":
    sys.exit(main())
