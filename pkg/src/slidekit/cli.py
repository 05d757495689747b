"""Command-line interface: ``slidekit <verb> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from .experiments import (
    GENERATORS,
    ConfigError,
    ExperimentConfig,
    StageError,
    generate,
    relax_solve,
    run,
)
from .flatness import FlatnessConfig, classify_singular_set
from .grid import Grid, GridFunction
from .harnack import (
    barrier_check,
    covering_step,
    decay_iteration,
    derive_constants,
    holder_decay,
    verify_density,
    verify_measure_lemma,
    weak_harnack,
    weak_Leps,
)
from .operators import EllipticityParams, make_operator
from .paraboloid import contact_set, jensen_envelope

HARNACK_CHECKS = ("measure", "density", "covering", "decay", "weak-leps", "weak-harnack", "holder", "barrier")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--grid", type=int, default=argparse.SUPPRESS, help="nodes per axis (odd, >= 9)")
    p.add_argument("--dim", type=int, default=argparse.SUPPRESS, help="space dimension (1, 2 or 3)")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output file or directory")
    return p


def _params(args) -> EllipticityParams:
    if getattr(args, "params", None):
        return EllipticityParams.from_dict(io.read_json(args.params))
    return EllipticityParams(args.lam, args.Lam, args.b0, 0.0, args.rho)


def _ellipticity_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--params", help="ellipticity JSON {lam, Lam, b0, c0, rho}")
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--Lam", type=float, default=1.0)
    p.add_argument("--b0", type=float, default=0.0)
    p.add_argument("--rho", type=float, default=1.0)


def _emit(doc: dict, out: str | None) -> None:
    if out:
        io.write_json(doc, out)
    else:
        sys.stdout.write(io.dumps(doc))


def _grid(args) -> Grid:
    return Grid(getattr(args, "dim", 2), getattr(args, "grid", 65))


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="slidekit", parents=[common], description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("constants", parents=[common], help="print the derived constant cascade")
    _ellipticity_flags(p)
    p.add_argument("--sigma", type=float, default=0.5)

    p = sub.add_parser("envelope", parents=[common], help="Jensen inf-convolution of a grid function")
    p.add_argument("--input", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--format", choices=("f8le", "csv"), default="f8le")

    p = sub.add_parser("contact", parents=[common], help="touch points of sliding paraboloids")
    p.add_argument("--input", required=True)
    p.add_argument("--opening", type=float, required=True)
    p.add_argument("--centers", help="mask file; default is the closed unit ball")

    p = sub.add_parser("harnack", parents=[common], help="run one estimate check")
    p.add_argument("--check", choices=HARNACK_CHECKS, required=True)
    p.add_argument("--input", help="grid function u")
    p.add_argument("--rhs", help="grid function f")
    _ellipticity_flags(p)
    p.add_argument("--opening", type=float, default=1.0)
    p.add_argument("--centers", help="mask file for the measure check")
    p.add_argument("--kmax", type=int, default=1)
    p.add_argument("--mu", type=float)
    p.add_argument("--E", help="mask file (covering)")
    p.add_argument("--F", help="mask file (covering)")
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--radius", type=float, default=0.5, help="barrier ball radius")
    p.add_argument("--sigma", type=float, default=0.5)

    p = sub.add_parser("flatness", parents=[common], help="pointwise C^{2,alpha} classification")
    p.add_argument("--input", required=True)
    p.add_argument("--rhs")
    p.add_argument("--operator", default="trace")
    _ellipticity_flags(p)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--eta", type=float, default=0.5)
    p.add_argument("--r0", type=float, default=0.25)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--cauchy-C", type=float)
    p.add_argument("--points", action="store_true", help="include per-point records")

    p = sub.add_parser("generate", parents=[common], help="write a test function and its right-hand side")
    p.add_argument("--name", required=True, choices=GENERATORS)
    p.add_argument("--param", action="append", default=[], metavar="KEY=JSON")
    p.add_argument("--format", choices=("f8le", "csv"), default="f8le")

    p = sub.add_parser("solve", parents=[common], help="relaxation solve with fixed boundary values")
    p.add_argument("--operator", default="trace")
    _ellipticity_flags(p)
    p.add_argument("--boundary", required=True)
    p.add_argument("--rhs")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=2_000_000)

    p = sub.add_parser("run", parents=[common], help="run a JSON experiment config")
    p.add_argument("--config", required=True)
    return parser


def _parse_kv(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, _, raw = item.partition("=")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = getattr(args, "out", None)
    try:
        return _dispatch(args, out)
    except (ConfigError, StageError, io.FormatError, ValueError, KeyError, OSError) as exc:
        print(f"slidekit {args.verb}: error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args, out) -> int:
    verb = args.verb
    if verb == "constants":
        dc = derive_constants(getattr(args, "dim", 2), _params(args), args.sigma)
        _emit(dc.to_dict(), out)
        return 0
    if verb == "envelope":
        u = io.load_grid_function(args.input)
        ue = jensen_envelope(u, args.eps)
        target = out or "envelope.json"
        io.save_grid_function(ue, target, args.format)
        return 0
    if verb == "contact":
        u = io.load_grid_function(args.input)
        V = io.load_mask(args.centers, u.grid) if args.centers else u.grid.ball(1.0)
        _emit(contact_set(u, args.opening, V).to_dict(), out)
        return 0
    if verb == "harnack":
        return _harnack(args, out)
    if verb == "flatness":
        u = io.load_grid_function(args.input)
        f = io.load_grid_function(args.rhs) if args.rhs else None
        cfg = FlatnessConfig(alpha=args.alpha, eta=args.eta, r0=args.r0, stride=args.stride, cauchy_C=args.cauchy_C)
        res = classify_singular_set(u, f, make_operator(args.operator, _params(args)), cfg)
        doc = {
            "schema_version": io.SCHEMA_VERSION,
            "operator": args.operator,
            "config": cfg.to_dict(),
            "cauchy_C": res.cauchy_C,
            "points": res.points,
            "undetermined": res.undetermined,
            "singular_measure": res.measure,
            "singular_nodes": res.mask.indices().tolist(),
        }
        if args.points:
            doc["classifications"] = res.classifications()
        _emit(doc, out)
        return 0
    if verb == "generate":
        grid = _grid(args)
        gen = generate(args.name, _parse_kv(args.param), grid)
        d = Path(out or ".")
        d.mkdir(parents=True, exist_ok=True)
        io.save_grid_function(gen.u, d / "u.json", args.format)
        io.save_grid_function(gen.f, d / "f.json", args.format)
        io.write_json(gen.metadata, d / "meta.json")
        return 0
    if verb == "solve":
        b = io.load_grid_function(args.boundary)
        f = io.load_grid_function(args.rhs) if args.rhs else None
        res = relax_solve(make_operator(args.operator, _params(args)), f, b, args.tol, args.max_iter)
        d = Path(out or ".")
        d.mkdir(parents=True, exist_ok=True)
        io.save_grid_function(res.u, d / "solution.json")
        io.write_json(res.to_dict(), d / "solve.json")
        return 0 if res.converged else 1
    if verb == "run":
        cfg = ExperimentConfig.load(args.config)
        if hasattr(args, "seed"):
            cfg.seed = args.seed
        _, code = run(cfg, out)
        return code
    raise AssertionError(verb)


def _harnack(args, out) -> int:
    p_ell = _params(args)
    if args.check == "covering":
        if not (args.E and args.F):
            raise ConfigError("covering needs --E and --F mask files")
        E = io.load_mask(args.E)
        F = io.load_mask(args.F, E.grid)
        dc = derive_constants(E.grid.dim, p_ell, args.sigma)
        rep = covering_step(E, F, args.mu if args.mu is not None else dc.mu)
    elif args.check == "barrier":
        n = getattr(args, "dim", 2)
        dc = derive_constants(n, p_ell, args.sigma)
        rep = barrier_check(np.zeros(n), args.radius, args.opening, dc, p_ell, args.samples, seed=getattr(args, "seed", 0))
    else:
        if not args.input:
            raise ConfigError(f"{args.check} needs --input")
        u = io.load_grid_function(args.input)
        f = io.load_grid_function(args.rhs) if args.rhs else None
        dc = derive_constants(u.grid.dim, p_ell, args.sigma)
        if args.check == "measure":
            V = io.load_mask(args.centers, u.grid) if args.centers else u.grid.ball(0.25)
            rep = verify_measure_lemma(u, args.opening, V, dc, p_ell, f)
        elif args.check == "density":
            rep = verify_density(u, dc, p_ell, f)
        elif args.check == "decay":
            rep = decay_iteration(u, dc, p_ell, f, args.kmax)
        elif args.check == "weak-leps":
            rep = weak_Leps(u, dc, p_ell)
        elif args.check == "weak-harnack":
            rep = weak_harnack(u, f, dc, p_ell)
        else:
            rep = holder_decay(u, dc, p_ell, f)
    doc = dict(rep.to_dict(), schema_version=io.SCHEMA_VERSION)
    _emit(doc, out)
    return 1 if rep.verdict == "fail" else 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
