"""Command-line interface.

Subcommands: gen-data, build-basis, train, solve-ouu, evaluate, compare.
`--config` takes a JSON path or a preset name ("desk", "paper"). Each
command prints its report as JSON on stdout.
"""

import argparse
import dataclasses
import json
import sys

from . import pipeline
from .config import RiskConfig, load_config


def _add_common(p, seed=True, threads=True):
    p.add_argument("--config", default="desk",
                   help="config JSON path or preset name (desk, paper)")
    if seed:
        p.add_argument("--seed", type=int, default=None)
    if threads:
        p.add_argument("--threads", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ouukit",
                                 description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a training/test dataset")
    _add_common(p)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--jacobian", action=argparse.BooleanOptionalAction,
                   default=True, help="also store reduced control Jacobians")
    p.add_argument("--basis-from", default=None,
                   help="project onto the bases of this existing dataset")
    p.add_argument("--out", default="train.bin")

    p = sub.add_parser("build-basis", help="persist POD/KLE basis files")
    _add_common(p)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--out", default="basis")

    p = sub.add_parser("train", help="train a surrogate on a dataset")
    _add_common(p, threads=False)
    p.add_argument("data", help="dataset file from gen-data")
    p.add_argument("--jacobian-weight", type=float, default=None)
    p.add_argument("--out", default="model.bin")

    p = sub.add_parser("solve-ouu", help="minimize the SAA risk objective")
    _add_common(p)
    p.add_argument("--model", default=None, help="surrogate model file")
    p.add_argument("--pde", action="store_true",
                   help="use the PDE evaluator instead of a surrogate")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--out", default="solve.json")

    p = sub.add_parser("evaluate", help="score a solve report on the PDE")
    _add_common(p)
    p.add_argument("solve_report")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--out", default="eval.json")

    p = sub.add_parser("compare", help="cost-accuracy table from eval reports")
    p.add_argument("reports", nargs="+", help="eval report JSON files")
    p.add_argument("--reference", required=True)
    p.add_argument("--out", default="compare")
    return ap


def _config_with_risk(args):
    cfg = load_config(args.config)
    beta = getattr(args, "beta", None)
    eps = getattr(args, "eps", None)
    if beta is not None or eps is not None:
        risk = RiskConfig(
            kind=cfg.risk.kind,
            beta=cfg.risk.beta if beta is None else beta,
            eps=cfg.risk.eps if eps is None else eps,
        )
        cfg = dataclasses.replace(cfg, risk=risk).validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "gen-data":
        report = pipeline.cmd_gen_data(
            load_config(args.config), n=args.n, with_jacobian=args.jacobian,
            seed=args.seed, out=args.out, threads=args.threads,
            basis_from=args.basis_from)
    elif args.command == "build-basis":
        report = pipeline.cmd_build_basis(
            load_config(args.config), n=args.n, seed=args.seed, out=args.out,
            threads=args.threads)
    elif args.command == "train":
        report = pipeline.cmd_train(
            load_config(args.config), args.data,
            jacobian_weight=args.jacobian_weight, seed=args.seed, out=args.out)
    elif args.command == "solve-ouu":
        report = pipeline.cmd_solve_ouu(
            _config_with_risk(args), model_path=args.model, pde=args.pde,
            n=args.n, seed=args.seed, out=args.out, threads=args.threads)
    elif args.command == "evaluate":
        report = pipeline.cmd_evaluate(
            load_config(args.config), args.solve_report, n_eval=args.n,
            seed=args.seed, out=args.out, threads=args.threads)
    elif args.command == "compare":
        report = pipeline.cmd_compare(args.reports, args.reference, out=args.out)
    else:  # pragma: no cover
        raise SystemExit(2)

    json.dump(report, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
