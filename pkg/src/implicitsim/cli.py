"""Command line interface.

Subcommands::

    simulate     config JSON -> dataset JSON
    fit-vector   dataset JSON -> trajectory CSV (+ .snapshots.json sidecar)
    fit-matrix   dataset JSON -> trajectory CSV (+ .snapshots.json sidecar)
    predict      dataset JSON + snapshots -> selection report CSV
    benchmark    experiment config JSON -> metrics CSV

Exit codes: 0 success, 2 configuration error, 3 numeric divergence.
"""

import argparse
import json
import logging
import sys

import numpy as np

from . import __version__
from .bench import ConfigError, ExperimentConfig, rows_to_csv, run_experiment
from .optim import (SolverConfig, Truth, load_snapshots, run_matrix, run_vector,
                    save_snapshots)
from .robust import robust_moment
from .score import GaussianVector, IIDUnivariate, StandardGaussian, design_from_dict
from .select import select_stopping_time
from .simgen import (MatrixSimInstance, gen_lowrank_beta, gen_matrix_sim, gen_sparse_beta,
                     gen_vector_sim, get_link, design_mu_star, load_instance, make_rng, mc_mu_star,
                     save_instance, split_half)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3

log = logging.getLogger("implicitsim")


class CLIError(Exception):
    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _read_json(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise CLIError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CLIError(f"{path} is not valid JSON: {exc}") from exc


def _write_text(path, text):
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _solver_from(cfg, matrix):
    defaults = SolverConfig.matrix_defaults if matrix else SolverConfig.vector_defaults
    try:
        return defaults(**cfg.get("solver", {}))
    except (TypeError, ValueError) as exc:
        raise CLIError(f"bad solver config: {exc}") from exc


def _moment(inst, robust):
    try:
        return robust_moment(inst, inst.design, robust)
    except ValueError as exc:
        raise CLIError(str(exc)) from exc


def _mu_star(cfg, link, design, beta, seed):
    if cfg.get("mu_star") is not None:
        return float(cfg["mu_star"])
    if link.kind in ("identity", "sign"):
        return mc_mu_star(link)[0]
    if link.f_prime is None:
        return None
    standard = isinstance(design, GaussianVector) and not np.any(design.mean) or \
        isinstance(design, IIDUnivariate) and isinstance(design.family, StandardGaussian)
    if standard:
        return mc_mu_star(link, seed=seed)[0]
    return design_mu_star(link, design, beta, samples=20_000, seed=seed)[0]


# -- subcommands -------------------------------------------------------------

def cmd_simulate(args, cfg):
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    try:
        link = get_link(cfg.get("link", "identity"))
        sigma = float(cfg.get("noise_sigma", 0.5))
        n = int(cfg["n"])
        if "d" in cfg:
            d, r = int(cfg["d"]), int(cfg.get("r", 1))
            design = design_from_dict(cfg.get("design", "standard_gaussian"))
            beta = gen_lowrank_beta(d, r, make_rng(seed, 2))
            mu = _mu_star(cfg, link, design, beta, seed)
            inst = gen_matrix_sim(beta, design, link, sigma, n, seed, mu)
        else:
            p, s = int(cfg["p"]), int(cfg["s"])
            design = design_from_dict(cfg.get("design", "standard_gaussian"), dim=p)
            beta = gen_sparse_beta(p, s, make_rng(seed, 2))
            if isinstance(design, GaussianVector):
                beta = beta / design.sigma_norm(beta)
            mu = _mu_star(cfg, link, design, beta, seed)
            inst = gen_vector_sim(beta, design, link, sigma, n, seed, mu)
    except KeyError as exc:
        raise CLIError(f"simulate config is missing {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise CLIError(str(exc)) from exc
    if args.out is None:
        raise CLIError("simulate needs --out")
    save_instance(inst, args.out)
    log.info("wrote %d rows to %s", inst.n, args.out)


def _load_data(args):
    if args.data is None:
        raise CLIError("--data is required")
    try:
        return load_instance(args.data)
    except (OSError, KeyError, ValueError) as exc:
        raise CLIError(f"cannot load dataset {args.data}: {exc}") from exc


def _subset(inst, which):
    if which == "all":
        return inst
    train, test = split_half(inst)
    return train if which == "train" else test


def _fit(args, cfg, matrix):
    inst = _subset(_load_data(args), args.subset)
    if isinstance(inst, MatrixSimInstance) != matrix:
        raise CLIError("dataset kind does not match the fit subcommand")
    solver = _solver_from(cfg, matrix)
    moment = _moment(inst, cfg.get("robust", {"kind": "none"}))
    truth = Truth.from_instance(inst) if inst.mu_star is not None else None
    try:
        traj = (run_matrix if matrix else run_vector)(moment, solver, truth)
    except ValueError as exc:
        raise CLIError(str(exc)) from exc
    if args.out is None:
        raise CLIError(f"{args.command} needs --out")
    _write_text(args.out, traj.to_csv())
    save_snapshots(traj, args.out + ".snapshots.json")
    if traj.diverged:
        raise CLIError(f"solver diverged at t={traj.diverged_at}", EXIT_DIVERGENCE)


def cmd_fit_vector(args, cfg):
    _fit(args, cfg, matrix=False)


def cmd_fit_matrix(args, cfg):
    _fit(args, cfg, matrix=True)


def cmd_predict(args, cfg):
    inst = _load_data(args)
    if args.trajectory is None:
        raise CLIError("--trajectory is required")
    path = args.trajectory
    if not path.endswith(".snapshots.json"):
        path += ".snapshots.json"
    try:
        traj = load_snapshots(path)
    except (OSError, KeyError, ValueError) as exc:
        raise CLIError(f"cannot load trajectory {path}: {exc}") from exc
    train, test = split_half(inst)
    sel = cfg.get("selection", {})
    try:
        res = select_stopping_time(traj, train, test, m=int(sel.get("m", 10)),
                                   plateau_rel_tol=float(sel.get("plateau_rel_tol", 1e-3)),
                                   c_h=float(cfg.get("c_h", 1.0)))
    except ValueError as exc:
        raise CLIError(str(exc)) from exc
    _write_text(args.out, res.to_csv())


def cmd_benchmark(args, cfg):
    if args.seed is not None:
        cfg = dict(cfg, master_seed=args.seed)
    exp = ExperimentConfig.from_dict(cfg)
    rows = run_experiment(exp, threads=args.threads)
    _write_text(args.out, rows_to_csv(rows))
    bad = [r for r in rows if r.error]
    if bad:
        log.warning("%d of %d rows carry an error code", len(bad), len(rows))
    if rows and all(r.error == "divergence" for r in rows):
        raise CLIError("every run diverged", EXIT_DIVERGENCE)


COMMANDS = {
    "simulate": cmd_simulate,
    "fit-vector": cmd_fit_vector,
    "fit-matrix": cmd_fit_matrix,
    "predict": cmd_predict,
    "benchmark": cmd_benchmark,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="implicitsim",
        description="Implicitly regularized gradient descent for single index models.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, help="seed (unsigned 64-bit)")
        p.add_argument("--out", help="output path ('-' for stdout)")
        p.add_argument("--threads", type=int, default=1, help="worker threads")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("fit-vector", "fit-matrix", "predict"):
            p.add_argument("--data", help="dataset JSON written by simulate")
        if name in ("fit-vector", "fit-matrix"):
            p.add_argument("--subset", choices=("all", "train", "test"), default="all",
                           help="rows to fit on (train/test are the even split)")
        if name == "predict":
            p.add_argument("--trajectory", help="trajectory CSV path (its sidecar is read)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = _read_json(args.config)
        if not isinstance(cfg, dict):
            raise CLIError("config must be a JSON object")
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
