"""Command-line experiment runner.

Every subcommand writes a JSON report and CSV tables under --out, each
headed by the resolved configuration and master seed.
Exit codes: 0 ok, 2 config error, 3 cap exceeded, 4 test failure.
"""

from __future__ import annotations

import argparse
import math
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from .branching import ParticleCapExceeded, simulate_tree, tree_stream
from .config import ConfigError, ExperimentConfig, load_config
from .crt import ExcursionHorizonExceeded
from .diffusion import SubstepCapExceeded
from .io import json_text, write_csv, write_json
from .spectral import model_constants
from . import stats as S

EXIT_OK, EXIT_CONFIG, EXIT_CAP, EXIT_FAIL = 0, 2, 3, 4


def _header(cfg: ExperimentConfig, command: str) -> dict:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    return {"tool": "branchcrt", "version": version, "command": command, "seed": cfg.seed, "config": cfg.resolved()}


def _constants(cfg: ExperimentConfig, out: Path, header: dict) -> int:
    c = model_constants(cfg.domain, cfg.offspring)
    phx = float(np.squeeze(S.first_eigenpair(cfg.domain).phi(cfg.x)))
    values = {"lambda": c.lam, "beta_critical": c.beta_critical, "beta": cfg.beta, "m": c.m, "EA2": c.ea2,
              "b": c.b, "sigma2": c.sigma2, "sigma": c.sigma, "b_sigma": c.b * c.sigma,
              "excursion_level": 1.0 / (c.b * c.sigma), "phi_x": phx, "b_phi_x": c.b * phx,
              "yaglom_mean_phi": c.yaglom_mean(), "yaglom_mean_one": c.phi_moments["one_phi"] / c.b,
              **{f"moment_{k}": v for k, v in c.phi_moments.items()}}
    write_json(out / "constants.json", {"header": header, "constants": values})
    write_csv(out / "constants.csv", ("name", "value"), values.items(), header)
    print(f"b={c.b:.6g} sigma2={c.sigma2:.6g} beta_c={c.beta_critical:.6g}")
    return EXIT_OK


def _simulate(cfg: ExperimentConfig, out: Path, header: dict) -> int:
    e = cfg.experiment("simulate")
    params = cfg.params(horizon=float(e.get("horizon", math.inf)))
    keep = bool(e.get("keep_paths", True))
    rows, capped = [], False
    lines = []
    for i in range(int(e.get("replicas", 1))):
        tree = simulate_tree(cfg.x, params, tree_stream(cfg.seed, i), keep_paths=keep)
        capped |= tree.truncated
        lines.extend(tree.to_jsonl_lines({**header, "replica": i}, include_paths=keep))
        rows.append((i, len(tree), int(tree.extinct), int(tree.truncated), float(tree.death.max())))
    (out / "trees.jsonl").write_text("\n".join(lines) + "\n")
    write_csv(out / "trees.csv", ("replica", "nodes", "extinct", "truncated", "last_death"), rows, header)
    print(f"wrote {len(rows)} trees to {out / 'trees.jsonl'}")
    return EXIT_CAP if capped else EXIT_OK


def _run_experiment(cmd: str, cfg: ExperimentConfig):
    x, p, seed, th, tol = cfg.x, cfg.params(), cfg.seed, cfg.threads, cfg.tolerances
    e = cfg.experiment("crt" if cmd == "crt-compare" else cmd)
    if cmd == "martingale":
        return S.martingale_test(x, p, e["times"], e["replicas"], seed, th, tol)
    if cmd == "moments":
        return S.moment_test(x, p, e["count_times"], e["second_moment_times"], e["replicas"], seed, th, tol)
    if cmd == "survival":
        return S.survival_curve(x, p, e["times"], e["replicas"], seed, th, tol)
    if cmd == "yaglom":
        return S.yaglom_test(x, p, e["t"], e["f"], e["conditioned"], seed, th, e["max_replicas"], tol)
    if cmd == "density":
        return S.particle_density_test(x, p, e["t"], e["min_particles"], e["bins"], seed, th, e["batch"],
                                       e["max_replicas"], tol)
    if cmd == "spine":
        return S.spine_equilibrium_test(x, p, e["steps"], e["chains"], e["burn_in"], e["thin"], e["bins"], seed, tol)
    if cmd == "ergodic":
        return S.ergodic_average_test(x, p, e["horizon"], e["f"], e["batches"], seed, tol)
    if cmd == "clt":
        return S.clt_tests(x, p, e["n"], e["times"], e["replicas"], seed, th, tol)
    if cmd == "dmatrix":
        return S.dmatrix_agreement(x, p, e["t"], e["k"], e["conditioned"], e["extinction_factor"], seed, th,
                                   e["max_replicas"], tol)
    if cmd == "crt-compare":
        return S.crt_convergence_test(x, p, e["n"], e["k"], e["conditioned"], e["excursions"], e["dt"],
                                      e["extinction_factor"], seed, th, e["max_replicas"], tol)
    if cmd == "phase":
        return S.phase_transition(x, p, e["ratios"], e["times"], e["replicas"], seed, th, tol)
    raise ValueError(cmd)


EXPERIMENTS = ("martingale", "moments", "survival", "yaglom", "density", "spine", "ergodic", "clt", "dmatrix",
               "crt-compare", "phase")
HELP = {
    "constants": "print and save the spectral constants b, sigma^2, beta_c",
    "simulate": "simulate trees and dump them as JSON lines",
    "martingale": "mean of M_t and of the single-tree S-path against phi(x)",
    "moments": "first and second moments against the many-to-one/two oracles",
    "survival": "survival curve and t P(survive t) against b phi(x)",
    "yaglom": "conditioned population functional against its exponential limit",
    "density": "pooled survivor positions against phi/(1, phi)",
    "spine": "conditioned-diffusion occupation against phi^2",
    "ergodic": "forest ergodic average along the exploration",
    "clt": "KS tests of the scaled forest processes against Brownian marginals",
    "dmatrix": "agreement of height and S-path distance matrices",
    "crt-compare": "tree distances against the scaled conditioned excursion",
    "phase": "survival curves below, at and above the critical rate",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="TOML file layered over the reference config")
    common.add_argument("--seed", type=int, default=None, help="master seed (unsigned 64-bit)")
    common.add_argument("--replicas", type=int, default=None, help="override replica / conditioned-sample counts")
    common.add_argument("--threads", type=int, default=None, help="worker processes for replicas")
    common.add_argument("--out", type=Path, default=None, help="output directory")
    parser = argparse.ArgumentParser(prog="branchcrt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("constants", "simulate", *EXPERIMENTS):
        sub.add_parser(name, parents=[common], help=HELP[name])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be positive")
        if args.replicas is not None and args.replicas < 1:
            raise ConfigError("--replicas must be positive")
        cfg = load_config(args.config).with_overrides(args.seed, args.threads,
                                                      None if args.out is None else str(args.out), args.replicas)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    header = _header(cfg, args.command)
    try:
        if args.command == "constants":
            return _constants(cfg, out, header)
        if args.command == "simulate":
            return _simulate(cfg, out, header)
        report = _run_experiment(args.command, cfg)
    except (ParticleCapExceeded, SubstepCapExceeded, ExcursionHorizonExceeded, S.InsufficientSample) as exc:
        print(f"cap exceeded: {exc}", file=sys.stderr)
        return EXIT_CAP
    except (KeyError, ValueError) as exc:
        print(f"config error: {exc!r}", file=sys.stderr)
        return EXIT_CONFIG
    report.write(out, header)
    summary = {"experiment": report.name, "passed": report.passed, "estimates": report.estimates,
               "p_values": report.p_values, "sample_size": report.sample_size}
    print(json_text(summary))
    return EXIT_FAIL if report.passed is False else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
