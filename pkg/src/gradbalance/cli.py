"""Command-line entry point: ``simulate``, ``train`` and ``verify``.

Exit codes: 0 success, 1 runtime or check failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import oracles
from .experiments import (MASK_RATES, TrainConfig, run_experiment, run_gaussian_scenario, table1_sweep)
from .losses import LOSS_NAMES, SWEEP_LOSSES, parse_loss_spec
from .task import GaussianScenario, PreferenceTask

log = logging.getLogger("gradbalance")

SUITES = ("all", "fym", "fym2", "variance", "dataquality", "distshift", "ood", "probupdate")


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    subcommand: str
    flags: dict
    seed: int | None
    outputs: list = field(default_factory=list)
    version: str = __version__

    def to_json(self) -> dict:
        return {"subcommand": self.subcommand, "flags": self.flags, "seed": self.seed,
                "outputs": self.outputs, "version": self.version}

    def write_sidecar(self, path: Path) -> Path:
        """Manifest next to ``path``; the only file that carries a timestamp."""
        side = path.with_name(path.name + ".manifest.json")
        body = self.to_json()
        body["created"] = datetime.now(timezone.utc).isoformat()
        side.write_text(json.dumps(body, indent=2) + "\n")
        return side


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, allow_nan=True) + "\n")


# --- subcommands ----------------------------------------------------------------

def cmd_simulate(args, manifest: RunManifest) -> int:
    for name in ("mu_p", "mu_q", "out"):
        if getattr(args, name) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")
    scenario = GaussianScenario(args.mu_p, args.mu_q, args.sigma2, args.n)
    out = Path(args.out)
    run_gaussian_scenario(scenario, args.sampling, out)
    manifest.outputs.append(str(out))
    manifest.write_sidecar(out)
    return 0


def _train_config(args, loss: str) -> TrainConfig:
    try:
        spec = parse_loss_spec(loss, args.beta, args.clip)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return TrainConfig(loss=spec, eta=args.eta, epochs=args.steps, mask_rate=args.mask, alpha_utility=args.alpha,
                       clip_max=args.clip, reference_bootstrap_steps=args.bootstrap, seed=args.seed,
                       full_batch=args.full_batch)


def cmd_train(args, manifest: RunManifest) -> int:
    if args.out is None:
        raise UsageError("--out is required")
    out = Path(args.out)
    if args.sweep:
        losses = SWEEP_LOSSES if args.loss is None else [args.loss]
        base = _train_config(args, losses[0])
        result = table1_sweep(losses, MASK_RATES, range(args.seed, args.seed + args.seeds), base, jobs=args.jobs)
        result.write_csv(out)
        table = out.with_name(out.stem + ".table.csv")
        result.write_table(table)
        manifest.outputs += [str(out), str(table)]
        manifest.write_sidecar(out)
        return 0
    if args.loss is None:
        raise UsageError(f"--loss is required; choose from {', '.join(LOSS_NAMES)}")
    config = _train_config(args, args.loss)
    report, _, _ = run_experiment(config)
    body = report.to_json()
    body["manifest"] = manifest.to_json()
    _dump_json(out, body)
    row = out.with_suffix(".csv")
    negsq, util = report.final_reward
    with open(row, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["loss", "mask", "seed", "reward_negsq", "reward_util"])
        w.writerow([args.loss, repr(args.mask), args.seed, repr(negsq), repr(util)])
    ckpt = out.with_name(out.stem + ".policy.csv")
    report.final_policy.save_csv(ckpt)
    manifest.outputs += [str(out), str(row), str(ckpt)]
    manifest.write_sidecar(out)
    return 0


def _ood_zero_report(seed: int):
    rng = np.random.default_rng(seed)
    task = PreferenceTask.gaussian_grid(4, 8).with_mask(np.eye(4, 8, 5, dtype=bool))
    p = rng.dirichlet(np.ones(8), size=4)
    p[task.mask] = 0.0
    p /= p.sum(axis=1, keepdims=True)
    return oracles.check_ood_zero(p, task)


def run_suite(suite: str, trials: int, seed: int) -> list:
    """Reports for one named suite (``all`` runs every suite)."""
    if suite == "all":
        return [r for s in SUITES[1:] for r in run_suite(s, trials, seed)]
    if suite == "fym":
        return [oracles.mc_check_fym(trials, seed)]
    if suite == "fym2":
        return [oracles.mc_check_fym2(trials, seed)]
    if suite == "variance":
        return [oracles.check_variance_bound(trials=trials, rng=seed)]
    if suite == "dataquality":
        return [oracles.check_dataquality(trials=trials, rng=seed)]
    if suite == "distshift":
        return [oracles.check_distshift_extrema(s) for s in oracles.SHIFT_SCENARIOS]
    if suite == "ood":
        return [oracles.check_ood_update(trials=trials, rng=seed), _ood_zero_report(seed)]
    if suite == "probupdate":
        return [oracles.check_prob_update(trials=min(trials, 50), rng=seed)]
    raise UsageError(f"unknown suite {suite!r}")


def cmd_verify(args, manifest: RunManifest) -> int:
    if args.trials <= 0:
        raise UsageError("--trials must be positive")
    reports = run_suite(args.suite, args.trials, args.seed)
    lines = [json.dumps(r.to_json(), allow_nan=True) for r in reports]
    for line in lines:
        print(line)
    if args.out:
        out = Path(args.out)
        out.write_text("\n".join(lines) + "\n")
        manifest.outputs.append(str(out))
        manifest.write_sidecar(out)
    return 0 if all(r.passed for r in reports) else 1


# --- parsing ----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="gradbalance", description="Gradient-balance analysis of preference losses.")
    top.add_argument("--version", action="version", version=__version__)
    top.add_argument("-v", "--verbose", action="store_true")
    sub = top.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="YAML or JSON file whose keys mirror the flags; flags win")
        p.add_argument("--out")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("simulate", help="w-curves for a Gaussian model/utility pair")
    common(p)
    p.add_argument("--mu-p", type=float)
    p.add_argument("--mu-q", type=float)
    p.add_argument("--sigma2", type=float, default=100.0)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--sampling", choices=("uniform", "shiftless"), default="uniform")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="toy grid benchmark: one run or the full sweep")
    common(p)
    p.add_argument("--loss", help=f"one of {', '.join(LOSS_NAMES)}")
    p.add_argument("--mask", type=float, default=0.0)
    p.add_argument("--eta", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--bootstrap", type=int, default=300)
    p.add_argument("--clip", type=float, default=0.5)
    p.add_argument("--alpha", type=float, default=0.6)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--full-batch", action="store_true")
    p.add_argument("--sweep", action="store_true", help="all losses x mask rates {0, 0.2, 0.4}")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", help="oracle and Monte-Carlo checks")
    common(p)
    p.add_argument("--suite", choices=SUITES, default="all")
    p.add_argument("--trials", type=int, default=10000)
    p.set_defaults(func=cmd_verify)
    return top


def _load_config(path: str) -> dict:
    data = yaml.safe_load(Path(path).read_text())
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a mapping")
    return {k.replace("-", "_"): v for k, v in data.items()}


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        # config values become defaults, so anything given on the command line wins
        conf = _load_config(args.config)
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = set(conf) - known
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        subparser.set_defaults(**conf)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        flags = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
        manifest = RunManifest(args.command, flags, args.seed)
        return args.func(args, manifest)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    except (OSError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
