"""Experiment driver: `fairsim run|verify|quadratic`.

run       executes a JSON-configured federated training run and writes a
          metrics CSV (columns round,mode,scheme,seed,metric,value) plus a
          JSON manifest with the fully resolved config.
verify    runs the dense-oracle suites; exit 0 iff all pass.
quadratic surfaces the convergence bench as a command.

Exit codes: 0 success, 1 config/validation failure, 2 numerical divergence.
FAIR_THREADS caps intra-round parallelism (0 = auto, unset = serial).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .data import DataError, load_csv, split_train_test, synth_lowrank
from .federation import DivergenceError, RunConfig, Trainer, parse_capacity_scheme
from .fileio import atomic_write_text
from .quadratic import quadratic_bench
from .verify import run_all, suite_names


class ConfigError(ValueError):
    pass


def _check_keys(block: dict, spec: dict, where: str) -> None:
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be an object")
    for key in block:
        if key not in spec:
            raise ConfigError(f"unknown key '{key}' in {where}")
    for key, required in spec.items():
        if required and key not in block:
            raise ConfigError(f"missing required key '{key}' in {where}")


def _typed(block: dict, key: str, kinds, where: str, default=None):
    if key not in block:
        return default
    value = block[key]
    if kinds is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kinds) or isinstance(value, bool):
        raise ConfigError(f"key '{key}' in {where} has wrong type")
    return value


def resolve_run_spec(raw: dict) -> dict:
    """Validate a run-spec dict and fill defaults; rejects unknown keys."""
    _check_keys(raw, {"dataset": True, "model": True, "federation": True, "output": True}, "config")

    ds = raw["dataset"]
    _check_keys(ds, {"synth": False, "csv": False, "holdout_per_user": False, "split_seed": False},
                "dataset")
    if ("synth" in ds) == ("csv" in ds):
        raise ConfigError("dataset must contain exactly one of 'synth' or 'csv'")
    resolved_ds: dict = {
        "holdout_per_user": _typed(ds, "holdout_per_user", int, "dataset", 2),
        "split_seed": _typed(ds, "split_seed", int, "dataset", 0),
    }
    if "synth" in ds:
        synth = ds["synth"]
        _check_keys(synth, {"num_users": True, "num_items": True, "latent_dim": True,
                            "density": True, "noise_sd": False, "seed": True, "kind": True},
                    "dataset.synth")
        resolved_ds["synth"] = {
            "num_users": _typed(synth, "num_users", int, "dataset.synth"),
            "num_items": _typed(synth, "num_items", int, "dataset.synth"),
            "latent_dim": _typed(synth, "latent_dim", int, "dataset.synth"),
            "density": _typed(synth, "density", float, "dataset.synth"),
            "noise_sd": _typed(synth, "noise_sd", float, "dataset.synth", 0.0),
            "seed": _typed(synth, "seed", int, "dataset.synth"),
            "kind": _typed(synth, "kind", str, "dataset.synth"),
        }
    else:
        csv_block = ds["csv"]
        _check_keys(csv_block, {"path": True, "kind": True}, "dataset.csv")
        resolved_ds["csv"] = {
            "path": _typed(csv_block, "path", str, "dataset.csv"),
            "kind": _typed(csv_block, "kind", str, "dataset.csv"),
        }

    model = raw["model"]
    _check_keys(model, {"dim": True, "l2": False, "learning_rate": True}, "model")
    resolved_model = {
        "dim": _typed(model, "dim", int, "model"),
        "l2": _typed(model, "l2", float, "model", 1e-6),
        "learning_rate": _typed(model, "learning_rate", float, "model"),
    }

    fed = raw["federation"]
    _check_keys(fed, {"mode": True, "rounds": True, "devices_per_round": True,
                      "local_epochs": True, "scheme": True, "seed": True,
                      "eval_every": False, "subspaces": False, "local_unit": False},
                "federation")
    resolved_fed = {
        "mode": _typed(fed, "mode", str, "federation"),
        "rounds": _typed(fed, "rounds", int, "federation"),
        "devices_per_round": _typed(fed, "devices_per_round", int, "federation"),
        "local_epochs": _typed(fed, "local_epochs", int, "federation"),
        "scheme": _typed(fed, "scheme", str, "federation"),
        "seed": _typed(fed, "seed", int, "federation"),
        "eval_every": _typed(fed, "eval_every", int, "federation", 10),
        "subspaces": _typed(fed, "subspaces", str, "federation", "consistent"),
        "local_unit": _typed(fed, "local_unit", str, "federation", "epochs"),
    }

    output = _typed(raw, "output", str, "config")
    return {"dataset": resolved_ds, "model": resolved_model,
            "federation": resolved_fed, "output": output}


def _build_dataset(resolved_ds: dict):
    if "synth" in resolved_ds:
        ds = synth_lowrank(**resolved_ds["synth"])
    else:
        ds = load_csv(resolved_ds["csv"]["path"], resolved_ds["csv"]["kind"])
    return split_train_test(ds, resolved_ds["holdout_per_user"], resolved_ds["split_seed"])


def cmd_run(config_path: str) -> int:
    try:
        with open(config_path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"error: config is not valid JSON: {exc}", file=sys.stderr)
        return 1

    try:
        resolved = resolve_run_spec(raw)
        dataset = _build_dataset(resolved["dataset"])
        fed = resolved["federation"]
        cfg = RunConfig(mode=fed["mode"], rounds=fed["rounds"],
                        devices_per_round=fed["devices_per_round"],
                        local_epochs=fed["local_epochs"],
                        learning_rate=resolved["model"]["learning_rate"],
                        seed=fed["seed"], eval_every=fed["eval_every"],
                        subspaces=fed["subspaces"], local_unit=fed["local_unit"])
        scheme = parse_capacity_scheme(fed["scheme"], dataset.num_users)
        trainer = Trainer(dataset, scheme, cfg,
                          dim=resolved["model"]["dim"], l2=resolved["model"]["l2"])
    except (ConfigError, DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    try:
        log = trainer.run()
    except DivergenceError as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return 2

    out_path = Path(resolved["output"])
    log.write_csv(out_path)
    manifest = {"config": resolved, "version": __version__}
    atomic_write_text(Path(str(out_path) + ".manifest.json"),
                      json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out_path} ({len(log.records)} records)")
    return 0


def cmd_verify(list_only: bool) -> int:
    if list_only:
        for name in suite_names():
            print(name)
        return 0
    return 0 if run_all() else 1


def cmd_quadratic(args) -> int:
    try:
        report = quadratic_bench(n=args.n, m=args.m, num_devices=args.devices,
                                 rounds=args.rounds, local_steps=args.local_steps,
                                 seed=args.seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"quadratic bench: n={report.n} m={report.m} devices={report.num_devices} "
          f"rounds={report.rounds} seed={report.seed}")
    print(f"mu={report.mu:.6g} L={report.lipschitz:.6g} lr={report.learning_rate:.6g}")
    status = "PASS" if report.eig_in_range else "FAIL"
    print(f"eigen range [{report.eig_min:.6g}, {report.eig_max:.6g}] within [mu, L]: {status}")
    for rnd, gap in report.gaps:
        print(f"gap@{rnd} = {gap:.6e}")
    atomic_write_text(args.out, report.to_csv_text())
    print(f"wrote {args.out}")
    return 0 if report.eig_in_range else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairsim",
                                     description="federated training in hashed random subspaces")
    parser.add_argument("--version", action="version", version=f"fairsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a training run from a JSON config")
    p_run.add_argument("--config", required=True, help="path to the run-spec JSON")

    p_verify = sub.add_parser("verify", help="run the dense-oracle verification suites")
    p_verify.add_argument("--list", action="store_true", help="list suites without running")

    p_quad = sub.add_parser("quadratic", help="convergence bench on strongly convex quadratics")
    p_quad.add_argument("--n", type=int, required=True)
    p_quad.add_argument("--m", type=int, required=True)
    p_quad.add_argument("--devices", type=int, default=8)
    p_quad.add_argument("--rounds", type=int, required=True)
    p_quad.add_argument("--seed", type=int, default=0)
    p_quad.add_argument("--local-steps", type=int, default=1)
    p_quad.add_argument("--out", default="quadratic_report.csv")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config)
    if args.command == "verify":
        return cmd_verify(args.list)
    return cmd_quadratic(args)


if __name__ == "__main__":
    sys.exit(main())
