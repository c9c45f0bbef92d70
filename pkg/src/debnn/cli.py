"""Command-line driver. One subcommand per pipeline stage; a JSON config file
sets the experiment and every field can be overridden on the command line."""
from __future__ import annotations

import argparse
import json
import sys

from .harness import (ALL_STAGES, ExperimentConfig, STAGE_FNS, Workdir, default_config,
                      run_pipeline)


def _apply_overrides(cfg_dict: dict, args) -> dict:
    simple = {
        "pool_size": args.pool_size, "master_seed": args.master_seed,
        "workers": args.workers, "s_select": args.s_select, "s_test": args.s_test,
        "n_draws": args.n_draws, "name": args.name,
    }
    for key, val in simple.items():
        if val is not None:
            cfg_dict[key] = val
    if args.k is not None:
        cfg_dict["k_list"] = [int(k) for k in args.k.split(",")]
    if args.methods is not None:
        cfg_dict["methods"] = args.methods.split(",")
    if args.flow_lengths is not None:
        cfg_dict["flow_lengths"] = [int(t) for t in args.flow_lengths.split(",")]
    for item in args.set or []:
        key, _, raw = item.partition("=")
        if not raw:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        node = cfg_dict
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        try:
            node[parts[-1]] = json.loads(raw)
        except json.JSONDecodeError:
            node[parts[-1]] = raw
    return cfg_dict


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="debnn",
        description="Train ensembles of small networks, fit post-hoc posteriors, "
                    "and run the evaluation suite.")
    parser.add_argument("--config", help="JSON experiment config (default: built-in two_moons)")
    parser.add_argument("--preset", default="two_moons",
                        choices=["two_moons", "spirals", "regression"],
                        help="built-in config used when --config is absent")
    parser.add_argument("--workdir", default="runs/default", help="artifact directory")
    parser.add_argument("--name", help="experiment name override")
    parser.add_argument("--pool-size", type=int, dest="pool_size")
    parser.add_argument("--master-seed", type=int, dest="master_seed")
    parser.add_argument("--workers", type=int)
    parser.add_argument("--s-select", type=int, dest="s_select")
    parser.add_argument("--s-test", type=int, dest="s_test")
    parser.add_argument("--n-draws", type=int, dest="n_draws")
    parser.add_argument("--k", help="comma-separated ensemble sizes, e.g. 1,2,5,10,20")
    parser.add_argument("--methods", help="comma-separated subset of de,swa,swag,llla,la_nf")
    parser.add_argument("--flow-lengths", dest="flow_lengths",
                        help="comma-separated flow chain lengths")
    parser.add_argument("--set", action="append", metavar="KEY=JSON",
                        help="override any config field, dotted paths allowed "
                             "(e.g. --set dataset.noise=0.25)")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in ALL_STAGES:
        sub.add_parser(stage, help=f"run the {stage} stage")
    sub.add_parser("all", help="train-pool, fit-posteriors and evaluate in sequence")
    sub.add_parser("show-config", help="print the resolved config and exit")
    return parser


def resolve_config(args) -> ExperimentConfig:
    if args.config:
        with open(args.config) as f:
            cfg_dict = json.load(f)
    else:
        cfg_dict = default_config(args.preset).to_dict()
    return ExperimentConfig.from_dict(_apply_overrides(cfg_dict, args))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = resolve_config(args)
    if args.command == "show-config":
        json.dump(cfg.to_dict(), sys.stdout, indent=2, sort_keys=True)
        print()
        return 0
    wd = Workdir(args.workdir)
    with open(wd.path("config.json"), "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
    if args.command == "all":
        results = run_pipeline(cfg, wd)
        for stage, out in results.items():
            print(f"{stage}: done")
    else:
        out = STAGE_FNS[args.command](cfg, wd)
        if isinstance(out, dict):
            for key, val in sorted(out.items()):
                print(f"{key}: {val}")
        elif isinstance(out, int):
            print(f"{args.command}: {out} new rows")
        else:
            print(f"{args.command}: done")
    return 0


if __name__ == "__main__":
    sys.exit(main())
