"""Command-line entry point.

Exit codes: 0 ok, 2 configuration error, 3 numeric abort, 4 I/O or missing
artifact.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..demo import DemoFormatError
from ..diff import CheckpointFormatError, NumericAbort
from ..girl import ConfigError as NormalizerConfigError
from . import pipeline
from .config import ConfigError, load_config, serialize_config
from .plotting import MetricsParseError, plot_curves

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="INI experiment config")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides [run] seed)")
    p.add_argument("--out", type=Path, default=None, help="output directory (overrides [run] output_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="girilab", description="Imitation from one-life demonstrations.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("expert-train", help="train a PPO expert on the true reward")
    _common(p)

    p = sub.add_parser("record-demo", help="record a demonstration from an expert checkpoint")
    _common(p)
    p.add_argument("--expert", type=Path, required=True)

    p = sub.add_parser("train-reward", help="fit the GIRL or ICM reward module")
    _common(p)
    p.add_argument("--demo", type=Path, required=True)

    p = sub.add_parser("imitate", help="train a policy with the configured method")
    _common(p)
    p.add_argument("--demo", type=Path, required=True)
    p.add_argument("--reward", type=Path, default=None, help="reward checkpoint (girl, cdil)")

    p = sub.add_parser("evaluate", help="greedy true-return evaluation of a policy checkpoint")
    _common(p)
    p.add_argument("--policy", type=Path, required=True)
    p.add_argument("--stage", choices=("expert", "imitation"), default="imitation",
                   help="which PPO section sets the network width")

    p = sub.add_parser("ablate-beta", help="GIRIL imitation over the configured beta grid")
    _common(p)
    p.add_argument("--demo", type=Path, required=True)
    p.add_argument("--reward", type=Path, required=True)

    p = sub.add_parser("plot", help="learning curves from metrics CSVs")
    _common(p)
    p.add_argument("csvs", nargs="+", help="metrics CSVs, optionally prefixed label=")
    p.add_argument("--demo-return", type=float, default=None)
    p.add_argument("--expert-return", type=float, default=None)
    p.add_argument("--title", default=None)
    return parser


def _out_dir(args, cfg) -> Path:
    out = args.out if args.out is not None else Path(cfg["run"]["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["run"]["seed"] = args.seed

    if args.command == "plot":
        groups: dict[str, list[str]] = {}
        for item in args.csvs:
            label, _, path = item.rpartition("=")
            groups.setdefault(label or "run", []).append(path)
        out = args.out if args.out is not None else Path(cfg["run"]["output_dir"]) / "curves.svg"
        curves = plot_curves(groups, out, args.demo_return, args.expert_return, args.title)
        for label, c in curves.items():
            print(f"{label}\tn={c.n}\tfinal_mean={c.mean[-1]:.4f}\tfinal_std={c.std[-1]:.4f}")
        print(f"wrote {out}")
        return EXIT_OK

    out = _out_dir(args, cfg)
    (out / "config.ini").write_text(serialize_config(cfg))

    if args.command == "expert-train":
        run = pipeline.expert_train(cfg, out)
        print(f"expert: steps={run.steps} updates={run.updates} final_return={run.rows[-1]['mean_true_return']:.4f}")
    elif args.command == "record-demo":
        expert = pipeline.load_policy(cfg, "expert", args.expert)
        demo = pipeline.record_demo(cfg, expert, out)
        print(f"demo: mode={demo.provenance} transitions={len(demo)} segments={demo.n_segments} "
              f"true_return={demo.true_return:.4f} segment_returns={demo.segment_returns}")
    elif args.command == "train-reward":
        demo = pipeline.load_demo(args.demo)
        _, log = pipeline.train_reward(cfg, demo, out)
        print(f"reward module: epochs={log[-1]['epoch'] if log else 0} final_total={log[-1]['total'] if log else 'n/a'}")
    elif args.command == "imitate":
        demo = pipeline.load_demo(args.demo)
        module = None
        if cfg["method"]["name"] in ("girl", "cdil"):
            if args.reward is None:
                raise pipeline.MissingArtifact(f"method {cfg['method']['name']} needs --reward")
            module = pipeline.load_reward_module(cfg, args.reward)
        res = pipeline.imitate(cfg, demo, module, out)
        print(f"imitate[{cfg['method']['name']}]: final_return={res.final.mean:.4f} std={res.final.std:.4f}")
    elif args.command == "evaluate":
        policy = pipeline.load_policy(cfg, args.stage, args.policy)
        res = pipeline.eval_policy(cfg, policy)
        pipeline.write_csv(out / "eval.csv", ("eval_seed", "mean_return"),
                           [[s, float(r)] for s, r in zip(cfg["eval"]["seeds"], res.per_seed)])
        print(f"evaluate: mean_return={res.mean:.4f} std={res.std:.4f} episodes={len(res.returns)}")
    elif args.command == "ablate-beta":
        demo = pipeline.load_demo(args.demo)
        rows = pipeline.ablate_beta(cfg, demo, args.reward, out)
        print("beta,seed,final_return")
        for r in rows:
            print(f"{r['beta']!r},{r['seed']},{r['final_return']:.4f}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except (ConfigError, NormalizerConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DemoFormatError, CheckpointFormatError, MetricsParseError, KeyError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
