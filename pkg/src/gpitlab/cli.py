"""``gpitlab <command> --config FILE [--set key=value ...]``"""

from __future__ import annotations

import argparse
import logging
import sys

from . import experiments as ex
from .config import ConfigError, ExperimentConfig

COMMANDS = ("gen-data", "train-recognizers", "pretrain", "finetune", "evaluate", "sweep-alpha", "sweep-tsl",
            "dump-logits")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gpitlab", description=__doc__)
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="flat 'key = value' config file; defaults apply to missing keys")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config key (repeatable)")
    ap.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    ap.add_argument("--arm", help="fine-tuning arm: sisdr, ae or joint")
    ap.add_argument("--alpha", type=float, help="joint-loss weight for --arm joint")
    ap.add_argument("--recognizer", choices=("A", "B"), help="evaluator for evaluate / dump-logits")
    ap.add_argument("-q", "--quiet", action="store_true")
    return ap


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seeds={args.seed}")
    for key in ("arm", "alpha", "recognizer"):
        if getattr(args, key) is not None:
            overrides.append(f"{key}={getattr(args, key)}")
    return cfg.with_overrides(overrides)


def run(cfg: ExperimentConfig, command: str) -> None:
    if command == "gen-data":
        print(ex.cmd_gen_data(cfg))
    elif command == "train-recognizers":
        for which, wer in ex.cmd_train_recognizers(cfg).items():
            print(f"recognizer {which}: clean WER {wer:.4f}")
    elif command == "pretrain":
        for seed in cfg.seeds:
            print(ex.cmd_pretrain(cfg, seed))
    elif command == "finetune":
        for seed in cfg.seeds:
            res = ex.cmd_finetune(cfg, seed)
            print(f"seed {seed} {res.tag}: {len(res.checkpoints)} checkpoints in {res.checkpoints[-1].parent}")
    elif command == "evaluate":
        tables = ex.cmd_evaluate(cfg)
        for seed, table in tables.items():
            for name, cp, d_cp, orc, d_orc, sd in table.records():
                print(f"seed {seed} {name:>14}  CP-WER {cp:6.3f} ({d_cp:+.3f})  ORC-WER {orc:6.3f} ({d_orc:+.3f})"
                      f"  SI-SDR {sd:7.2f}")
    elif command == "sweep-alpha":
        for alpha, cps in ex.cmd_sweep_alpha(cfg).items():
            print(f"alpha {alpha:.2f}: CP-WER per seed {', '.join(f'{v:.3f}' for v in cps)}")
    elif command == "sweep-tsl":
        for lim, secs in ex.cmd_sweep_tsl(cfg).items():
            print(f"tsl {lim:g}s: {sum(secs) / len(secs):.2f}s per ATE")
    elif command == "dump-logits":
        for seed in cfg.seeds:
            for tag, d in ex.cmd_dump_logits(cfg, seed).items():
                print(f"seed {seed} {tag}: mean AE distance {sum(d) / len(d):.4f} over {len(d)} items")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(asctime)s %(message)s")
    try:
        cfg = resolve_config(args)
        run(cfg, args.command)
    except (ConfigError, ex.MissingArtifact) as exc:
        print(f"gpitlab: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
