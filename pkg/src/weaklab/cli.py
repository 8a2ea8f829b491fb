"""Command line entry point: gen-bags, train, compare, evaluate.

Every flat config key can be overridden with ``--<key> VALUE`` (for example
``--mixup.alpha 10``) after an optional ``--config FILE``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from weaklab import harness, ingest
from weaklab.bagcore import BagDataset
from weaklab.model import ModelError, load_checkpoint
from weaklab.sampling import ALL_STRATEGIES

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    group = p.add_argument_group("config overrides")
    for key in harness.config_keys():
        group.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE", default=None)


def _config_from(args: argparse.Namespace) -> harness.ExperimentConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    return harness.load_config(args.config, overrides)


def _int_list(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weaklab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-bags", help="build and serialize a bag dataset")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output JSON container")

    p = sub.add_parser("train", help="run one experiment")
    _add_config_flags(p)

    p = sub.add_parser("compare", help="compare sampling strategies over seeds")
    _add_config_flags(p)
    p.add_argument("--strategies", default=",".join(s.value for s in ALL_STRATEGIES))
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])

    p = sub.add_parser("evaluate", help="score a checkpoint on a bag dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bags", required=True, help="bag dataset container from gen-bags")
    p.add_argument("--split", choices=("eval", "train", "all"), default="eval")
    return parser


def _gen_bags(args) -> int:
    cfg = _config_from(args)
    ds = harness.build_dataset(cfg.dataset)
    ds.save(args.out)
    print(json.dumps(ds.to_dict()["header"]["counts"]))
    return EXIT_OK


def _train(args) -> int:
    cfg = _config_from(args)
    try:
        report = harness.run_experiment(cfg)
    except harness.ExperimentAborted as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"stop_epoch": report.stop_epoch, **report.final}, sort_keys=True))
    return EXIT_OK


def _compare(args) -> int:
    cfg = _config_from(args)
    out = cfg.output_dir or "runs/compare"
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    table = harness.compare_strategies(cfg.replace(output_dir=""), strategies, args.seeds, out)
    print(table.format())
    print(f"wrote {Path(out) / 'table.csv'}")
    return EXIT_OK


def _evaluate(args) -> int:
    params, header = load_checkpoint(args.checkpoint)
    ds = BagDataset.load(args.bags)
    ds = ds.with_instances(ingest.load_from_spec(ds.source))
    ids = {
        "eval": ds.eval_ids,
        "train": ds.positive_ids + ds.negative_ids,
        "all": tuple(range(ds.num_bags)),
    }[args.split]
    metrics = harness.evaluate_params(params, ds, ids, header["aggregation"])
    print(json.dumps({"split": args.split, "bags": len(ids), **metrics}, sort_keys=True))
    return EXIT_OK


COMMANDS = {"gen-bags": _gen_bags, "train": _train, "compare": _compare, "evaluate": _evaluate}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError, ArithmeticError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
