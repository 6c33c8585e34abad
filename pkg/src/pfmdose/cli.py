"""Command-line entry point.

Exit codes: 0 success, 2 usage, 3 configuration, 4 numerical failure,
1 gradient check failure. Every command ends by printing one
``key=value`` summary line on stdout.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time

from . import ablation, gradcheck, kernels, networks
from .errors import ConfigError, FormatError, GenerationError, NumericalError
from .evaluation import evaluate_network, evaluate_predictions, write_eval_outputs
from .phantom import SPEC_NAMES, builtin_spec, generate_dataset, load_dataset
from .training import load_config, train_agg, train_infer

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3, 4


def _summary(**pairs) -> None:
    print(" ".join(f"{k}={v}" for k, v in pairs.items()), flush=True)


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _write_run_record(path: str, **fields) -> None:
    with open(path, "w") as fh:
        for key, value in fields.items():
            fh.write(f"{key}={value}\n")


def cmd_gen_data(args) -> int:
    spec = builtin_spec(args.spec, seed=args.seed, image_size=args.image_size)
    manifest = generate_dataset(spec, args.n, args.out, start=args.start)
    _summary(command="gen-data", spec=spec.name, n=args.n, manifest=manifest, spec_fingerprint=spec.fingerprint())
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_dir = cfg.out_dir or os.path.join(os.path.dirname(os.path.abspath(args.config)), f"run_{args.stage}")
    started = time.time()
    if args.stage == "agg":
        if not cfg.source_dir or not cfg.target_dir:
            raise ConfigError("stage agg needs source_dir and target_dir")
        net, history = train_agg(cfg, load_dataset(cfg.source_dir), load_dataset(cfg.target_dir), out_dir=out_dir)
    else:
        if not cfg.target_dir:
            raise ConfigError("stage infer needs target_dir")
        agg = None
        if cfg.init_from_agg or cfg.use_dtl:
            if not cfg.agg_checkpoint or not os.path.isdir(cfg.agg_checkpoint):
                raise ConfigError(f"stage infer needs an existing agg_checkpoint, got {cfg.agg_checkpoint!r}")
            agg = networks.load_checkpoint(cfg.agg_checkpoint)
            if not isinstance(agg, networks.AggNetwork):
                raise ConfigError(f"{cfg.agg_checkpoint} is not an Agg checkpoint")
        net, history = train_infer(cfg, agg, load_dataset(cfg.target_dir), out_dir=out_dir)
    snapshot = os.path.join(out_dir, f"{args.stage}_config.txt")
    with open(snapshot, "w") as fh:
        fh.write(cfg.to_text())
    record = os.path.join(out_dir, f"{args.stage}_run.txt")
    loss_csv = os.path.join(out_dir, f"{args.stage}_loss.csv")
    checkpoint = os.path.join(out_dir, f"{args.stage}_checkpoint")
    _write_run_record(
        record,
        config=snapshot,
        seed=cfg.seed,
        loss_history=loss_csv,
        checkpoint=checkpoint,
        metrics="",
        wall_clock_s=f"{time.time() - started:.3f}",
    )
    _summary(command="train", stage=args.stage, steps=len(history), final_loss=repr(history[-1].l_total),
             loss_csv=loss_csv, checkpoint=checkpoint, record=record)
    return EXIT_OK


def cmd_eval(args) -> int:
    cases = load_dataset(args.data)
    if args.identity:
        result = evaluate_predictions(cases, [c.dose for c in cases])
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint (or --identity)")
        result = evaluate_network(networks.load_checkpoint(args.checkpoint), cases)
    paths = write_eval_outputs(result, args.out)
    _summary(command="eval", cases=len(cases), mean_l1=repr(result.mean_l1),
             ape_fallbacks=len(result.ape.absolute_fallbacks), metrics=paths["metrics_pred"], ape=paths["ape"])
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    out_dir = args.out or cfg.out_dir or "ablation_out"
    summary = ablation.run_ablation(cfg, args.rows, seeds, out_dir, folds=args.folds)
    medians = ",".join(f"{lb}:{summary.median_l1(lb):.6f}" for lb in summary.labels)
    _summary(command="ablate", rows=",".join(summary.labels), seeds=len(seeds),
             comparison=os.path.join(out_dir, "ablation.csv"), median_l1=medians)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(seed=args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} err={r.error:.3e} tol={r.tol:.0e}")
    failed = [r.name for r in results if not r.passed]
    families = {gradcheck.op_family(r) for r in results}
    _summary(command="gradcheck", checks=len(results), families=len(families), failed=",".join(failed) or "none",
             backend=kernels.BACKEND)
    return EXIT_FAIL if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfmdose", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    p.add_argument("--spec", required=True, choices=SPEC_NAMES)
    p.add_argument("--n", required=True, type=_positive_int)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the spec's default seed")
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--start", type=int, default=0, help="first case index")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train Agg (stage 1) or Infer (stage 2)")
    p.add_argument("--stage", required=True, choices=("agg", "infer"))
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="dosimetric evaluation of a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--identity", action="store_true", help="score the ground truth against itself")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run ablation rows a,b,c,star,d,e")
    p.add_argument("--config", required=True)
    p.add_argument("--rows", required=True, type=_rows_arg)
    p.add_argument("--seeds", default="", help="comma-separated seeds (default: config seed)")
    p.add_argument("--folds", type=int, default=1, help="k-fold over the target set (1 = use held-out split)")
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and objective")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _rows_arg(text: str) -> list[str]:
    try:
        return ablation.parse_rows(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
