"""``crossreg`` command line.

Exit status: 0 on success, 1 on contract, configuration or file-format
errors, 2 on numerical failure (non-finite loss).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .errors import CrossregError, NumericalError

log = logging.getLogger("crossreg")


def _cmd_config(args):
    from .io import default_config

    print(json.dumps(default_config(), indent=2))


def _cmd_synth(args):
    from .io import load_config, write_dataset

    cfg = load_config(args.config)
    n_pairs = args.pairs if args.pairs is not None else cfg["data"]["n_pairs"]
    n_test = args.test if args.test is not None else min(cfg["data"]["n_test"], n_pairs)
    seed = args.seed if args.seed is not None else cfg["data"]["seed"]
    m = write_dataset(args.out, cfg["phantom"], n_pairs, seed, n_test)
    print(f"wrote {len(m['pairs'])} pairs to {args.out}")


def _cmd_train(args):
    from dataclasses import replace

    from .io import load_config, load_pairs
    from .training import train

    cfg = load_config(args.config)
    tc = cfg["train"]
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    if args.iterations is not None:
        tc = replace(tc, iterations=args.iterations)
    _, pairs = load_pairs(args.data, "train")
    log_path = args.log or os.path.splitext(args.out)[0] + ".log.tsv"

    def progress(row):
        if row["iter"] % args.print_every == 0:
            log.info("iter %d total %.5f", row["iter"], row["total"])

    res = train(tc, pairs, checkpoint_path=args.out, log_path=log_path, resume=args.resume, progress=progress)
    print(f"trained {tc.variant} to iteration {res.iteration}; checkpoint {args.out}, log {log_path}")


def _cmd_eval(args):
    from .io import load_config, load_pairs
    from .training import evaluate

    ev = load_config(args.config)["eval"]
    selection = args.output_selection or ev["output_selection"]
    window = args.window if args.window is not None else ev["window"]
    names, pairs = load_pairs(args.data, args.split or ev["split"])
    report = evaluate(args.ckpt, pairs, selection, window, args.identity or ev["include_identity"], names)
    _write_report(report, args.report)


def _write_report(report, path):
    text = report.to_text()
    with open(path, "w") as fh:
        fh.write(text)
    with open(os.path.splitext(path)[0] + ".tsv", "w") as fh:
        fh.write(report.to_tsv())
    print(text)


def _cmd_warp(args):
    from .io import read_volume, write_volume
    from .warping import warp_labels, warp_volume

    moving, spacing = read_volume(args.moving)
    dvf, _ = read_volume(args.dvf)
    if dvf.ndim != 4 or dvf.shape[1:] != moving.shape:
        from .errors import ShapeError

        raise ShapeError(f"DVF {dvf.shape} does not match moving volume {moving.shape}")
    if args.labels:
        out = warp_labels(moving, dvf).astype(np.uint8)
    else:
        out = warp_volume(moving.astype(np.float32), dvf).astype(np.float32)
    write_volume(args.out, out, spacing)


def _cmd_metrics(args):
    from .io import read_volume
    from .metrics import STRUCTURES, MetricsReport, evaluate_case

    pred, spacing = read_volume(args.pred)
    truth, _ = read_volume(args.truth)
    if pred.shape != truth.shape:
        from .errors import ShapeError

        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    report = MetricsReport()
    report.add_case(args.method, args.path, os.path.basename(args.pred),
                    evaluate_case(pred, truth, spacing, STRUCTURES[: args.num_structures]))
    _write_report(report, args.report)


def _cmd_gradcheck(args):
    from . import gradsuite
    from .autodiff import set_backend

    if args.backend:
        set_backend(args.backend)

    def show(r):
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<18} max rel err {r.max_error:.2e} "
              f"({r.elements} elements, {r.seconds:.2f}s)")

    results = gradsuite.run(seed=args.seed, report=show)
    bad = [r.name for r in results if not r.passed]
    if bad:
        print(f"{len(bad)} case(s) failed: {', '.join(bad)}")
        return 1
    print(f"all {len(results)} cases below {gradsuite.TOLERANCE:g}")
    return 0


def _cmd_experiment(args):
    from . import experiment

    cfg = experiment.ExperimentConfig(seed=args.seed, iterations=args.iterations)
    if args.variants:
        cfg.variants = tuple(args.variants)
    summary = experiment.run(cfg, args.out, progress=lambda m: print(m, flush=True))
    for name, c in summary["criteria"].items():
        print(f"{'PASS' if c['pass'] else 'FAIL'} {name}: {c['detail']}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crossreg", description="joint registration and segmentation networks")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded kernels (same as CROSSREG_DETERMINISTIC=1)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("config", help="print the default configuration")
    s.set_defaults(fn=_cmd_config)

    s = sub.add_parser("synth", help="generate a phantom dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--pairs", type=int)
    s.add_argument("--test", type=int, help="number of held-out pairs (default from config)")
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=_cmd_synth)

    s = sub.add_parser("train", help="train a network on a dataset's training split")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="loss log (default: next to the checkpoint)")
    s.add_argument("--seed", type=int)
    s.add_argument("--iterations", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--print-every", type=int, default=50)
    s.set_defaults(fn=_cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on held-out pairs")
    s.add_argument("--config")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--split", help="manifest split to evaluate (default test)")
    s.add_argument("--output-selection", choices=("both", "segmentation", "registration"))
    s.add_argument("--window", type=int, help="inference window (default: whole volume)")
    s.add_argument("--identity", action="store_true", help="also report the unwarped moving labels")
    s.set_defaults(fn=_cmd_eval)

    s = sub.add_parser("warp", help="warp a volume with a displacement field")
    s.add_argument("--moving", required=True)
    s.add_argument("--dvf", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--labels", action="store_true", help="nearest-neighbour label warping")
    s.set_defaults(fn=_cmd_warp)

    s = sub.add_parser("metrics", help="compare a label volume with ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--method", default="Prediction")
    s.add_argument("--path", default="Segmentation")
    s.add_argument("--num-structures", type=int, default=5)
    s.set_defaults(fn=_cmd_metrics)

    s = sub.add_parser("gradcheck", help="finite-difference check of all differentiable ops")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--backend", choices=("numpy", "torch", "auto"))
    s.set_defaults(fn=_cmd_gradcheck)

    s = sub.add_parser("experiment", help="train and compare all variants on phantoms")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--iterations", type=int, default=2000)
    s.add_argument("--variants", nargs="+")
    s.set_defaults(fn=_cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    if args.deterministic:
        os.environ["CROSSREG_DETERMINISTIC"] = "1"
    try:
        rc = args.fn(args)
    except NumericalError as e:
        print(f"crossreg: numerical failure: {e}", file=sys.stderr)
        return 2
    except (CrossregError, ValueError, OSError) as e:
        print(f"crossreg: {e}", file=sys.stderr)
        return 1
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
