"""Command-line entry point.

Exit codes: 0 success, 1 invalid configuration or input, 2 runtime failure.
The data directory comes from ``dataset.data_dir`` or the ``FEDUHB_DATA_DIR``
environment variable (falling back to the packaged MNIST subset).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import config_schema, parse_config
from .errors import ConfigError, FedUHBError
from .pipeline import emit_report, run_experiment, standalone_attack, standalone_verify
from .unlearning import METHODS

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


def _load(args):
    text = Path(args.config).read_text() if args.config else "{}"
    cfg = parse_config(text)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _out(args, cfg) -> Path:
    return Path(args.out) if args.out else Path(cfg["output_dir"])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="feduhb", description="Federated training and unlearning experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", help="JSON config file (defaults when omitted)")
        sp.add_argument("--out", required=out_required, help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int, help="override the config seed")

    common(sub.add_parser("run", help="run every stage listed in the config"))
    common(sub.add_parser("train", help="federated training; writes model and round history"))
    sp = sub.add_parser("unlearn", help="unlearn the target clients with one method")
    common(sp)
    sp.add_argument("--method", choices=METHODS, required=True)
    sp.add_argument("--history", help="history directory from a train run (default <out>/history)")
    sp = sub.add_parser("attack", help="MIA and backdoor metrics for trained and unlearned models")
    common(sp)
    sp.add_argument("--kind", choices=("mia", "backdoor"),
                    help="single attack on --pre/--post checkpoints, JSON report to --out")
    sp.add_argument("--pre", help="pre-unlearning model checkpoint")
    sp.add_argument("--post", help="post-unlearning model checkpoint")
    common(sub.add_parser("verify-bound", help="check the divergence bound on a quadratic problem "
                                                "(--out may be a directory or a .csv path)"))
    sp = sub.add_parser("report", help="merge run directories into summary tables")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--out", required=True)
    sp.add_argument("--acc-threshold", type=float, default=0.8)
    sp.add_argument("--loss-threshold", type=float, default=1e-6)
    sub.add_parser("schema", help="print the config schema")
    return p


def _dispatch(args) -> int:
    if args.command == "schema":
        print(json.dumps(config_schema(), indent=2))
        return EXIT_OK
    if args.command == "report":
        tables = emit_report(args.runs, args.out, args.acc_threshold, args.loss_threshold)
        print(f"wrote {sum(len(t) for t in tables.values())} rows to {args.out}")
        return EXIT_OK
    cfg = _load(args)
    if args.command == "attack" and args.kind:
        if not (args.pre and args.post and args.out):
            raise ConfigError("--kind needs --pre, --post and --out")
        standalone_attack(cfg, args.kind, args.pre, args.post, args.out)
        print(f"wrote {args.out}")
        return EXIT_OK
    if args.command == "verify-bound" and args.out and args.out.endswith(".csv"):
        print(f"wrote {standalone_verify(cfg, args.out)}")
        return EXIT_OK
    stages = {"run": None, "train": ["train"], "unlearn": ["unlearn"], "attack": ["attack"],
              "verify-bound": ["verify"]}[args.command]
    methods = [args.method] if args.command == "unlearn" else None
    manifest = run_experiment(cfg, _out(args, cfg), stages=stages, methods=methods,
                              history_dir=getattr(args, "history", None))
    print(f"{', '.join(manifest.stages_completed)} complete; outputs in {_out(args, cfg)}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        # missing config or input files are user errors
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FedUHBError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
