"""
morphguard command line.

    python -m cli.main gen-data  --config configs/toy.json
    python -m cli.main train     --config configs/toy.json --workers 4
    python -m cli.main adv-train --config configs/toy.json
    python -m cli.main attack    --config configs/toy.json
    python -m cli.main eval      --config configs/toy.json --out runs/toy

Exit codes: 0 success, 1 usage/config/path error, 2 runtime numeric failure.
"""

import argparse
import logging
import sys
from typing import Callable, Dict, List, Optional

from cli.commands.adv_train import cmd_adv_train
from cli.commands.attack import cmd_attack
from cli.commands.common import RunContext, make_context
from cli.commands.eval import cmd_eval
from cli.commands.gen_data import cmd_gen_data
from cli.commands.train import cmd_train
from cli.config import settings
from cli.error_handler import EXIT_USAGE, run_guarded
from cli.schemas import load_config

logger = logging.getLogger(__name__)

COMMANDS: Dict[str, Callable[[RunContext], None]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "adv-train": cmd_adv_train,
    "attack": cmd_attack,
    "eval": cmd_eval,
}

HELP = {
    "gen-data": "generate the synthetic morph dataset (MGD1)",
    "train": "clean-train every detector and the fusion head",
    "adv-train": "multi-perturbation adversarial training of the ensemble",
    "attack": "craft attacks, write the attack log and the transfer matrix",
    "eval": "AUC, APCER/BPCER operating points, D-EER and DET curves, clean and attacked",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=settings.APP_NAME,
        description="Robust ensemble morph-attack detection experiments.",
        epilog="Defaults not fixed by the training recipe (model sizes, dataset sizes, "
               "fusion head width, attack step counts) are toy-scale artifact choices.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.APP_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in HELP.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None,
                       help=f"output root (default: config out_dir, else $MORPHGUARD_OUT_ROOT or {settings.OUT_ROOT})")
        p.add_argument("--workers", type=int, default=None,
                       help=f"thread cap (default: config workers, else $MORPHGUARD_WORKERS or {settings.WORKERS})")
        p.add_argument("--log-level", default=settings.LOG_LEVEL,
                       choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser


def run(args: argparse.Namespace) -> None:
    config = load_config(args.config, overrides={"seed": args.seed})
    ctx = make_context(args.command, config, out=args.out, workers=args.workers)
    logger.info(f"{args.command}: seed {ctx.seed}, output {ctx.stage_dir()}, {ctx.workers} worker(s)")
    COMMANDS[args.command](ctx)
    ctx.write_manifest()


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    if args.workers is not None and args.workers < 1:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format=settings.LOG_FORMAT,
    )
    return run_guarded(lambda: run(args))


if __name__ == "__main__":
    sys.exit(main())
