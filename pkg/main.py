"""
Command-line entry point

    python main.py solve       --config configs/kolmogorov.ini [--out DIR] [--seed S] [--threads K]
    python main.py simulate    --config ...
    python main.py verify      --config ... [--check NAME]...
    python main.py contraction --config ...

Exit codes: 0 ok, 1 verification failed, 2 configuration error,
3 solver failure (non-contraction, hypothesis or integrability violation),
4 simulation blow-up.
"""
import argparse
import sys
from pathlib import Path

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent))

from core.workflows import run_command
from models.run_config import KNOWN_CHECKS
from utils.logger import get_logger, setup_logging

logger = get_logger(__name__)

COMMANDS = {
    "solve": "fixed-point solve over [0, T] with cross-validation",
    "simulate": "direct simulation of the self-consistent particle system",
    "verify": "run the verification battery",
    "contraction": "measure the constants, size t0 and report the contraction rate",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qmkv",
        description="Quantile-dependent McKean-Vlasov solver and verification suite",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="run configuration (.ini)")
        cmd.add_argument("--out", default=None, help="output directory (overrides [output] dir)")
        cmd.add_argument("--seed", type=int, default=None, help="master seed (overrides [mc] seed)")
        cmd.add_argument("--threads", type=int, default=None, help="worker threads; 0 = one per core")
        cmd.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING")
        if name == "verify":
            cmd.add_argument("--check", action="append", default=None, metavar="NAME",
                             help=f"check to run (repeatable): {', '.join(KNOWN_CHECKS)}")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.log_level:
        setup_logging(log_level=args.log_level)
    logger.info(f"{args.command}: config={args.config}")
    return run_command(
        args.command,
        args.config,
        out=args.out,
        seed=args.seed,
        threads=args.threads,
        checks=getattr(args, "check", None),
    )


if __name__ == "__main__":
    sys.exit(main())
