"""
Command-line interface.

    python -m rads train     --config configs/default.toml --seed 0 --out runs/s0
    python -m rads eval      --config ... --checkpoint runs/s0/best.ckpt --seeds 0,1,2
    python -m rads ablate    --config ... --seeds 0,1,2
    python -m rads oracle    --config ... [--checkpoint ...] [--refine 3]
    python -m rads fit-codec --config ...
    python -m rads calibrate --config ...
    python -m rads serve     [--host 0.0.0.0] [--port 8000]

Every subcommand accepts `--set key.path=value` to override config values.
Exit codes follow rads.errors: 0 ok, 2 config, 3 numeric, 4 checkpoint.
"""

import argparse
import logging
import os
import sys

from dotenv import load_dotenv

from rads import __version__
from rads.errors import ConfigError, RadsError
from rads.harness import commands
from rads.harness.config import DEFAULT_CONFIG, load_config

logger = logging.getLogger(__name__)


def _seed_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rads", description="Reachability-aware steering of a toy denoiser.")
    parser.add_argument("--version", action="version", version=f"rads {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help=f"TOML run config (default: $RADS_CONFIG or {DEFAULT_CONFIG})")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config value by dotted path; repeatable")
    common.add_argument("--out", default=None, help="Output directory (default: out_dir from the config)")
    common.add_argument("--threads", type=int, default=1, help="Rollout worker threads; 1 is bitwise deterministic")
    common.add_argument("--codec", default=None, help="Load a fitted codec instead of refitting")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="Train the constrained agent")
    p.add_argument("--seed", type=int, default=None, help="Training seed (default: first of config seeds)")

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint or the unmitigated sampler")
    p.add_argument("--checkpoint", default=None, help="Agent checkpoint; omit for the zero-steering baseline")
    p.add_argument("--seeds", type=_seed_list, default=None, help="Initial-latent seeds, e.g. 0,1,2")
    p.add_argument("--captions", choices=commands.CAPTION_SETS, default="all")

    p = sub.add_parser("ablate", parents=[common], help="Constrained vs. lambda = 0 with identical seeds")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--seeds", type=_seed_list, default=None, help="Training seeds, e.g. 0,1,2")
    p.add_argument("--eval-seeds", type=int, default=7, help="Initial latents per triggered caption")

    p = sub.add_parser("oracle", parents=[common], help="Grid BRT oracle and critic agreement")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--caption", default=None, help="Base caption id (default: first triggered caption)")
    p.add_argument("--refine", type=int, default=0, help="Run a refinement study with this many grid levels")

    sub.add_parser("fit-codec", parents=[common], help="Fit and save the latent action codec")

    p = sub.add_parser("calibrate", parents=[common], help="Calibrate the guidance-norm threshold beta")
    p.add_argument("--seeds", type=_seed_list, default=None)

    p = sub.add_parser("serve", help="Run the HTTP steering service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def _run(args: argparse.Namespace) -> int:
    if args.command == "serve":
        import uvicorn

        uvicorn.run("rads.service.main:app", host=args.host, port=args.port)
        return 0

    config_path = args.config or os.getenv("RADS_CONFIG", DEFAULT_CONFIG)
    cfg = load_config(config_path, args.overrides)
    out = args.out or cfg.out_dir
    if args.threads < 1:
        raise ConfigError(f"--threads must be at least 1, got {args.threads}")

    if args.command == "train":
        seed = cfg.seeds[0] if args.seed is None else args.seed
        result = commands.cmd_train(cfg, seed, out, threads=args.threads, codec_path=args.codec)
        logger.info("Training finished: best epoch %d, score %s", result.best_epoch, result.best_score)
    elif args.command == "eval":
        result = commands.cmd_eval(
            cfg, out, checkpoint=args.checkpoint, seeds=args.seeds, captions=args.captions,
            threads=args.threads, codec_path=args.codec,
        )
        print(result.report.model_dump_json(indent=2))
    elif args.command == "ablate":
        seeds = args.seeds if args.seeds is not None else ([args.seed] if args.seed is not None else None)
        report = commands.cmd_ablate(
            cfg, out, seeds=seeds, eval_seeds=args.eval_seeds, threads=args.threads, codec_path=args.codec,
        )
        print(f"failure_rate_gap = {report['failure_rate_gap']:.4f}")
    elif args.command == "oracle":
        brt = commands.cmd_oracle(
            cfg, out, checkpoint=args.checkpoint, caption_id=args.caption, refine=args.refine, codec_path=args.codec,
        )
        print(f"brt_fraction_t0 = {float(brt.mask[0].mean()):.4f}")
    elif args.command == "fit-codec":
        commands.cmd_fit_codec(cfg, out)
    elif args.command == "calibrate":
        cal = commands.cmd_calibrate(cfg, out, seeds=args.seeds, codec_path=args.codec)
        print(f"beta = {cal.beta:.4f} (accuracy {cal.accuracy:.4f})")
    return 0


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    logging.basicConfig(
        level=os.getenv("RADS_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s [%(name)s] %(levelname)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except RadsError as exc:
        logger.debug("Command failed", exc_info=True)
        print(f"rads {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
