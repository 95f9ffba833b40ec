"""Command-line entry points: gen, train, eval, bench and attn-dump."""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd
from dotenv import load_dotenv

from focalcvae import env
from focalcvae.bench import LATENCY_PAIRS, run_bench
from focalcvae.checkpoint import load_checkpoint, save_checkpoint
from focalcvae.config import RunConfig, env_flag
from focalcvae.dataset import generate_dataset, read_dataset
from focalcvae.errors import ConfigurationError, FocalCVAEError, UsageError
from focalcvae.policy import FocalCVAEPolicy, loss_history_frame, train
from focalcvae.rng import Rng
from focalcvae.tensor import no_grad, set_debug

logger = logging.getLogger("focalcvae")

# Flag name -> RunConfig key for flags that override config values.
_OVERRIDES = {
    "seed": "seed",
    "degradation": "degradation",
    "modality": "modality",
    "episodes": "episodes",
    "length": "episode_length",
    "steps": "steps",
    "rollouts": "rollouts",
}


def write_csv(frame: pd.DataFrame, path: Path, config: RunConfig) -> None:
    """Comma-separated UTF-8 with LF endings; every row carries the config hash."""
    frame = frame.copy()
    frame.insert(0, "config_hash", config.config_hash)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        frame.to_csv(path, index=False, encoding="utf-8", lineterminator="\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
    logger.info("wrote %d rows to %s", len(frame), path)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    flags = {key: getattr(args, flag) for flag, key in _OVERRIDES.items() if getattr(args, flag, None) is not None}
    config = RunConfig.from_mapping(flags, config)
    logger.info("resolved config (%s):\n%s", config.config_hash, config.to_text().rstrip())
    return config


def load_policy(path: Path) -> Tuple[FocalCVAEPolicy, RunConfig]:
    state, text = load_checkpoint(path)
    config = RunConfig.from_text(text)
    policy = FocalCVAEPolicy(Rng(config.seed), config.policy_config())
    policy.load_state_dict(state)
    return policy, config


# ---- subcommands ----------------------------------------------------------


def cmd_gen(args: argparse.Namespace, config: RunConfig) -> None:
    if "," in config.degradation:
        raise UsageError("gen takes a single degradation")
    out = Path(args.out or f"data_{config.degradation}.fcvd")
    generate_dataset(out, config.episodes, config.episode_length, config.degradation, config.seed)


def cmd_train(args: argparse.Namespace, config: RunConfig) -> None:
    if not args.data:
        raise UsageError("train needs --data")
    data = read_dataset(args.data)
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(config.seed)
    policy = FocalCVAEPolicy(rng.fork(0), config.policy_config())
    logger.info("training %d parameters on %d frames (%s)", policy.num_parameters(), len(data), data.degradation)
    history = train(policy, data, config.train_config(), rng.fork(1))
    save_checkpoint(out / "policy.fcvp", policy, config.to_text())
    write_csv(loss_history_frame(history), out / "loss.csv", config)


def _policy_factory(kind: str, checkpoint: Optional[str], config: RunConfig, seed: int):
    if kind == "expert":
        return lambda state_ref: env.expert_policy(state_ref)
    if kind == "random":
        root = Rng(seed).fork(999)
        counter = iter(range(1 << 30))
        return lambda state_ref: env.random_policy(root.fork(next(counter)), config.chunk)
    if not checkpoint:
        raise UsageError("eval with the learned policy needs --checkpoint")
    policy, trained = load_policy(Path(checkpoint))
    if trained.modality != config.modality:
        raise ConfigurationError(f"checkpoint was trained on {trained.modality}, asked for {config.modality}")
    act = policy.as_chunk_policy()
    return lambda state_ref: act


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> None:
    factory = _policy_factory(args.policy, args.checkpoint, config, config.seed)
    rows = []
    for degradation in (d.strip() for d in config.degradation.split(",")):
        table = env.evaluate_policy(factory, config.rollouts, degradation, config.seed, config.episode_length)
        row = {"policy": args.policy, "modality": config.modality, **table.summary()}
        logger.info(
            "%s/%s/%s: touched %.0f%% lifted %.0f%% transferred %.0f%%",
            args.policy, config.modality, degradation,
            row["touched_pct"], row["lifted_pct"], row["transferred_pct"],
        )
        rows.append(row)
    write_csv(pd.DataFrame(rows), Path(args.out or "eval.csv"), config)


def cmd_bench(args: argparse.Namespace, config: RunConfig) -> None:
    result = run_bench(
        config.bench_policy_config(),
        config.seed,
        config.bench_length,
        config.bench_head_dim,
        config.bench_u,
        config.bench_warmup,
        config.bench_iters,
        key_sampling=config.bench_key_sampling,
        sample_factor=config.sample_factor,
    )
    out = Path(args.out or "bench")
    write_csv(result.flop_frame(), out / "flops.csv", config)
    write_csv(result.latency_frame(), out / "latency.csv", config)
    for report in result.flops:
        for note in report.notes:
            logger.warning("%s: %s", report.label, note)
    for ours, baseline in LATENCY_PAIRS:
        speedup = result.speedup(ours, baseline)
        if speedup > 1.0:
            logger.info("%s is %.2fx faster than %s", ours, speedup, baseline)
        else:
            logger.warning("%s is not faster than %s (%.2fx)", ours, baseline, speedup)


def cmd_attn_dump(args: argparse.Namespace, config: RunConfig) -> None:
    if not args.checkpoint:
        raise UsageError("attn-dump needs --checkpoint")
    if "," in config.degradation:
        raise UsageError("attn-dump takes a single degradation")
    policy, _ = load_policy(Path(args.checkpoint))
    rows: List[Dict[str, object]] = []

    def record(t: int, state: env.WorldState, frame: env.Frame) -> None:
        with no_grad():
            visual, _ = policy.observe(frame.rgb, frame.depth, frame.proprio)
        rows.append(
            {
                "episode": episode,
                "t": t,
                "phase": env.phase_label(state),
                "rgb_share": visual.rgb_share,
                "depth_share": visual.depth_share,
            }
        )

    act = policy.as_chunk_policy()
    root = Rng(config.seed)
    for episode in range(args.episodes_dump):
        state = env.reset(root.fork(episode), config.degradation)
        env.run_episode(state, act, config.episode_length, on_step=record)
    frame = pd.DataFrame(rows, columns=["episode", "t", "phase", "rgb_share", "depth_share"])
    frame.insert(0, "degradation", config.degradation)
    write_csv(frame, Path(args.out or "attention.csv"), config)


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "attn-dump": cmd_attn_dump,
}


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="key=value config file")
    shared.add_argument("--seed", type=int, help="64-bit run seed")
    shared.add_argument("--out", help="output file or directory")
    shared.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")

    parser = argparse.ArgumentParser(prog="focalcvae", description="Focal-CVAE bimanual imitation harness")
    sub = parser.add_subparsers(dest="command", required=True)
    degradations = ", ".join(env.DEGRADATIONS)

    gen = sub.add_parser("gen", parents=[shared], help="record expert episodes")
    gen.add_argument("--degradation", help=degradations)
    gen.add_argument("--episodes", type=int)
    gen.add_argument("--length", type=int)

    tr = sub.add_parser("train", parents=[shared], help="train a policy on a dataset")
    tr.add_argument("--data", help="dataset file from gen")
    tr.add_argument("--modality", choices=["rgb", "depth", "rgbd"])
    tr.add_argument("--steps", type=int)

    ev = sub.add_parser("eval", parents=[shared], help="phase success table")
    ev.add_argument("--checkpoint")
    ev.add_argument("--degradation", help=f"comma-separated from {degradations}")
    ev.add_argument("--modality", choices=["rgb", "depth", "rgbd"])
    ev.add_argument("--rollouts", type=int)
    ev.add_argument("--length", type=int)
    ev.add_argument("--policy", choices=["model", "expert", "random"], default="model")

    sub.add_parser("bench", parents=[shared], help="FLOP and latency comparison against dense attention")

    dump = sub.add_parser("attn-dump", parents=[shared], help="per-step modality attention shares")
    dump.add_argument("--checkpoint")
    dump.add_argument("--degradation", help=degradations)
    dump.add_argument("--length", type=int)
    dump.add_argument("--episodes", dest="episodes_dump", type=int, default=1)
    return parser


def configure_logging(level: Optional[str]) -> None:
    level = (level or os.environ.get("FOCALCVAE_LOG_LEVEL") or "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    if env_flag("FOCALCVAE_DEBUG"):
        set_debug(True)
        logger.info("debug mode: every op checks for non-finite outputs")
    try:
        config = resolve_config(args)
        COMMANDS[args.command](args, config)
    except (FocalCVAEError, OSError) as exc:
        logger.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
