"""Command line entry point.

Five subcommands cover the pipeline: ``gen-data`` renders a rollout
dataset, ``train`` fits the generator on it, ``sample`` rolls the
trained model forward from a conditioning frame, ``eval`` scores
predictions against ground truth, and ``extract-actions`` turns a
rollout into gripper waypoints.  All read one JSON config (``--config``,
merged over built-in defaults), with ``--seed`` and ``--out`` as
overrides; every command validates its inputs before creating any
output file and writes the merged effective config next to its outputs,
so re-running from that file reproduces them byte for byte.

Exit codes: 0 success, 2 malformed config or arguments, 3 missing or
malformed input artifacts, 4 numerical failure, 5 grounding failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as config_mod
from .actions import extract, oracle_suite, perceptual_suite, save_actions, save_diagnostics
from .errors import (
    ConfigError,
    FormatError,
    GroundingError,
    MissingInputError,
    NumericalError,
)
from .metrics import evaluate_rollout, metrics_csv
from .model import (
    build_training_set,
    generate,
    load_checkpoint,
    loss_csv,
    save_checkpoint,
    train,
)
from .scenes import (
    MANIFEST_NAME,
    InstructionId,
    build_random_scene,
    generate_rollout,
    load_predicted,
    load_rollout,
    rollout_kind,
    save_predicted,
    save_rollout,
)

_EXIT_CODES = (
    (ConfigError, 2),
    (MissingInputError, 3),  # FormatError is a subclass
    (NumericalError, 4),
    (GroundingError, 5),
)


# ---------------------------------------------------------------------------
# Shared plumbing


def _load_run(args) -> config_mod.RunConfig:
    raw = config_mod.default_config()
    if args.config is not None:
        raw = config_mod.merge_config(raw, config_mod.load_config(args.config))
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["out_dir"] = args.out
    return config_mod.build_run_config(raw)


def _rollout_dirs(path: str | Path) -> list:
    """The rollout directories under path; path itself if it is one."""
    root = Path(path)
    if (root / MANIFEST_NAME).is_file():
        return [root]
    if not root.is_dir():
        raise MissingInputError(f"{root}: no such directory")
    dirs = sorted(d for d in root.iterdir() if (d / MANIFEST_NAME).is_file())
    if not dirs:
        raise MissingInputError(f"{root}: contains no rollout directories")
    return dirs


def _prepare_out(run: config_mod.RunConfig) -> Path:
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.save_effective(run, out)
    return out


def _write_grid(path: Path, rgb: np.ndarray, depth: np.ndarray) -> None:
    """One PNG: frames left to right, color on top, normalized depth below."""
    frames = (np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0) * 255).round().astype(np.uint8)
    d = np.asarray(depth, dtype=np.float64)
    valid = d > 0
    if valid.any():
        lo, hi = d[valid].min(), d[valid].max()
        span = hi - lo if hi > lo else 1.0
        gray = np.where(valid, (d - lo) / span, 0.0)
    else:
        gray = np.zeros_like(d)
    gray8 = (gray * 255).round().astype(np.uint8)
    n, h, w, _ = frames.shape
    grid = np.zeros((2 * h, n * w, 3), dtype=np.uint8)
    for t in range(n):
        grid[:h, t * w : (t + 1) * w] = frames[t]
        grid[h:, t * w : (t + 1) * w] = gray8[t][..., None]
    Image.fromarray(grid).save(path)


# ---------------------------------------------------------------------------
# Subcommands


def _gen_one(scene_cfg, out_dir: str) -> str:
    save_rollout(generate_rollout(scene_cfg), out_dir)
    return out_dir


def _cmd_gen_data(args, run: config_mod.RunConfig) -> int:
    count = args.count if args.count is not None else run.dataset_count
    if count < 1:
        raise ConfigError(f"rollout count must be positive, got {count}")
    configs = [build_random_scene(run.seed + i, run.scene) for i in range(count)]
    for cfg in configs:
        cfg.validate()

    out = _prepare_out(run)
    targets = [str(out / f"rollout_{i:03d}") for i in range(count)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(_gen_one, configs, targets))
    else:
        for cfg, target in zip(configs, targets):
            _gen_one(cfg, target)
    print(f"wrote {count} rollouts to {out}")
    return 0


def _cmd_train(args, run: config_mod.RunConfig) -> int:
    if run.teacher_variant != "oracle":
        raise ConfigError("training from the command line supports only the oracle teacher")
    rollouts = [load_rollout(d) for d in _rollout_dirs(args.dataset)]
    dataset = build_training_set(rollouts, run.model, seed=run.seed)
    params, curve = train(dataset, run.model, run.optimizer, run.seed)

    out = _prepare_out(run)
    save_checkpoint(
        out / "checkpoint.bin",
        params,
        step=len(curve),
        extra={"teacher": dataset.teacher_spec.to_dict()},
    )
    (out / "loss.csv").write_text(loss_csv(curve))
    print(f"trained {len(curve)} steps on {len(rollouts)} rollouts; final loss {curve[-1][1]:.6f}")
    print(f"checkpoint and loss curve in {out}")
    return 0


def _cmd_sample(args, run: config_mod.RunConfig) -> int:
    params, _, _ = load_checkpoint(args.checkpoint)
    roll = load_rollout(args.scene)
    instruction = roll.instruction
    if args.task is not None or args.target is not None:
        if args.task is None or args.target is None:
            raise ConfigError("--task and --target must be given together")
        instruction = InstructionId(task_id=args.task, target_object_id=args.target)
    steps = args.steps if args.steps is not None else run.sampling_steps
    if steps < 1:
        raise ConfigError(f"sampling steps must be positive, got {steps}")

    frame0 = roll.frames[0]
    pred = generate(
        frame0.rgb,
        frame0.depth.values,
        instruction,
        params,
        steps=steps,
        seed=run.seed,
        intrinsics=roll.config.intrinsics,
        source_config=roll.config,
    )
    out = _prepare_out(run)
    save_predicted(pred, out)
    _write_grid(out / "grid.png", pred.rgb, pred.depth)
    print(f"sampled {pred.n_frames} frames ({steps} integration steps) into {out}")
    return 0


def _eval_one(pred_dir: str, gt_dir: str, align: bool, budget: int, seed: int, tracker):
    kind = rollout_kind(pred_dir)
    pred = load_predicted(pred_dir) if kind == "generated" else load_rollout(pred_dir)
    gt = load_rollout(gt_dir)
    report = evaluate_rollout(
        pred, gt, align_depth=align, cloud_budget=budget, seed=seed, tracker=tracker
    )
    return Path(pred_dir).name, report


def _cmd_eval(args, run: config_mod.RunConfig) -> int:
    pred_dirs = _rollout_dirs(args.pred)
    gt_dirs = _rollout_dirs(args.gt)
    if len(pred_dirs) != len(gt_dirs):
        raise MissingInputError(
            f"prediction dir has {len(pred_dirs)} rollouts, ground truth has {len(gt_dirs)}"
        )
    jobs = [
        (str(p), str(g), run.align_depth, run.cloud_budget, run.seed, run.tracker)
        for p, g in zip(pred_dirs, gt_dirs)
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            named = list(pool.map(_eval_one, *zip(*jobs)))
    else:
        named = [_eval_one(*job) for job in jobs]

    csv = metrics_csv(named)
    out = _prepare_out(run)
    (out / "metrics.csv").write_text(csv)
    sys.stdout.write(csv)
    return 0


def _cmd_extract_actions(args, run: config_mod.RunConfig) -> int:
    kind = rollout_kind(args.rollout)
    if kind == "ground_truth":
        roll = load_rollout(args.rollout)
        if args.suite == "perceptual":
            suite = perceptual_suite(roll.config, run.tracker)
        else:
            suite = oracle_suite(roll)
    elif kind == "generated":
        if args.suite == "oracle":
            raise ConfigError("oracle backends need a ground-truth rollout, not a generated one")
        roll = load_predicted(args.rollout)
        if roll.source_config is None:
            raise ConfigError(f"{args.rollout}: generated rollout carries no source scene")
        suite = perceptual_suite(roll.source_config, run.tracker)
    else:
        raise FormatError(f"{args.rollout}: unknown rollout kind {kind!r}")

    result = extract(roll, suite, run.extraction)
    out = _prepare_out(run)
    save_actions(result.actions, out / "actions.json")
    save_diagnostics(result.diagnostics, result.trajectory, out / "extraction_log.json")
    n_filled = sum(1 for p in result.trajectory.provenance if p != "accepted")
    print(
        f"extracted {len(result.actions)} waypoints "
        f"({n_filled} of {result.trajectory.n_frames} frames fallback-filled) into {out}"
    )
    return 0


# ---------------------------------------------------------------------------
# Parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geowm",
        description="Geometry-supervised world model: data, training, sampling, "
        "evaluation, and action extraction.",
        epilog="Exit codes: 2 bad config, 3 missing/malformed input, "
        "4 numerical failure, 5 grounding failure.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run config merged over defaults")
    common.add_argument("--seed", type=int, metavar="N", help="override the config seed")
    common.add_argument("--out", metavar="DIR", help="override the config output directory")

    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[common], help="render a dataset of scripted rollouts")
    p.add_argument("--count", type=int, metavar="N", help="number of rollouts (default from config)")
    p.add_argument("--jobs", type=int, default=1, metavar="N", help="parallel renderers")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="fit the generator on a dataset")
    p.add_argument("dataset", help="dataset directory from gen-data")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sample", parents=[common], help="roll the model forward from a first frame")
    p.add_argument("checkpoint", help="checkpoint file from train")
    p.add_argument("scene", help="ground-truth rollout directory supplying the first frame")
    p.add_argument("--steps", type=int, metavar="N", help="integration steps (default from config)")
    p.add_argument("--task", type=int, metavar="ID", help="override the task id")
    p.add_argument("--target", type=int, metavar="ID", help="override the target object id")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p.add_argument("pred", help="predicted rollout directory (or parent of several)")
    p.add_argument("gt", help="ground-truth rollout directory (or parent of several)")
    p.add_argument("--jobs", type=int, default=1, metavar="N", help="parallel scoring workers")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser(
        "extract-actions", parents=[common], help="recover gripper waypoints from a rollout"
    )
    p.add_argument("rollout", help="rollout directory (ground truth or generated)")
    p.add_argument(
        "--suite",
        choices=("auto", "oracle", "perceptual"),
        default="auto",
        help="perception backends (auto: oracle for ground truth, perceptual for generated)",
    )
    p.set_defaults(func=_cmd_extract_actions)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        run = _load_run(args)
        return args.func(args, run)
    except tuple(exc for exc, _ in _EXIT_CODES) as e:
        for exc, code in _EXIT_CODES:
            if isinstance(e, exc):
                print(f"geowm {args.command}: {e}", file=sys.stderr)
                return code
        raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
