"""Run configuration for the command line.

One JSON document drives every subcommand.  Top-level sections map onto
the library's own config types; omitted keys take the defaults below.
Each command writes the fully merged document next to its outputs, so a
run can be reproduced from its artifacts alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

from .actions import ExtractionConfig, FallbackConfig, GateConfig
from .errors import ConfigError, FormatError, MissingInputError
from .model import ModelConfig, OptimizerConfig
from .scenes import SceneFamily
from .tracking import TrackerConfig

_SECTIONS = (
    "seed",
    "out_dir",
    "dataset",
    "scene",
    "model",
    "optimizer",
    "sampling",
    "teacher",
    "extraction",
    "tracker",
    "metrics",
)


def default_config() -> dict:
    """Fresh copy of the built-in defaults, JSON-shaped."""
    return {
        "seed": 0,
        "out_dir": "runs/latest",
        "dataset": {"count": 4},
        "scene": SceneFamily().to_dict(),
        "model": ModelConfig().to_dict(),
        "optimizer": asdict(OptimizerConfig()),
        "sampling": {"steps": 20},
        "teacher": {"variant": "oracle"},
        "extraction": asdict(ExtractionConfig()),
        "tracker": asdict(TrackerConfig()),
        "metrics": {"align_depth": True, "cloud_budget": 2048},
    }


def merge_config(base: dict, override: dict) -> dict:
    """Recursive merge; override scalars win, nested objects merge key-wise."""
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge_config(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"{path}: no such config file")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: config root must be an object")
    return raw


@dataclass(frozen=True)
class RunConfig:
    """Typed view of one merged config document."""

    seed: int
    out_dir: str
    dataset_count: int
    scene: SceneFamily
    model: ModelConfig
    optimizer: OptimizerConfig
    sampling_steps: int
    teacher_variant: str
    extraction: ExtractionConfig
    tracker: TrackerConfig
    align_depth: bool
    cloud_budget: int


def _section(raw: dict, key: str) -> dict:
    value = raw.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(f"config section {key!r} must be an object")
    return value


def _build(cls, kwargs: dict, where: str):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError, ConfigError) as e:
        raise ConfigError(f"config section {where!r}: {e}") from e


def build_run_config(raw: dict) -> RunConfig:
    """Validate a merged document and bind it to the library's types."""
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")

    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}")
    out_dir = raw.get("out_dir", "runs/latest")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("out_dir must be a nonempty string")

    dataset = _section(raw, "dataset")
    count = dataset.get("count", 4)
    if isinstance(count, bool) or not isinstance(count, int) or count < 1:
        raise ConfigError(f"dataset.count must be a positive integer, got {count!r}")

    sampling = _section(raw, "sampling")
    steps = sampling.get("steps", 20)
    if isinstance(steps, bool) or not isinstance(steps, int) or steps < 1:
        raise ConfigError(f"sampling.steps must be a positive integer, got {steps!r}")

    teacher = _section(raw, "teacher")
    variant = teacher.get("variant", "oracle")
    if variant not in ("oracle", "file"):
        raise ConfigError(f"teacher.variant must be 'oracle' or 'file', got {variant!r}")

    ex_raw = _section(raw, "extraction")
    gate = _build(GateConfig, _section(ex_raw, "gate"), "extraction.gate")
    fallback = _build(FallbackConfig, _section(ex_raw, "fallback"), "extraction.fallback")
    rest = {k: v for k, v in ex_raw.items() if k not in ("gate", "fallback")}
    extraction = _build(
        ExtractionConfig, {**rest, "gate": gate, "fallback": fallback}, "extraction"
    )

    met = _section(raw, "metrics")
    unknown_met = sorted(set(met) - {"align_depth", "cloud_budget"})
    if unknown_met:
        raise ConfigError(f"unknown metrics keys: {', '.join(unknown_met)}")
    budget = met.get("cloud_budget", 2048)
    if isinstance(budget, bool) or not isinstance(budget, int) or budget < 1:
        raise ConfigError(f"metrics.cloud_budget must be a positive integer, got {budget!r}")

    return RunConfig(
        seed=seed,
        out_dir=out_dir,
        dataset_count=count,
        scene=_build(SceneFamily, _section(raw, "scene"), "scene"),
        model=_build(ModelConfig, _section(raw, "model"), "model"),
        optimizer=_build(OptimizerConfig, _section(raw, "optimizer"), "optimizer"),
        sampling_steps=steps,
        teacher_variant=variant,
        extraction=extraction,
        tracker=_build(TrackerConfig, _section(raw, "tracker"), "tracker"),
        align_depth=bool(met.get("align_depth", True)),
        cloud_budget=budget,
    )


def effective_config(run: RunConfig) -> dict:
    """The full document a RunConfig was built from; reload-identical."""
    return {
        "seed": run.seed,
        "out_dir": run.out_dir,
        "dataset": {"count": run.dataset_count},
        "scene": run.scene.to_dict(),
        "model": run.model.to_dict(),
        "optimizer": asdict(run.optimizer),
        "sampling": {"steps": run.sampling_steps},
        "teacher": {"variant": run.teacher_variant},
        "extraction": asdict(run.extraction),
        "tracker": asdict(run.tracker),
        "metrics": {"align_depth": run.align_depth, "cloud_budget": run.cloud_budget},
    }


def save_effective(run: RunConfig, out_dir: str | Path) -> Path:
    path = Path(out_dir) / "effective_config.json"
    path.write_text(json.dumps(effective_config(run), sort_keys=True, indent=1) + "\n")
    return path
