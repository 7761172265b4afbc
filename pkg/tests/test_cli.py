"""Command line contract: artifacts, exit codes, determinism.

Covers the five subcommands end to end at a tiny scale (32x32, 8
frames, 60 optimizer steps).  The pinned behaviors: every command
validates its inputs before creating any output file, writes the merged
effective config next to its outputs, reproduces its outputs byte for
byte when re-run from that file, and maps failures onto exit codes
2 (config), 3 (missing or malformed input), 4 (numerical),
5 (grounding).

Most tests drive ``cli.main`` in process; one subprocess test pins the
installed ``geowm`` entry point.  The expensive train step runs once in
a session fixture and its artifacts are shared.
"""

import dataclasses
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from geowm import cli
from geowm.actions import load_actions
from geowm.config import build_run_config
from geowm.scenes import (
    SceneFamily,
    build_random_scene,
    generate_rollout,
    load_predicted,
    save_rollout,
)

N_ROLLOUTS = 3
TRAIN_STEPS = 60


@pytest.fixture(scope="session")
def test_config(tmp_path_factory) -> str:
    cfg = {
        "seed": 0,
        "dataset": {"count": N_ROLLOUTS},
        "scene": {
            "height": 32, "width": 32, "n_frames": 8, "patch_size": 8,
            "min_objects": 1, "max_objects": 2, "tracks_per_object": 4,
        },
        "model": {
            "n_frames": 8, "height": 32, "width": 32, "patch_size": 8,
            "latent_dim": 48, "channels": 32, "backbone_depth": 2,
            "geometry_depth": 1, "n_heads": 2, "mid_layer": 1,
        },
        "optimizer": {"steps": TRAIN_STEPS, "batch_size": 2},
        "sampling": {"steps": 6},
    }
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="session")
def pipeline(test_config, tmp_path_factory):
    """Artifacts from one full command chain, shared across tests."""
    root = tmp_path_factory.mktemp("pipeline")
    data, run, pred, evald, acts = (str(root / n) for n in ("data", "run", "pred", "eval", "acts"))
    assert cli.main(["gen-data", "--config", test_config, "--out", data]) == 0
    assert cli.main(["train", "--config", test_config, "--out", run, data]) == 0
    ckpt = f"{run}/checkpoint.bin"
    scene = f"{data}/rollout_000"
    assert cli.main(["sample", "--config", test_config, "--out", pred, ckpt, scene]) == 0
    assert cli.main(["eval", "--config", test_config, "--out", evald, pred, scene]) == 0
    assert cli.main(["extract-actions", "--config", test_config, "--out", acts, scene]) == 0
    return {"config": test_config, "data": data, "run": run, "pred": pred,
            "eval": evald, "acts": acts, "ckpt": ckpt, "scene": scene}


def _hash_tree(root: str) -> dict:
    out = {}
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


# ---------------------------------------------------------------------------
# Artifacts


def test_gen_data_writes_rollouts_and_effective_config(pipeline):
    data = Path(pipeline["data"])
    dirs = sorted(d.name for d in data.iterdir() if d.is_dir())
    assert dirs == [f"rollout_{i:03d}" for i in range(N_ROLLOUTS)]
    for d in dirs:
        assert (data / d / "manifest.json").is_file()
    eff = json.loads((data / "effective_config.json").read_text())
    assert build_run_config(eff).dataset_count == N_ROLLOUTS


def test_train_writes_checkpoint_and_loss_curve(pipeline):
    assert Path(pipeline["ckpt"]).is_file()
    lines = Path(pipeline["run"], "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss,loss_vid,loss_geo"
    assert len(lines) == 1 + TRAIN_STEPS
    losses = [float(row.split(",")[1]) for row in lines[1:]]
    assert all(np.isfinite(losses))


def test_sample_writes_prediction_and_frame_grid(pipeline):
    pred = load_predicted(pipeline["pred"])
    assert pred.n_frames == 8
    assert pred.provenance == {"steps": 6, "seed": 0}
    grid = np.asarray(Image.open(Path(pipeline["pred"], "grid.png")))
    # color strip over depth strip, frames side by side
    assert grid.shape == (2 * 32, 8 * 32, 3)


def test_eval_writes_csv_matching_stdout(pipeline, capsys):
    csv = Path(pipeline["eval"], "metrics.csv").read_text()
    lines = csv.splitlines()
    assert lines[0].startswith("rollout,psnr,ssim,absrel,delta1")
    assert len(lines) == 3  # one rollout + mean
    assert lines[-1].startswith("mean,")
    code = cli.main(["eval", "--config", pipeline["config"], "--out", pipeline["eval"],
                     pipeline["pred"], pipeline["scene"]])
    assert code == 0
    assert capsys.readouterr().out == csv


def test_extract_actions_outputs_load_back(pipeline):
    acts = load_actions(Path(pipeline["acts"], "actions.json"))
    assert len(acts) == 8 - 1  # one waypoint per transition
    log = json.loads(Path(pipeline["acts"], "extraction_log.json").read_text())
    stages = {e["stage"] for e in log["events"]}
    assert {"grounding", "gate", "pose"} <= stages


def test_extract_actions_perceptual_suite_on_ground_truth(pipeline, tmp_path):
    code = cli.main(["extract-actions", "--config", pipeline["config"],
                     "--out", str(tmp_path / "o"), "--suite", "perceptual", pipeline["scene"]])
    assert code == 0
    assert (tmp_path / "o" / "actions.json").is_file()


# ---------------------------------------------------------------------------
# Determinism and reproduction


def test_rerun_into_same_out_is_byte_identical(pipeline, tmp_path):
    out = str(tmp_path / "data")
    args = ["gen-data", "--config", pipeline["config"], "--out", out, "--count", "2"]
    assert cli.main(args) == 0
    first = _hash_tree(out)
    for p in sorted(Path(out).rglob("*"), reverse=True):
        p.unlink() if p.is_file() else p.rmdir()
    assert cli.main(args) == 0
    assert _hash_tree(out) == first


def test_gen_data_jobs_matches_sequential(pipeline, tmp_path):
    seq, par = str(tmp_path / "seq"), str(tmp_path / "par")
    base = ["gen-data", "--config", pipeline["config"], "--count", "2"]
    assert cli.main(base + ["--out", seq]) == 0
    assert cli.main(base + ["--out", par, "--jobs", "2"]) == 0
    a, b = _hash_tree(seq), _hash_tree(par)
    del a["effective_config.json"], b["effective_config.json"]  # out_dir differs
    assert a == b


def test_eval_jobs_matches_sequential(pipeline, tmp_path):
    base = ["eval", "--config", pipeline["config"], pipeline["pred"], pipeline["scene"]]
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert cli.main(base + ["--out", a]) == 0
    assert cli.main(base + ["--out", b, "--jobs", "2"]) == 0
    assert Path(a, "metrics.csv").read_text() == Path(b, "metrics.csv").read_text()


def test_rerun_from_effective_config_reproduces(pipeline, tmp_path):
    eff = str(Path(pipeline["data"]) / "effective_config.json")
    fresh = str(tmp_path / "fresh")
    assert cli.main(["gen-data", "--config", eff, "--out", fresh]) == 0
    a, b = _hash_tree(pipeline["data"]), _hash_tree(fresh)
    del a["effective_config.json"], b["effective_config.json"]  # out_dir differs
    assert a == b


def test_seed_flag_overrides_config(pipeline, tmp_path):
    out = tmp_path / "seeded"
    assert cli.main(["gen-data", "--config", pipeline["config"], "--seed", "9",
                     "--out", str(out), "--count", "1"]) == 0
    eff = json.loads((out / "effective_config.json").read_text())
    assert eff["seed"] == 9


def test_sample_instruction_override(pipeline, tmp_path):
    out = tmp_path / "ovr"
    assert cli.main(["sample", "--config", pipeline["config"], "--out", str(out),
                     "--task", "0", "--target", "1", pipeline["ckpt"], pipeline["scene"]]) == 0
    pred = load_predicted(out)
    assert pred.instruction.task_id == 0
    assert pred.instruction.target_object_id == 1


# ---------------------------------------------------------------------------
# Exit codes; no partial outputs on failure


def test_unknown_config_section_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"optimiser": {"steps": 3}}))
    code = cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "optimiser" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_missing_config_file_exits_3(tmp_path):
    code = cli.main(["gen-data", "--config", str(tmp_path / "absent.json"),
                     "--out", str(tmp_path / "o")])
    assert code == 3
    assert not (tmp_path / "o").exists()


def test_task_without_target_exits_2(pipeline, tmp_path):
    code = cli.main(["sample", "--config", pipeline["config"], "--out", str(tmp_path / "o"),
                     "--task", "0", pipeline["ckpt"], pipeline["scene"]])
    assert code == 2
    assert not (tmp_path / "o").exists()


def test_train_on_missing_dataset_exits_3(pipeline, tmp_path):
    code = cli.main(["train", "--config", pipeline["config"], "--out", str(tmp_path / "o"),
                     str(tmp_path / "nowhere")])
    assert code == 3
    assert not (tmp_path / "o").exists()


def test_sample_with_garbage_checkpoint_exits_3(pipeline, tmp_path, capsys):
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"\x00" * 64)
    code = cli.main(["sample", "--config", pipeline["config"], "--out", str(tmp_path / "o"),
                     str(junk), pipeline["scene"]])
    assert code == 3
    assert not (tmp_path / "o").exists()


def test_eval_rollout_count_mismatch_exits_3_naming_counts(pipeline, tmp_path, capsys):
    code = cli.main(["eval", "--config", pipeline["config"], "--out", str(tmp_path / "o"),
                     pipeline["pred"], pipeline["data"]])
    assert code == 3
    err = capsys.readouterr().err
    assert "1" in err and str(N_ROLLOUTS) in err
    assert not (tmp_path / "o").exists()


def test_eval_frame_count_mismatch_exits_3_naming_counts(pipeline, tmp_path, capsys):
    fam = SceneFamily(height=32, width=32, n_frames=6, patch_size=8,
                      max_objects=2, tracks_per_object=4)
    short = tmp_path / "short"
    save_rollout(generate_rollout(build_random_scene(0, fam)), short)
    code = cli.main(["eval", "--config", pipeline["config"], "--out", str(tmp_path / "o"),
                     pipeline["pred"], str(short)])
    assert code == 3
    err = capsys.readouterr().err
    assert "8" in err and "6" in err
    assert not (tmp_path / "o").exists()


def test_train_rank_shortfall_exits_4(pipeline, tmp_path, capsys):
    cfg = json.loads(Path(pipeline["config"]).read_text())
    cfg["model"]["latent_dim"] = 200  # exceeds the patch rank of one tiny rollout
    wide = tmp_path / "wide.json"
    wide.write_text(json.dumps(cfg))
    code = cli.main(["train", "--config", str(wide), "--out", str(tmp_path / "o"),
                     pipeline["scene"]])
    assert code == 4
    assert not (tmp_path / "o").exists()


def test_extract_actions_without_instruction_exits_5(pipeline, tmp_path, capsys):
    fam = SceneFamily(height=32, width=32, n_frames=8, patch_size=8,
                      max_objects=2, tracks_per_object=4)
    cfg = dataclasses.replace(build_random_scene(0, fam), instruction=None)
    bare = tmp_path / "bare"
    save_rollout(generate_rollout(cfg), bare)
    code = cli.main(["extract-actions", "--config", pipeline["config"],
                     "--out", str(tmp_path / "o"), str(bare)])
    assert code == 5
    assert "grounding" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_extract_actions_oracle_suite_on_generated_exits_2(pipeline, tmp_path):
    code = cli.main(["extract-actions", "--config", pipeline["config"],
                     "--out", str(tmp_path / "o"), "--suite", "oracle", pipeline["pred"]])
    assert code == 2
    assert not (tmp_path / "o").exists()


# ---------------------------------------------------------------------------
# Installed entry point


def test_console_script_help_and_unknown_command():
    ok = subprocess.run([sys.executable, "-m", "geowm.cli", "--help"],
                        capture_output=True, text=True)
    assert ok.returncode == 0
    for cmd in ("gen-data", "train", "sample", "eval", "extract-actions"):
        assert cmd in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "geowm.cli", "frobnicate"],
                         capture_output=True, text=True)
    assert bad.returncode == 2
