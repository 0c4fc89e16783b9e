import json
from pathlib import Path

import numpy as np
import pytest

from otflow.cli import main
from otflow.config import load_config, resolve_config
from otflow.errors import ConfigError

SMALL_CONFIG = {
    "dataset": {
        "grid_height": 16, "grid_width": 16, "n_series": 2, "n_frames": 7,
        "x_start_range": [5.0, 5.5], "x_end_range": [9.0, 9.5],
        "sigma_start_range": [1.0, 1.1], "sigma_end_range": [1.3, 1.4],
        "y_center_range": [7.0, 8.0], "stride": 3,
    },
    "architecture": {
        "image_height": 16, "image_width": 16, "latent_dim": 6,
        "encoder_widths": [32], "decoder_widths": [32], "field_widths": [16],
    },
    "training": {
        "epochs": 3, "regularizer": "ot", "lambda": 0.05,
        "intermediate_samples_per_interval": 2,
        "sinkhorn": {"epsilon": 0.8, "max_iters": 50, "convergence_tol": 1e-4,
                     "debias": False},
    },
}


def write_small_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return path


def run_pipeline(tmp_path, tag, seed=7):
    cfg = write_small_config(tmp_path)
    data = tmp_path / f"data_{tag}"
    run = tmp_path / f"run_{tag}"
    assert main(["generate", "--config", str(cfg), "--out", str(data), "--seed", str(seed)]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(data),
                 "--out", str(run), "--seed", str(seed)]) == 0
    return data, run


def test_config_defaults_and_strictness():
    config = resolve_config({})
    assert config["training"]["epochs"] == 500
    with pytest.raises(ConfigError) as exc:
        resolve_config({"dataset": {"n_serie": 3}})
    assert "n_serie" in str(exc.value)


def test_config_nested_merge():
    config = resolve_config({"training": {"epochs": 7}})
    assert config["training"]["epochs"] == 7
    assert config["training"]["lr"] == 1e-3  # untouched sibling default


def test_generate_writes_dataset_and_config(tmp_path):
    cfg = write_small_config(tmp_path)
    out = tmp_path / "data"
    assert main(["generate", "--config", str(cfg), "--out", str(out)]) == 0
    series_dirs = sorted(p.name for p in out.glob("series_*"))
    assert series_dirs == ["series_0", "series_1"]
    assert (out / "series_0" / "manifest.json").exists()
    resolved = load_config(out / "config.json")
    assert resolved["dataset"]["n_frames"] == 7


def test_generate_deterministic(tmp_path):
    cfg = write_small_config(tmp_path)
    out1, out2 = tmp_path / "d1", tmp_path / "d2"
    main(["generate", "--config", str(cfg), "--out", str(out1), "--seed", "5"])
    main(["generate", "--config", str(cfg), "--out", str(out2), "--seed", "5"])
    for rel in ["series_0/frame_0000.f32grid", "series_1/frame_0003.f32grid"]:
        assert (out1 / rel).read_bytes() == (out2 / rel).read_bytes()


def test_generate_rejects_bad_key(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"dataset": {"n_serie": 2}}))
    rc = main(["generate", "--config", str(cfg), "--out", str(tmp_path / "x")])
    assert rc == 1
    err = capsys.readouterr().err
    assert err.startswith("OTFLOW-ERROR ConfigError:")
    assert "n_serie" in err


def test_train_rejects_zero_epochs(tmp_path, capsys):
    cfg_dict = json.loads(json.dumps(SMALL_CONFIG))
    cfg_dict["training"]["epochs"] = 0
    cfg = tmp_path / "zero.json"
    cfg.write_text(json.dumps(cfg_dict))
    data = tmp_path / "data"
    assert main(["generate", "--config", str(cfg), "--out", str(data)]) == 0
    rc = main(["train", "--config", str(cfg), "--data", str(data),
               "--out", str(tmp_path / "run")])
    assert rc == 1
    assert "epochs" in capsys.readouterr().err


def test_full_pipeline_and_artifacts(tmp_path):
    data, run = run_pipeline(tmp_path, "a")
    assert (run / "checkpoint.ckpt").exists()
    assert (run / "train_log.jsonl").exists()
    assert (run / "config.json").exists()
    log_lines = (run / "train_log.jsonl").read_text().strip().splitlines()
    assert len(log_lines) == 3
    entry = json.loads(log_lines[0])
    assert {"epoch", "dynamic", "static", "consistency", "regularizer", "total"} <= set(entry)

    assert main(["eval", "--run", str(run), "--protocol", "static"]) == 0
    per_frame = run / "eval" / "per_frame_static.csv"
    assert len(per_frame.read_text().strip().splitlines()) == 1 + 2 * 7

    assert main(["eval", "--run", str(run), "--protocol", "dynamic-heldout"]) == 0
    held = run / "eval" / "per_frame_dynamic-heldout.csv"
    held_rows = held.read_text().strip().splitlines()[1:]
    held_indices = sorted({int(r.split(",")[3]) for r in held_rows})
    assert held_indices == [i for i in range(7) if i % 3 != 0]
    agg = (run / "eval" / "aggregate_dynamic-heldout.csv").read_text().strip().splitlines()
    assert len(agg) == 2  # header + one (regularizer, dataset) row


def test_interpolate_outputs_and_no_checkpoint_for_baselines(tmp_path):
    data, run = run_pipeline(tmp_path, "b")
    assert main(["interpolate", "--run", str(run), "--series", "0", "--from", "0",
                 "--to", "3", "--steps", "4", "--methods", "manifold,l2,w2"]) == 0
    out = run / "interp" / "series0_0-3"
    for method in ("manifold", "l2", "w2"):
        files = sorted(out.glob(f"{method}_*.f32grid"))
        assert len(files) == 4
        assert sorted(out.glob(f"{method}_*.pgm"))

    # l2/w2 interpolation works without any checkpoint
    bare = tmp_path / "bare_run"
    bare.mkdir()
    (bare / "config.json").write_text((run / "config.json").read_text())
    assert main(["interpolate", "--run", str(bare), "--data", str(data), "--series", "0",
                 "--from", "0", "--to", "3", "--steps", "2", "--methods", "l2,w2"]) == 0
    # but the manifold method reports the missing checkpoint
    rc = main(["interpolate", "--run", str(bare), "--data", str(data), "--series", "0",
               "--from", "0", "--to", "3", "--steps", "2", "--methods", "manifold"])
    assert rc == 1


def test_eval_missing_checkpoint(tmp_path, capsys):
    data, run = run_pipeline(tmp_path, "c")
    (run / "checkpoint.ckpt").unlink()
    rc = main(["eval", "--run", str(run), "--protocol", "static"])
    assert rc == 1
    assert "MissingCheckpoint" in capsys.readouterr().err


def test_interpolate_index_errors(tmp_path, capsys):
    data, run = run_pipeline(tmp_path, "d")
    rc = main(["interpolate", "--run", str(run), "--series", "9", "--from", "0",
               "--to", "3", "--steps", "2"])
    assert rc == 1
    assert "IndexOutOfRange" in capsys.readouterr().err


def test_rerun_bit_identical(tmp_path):
    data1, run1 = run_pipeline(tmp_path, "r1", seed=9)
    data2, run2 = run_pipeline(tmp_path, "r2", seed=9)
    assert (run1 / "checkpoint.ckpt").read_bytes() == (run2 / "checkpoint.ckpt").read_bytes()
    assert (run1 / "train_log.jsonl").read_bytes() == (run2 / "train_log.jsonl").read_bytes()
    for run in (run1, run2):
        assert main(["eval", "--run", str(run), "--protocol", "dynamic"]) == 0
    assert (run1 / "eval" / "per_frame_dynamic.csv").read_bytes() == \
        (run2 / "eval" / "per_frame_dynamic.csv").read_bytes()


def test_rerun_from_resolved_config_copy(tmp_path):
    # the resolved config stored in the run directory reproduces the run
    data, run = run_pipeline(tmp_path, "e", seed=11)
    run2 = tmp_path / "run_copy"
    assert main(["train", "--config", str(run / "config.json"), "--out", str(run2)]) == 0
    assert (run / "checkpoint.ckpt").read_bytes() == (run2 / "checkpoint.ckpt").read_bytes()
