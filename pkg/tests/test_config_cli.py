import json

import pytest
import torch

from onestep_vton import config as cfg_mod
from onestep_vton.cli import main
from onestep_vton.config import ConfigError, config_from_dict, load_preset
from onestep_vton.io_utils import load_png, save_parse_png, save_png


@pytest.mark.parametrize("name", cfg_mod.PRESET_NAMES)
def test_presets_round_trip(name):
    cfg = load_preset(name)
    again = config_from_dict(json.loads(cfg.to_json()))
    assert again == cfg
    assert config_from_dict(json.loads(again.to_json())) == again


def test_unknown_key_rejected_with_name():
    cfg = load_preset("desk-64")
    data = json.loads(cfg.to_json())
    data["warp"]["bogus_knob"] = 3
    with pytest.raises(ConfigError, match="warp.bogus_knob"):
        config_from_dict(data)
    data = json.loads(cfg.to_json())
    data["typo_section"] = {}
    with pytest.raises(ConfigError, match="typo_section"):
        config_from_dict(data)


def test_unknown_preset_rejected():
    with pytest.raises(ConfigError, match="no-such"):
        load_preset("no-such")


def test_resolution_pyramid_divisibility_enforced():
    cfg = load_preset("desk-64")
    data = json.loads(cfg.to_json())
    data["resolution"] = [60, 48]
    with pytest.raises(ConfigError, match="divisible"):
        config_from_dict(data)


def test_negative_loss_weight_rejected():
    data = json.loads(load_preset("desk-64").to_json())
    data["warp_loss"]["alpha_tv"] = -0.5
    with pytest.raises(ConfigError, match="alpha_tv"):
        config_from_dict(data)


def test_config_file_round_trip(tmp_path):
    cfg = load_preset("viton-hd-512")
    path = tmp_path / "run.json"
    cfg.save(path)
    assert cfg_mod.load_config(path) == cfg


def test_bad_json_config(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{nope")
    with pytest.raises(ConfigError, match="JSON"):
        cfg_mod.load_config(path)


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def test_cli_exit_code_config_error(tmp_path):
    rc = main(["--preset", "no-such-preset", "--out", str(tmp_path),
               "train-warp", "--steps", "1"])
    assert rc == 2


def test_cli_exit_code_data_error(tmp_path):
    rc = main(["--preset", "desk-64", "--out", str(tmp_path),
               "train-warp", "--steps", "1", "--data", str(tmp_path / "nodata")])
    assert rc == 3


def test_cli_plugin_post(tmp_path):
    from onestep_vton import synthdata as sd

    s = sd.gen_sample(3, (64, 48), "upper")
    corrupted = s.person.clone()
    arm = s.parsing == 4
    corrupted[:, arm] = 0.0
    save_png(corrupted, tmp_path / "image.png")
    save_png(s.person, tmp_path / "person.png")
    save_parse_png(s.parsing, tmp_path / "pred.png")
    save_parse_png(s.parsing, tmp_path / "ref.png")
    rc = main([
        "--preset", "desk-64", "--out", str(tmp_path / "out"),
        "plugin-post",
        "--image", str(tmp_path / "image.png"),
        "--person", str(tmp_path / "person.png"),
        "--pred-parse", str(tmp_path / "pred.png"),
        "--ref-parse", str(tmp_path / "ref.png"),
    ])
    assert rc == 0
    report = json.loads((tmp_path / "out" / "plugin_post.report.json").read_text())
    assert report["left_arm"]["applied"] is True
    restored = load_png(tmp_path / "out" / "plugin_post.png")
    person = load_png(tmp_path / "person.png")
    assert torch.equal(restored[:, arm], person[:, arm])


def test_cli_train_infer_eval_smoke(tmp_path):
    out = str(tmp_path / "run")
    rc = main(["--preset", "desk-64", "--seed", "3", "--out", out,
               "train-tryon", "--steps", "2", "--samples", "2"])
    assert rc == 0
    ckpt = f"{out}/tryon.ckpt"
    rc = main(["--preset", "desk-64", "--seed", "3", "--out", out,
               "infer", "--tryon-checkpoint", ckpt, "--oracle-warp",
               "--samples", "2", "--exact-masks"])
    assert rc == 0
    assert (tmp_path / "run" / "contact_sheet.png").exists()
    reports = list((tmp_path / "run").glob("*.report.json"))
    assert len(reports) == 2
    rc = main(["--preset", "desk-64", "--seed", "3", "--out", out,
               "eval", "--tryon-checkpoint", ckpt, "--oracle-warp",
               "--samples", "4"])
    assert rc == 0
    report = json.loads((tmp_path / "run" / "eval_report.json").read_text())
    assert report["pairing"] == "paired"
    assert (tmp_path / "run" / "eval_table.md").read_text().startswith("| Method |")


def test_cli_train_warp_writes_logs_and_checkpoint(tmp_path):
    out = tmp_path / "warprun"
    rc = main(["--preset", "desk-64", "--out", str(out),
               "train-warp", "--steps", "2", "--samples", "2"])
    assert rc == 0
    assert (out / "warp.ckpt").exists()
    lines = (out / "warp_train.jsonl").read_text().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[0])
    assert {"total", "l1", "ce", "step"} <= set(rec)


def test_cli_ablate_threshold_table(tmp_path):
    out = tmp_path / "abl"
    rc = main(["--preset", "desk-64", "--out", str(out),
               "ablate", "--which", "threshold", "--samples", "12"])
    assert rc == 0
    rows = json.loads((out / "ablation_threshold.json").read_text())
    assert len(rows) == 6
    rates = [r["AR(%)"] for r in rows]
    assert rates == sorted(rates, reverse=True)


def test_cli_bench_tiny(tmp_path):
    out = tmp_path / "bench"
    rc = main(["--preset", "desk-64", "--out", str(out),
               "bench", "--steps-list", "2", "--batch", "1", "--repeats", "1",
               "--bench-resolution", "32x24"])
    assert rc == 0
    data = json.loads((out / "bench.json").read_text())
    assert data["meta"]["batch_size"] == 1
    assert len(data["rows"]) == 2


def test_cli_env_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("VTON_PRESET", "no-such-preset")
    rc = main(["--out", str(tmp_path), "train-warp", "--steps", "1"])
    assert rc == 2


def test_cli_infer_requires_some_warp_source(tmp_path):
    rc = main(["--preset", "desk-64", "--out", str(tmp_path),
               "infer", "--tryon-checkpoint", "missing.ckpt"])
    assert rc == 2


def test_cli_exit_code_numerical_failure(tmp_path, monkeypatch):
    from onestep_vton import training
    from onestep_vton.errors import NumericalError

    def explode(self, step):
        raise NumericalError("loss went non-finite at step 0")

    monkeypatch.setattr(training.WarpTrainer, "train_step", explode)
    rc = main(["--preset", "desk-64", "--out", str(tmp_path),
               "train-warp", "--steps", "1", "--samples", "2"])
    assert rc == 4
