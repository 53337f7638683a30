import csv
import json

import numpy as np
import pytest
from PIL import Image

from dtnerf.cli import main
from dtnerf.synth import dir_hash


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_config_file, tiny_data_dir):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--config", str(tiny_config_file), "--data", str(tiny_data_dir), "--out", str(out),
                 "--threads", "1"]) == 0
    return out


def test_gen_data_prints_hash(tmp_path, tiny_config_file, capsys):
    cfg = json.loads(tiny_config_file.read_text())
    cfg["data"].update(n_frames=4, resolution=8)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert main(["gen-data", "--config", str(path), "--out", str(tmp_path / "ds")]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line == f"dataset_hash,{dir_hash(tmp_path / 'ds')}"


def test_train_outputs(trained):
    for name in ("config.json", "config_hash.txt", "model.ckpt", "metrics.csv", "eval.csv", "eval.json",
                 "training_curve.png", "run.json"):
        assert (trained / name).exists(), name
    info = json.loads((trained / "run.json").read_text())
    assert info["row"] == "full" and info["steps"] == 26
    with open(trained / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    # train rows every 100 steps or at the end; holdout rows at each stage end
    assert [(int(r["step"]), r["split"]) for r in rows] == [(20, "holdout"), (26, "fine"), (26, "holdout")]


def test_ablate_flag_changes_row_and_hash(tmp_path, trained, tiny_config_file, tiny_data_dir, capsys):
    assert main(["train", "--config", str(tiny_config_file), "--data", str(tiny_data_dir), "--out", str(tmp_path),
                 "--ablate", "no-transformer"]) == 0
    a = json.loads((tmp_path / "run.json").read_text())
    b = json.loads((trained / "run.json").read_text())
    assert a["row"] == "w/o T w F" and a["config_hash"] != b["config_hash"]
    assert a["dataset_hash"] == b["dataset_hash"]
    assert capsys.readouterr().out.splitlines()[-1].startswith("w/o T w F,")


def test_render_frames(tmp_path, trained, tiny_data_dir):
    assert main(["render", "--checkpoint", str(trained / "model.ckpt"), "--data", str(tiny_data_dir),
                 "--frames", "0..2", "--out", str(tmp_path / "r")]) == 0
    pngs = sorted((tmp_path / "r").glob("frame_*.png"))
    assert [p.name for p in pngs] == ["frame_0000.png", "frame_0001.png", "frame_0002.png"]
    assert np.asarray(Image.open(pngs[0])).shape == (16, 16, 3)
    assert main(["render", "--checkpoint", str(trained / "model.ckpt"), "--data", str(tiny_data_dir),
                 "--frames", "4", "--out", str(tmp_path / "s"), "--side-by-side"]) == 0
    assert np.asarray(Image.open(tmp_path / "s" / "frame_0004.png")).shape == (16, 48, 3)
    assert (tmp_path / "s" / "triptychs.png").exists()


def test_render_bad_frame(tmp_path, trained, tiny_data_dir, capsys):
    code = main(["render", "--checkpoint", str(trained / "model.ckpt"), "--data", str(tiny_data_dir),
                 "--frames", "99", "--out", str(tmp_path)])
    assert code == 2
    assert "out of range" in capsys.readouterr().err


def test_eval_matches_training_report(tmp_path, trained, tiny_data_dir):
    assert main(["eval", "--checkpoint", str(trained / "model.ckpt"), "--data", str(tiny_data_dir),
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "eval.csv").read_text() == (trained / "eval.csv").read_text()


def test_ablate_table(tmp_path, tiny_config_file, tiny_data_dir, capsys):
    assert main(["ablate", "--config", str(tiny_config_file), "--data", str(tiny_data_dir), "--out", str(tmp_path),
                 "--rows", "full,w/o S w F"]) == 0
    with open(tmp_path / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["row"] for r in rows] == ["full", "w/o S w F"]
    assert len({r["dataset_hash"] for r in rows}) == 1
    assert all(float(r["wall_clock_s"]) > 0 for r in rows)
    assert (tmp_path / "ablation.md").exists() and (tmp_path / "ablation.png").exists()
    assert "Mouth PSNR" in capsys.readouterr().out


def test_ablate_unknown_row(tmp_path, tiny_data_dir):
    assert main(["ablate", "--data", str(tiny_data_dir), "--out", str(tmp_path), "--rows", "nope"]) == 2


def test_gradcheck_single_op(tmp_path):
    assert main(["gradcheck", "--ops", "trainer.coarse_loss", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "gradcheck.json").read_text())["ops"]
    assert main(["gradcheck", "--ops", "no_such_op", "--out", str(tmp_path)]) == 2


def test_bad_config_and_missing_data(tmp_path, tiny_data_dir):
    bad = tmp_path / "bad.json"
    bad.write_text('{"schedule": {"bogus": 1}}')
    assert main(["train", "--config", str(bad), "--data", str(tiny_data_dir), "--out", str(tmp_path / "o")]) == 1
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad), "--data", str(tiny_data_dir), "--out", str(tmp_path / "o")]) == 1
    assert main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")]) == 2


def test_schema_command(capsys):
    assert main(["schema"]) == 0
    assert json.loads(capsys.readouterr().out)["additionalProperties"] is False
