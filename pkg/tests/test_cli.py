import json

import numpy as np
import pytest

from swa_voxel.cli import main
from swa_voxel.config import ConfigFileError, RunConfig
from swa_voxel.grid import DenseLabelVolume, SparseVoxelGrid
from swa_voxel.scene_io import Scene, load_scene, save_scene


# config ------------------------------------------------------------------------------

def test_config_parse_and_dump():
    rc = RunConfig.from_text("# comment\nmodel.dim = 16   # inline\n\ndata.dims = 16x16x8\ntrain.iterations = 5\n")
    assert rc["model.dim"] == 16 and rc["data.dims"] == (16, 16, 8) and rc["train.iterations"] == 5
    again = RunConfig.from_text(rc.dump())
    assert again.values == rc.values


def test_config_unknown_key_rejected():
    with pytest.raises(ConfigFileError, match=r"cfg:2: unknown config key 'model.width'"):
        RunConfig.from_text("model.dim = 8\nmodel.width = 3\n", "cfg")


def test_config_bad_value_and_syntax():
    with pytest.raises(ConfigFileError, match="model.dim"):
        RunConfig.from_text("model.dim = eight")
    with pytest.raises(ConfigFileError, match="expected 'key = value'"):
        RunConfig.from_text("model.dim 8")


# commands ------------------------------------------------------------------------------

def test_generate(tmp_path, capsys):
    out = tmp_path / "s"
    assert main(["generate", "--count", "0", "--out", str(out)]) == 0
    assert list(out.glob("*")) == []
    assert main(["generate", "--count", "2", "--seed", "7", "--dims", "32x32x8", "--out", str(out)]) == 0
    files = sorted(out.glob("*.swsc"))
    assert [f.name for f in files] == ["scene_00000.swsc", "scene_00001.swsc"]
    first = [f.read_bytes() for f in files]
    assert main(["generate", "--count", "2", "--seed", "7", "--out", str(out)]) == 0
    assert [f.read_bytes() for f in files] == first
    assert load_scene(files[1]).dims == (32, 32, 8)


def test_generate_unwritable(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["generate", "--count", "1", "--out", str(blocker / "sub")]) == 2
    assert str(blocker) in capsys.readouterr().err


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as e:
        main(["train", "--variant", "Z"])
    assert e.value.code == 2


def tiny_config(tmp_path, classes=6):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"model.levels = 2\nmodel.dim = 8\nmodel.heads = 2\nmodel.num_classes = {classes}\n"
                   "train.iterations = 2\ntrain.optimizer = adam\ntrain.base_lr = 0.002\n")
    return cfg


@pytest.fixture
def trained(tmp_path):
    data = tmp_path / "data"
    assert main(["generate", "--count", "2", "--seed", "3", "--dims", "8x8x8", "--out", str(data)]) == 0
    ckpt = tmp_path / "m.swac"
    rc = main(["train", "--config", str(tiny_config(tmp_path)), "--data", str(data), "--ckpt", str(ckpt),
               "--log", str(tmp_path / "log.csv"), "--seed", "1"])
    assert rc == 0
    return tmp_path, data, ckpt


def test_train_outputs(trained, caplog):
    tmp, _, ckpt = trained
    assert ckpt.exists()
    assert len((tmp / "log.csv").read_text().splitlines()) == 1
    resolved = (tmp / "m.swac.config").read_text()
    assert "train.seed = 1\n" in resolved and "model.dim = 8\n" in resolved
    assert RunConfig.from_text(resolved)["train.seed"] == 1


def test_train_unknown_key(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("model.dimm = 8\n")
    assert main(["train", "--config", str(cfg)]) == 2


def test_eval_prints_table_and_json(trained, capsys):
    _, data, ckpt = trained
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(data)]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert out[0].startswith("occupancy IoU")
    rec = json.loads(out[-1])
    assert set(rec) == {"iou", "miou", "class_iou", "valid_voxels"}


def test_eval_class_count_mismatch(trained, tmp_path, capsys):
    _, _, ckpt = trained
    s = Scene(SparseVoxelGrid((8, 8, 8), np.zeros((0, 3)), np.zeros((0, 1))), DenseLabelVolume.empty((8, 8, 8)), 4)
    save_scene(tmp_path / "other.swsc", s)
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(tmp_path / "other.swsc")]) == 2
    assert "num_classes" in capsys.readouterr().err


def test_eval_config_mismatch_names_keys(trained, tmp_path, capsys):
    tmp, data, ckpt = trained
    cfg = tmp_path / "other.cfg"
    cfg.write_text("model.levels = 2\nmodel.dim = 16\nmodel.heads = 2\n")
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(data), "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "dim" in err and "levels" not in err


def test_infer_empty_scene(trained, tmp_path):
    _, _, ckpt = trained
    s = Scene(SparseVoxelGrid((8, 8, 8), np.zeros((0, 3)), np.zeros((0, 1))), DenseLabelVolume.empty((8, 8, 8)), 6)
    save_scene(tmp_path / "empty.swsc", s)
    out = tmp_path / "pred.u16"
    assert main(["infer", "--ckpt", str(ckpt), "--scene", str(tmp_path / "empty.swsc"), "--out", str(out)]) == 0
    labels = np.frombuffer(out.read_bytes(), "<u2")
    assert labels.size == 512 and (labels == 0).all()


def test_missing_checkpoint(tmp_path):
    assert main(["eval", "--ckpt", str(tmp_path / "nope.swac"), "--data", str(tmp_path)]) == 2


def test_gradcheck_engine(capsys):
    assert main(["gradcheck", "--preset", "engine", "--seeds", "2"]) == 0
    out = capsys.readouterr().out
    assert "engine.layer_norm" in out and "FAIL" not in out


def test_oracle_compare(capsys):
    assert main(["oracle-compare", "--cases", "5"]) == 0
    assert "pass" in capsys.readouterr().out


def test_bench_density_zero(capsys):
    assert main(["bench", "--density", "0", "--dims", "8x8x8", "--dim", "8", "--repeats", "1"]) == 0
    row = capsys.readouterr().out.strip().splitlines()[1].split()
    assert row[2] == "0" and row[4] == "100.00%"
    assert float(row[5]) < 0.01


def test_bench_bad_density():
    assert main(["bench", "--density", "1.5", "--dims", "8x8x8"]) == 2
