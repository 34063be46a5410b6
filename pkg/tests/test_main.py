"""
End-to-end tests of the command-line entry point
"""

import numpy as np
import orjson
import pytest

from lib.synthdata import read_hsvc
from main import main

SCENE = """# two short sequences
bands=8
height=48
width=48
frames=4
endmembers=3
target_size_min=10
target_size_max=14
sequences=2
seed=11
"""


@pytest.fixture
def data_dir(tmp_path):
    (tmp_path / "scene.cfg").write_text(SCENE)
    assert main(["gen", "--spec", str(tmp_path / "scene.cfg"), "--out", str(tmp_path / "data")]) == 0
    return tmp_path / "data"


@pytest.fixture
def train_cfg(tmp_path, tiny_train_values):
    path = tmp_path / "train.cfg"
    path.write_text("".join(f"{key}={value}\n" for key, value in tiny_train_values.items()))
    return path


def test_gen_writes_sequences_and_sidecars(data_dir):
    assert sorted(p.name for p in data_dir.iterdir()) == ["seq_000.hsvc", "seq_000.json", "seq_001.hsvc",
                                                         "seq_001.json"]
    assert read_hsvc(data_dir / "seq_001.hsvc").frames == 4


@pytest.mark.slow
def test_train_eval_unmix(tmp_path, data_dir, train_cfg, capsys):
    ckpt = tmp_path / "model.ckpt"
    assert main(["train", "--config", str(train_cfg), "--data", str(data_dir), "--out", str(ckpt),
                 "--steps", "2", "--log", str(tmp_path / "steps.csv")]) == 0
    assert ckpt.exists()
    assert len((tmp_path / "steps.csv").read_text().splitlines()) == 3

    metrics = tmp_path / "metrics.json"
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(data_dir), "--json", str(metrics),
                 "--csv", str(tmp_path / "frames.csv"), "--workers", "2"]) == 0
    payload = orjson.loads(metrics.read_bytes())
    assert sorted(payload["sequences"]) == ["seq_000", "seq_001"]
    assert payload["overall"]["frames"] == 6
    printed = orjson.loads(capsys.readouterr().out)
    assert printed == payload["overall"]

    exported = tmp_path / "unmixed.hsvc"
    assert main(["unmix", "--ckpt", str(ckpt), "--cube", str(data_dir / "seq_000.hsvc"),
                 "--out", str(exported)]) == 0
    record = read_hsvc(exported)
    assert record.cubes.shape == (4, 8, 48, 48)
    assert record.endmembers.shape == (8, 4)
    np.testing.assert_allclose(record.abundances.sum(axis=1), 1.0, atol=1e-5)
    np.testing.assert_array_equal(record.boxes, read_hsvc(data_dir / "seq_000.hsvc").boxes)


def test_unmix_needs_unmixing_network(tmp_path, data_dir, tiny_train_values):
    path = tmp_path / "no_unmixing.cfg"
    values = {**tiny_train_values, "unmixing": "off"}
    path.write_text("".join(f"{key}={value}\n" for key, value in values.items()))
    ckpt = tmp_path / "model.ckpt"
    assert main(["train", "--config", str(path), "--data", str(data_dir), "--out", str(ckpt), "--steps", "1"]) == 0
    assert main(["unmix", "--ckpt", str(ckpt), "--cube", str(data_dir / "seq_000.hsvc"),
                 "--out", str(tmp_path / "out.hsvc")]) == 2


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--op", "matmul", "--op", "sigmoid", "--seeds", "2"]) == 0
    reports = orjson.loads(capsys.readouterr().out)
    assert [r["name"] for r in reports] == ["matmul", "sigmoid"]
    assert all(r["passed"] for r in reports)


def test_errors_exit_with_code_two(tmp_path):
    assert main(["gen", "--spec", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 2
    assert main(["eval", "--ckpt", str(tmp_path / "missing.ckpt"), "--data", str(tmp_path),
                 "--json", str(tmp_path / "m.json")]) == 2


def test_bad_config_key_exits_with_code_two(tmp_path, data_dir):
    path = tmp_path / "bad.cfg"
    path.write_text("learning_rate=0.1\n")
    assert main(["train", "--config", str(path), "--data", str(data_dir), "--out", str(tmp_path / "m.ckpt")]) == 2
