"""
Tests for the checkpoint container
"""

import numpy as np
import pytest

from lib.checkpoint import (
    CheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
)
from lib.evaluation import evaluate_model, write_metrics_json
from lib.tracker import MaterialTracker
from lib.training import build_config, train


class TestCodec:
    def test_round_trip_is_exact(self, rng):
        tensors = {"b.weight": rng.standard_normal((3, 4)), "a.bias": rng.standard_normal(4),
                   "scalar": np.array(2.5)}
        decoded = decode_checkpoint(encode_checkpoint(tensors, {"note": "x", "steps": 3}))
        assert list(decoded.tensors) == ["a.bias", "b.weight", "scalar"]
        for name, array in tensors.items():
            np.testing.assert_array_equal(decoded.tensors[name], array)
        assert decoded.metadata == {"note": "x", "steps": 3}

    def test_encoding_is_deterministic(self, rng):
        tensors = {"x": rng.standard_normal(5), "y": rng.standard_normal((2, 2))}
        reordered = {"y": tensors["y"], "x": tensors["x"]}
        assert encode_checkpoint(tensors, {"a": 1, "b": 2}) == encode_checkpoint(reordered, {"b": 2, "a": 1})

    def test_bad_magic(self):
        raw = bytearray(encode_checkpoint({}, {}))
        raw[:8] = b"XXXXXXXX"
        with pytest.raises(CheckpointError) as info:
            decode_checkpoint(bytes(raw))
        assert info.value.offset == 0

    def test_bad_version(self):
        raw = bytearray(encode_checkpoint({}, {}))
        raw[8] = 9
        with pytest.raises(CheckpointError) as info:
            decode_checkpoint(bytes(raw))
        assert info.value.offset == 8

    def test_checksum(self, rng):
        raw = bytearray(encode_checkpoint({"w": rng.standard_normal(8)}, {}))
        raw[30] ^= 0x10
        with pytest.raises(CheckpointError, match="Checksum") as info:
            decode_checkpoint(bytes(raw))
        assert info.value.offset == len(raw) - 8

    def test_truncated(self, rng):
        raw = encode_checkpoint({"w": rng.standard_normal(8)}, {})
        with pytest.raises(CheckpointError, match="Truncated"):
            decode_checkpoint(raw[:40])


class TestModelCheckpoint:
    def test_save_load_reproduces_outputs(self, small_tracker_config, tmp_path, rng):
        model = MaterialTracker(small_tracker_config)
        for param in model.parameters():
            param.assign(param.data + 0.01 * rng.standard_normal(param.shape))
        path = tmp_path / "ckpt" / "model.ckpt"
        save_checkpoint(path, model, steps=7)

        loaded, metadata = load_checkpoint(path)
        assert metadata["steps"] == 7
        assert metadata["model"]["endmembers"] == 4
        for name, array in model.state_dict().items():
            np.testing.assert_array_equal(loaded.state_dict()[name], array)

        template, search = rng.uniform(size=(1, 8, 32, 32)), rng.uniform(size=(1, 8, 64, 64))
        a, b = model.eval()(template, search), loaded.eval()(template, search)
        np.testing.assert_array_equal(a.head.cls.data, b.head.cls.data)

    def test_missing_model_config(self, tmp_path):
        path = tmp_path / "bare.ckpt"
        path.write_bytes(encode_checkpoint({}, {"steps": 1}))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_tensors_must_fit_config(self, small_tracker_config, tmp_path):
        model = MaterialTracker(small_tracker_config)
        state = model.state_dict()
        state.pop(sorted(state)[0])
        path = tmp_path / "partial.ckpt"
        path.write_bytes(encode_checkpoint(state, {"model": small_tracker_config.model_dump(mode="json")}))
        with pytest.raises(CheckpointError, match="does not fit"):
            load_checkpoint(path)

    @pytest.mark.slow
    def test_same_config_and_seed_give_identical_bytes(self, small_sequence, tiny_train_values, tmp_path):
        def run(seed, name):
            config = build_config({**tiny_train_values, "seed": seed})
            result = train(config, [small_sequence], steps=3)
            save_checkpoint(tmp_path / f"{name}.ckpt", result.model,
                            train=config.model_dump(mode="json", exclude={"model"}))
            write_metrics_json(tmp_path / f"{name}.json", *evaluate_model(result.model, [small_sequence]))
            return (tmp_path / f"{name}.ckpt").read_bytes(), (tmp_path / f"{name}.json").read_bytes()

        first = run("5", "a")
        assert run("5", "b") == first
        assert run("6", "c")[0] != first[0]
