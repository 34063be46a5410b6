"""
Tests for configuration routing, pair sampling and the training loop
"""

import csv

import numpy as np
import pytest
from pydantic import ValidationError

from lib.config import ConfigFileError
from lib.evaluation import evaluate_model
from lib.training import (
    TrainConfig, TrainingError, build_config, build_model, load_sequences, load_train_config, make_sample,
    sample_batch, train, write_step_log
)
from lib.synthdata import SceneSpec, gen_sequence, generate_dataset
from lib.tracker import MaterialTracker


class TestConfig:
    def test_desk_profile_defaults(self):
        config = TrainConfig()
        assert (config.epochs, config.pairs_per_epoch, config.batch_size, config.lr) == (3, 544, 8, 5e-4)
        assert config.steps_per_epoch == 68
        assert config.total_steps == 204
        assert config.decay_step == 204

    def test_benchmark_profile(self):
        config = TrainConfig(profile="benchmark")
        assert (config.epochs, config.batch_size, config.lr) == (50, 16, 4e-5)
        assert config.decay_step == 47 * 350

    def test_explicit_values_override_profile(self):
        config = TrainConfig(profile="benchmark", epochs=2, lr=1e-3)
        assert (config.epochs, config.lr, config.batch_size) == (2, 1e-3, 16)

    @pytest.mark.parametrize("overrides", [
        {"profile": "huge"}, {"mode": "partial"}, {"lambda_u": 1.2}, {"lambda_ce": 0.0}, {"rho": 0.0},
    ])
    def test_invalid_values(self, overrides):
        with pytest.raises(ValidationError):
            TrainConfig(**overrides)

    def test_flat_keys_are_routed(self):
        config = build_config({"r": "8", "embed_dim": "32", "fusion": "add", "lambda_u": "0.25",
                               "prompts": "off", "seed": "9", "injection_layers": "1,12"})
        assert config.model.endmembers == 8
        assert config.model.backbone.embed_dim == 32
        assert config.model.backbone.injection_layers == [1, 12]
        assert config.model.prompt.fusion == "add"
        assert config.model.prompts is False
        assert config.lambda_u == 0.25
        assert config.seed == 9 and config.model.seed == 9

    def test_unknown_key(self):
        with pytest.raises(ConfigFileError, match="learning_rate"):
            build_config({"learning_rate": "0.1"})

    def test_loss_weights(self):
        weights = build_config({"lambda_u": "0.3", "lambda_ce": "0.4"}).loss_weights()
        assert (weights.unmix, weights.ce, weights.iou, weights.l1) == (0.3, 0.4, 2.0, 5.0)

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("# desk run\nprofile=desk\nmode=frozen\nr=4\n")
        config = load_train_config(path)
        assert config.mode == "frozen" and config.model.endmembers == 4

    def test_load_reports_bad_values(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("epochs=-1\n")
        with pytest.raises(ConfigFileError):
            load_train_config(path)


class TestSampling:
    def test_centered_sample_without_jitter(self, small_sequence, tiny_train_values):
        config = build_config({**tiny_train_values, "center_jitter": "0", "scale_jitter": "0"})
        sample = make_sample(small_sequence, 3, np.random.default_rng(0), config)
        assert sample.template.shape == (8, 32, 32)
        assert sample.search.shape == (8, 64, 64)
        _, _, w, h = small_sequence.boxes[3]
        side = 4.0 * np.sqrt(w * h)
        cx, cy = sample.box[0] + sample.box[2] / 2, sample.box[1] + sample.box[3] / 2
        assert (cx, cy) == pytest.approx((32.0, 32.0))
        assert sample.box[2] == pytest.approx(w * 64 / side)

    def test_box_stays_inside_search_crop(self, small_sequence, tiny_train_config):
        rng = np.random.default_rng(4)
        for frame in range(1, small_sequence.frames):
            box = make_sample(small_sequence, frame, rng, tiny_train_config).box
            assert np.all(box[:2] >= 0) and np.all(box[2:] >= 1.0)
            assert box[0] + box[2] <= 64 and box[1] + box[3] <= 64

    def test_batch_is_stacked(self, small_sequence, tiny_train_config):
        batch = sample_batch([small_sequence], np.random.default_rng(0), tiny_train_config)
        assert batch.template.shape == (2, 8, 32, 32)
        assert batch.search.shape == (2, 8, 64, 64)
        assert batch.box.shape == (2, 4)


class TestTraining:
    def test_steps_are_logged(self, small_sequence, tiny_train_config):
        result = train(tiny_train_config, [small_sequence], steps=3)
        assert [r["step"] for r in result.step_log] == [0, 1, 2]
        assert [r["warmup"] for r in result.step_log] == [1, 0, 0]
        for record in result.step_log:
            assert np.isfinite(record["total"]) and np.isfinite(record["unmix"])

    def test_parameters_move(self, small_sequence, tiny_train_config):
        model = build_model(tiny_train_config)
        before = model.head.cls.projection.weight.numpy()
        train(tiny_train_config, [small_sequence], model=model, steps=2)
        assert not np.array_equal(model.head.cls.projection.weight.data, before)

    def test_zero_unmixing_weight_freezes_endmembers(self, small_sequence, tiny_train_values):
        config = build_config({**tiny_train_values, "lambda_u": "0"})
        model = build_model(config)
        before = model.unmix.endmember_logits.numpy()
        train(config, [small_sequence], model=model, steps=2)
        np.testing.assert_array_equal(model.unmix.endmember_logits.data, before)

    def test_frozen_mode_keeps_backbone(self, small_sequence, tiny_train_values):
        config = build_config({**tiny_train_values, "mode": "frozen"})
        model = build_model(config)
        before = model.backbone.state_dict()
        train(config, [small_sequence], model=model, steps=2)
        for name, array in model.backbone.state_dict().items():
            np.testing.assert_array_equal(array, before[name], err_msg=name)
        assert not np.array_equal(model.unmix.endmember_logits.data, build_model(config).unmix.endmember_logits.data)

    def test_frozen_mode_freezes_a_passed_model(self, small_sequence, tiny_train_values):
        config = build_config({**tiny_train_values, "mode": "frozen"})
        model = MaterialTracker(config.model)
        before = model.backbone.state_dict()
        train(config, [small_sequence], model=model, steps=2)
        assert not any(p.requires_grad for p in model.backbone.parameters())
        for name, array in model.backbone.state_dict().items():
            np.testing.assert_array_equal(array, before[name], err_msg=name)

    def test_learning_rate_drops(self, small_sequence, tiny_train_values):
        config = build_config({**tiny_train_values, "epochs": "2", "decay_fraction": "0.5"})
        result = train(config, [small_sequence])
        assert [r["lr"] for r in result.step_log] == pytest.approx([1e-3, 1e-3, 1e-4, 1e-4])

    def test_non_finite_loss_aborts(self, small_sequence, tiny_train_config):
        model = build_model(tiny_train_config)
        model.head.cls.projection.bias.assign(np.full(1, np.nan))
        before = model.backbone.state_dict()
        with pytest.raises(TrainingError) as info:
            train(tiny_train_config, [small_sequence], model=model, steps=2)
        assert info.value.step == 0
        assert np.isnan(info.value.breakdown["cls"])
        for name, array in model.backbone.state_dict().items():
            np.testing.assert_array_equal(array, before[name], err_msg=name)

    def test_needs_sequences(self, tiny_train_config):
        with pytest.raises(TrainingError):
            train(tiny_train_config, [])

    def test_step_log_csv(self, small_sequence, tiny_train_config, tmp_path):
        result = train(tiny_train_config, [small_sequence], steps=2)
        path = tmp_path / "steps.csv"
        write_step_log(path, result.step_log)
        with open(path) as handle:
            rows = list(csv.DictReader(handle))
        assert len(rows) == 2
        assert set(rows[0]) >= {"step", "lr", "total", "cls", "iou", "l1", "unmix"}

    def test_load_sequences(self, small_scene, tmp_path):
        generate_dataset(small_scene, tmp_path, count=2)
        sequences = load_sequences(tmp_path)
        assert len(sequences) == 2 and sequences[0].bands == 8


@pytest.mark.slow
def test_desk_training_tracks_held_out_sequences():
    scene = SceneSpec(bands=16, height=128, width=128, frames=16, endmembers=4, snr_db=30.0, seed=21)
    train_sequences = [gen_sequence(scene.model_copy(update={"index": i})) for i in range(8)]
    held_out = [gen_sequence(scene.model_copy(update={"index": 100 + i})) for i in range(4)]

    ratios, dps, aucs = [], [], []
    for seed in (0, 1, 2):
        config = build_config({"profile": "desk", "seed": str(seed)})
        result = train(config, train_sequences, steps=200)
        totals = [record["total"] for record in result.step_log]
        ratios.append(np.mean(totals[-10:]) / np.mean(totals[:10]))
        combined, _ = evaluate_model(result.model, held_out, rho=config.rho)
        dps.append(combined.dp)
        aucs.append(combined.auc)

    assert np.median(ratios) <= 0.5
    assert np.median(dps) >= 0.8
    assert np.median(aucs) >= 0.5
