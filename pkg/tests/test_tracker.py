"""
Tests for the composed tracker forward pass
"""

import numpy as np
import pytest
from pydantic import ValidationError

from lib.tracker import MaterialTracker, TrackerConfig, tracker_forward


@pytest.fixture
def crops(rng):
    return rng.uniform(0.0, 1.0, (2, 8, 32, 32)), rng.uniform(0.0, 1.0, (2, 8, 64, 64))


def _variant(config: TrackerConfig, **update) -> TrackerConfig:
    return TrackerConfig(**{**config.model_dump(), **update})


class TestConfig:
    def test_backbone_channels_follow_input_mode(self, small_tracker_config):
        assert small_tracker_config.backbone.in_channels == 3
        material = _variant(small_tracker_config, input_mode="material")
        assert material.backbone.in_channels == 6

    def test_encoder_hidden_from_string(self):
        assert TrackerConfig(encoder_hidden="16,8").encoder_hidden == (16, 8)

    @pytest.mark.parametrize("overrides", [
        {"amd_variant": "dct"}, {"input_mode": "rgb"}, {"encoder_hidden": "4"},
    ])
    def test_invalid_choices(self, overrides):
        with pytest.raises(ValidationError):
            TrackerConfig(**overrides)


class TestForward:
    def test_output_shapes(self, small_tracker_config, crops):
        out = MaterialTracker(small_tracker_config)(*crops)
        assert out.head.cls.shape == (2, 1, 8, 8)
        assert out.head.offset.shape == (2, 2, 8, 8)
        assert out.head.size.shape == (2, 2, 8, 8)
        assert out.mask.shape == (2, 8, 8)
        assert out.recon_template.shape == (2, 8, 32, 32)
        assert out.recon_search.shape == (2, 8, 64, 64)
        assert out.state.attention is not None
        for maps in out.head:
            assert np.all((maps.data > 0) & (maps.data < 1))

    def test_single_pair_is_batched(self, small_tracker_config, crops):
        template, search = crops
        out = tracker_forward(MaterialTracker(small_tracker_config), template[0], search[0])
        assert out.head.cls.shape == (1, 1, 8, 8)

    def test_mask_marks_rho_fraction(self, small_tracker_config, crops):
        out = MaterialTracker(small_tracker_config)(*crops, rho=0.5)
        np.testing.assert_array_equal((out.mask == 0).sum(axis=(1, 2)), [32, 32])

    def test_ground_truth_mask_during_warmup(self, small_tracker_config, crops):
        boxes = np.array([[0.0, 0.0, 16.0, 16.0], [48.0, 48.0, 16.0, 16.0]])
        out = MaterialTracker(small_tracker_config)(*crops, gt_box=boxes)
        assert out.mask[0, :2, :2].sum() == 0 and out.mask[0].sum() == 60
        assert out.mask[1, 6:, 6:].sum() == 0 and out.mask[1].sum() == 60

    def test_fresh_prompts_do_not_change_output(self, small_tracker_config, crops):
        prompted = MaterialTracker(small_tracker_config).eval()
        plain = MaterialTracker(_variant(small_tracker_config, prompts=False)).eval()
        assert plain.prompts is None
        a, b = prompted(*crops), plain(*crops)
        for left, right in zip(a.head, b.head):
            np.testing.assert_array_equal(left.data, right.data)

    def test_submodule_seeds_are_independent(self, small_tracker_config):
        full = MaterialTracker(small_tracker_config)
        bare = MaterialTracker(_variant(small_tracker_config, unmixing=False, prompts=False))
        np.testing.assert_array_equal(full.backbone.pos_search.data, bare.backbone.pos_search.data)
        np.testing.assert_array_equal(full.head.cls.projection.weight.data,
                                      bare.head.cls.projection.weight.data)

    def test_without_unmixing(self, small_tracker_config, crops):
        model = MaterialTracker(_variant(small_tracker_config, unmixing=False))
        assert model.unmix is None
        out = model(*crops)
        assert out.recon_template is None and out.recon_search is None
        assert out.head.cls.shape == (2, 1, 8, 8)

    def test_material_input_mode(self, small_tracker_config, crops):
        model = MaterialTracker(_variant(small_tracker_config, input_mode="material"))
        assert model.backbone.patch_embed.weight.shape[1] == 6
        assert model(*crops).head.cls.shape == (2, 1, 8, 8)

    @pytest.mark.parametrize("variant", ["split", "fourier"])
    def test_amd_variants_run(self, small_tracker_config, crops, variant):
        model = MaterialTracker(_variant(small_tracker_config, amd_variant=variant))
        assert model(*crops).head.size.shape == (2, 2, 8, 8)

    def test_same_seed_same_weights(self, small_tracker_config):
        a, b = MaterialTracker(small_tracker_config), MaterialTracker(small_tracker_config)
        for (name, left), right in zip(a.state_dict().items(), b.state_dict().values()):
            np.testing.assert_array_equal(left, right, err_msg=name)
