"""
Tests for the ablation sweep tables and summaries
"""

import csv

import orjson
import pytest

from lib.ablation import ABLATION_AXES, AblationError, AblationRow, run_ablation, summarize, write_ablation
from lib.synthdata import SceneSpec, camouflage_stats, gen_sequence
from lib.training import build_config


def test_every_variant_builds_a_config():
    for axis, table in ABLATION_AXES.items():
        for variant, overrides in table.items():
            build_config(dict(overrides))


def test_component_axis_isolates_each_addition():
    table = ABLATION_AXES["components"]
    assert list(table) == ["baseline", "prompts", "prompts_unmixing", "full"]
    assert build_config(table["prompts_unmixing"]).lambda_u == 0.0


def test_unknown_axis_and_variant(small_sequence):
    with pytest.raises(AblationError, match="Unknown ablation axis"):
        run_ablation("dropout", {}, [small_sequence], [small_sequence])
    with pytest.raises(AblationError, match="no variants"):
        run_ablation("fusion", {}, [small_sequence], [small_sequence], variants=["sum"])


def test_summary_takes_medians():
    rows = [AblationRow("fusion", "add", seed, dp, auc)
            for seed, (dp, auc) in enumerate([(0.1, 0.2), (0.5, 0.3), (0.4, 0.9)])]
    rows.append(AblationRow("fusion", "fpfm", 0, 0.7, 0.6))
    summary = summarize(rows)
    assert list(summary) == ["add", "fpfm"]
    assert summary["add"] == {"dp": 0.4, "auc": 0.3, "seeds": 3}
    assert summary["fpfm"]["seeds"] == 1


def test_write_ablation(tmp_path):
    rows = [AblationRow("r", "4", 0, 0.5, 0.25), AblationRow("r", "4", 1, 0.75, 0.5)]
    write_ablation(tmp_path / "out", rows)
    with open(tmp_path / "out" / "ablation.csv") as handle:
        table = list(csv.DictReader(handle))
    assert [r["seed"] for r in table] == ["0", "1"]
    summary = orjson.loads((tmp_path / "out" / "ablation.json").read_bytes())
    assert summary["4"]["dp"] == pytest.approx(0.625)


@pytest.mark.slow
def test_tiny_sweep_runs(small_sequence, tiny_train_values):
    rows = run_ablation("fusion", tiny_train_values, [small_sequence], [small_sequence], seeds=(0,),
                        steps=1, variants=["fpfm", "add"])
    assert [(r.variant, r.seed) for r in rows] == [("fpfm", 0), ("add", 0)]
    assert all(0.0 <= r.dp <= 1.0 and 0.0 <= r.auc <= 1.0 for r in rows)


@pytest.mark.slow
def test_material_prompts_help_on_camouflage():
    scene = SceneSpec(bands=16, height=128, width=128, frames=16, endmembers=4, snr_db=30.0,
                      camouflage=True, seed=31)
    train_sequences = [gen_sequence(scene.model_copy(update={"index": i})) for i in range(6)]
    held_out = [gen_sequence(scene.model_copy(update={"index": 100 + i})) for i in range(4)]
    for record in held_out:
        stats = camouflage_stats(record.cubes[0], record.boxes[0])
        assert stats.false_color_contrast <= 0.02 and stats.spectral_sad >= 0.3

    rows = run_ablation("components", {"profile": "desk"}, train_sequences, held_out, seeds=(0, 1, 2),
                        steps=200, variants=["baseline", "full"])
    summary = summarize(rows)
    assert summary["full"]["auc"] > summary["baseline"]["auc"]
