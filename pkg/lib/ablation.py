"""
Ablation sweeps: train and evaluate config variants along one axis
"""

import csv
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np
import orjson
import structlog

from lib.evaluation import evaluate_model
from lib.synthdata import SequenceRecord
from lib.training import build_config, train

logger = structlog.get_logger()

ABLATION_AXES: Dict[str, Dict[str, Dict[str, Any]]] = {
    "components": {
        "baseline": {"prompts": False, "unmixing": False},
        "prompts": {"prompts": True, "unmixing": False},
        "prompts_unmixing": {"prompts": True, "unmixing": True, "lambda_u": 0.0},
        "full": {"prompts": True, "unmixing": True},
    },
    "amd": {name: {"amd_variant": name} for name in ("haar", "split", "haar_only", "random_split", "fourier")},
    "operators": {
        f"ll_{ll}_hf_{hf}": {"ll_operator": ll, "hf_operator": hf}
        for ll in ("attn", "conv") for hf in ("conv", "attn")
    },
    "fusion": {name: {"fusion": name} for name in ("fpfm", "add", "conv", "attention")},
    "depth": {
        "12": {"injection_layers": "12"},
        "1": {"injection_layers": "1"},
        "1,4,8,12": {"injection_layers": "1,4,8,12"},
        "1,2,4,6,8,10,12": {"injection_layers": "1,2,4,6,8,10,12"},
        "all": {"injection_layers": ",".join(str(i) for i in range(1, 13))},
    },
    "lambda_u": {str(v): {"lambda_u": v} for v in (0.0, 0.25, 0.5, 0.75, 1.0)},
    "lambda_ce": {str(v): {"lambda_ce": v} for v in (0.1, 0.2, 0.5, 0.8)},
    "r": {str(v): {"endmembers": v} for v in (4, 6, 8)},
}


class AblationError(ValueError):
    """Unknown axis or variant"""
    pass


class AblationRow(NamedTuple):
    axis: str
    variant: str
    seed: int
    dp: float
    auc: float


def run_ablation(axis: str, base: Dict[str, Any], train_sequences: Sequence[SequenceRecord],
                 eval_sequences: Sequence[SequenceRecord], seeds: Sequence[int] = (0, 1, 2),
                 steps: Optional[int] = None, variants: Optional[Sequence[str]] = None) -> List[AblationRow]:
    """Train each variant of axis per seed, then evaluate on the held-out sequences"""
    if axis not in ABLATION_AXES:
        raise AblationError(f"Unknown ablation axis '{axis}'; known: {sorted(ABLATION_AXES)}")
    table = ABLATION_AXES[axis]
    chosen = list(variants) if variants else list(table)
    missing = [v for v in chosen if v not in table]
    if missing:
        raise AblationError(f"Axis '{axis}' has no variants {missing}")

    rows = []
    for variant in chosen:
        for seed in seeds:
            config = build_config({**base, **table[variant], "seed": seed})
            model = train(config, list(train_sequences), steps=steps).model
            combined, _ = evaluate_model(model, eval_sequences, rho=config.rho)
            rows.append(AblationRow(axis, variant, seed, combined.dp, combined.auc))
            logger.info("ablation_run", axis=axis, variant=variant, seed=seed,
                        dp=round(combined.dp, 4), auc=round(combined.auc, 4))
    return rows


def summarize(rows: Sequence[AblationRow]) -> Dict[str, Dict[str, float]]:
    """Median DP and AUC per variant"""
    summary: Dict[str, Dict[str, float]] = {}
    for variant in dict.fromkeys(r.variant for r in rows):
        picked = [r for r in rows if r.variant == variant]
        summary[variant] = {
            "dp": float(np.median([r.dp for r in picked])),
            "auc": float(np.median([r.auc for r in picked])),
            "seeds": len(picked),
        }
    return summary


def write_ablation(out_dir: Union[str, Path], rows: Sequence[AblationRow]) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(AblationRow._fields)
        writer.writerows(rows)
    (out_dir / "ablation.json").write_bytes(orjson.dumps(summarize(rows), option=orjson.OPT_INDENT_2))
