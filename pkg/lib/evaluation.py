"""
One-pass evaluation: tracker wrapper, per-sequence runs and DP/AUC metrics
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Union

import numpy as np
import orjson
import structlog

from lib.config import settings
from lib.objectives import decode_boxes
from lib.synthdata import SequenceRecord, crop_and_resize, crop_window
from lib.tracker import MaterialTracker
from lib.training import SEARCH_CONTEXT, TEMPLATE_CONTEXT

logger = structlog.get_logger()

DP_THRESHOLD = 20.0
IOU_THRESHOLDS = np.arange(21) / 20.0


class EvaluationError(ValueError):
    """Inconsistent predictions, ground truth or sequences"""
    pass


@dataclass
class OpeResult:
    """Distance precision at 20 px, success AUC and the per-frame errors behind them"""

    dp: float
    auc: float
    center_errors: List[float] = field(default_factory=list)
    ious: List[float] = field(default_factory=list)
    success: List[float] = field(default_factory=list)

    def summary(self) -> Dict[str, float]:
        return {"dp": self.dp, "auc": self.auc, "frames": len(self.ious)}


def box_iou(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """IoU of row-aligned (x, y, w, h) boxes"""
    pred, gt = np.atleast_2d(pred), np.atleast_2d(gt)
    # areas from corners so identical boxes give exactly 1
    p0, p1 = pred[:, :2], pred[:, :2] + pred[:, 2:]
    g0, g1 = gt[:, :2], gt[:, :2] + gt[:, 2:]
    lo, hi = np.maximum(p0, g0), np.minimum(p1, g1)
    inter = np.prod(np.clip(hi - lo, 0, None), axis=1)
    union = np.prod(p1 - p0, axis=1) + np.prod(g1 - g0, axis=1) - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def center_errors(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred, gt = np.atleast_2d(pred), np.atleast_2d(gt)
    delta = (pred[:, :2] + pred[:, 2:] / 2) - (gt[:, :2] + gt[:, 2:] / 2)
    return np.hypot(delta[:, 0], delta[:, 1])


def ope_metrics(pred: np.ndarray, gt: np.ndarray) -> OpeResult:
    """DP@20 and the 21-threshold success AUC (IoU >= tau, inclusive)"""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    if pred.shape != gt.shape:
        raise EvaluationError(f"{len(pred)} predicted boxes for {len(gt)} ground-truth boxes")
    if len(gt) == 0:
        raise EvaluationError("Need at least one frame")

    errors = center_errors(pred, gt)
    ious = box_iou(pred, gt)
    success = (ious[None, :] >= IOU_THRESHOLDS[:, None]).mean(axis=1)
    return OpeResult(
        dp=float(np.mean(errors <= DP_THRESHOLD)),
        auc=float(success.mean()),
        center_errors=errors.tolist(),
        ious=ious.tolist(),
        success=success.tolist(),
    )


class Tracker(Protocol):
    def initialize(self, frame: np.ndarray, box: np.ndarray) -> None: ...

    def track(self, frame: np.ndarray) -> np.ndarray: ...


def clip_box(box: np.ndarray, height: int, width: int, min_size: float = 1.0) -> np.ndarray:
    """Keep a box inside the frame with at least min_size extent"""
    x, y, w, h = box
    x = float(np.clip(x, 0.0, width - min_size))
    y = float(np.clip(y, 0.0, height - min_size))
    w = float(np.clip(w, min_size, width - x))
    h = float(np.clip(h, min_size, height - y))
    return np.array([x, y, w, h])


class ModelTracker:
    """Crop around the previous prediction, run the model, map the box back to the frame"""

    def __init__(self, model: MaterialTracker, rho: float = 0.25):
        self.model = model.eval()
        self.rho = rho
        self.template: Optional[np.ndarray] = None
        self.box: Optional[np.ndarray] = None

    def initialize(self, frame: np.ndarray, box: np.ndarray) -> None:
        bb = self.model.config.backbone
        box = np.asarray(box, dtype=np.float64)
        window = crop_window((box[0] + box[2] / 2, box[1] + box[3] / 2), (box[2], box[3]),
                             TEMPLATE_CONTEXT, bb.template_size)
        self.template = crop_and_resize(frame, window)[None]
        self.box = box

    def track(self, frame: np.ndarray) -> np.ndarray:
        if self.template is None:
            raise EvaluationError("Tracker used before initialize()")
        bb = self.model.config.backbone
        x, y, w, h = self.box
        window = crop_window((x + w / 2, y + h / 2), (w, h), SEARCH_CONTEXT, bb.search_size)
        search = crop_and_resize(frame, window)[None]
        out = self.model(self.template, search, rho=self.rho)
        in_crop = decode_boxes(out.head, stride=bb.patch_size, search_size=bb.search_size)[0]
        self.box = clip_box(window.from_crop(in_crop), frame.shape[-2], frame.shape[-1])
        return self.box


def run_sequence(tracker: Tracker, record: SequenceRecord) -> OpeResult:
    """Initialize on frame 0, never re-initialize, score frames 1..T-1"""
    if record.frames < 2:
        raise EvaluationError(f"Sequence has {record.frames} frames; OPE needs at least 2")
    tracker.initialize(record.cubes[0], record.boxes[0])
    preds = np.stack([tracker.track(record.cubes[t]) for t in range(1, record.frames)])
    return ope_metrics(preds, record.boxes[1:])


def combine_results(results: Sequence[OpeResult]) -> OpeResult:
    """Sequence-averaged DP and success curve; per-frame lists concatenated"""
    if not results:
        raise EvaluationError("No sequence results to combine")
    success = np.mean([r.success for r in results], axis=0)
    return OpeResult(
        dp=float(np.mean([r.dp for r in results])),
        auc=float(success.mean()),
        center_errors=[e for r in results for e in r.center_errors],
        ious=[i for r in results for i in r.ious],
        success=success.tolist(),
    )


def evaluate(tracker_factory: Callable[[], Tracker], sequences: Sequence[SequenceRecord],
             workers: Optional[int] = None, names: Optional[Sequence[str]] = None):
    """Run every sequence with a fresh tracker; returns (combined, per-sequence results)"""
    names = list(names) if names is not None else [f"seq_{i:03d}" for i in range(len(sequences))]
    workers = workers or settings.eval_workers

    def run(index: int) -> OpeResult:
        result = run_sequence(tracker_factory(), sequences[index])
        logger.info("sequence_evaluated", sequence=names[index], dp=round(result.dp, 4), auc=round(result.auc, 4))
        return result

    with ThreadPoolExecutor(max_workers=workers) as pool:
        per_sequence = list(pool.map(run, range(len(sequences))))
    combined = combine_results(per_sequence)
    logger.info("evaluation_completed", sequences=len(sequences), dp=round(combined.dp, 4), auc=round(combined.auc, 4))
    return combined, dict(zip(names, per_sequence))


def evaluate_model(model: MaterialTracker, sequences: Sequence[SequenceRecord], rho: float = 0.25,
                   workers: Optional[int] = None, names: Optional[Sequence[str]] = None):
    return evaluate(lambda: ModelTracker(model, rho=rho), sequences, workers=workers, names=names)


def write_metrics_json(path: Union[str, Path], combined: OpeResult, per_sequence: Dict[str, OpeResult]) -> None:
    payload = {
        "overall": combined.summary(),
        "success_curve": {"thresholds": IOU_THRESHOLDS.tolist(), "success": combined.success},
        "sequences": {name: result.summary() for name, result in per_sequence.items()},
    }
    Path(path).write_bytes(orjson.dumps(payload, option=orjson.OPT_INDENT_2))


def write_frame_table(path: Union[str, Path], per_sequence: Dict[str, OpeResult]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["sequence", "frame", "center_error", "iou"])
        for name, result in per_sequence.items():
            for frame, (error, iou) in enumerate(zip(result.center_errors, result.ious), start=1):
                writer.writerow([name, frame, f"{error:.6f}", f"{iou:.6f}"])
