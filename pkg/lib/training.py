"""
Training loop: pair sampling, loss assembly, frozen/joint modes and the step log
"""

import csv
import math
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Union

import numpy as np
import structlog
from pydantic import BaseModel, Field, field_validator, model_validator

from lib.backbone import BackboneConfig
from lib.config import ConfigFileError, read_key_values, settings
from lib.nn import AdamW
from lib.objectives import LossWeights, combine_tracking, target_unmixing_loss, total_loss, tracking_terms
from lib.prompts import PromptConfig
from lib.synthdata import SequenceRecord, crop_and_resize, crop_window, list_sequences, read_hsvc
from lib.tensor import Tape, Tensor
from lib.tracker import MaterialTracker, TrackerConfig

logger = structlog.get_logger()

PROFILES: Dict[str, Dict[str, Any]] = {
    "desk": {"epochs": 3, "pairs_per_epoch": 544, "batch_size": 8, "lr": 5e-4},
    "benchmark": {"epochs": 50, "pairs_per_epoch": 5600, "batch_size": 16, "lr": 4e-5},
}
TEMPLATE_CONTEXT = 2.0
SEARCH_CONTEXT = 4.0


class TrainingError(RuntimeError):
    """Training aborted; carries the step and the loss breakdown at that step"""

    def __init__(self, message: str, step: int, breakdown: Optional[Dict[str, float]] = None):
        super().__init__(f"{message} at step {step}: {breakdown or {}}")
        self.step = step
        self.breakdown = breakdown or {}


class TrainConfig(BaseModel):
    """Optimization schedule, sampling and loss balance; profile fills unset keys"""

    profile: str = Field(default="desk", description="desk|benchmark")
    epochs: int = Field(default=0, ge=0, description="Training epochs (0 = profile value)")
    pairs_per_epoch: int = Field(default=0, ge=0, description="Template/search pairs per epoch (0 = profile value)")
    batch_size: int = Field(default=0, ge=0, description="Pairs per optimizer step (0 = profile value)")
    lr: float = Field(default=0.0, ge=0.0, description="Initial learning rate (0 = profile value)")
    weight_decay: float = Field(default=1e-4, ge=0.0, description="Decoupled weight decay")
    decay_fraction: float = Field(default=0.94, gt=0.0, le=1.0, description="Fraction of epochs before the x0.1 drop")
    mode: str = Field(default="joint", description="joint|frozen (frozen keeps backbone weights fixed)")
    warmup_steps: int = Field(default=100, ge=0, description="Steps using the ground-truth relevance mask")
    rho: float = Field(default=0.25, gt=0.0, le=1.0, description="Fraction of search tokens marked target-relevant")
    lambda_u: float = Field(default=0.5, ge=0.0, le=1.0, description="Unmixing vs tracking balance")
    lambda_ce: float = Field(default=0.2, gt=0.0, lt=1.0, description="Background weight in the search unmixing term")
    center_jitter: float = Field(default=0.25, ge=0.0, description="Search-center jitter as a fraction of sqrt(w h)")
    scale_jitter: float = Field(default=0.15, ge=0.0, description="Log-scale jitter of the search window")
    log_every: int = Field(default=10, ge=1, description="Steps between training_step log events")
    seed: int = Field(default=0, ge=0, description="Sampling seed")
    model: TrackerConfig = Field(default_factory=TrackerConfig)

    @field_validator("profile")
    @classmethod
    def validate_profile(cls, v: str) -> str:
        if v not in PROFILES:
            raise ValueError(f"profile must be one of {sorted(PROFILES)}")
        return v

    @field_validator("mode")
    @classmethod
    def validate_mode(cls, v: str) -> str:
        if v not in ("joint", "frozen"):
            raise ValueError("mode must be joint or frozen")
        return v

    @model_validator(mode="after")
    def apply_profile(self) -> "TrainConfig":
        for key, value in PROFILES[self.profile].items():
            if not getattr(self, key):
                setattr(self, key, value)
        return self

    @property
    def steps_per_epoch(self) -> int:
        return max(1, self.pairs_per_epoch // self.batch_size)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def decay_step(self) -> int:
        return math.ceil(self.decay_fraction * self.epochs) * self.steps_per_epoch

    def loss_weights(self) -> LossWeights:
        return LossWeights(unmix=self.lambda_u, ce=self.lambda_ce)


def build_config(values: Dict[str, Any]) -> TrainConfig:
    """Route flat key=value settings to the train, model, backbone and prompt configs"""
    groups: Dict[str, Dict[str, Any]] = {"train": {}, "model": {}, "backbone": {}, "prompt": {}}
    owners = (
        ("train", set(TrainConfig.model_fields) - {"model"}),
        ("model", set(TrackerConfig.model_fields) - {"backbone", "prompt"}),
        ("backbone", set(BackboneConfig.model_fields)),
        ("prompt", set(PromptConfig.model_fields)),
    )
    aliases = {"r": "endmembers"}
    values = {"seed": settings.default_seed, **values}
    for raw_key, value in values.items():
        key = aliases.get(raw_key, raw_key)
        for group, fields in owners:
            if key in fields:
                groups[group][key] = value
                # one seed drives sampling and initialization
                if key == "seed":
                    groups["model"][key] = value
                break
        else:
            raise ConfigFileError(f"Unknown config key: {raw_key}")

    model = dict(groups["model"], backbone=BackboneConfig(**groups["backbone"]),
                 prompt=PromptConfig(**groups["prompt"]))
    return TrainConfig(**groups["train"], model=TrackerConfig(**model))


def load_train_config(path: Union[str, Path]) -> TrainConfig:
    try:
        return build_config(read_key_values(path))
    except ValueError as e:
        raise ConfigFileError(f"{path}: {e}") from e


class TrackSample(NamedTuple):
    """Template (n, 32, 32) and search (n, 64, 64) crops plus the target box in search pixels"""
    template: np.ndarray
    search: np.ndarray
    box: np.ndarray


def make_sample(record: SequenceRecord, frame: int, rng: np.random.Generator, config: TrainConfig) -> TrackSample:
    bb = config.model.backbone
    first = record.boxes[0]
    first_window = crop_window((first[0] + first[2] / 2, first[1] + first[3] / 2), (first[2], first[3]),
                               TEMPLATE_CONTEXT, bb.template_size)
    template = crop_and_resize(record.cubes[0], first_window)

    x, y, w, h = record.boxes[frame]
    extent = math.sqrt(w * h)
    shift = rng.uniform(-1.0, 1.0, size=2) * config.center_jitter * extent
    scale = math.exp(rng.uniform(-1.0, 1.0) * config.scale_jitter)
    window = crop_window((x + w / 2 + shift[0], y + h / 2 + shift[1]), (w * scale, h * scale),
                         SEARCH_CONTEXT, bb.search_size)
    search = crop_and_resize(record.cubes[frame], window)

    box = window.to_crop(record.boxes[frame])
    x0, y0 = np.clip(box[:2], 0.0, bb.search_size - 1.0)
    x1, y1 = np.clip(box[:2] + box[2:], np.array([x0, y0]) + 1.0, float(bb.search_size))
    return TrackSample(template=template, search=search, box=np.array([x0, y0, x1 - x0, y1 - y0]))


def sample_batch(sequences: List[SequenceRecord], rng: np.random.Generator, config: TrainConfig) -> TrackSample:
    """Stacked batch of random (sequence, frame) pairs"""
    samples = []
    for _ in range(config.batch_size):
        record = sequences[rng.integers(len(sequences))]
        frame = int(rng.integers(1, record.frames)) if record.frames > 1 else 0
        samples.append(make_sample(record, frame, rng, config))
    return TrackSample(*(np.stack(parts) for parts in zip(*samples)))


class LossBreakdown(NamedTuple):
    total: Tensor
    track: Tensor
    cls: Tensor
    iou: Tensor
    l1: Tensor
    unmix: Optional[Tensor]

    def values(self) -> Dict[str, float]:
        out = {name: value.item() for name, value in self._asdict().items() if value is not None}
        if self.unmix is None:
            out["unmix"] = float("nan")
        return out


def compute_losses(model: MaterialTracker, batch: TrackSample, config: TrainConfig, warm: bool) -> LossBreakdown:
    weights = config.loss_weights()
    out = model(batch.template, batch.search, rho=config.rho, gt_box=batch.box if warm else None)
    terms = tracking_terms(out.head, batch.box, stride=config.model.backbone.patch_size,
                           search_size=config.model.backbone.search_size)
    track = combine_tracking(terms, weights)

    unmix = None
    if out.recon_template is not None:
        unmix = target_unmixing_loss(out.recon_template, batch.template, out.recon_search, batch.search,
                                     out.mask, weights.ce)
    total = total_loss(track, unmix, weights.unmix) if unmix is not None else track
    return LossBreakdown(total=total, track=track, cls=terms.cls, iou=terms.iou, l1=terms.l1, unmix=unmix)


class TrainResult(NamedTuple):
    model: MaterialTracker
    step_log: List[Dict[str, float]]


def build_model(config: TrainConfig) -> MaterialTracker:
    model = MaterialTracker(config.model)
    if config.mode == "frozen":
        model.backbone.freeze()
    return model


def train(config: TrainConfig, sequences: List[SequenceRecord],
          model: Optional[MaterialTracker] = None, steps: Optional[int] = None) -> TrainResult:
    """Optimize the composed loss; steps overrides the schedule length"""
    if not sequences:
        raise TrainingError("No training sequences", 0)
    model = model or build_model(config)
    if config.mode == "frozen":
        model.backbone.freeze()
    model.train()
    optimizer = AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay,
                      decay_step=config.decay_step)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    total_steps = config.total_steps if steps is None else steps

    logger.info("training_started", steps=total_steps, mode=config.mode, profile=config.profile,
                parameters=len(optimizer.params), sequences=len(sequences))
    step_log: List[Dict[str, float]] = []
    for step in range(total_steps):
        batch = sample_batch(sequences, rng, config)
        warm = step < config.warmup_steps
        with Tape() as tape:
            losses = compute_losses(model, batch, config, warm)
            breakdown = losses.values()
            if not np.isfinite(breakdown["total"]):
                raise TrainingError("Non-finite loss", step, breakdown)
            tape.backward(losses.total)

        lr = optimizer.current_lr()
        optimizer.step(tape)
        record = {"step": step, "epoch": step // config.steps_per_epoch, "lr": lr, "warmup": int(warm), **breakdown}
        step_log.append(record)
        if step % config.log_every == 0:
            logger.info("training_step", **{k: round(v, 6) if isinstance(v, float) else v for k, v in record.items()})

    logger.info("training_completed", steps=total_steps,
                final_loss=round(step_log[-1]["total"], 6) if step_log else None)
    return TrainResult(model=model, step_log=step_log)


def write_step_log(path: Union[str, Path], step_log: List[Dict[str, float]]) -> None:
    fields = ["step", "epoch", "lr", "warmup", "total", "track", "cls", "iou", "l1", "unmix"]
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=fields)
        writer.writeheader()
        for record in step_log:
            writer.writerow({k: record.get(k) for k in fields})


def load_sequences(data_dir: Union[str, Path]) -> List[SequenceRecord]:
    return [read_hsvc(path) for path in list_sequences(data_dir)]
