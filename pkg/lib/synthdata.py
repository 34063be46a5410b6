"""
Synthetic hyperspectral video with ground truth, and the HSVC container
"""

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Optional, Tuple, Union

import numpy as np
import orjson
import structlog
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy.ndimage import gaussian_filter

from lib.backbone import false_color
from lib.config import ConfigFileError, read_key_values
from lib.unmixing import spectral_angles

logger = structlog.get_logger()

HSVC_MAGIC = b"HSVCUBE1"
HSVC_VERSION = 1
HSVC_HEADER = struct.Struct("<8s6I")
CHECKSUM = struct.Struct("<Q")

MIN_ENDMEMBER_SAD = 0.2
MAX_RESAMPLES = 100
CAMOUFLAGE_SAD = 0.4


class SceneError(ValueError):
    """Scene cannot be generated as specified"""
    pass


class HsvcFormatError(ValueError):
    """Malformed HSVC file; offset is the byte position of the problem"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class SceneSpec(BaseModel):
    """Parameters of one synthetic sequence"""

    bands: int = Field(default=16, ge=2, description="Spectral bands (n)")
    height: int = Field(default=128, gt=0, description="Frame height in pixels")
    width: int = Field(default=128, gt=0, description="Frame width in pixels")
    frames: int = Field(default=24, ge=0, description="Frames per sequence (T)")
    endmembers: int = Field(default=4, ge=2, description="Materials including the reserved target material (r_true)")
    target_size_min: float = Field(default=12.0, gt=0, description="Smallest target side in pixels")
    target_size_max: float = Field(default=20.0, gt=0, description="Largest target side in pixels")
    velocity_max: float = Field(default=1.5, ge=0, description="Largest per-axis speed in pixels per frame")
    jitter: float = Field(default=0.5, ge=0, description="Per-frame positional jitter sigma in pixels")
    snr_db: float = Field(default=30.0, description="Noise SNR in dB; inf disables noise")
    camouflage: bool = Field(default=False, description="Target matches background in false color but not spectrally")
    target_weight: float = Field(default=0.9, ge=0.8, le=1.0, description="Abundance of the target material inside the box")
    field_sharpness: float = Field(default=3.0, gt=0, description="Scale applied to background fields before the softmax")
    field_smoothing: float = Field(default=8.0, gt=0, description="Gaussian low-pass sigma of background fields in pixels")
    pure_fraction: float = Field(default=0.0, ge=0.0, le=1.0, description="Fraction of background pixels snapped to one material")
    sequences: int = Field(default=1, ge=0, description="Sequences written by generate_dataset")
    index: int = Field(default=0, ge=0, description="Sequence index mixed into the seed")
    seed: int = Field(default=0, ge=0, description="Master seed")

    @field_validator("snr_db", mode="before")
    @classmethod
    def validate_snr(cls, v) -> float:
        if isinstance(v, str) and v.strip().lower() in ("inf", "none", ""):
            return math.inf
        return v

    @model_validator(mode="after")
    def validate_scene(self) -> "SceneSpec":
        if self.bands < self.endmembers:
            raise ValueError(f"bands ({self.bands}) must be >= endmembers ({self.endmembers})")
        if self.target_size_min > self.target_size_max:
            raise ValueError("target_size_min exceeds target_size_max")
        if self.target_size_max >= min(self.height, self.width):
            raise ValueError(f"Target up to {self.target_size_max} px does not fit a {self.height}x{self.width} frame")
        return self

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "SceneSpec":
        try:
            return cls(**read_key_values(path))
        except ValueError as e:
            raise ConfigFileError(f"{path}: {e}") from e


@dataclass
class SequenceRecord:
    """Frames (T, n, h, w), boxes (T, 4), endmembers (n, r) and abundances (T, r, h, w)"""

    cubes: np.ndarray
    boxes: np.ndarray
    endmembers: np.ndarray
    abundances: np.ndarray

    @property
    def frames(self) -> int:
        return self.cubes.shape[0]

    @property
    def bands(self) -> int:
        return self.endmembers.shape[0]

    @property
    def spatial(self) -> Tuple[int, int]:
        return self.abundances.shape[-2], self.abundances.shape[-1]


class CamouflageStats(NamedTuple):
    false_color_contrast: float
    spectral_sad: float


def mix(endmembers: np.ndarray, abundances: np.ndarray) -> np.ndarray:
    """Linear mixture M A for (r, h, w) or (T, r, h, w) abundances"""
    return np.einsum("nr,...rhw->...nhw", endmembers, abundances)


def _min_pairwise_sad(matrix: np.ndarray) -> float:
    angles = spectral_angles(matrix, matrix)
    off_diagonal = angles[~np.eye(matrix.shape[1], dtype=bool)]
    return float(off_diagonal.min()) if off_diagonal.size else math.pi


def _bump_spectrum(bands: int, rng: np.random.Generator) -> np.ndarray:
    index = np.arange(bands, dtype=np.float64)
    spectrum = np.zeros(bands)
    for _ in range(rng.integers(1, 4)):
        center = rng.uniform(0, bands - 1)
        width = rng.uniform(max(bands / 16.0, 0.8), bands / 4.0)
        spectrum += rng.uniform(0.3, 1.0) * np.exp(-0.5 * ((index - center) / width) ** 2)
    return spectrum / spectrum.max()


def gen_endmembers(count: int, bands: int, seed: Union[int, np.random.SeedSequence]) -> np.ndarray:
    """Gaussian-bump spectra with peak 1 and pairwise SAD >= 0.2 rad, shape (bands, count)"""
    if count > bands:
        raise SceneError(f"Cannot place {count} endmembers in {bands} bands")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for attempt in range(MAX_RESAMPLES):
        matrix = np.stack([_bump_spectrum(bands, rng) for _ in range(count)], axis=1)
        worst = _min_pairwise_sad(matrix)
        if worst >= MIN_ENDMEMBER_SAD:
            return matrix
        logger.debug("endmember_resample", attempt=attempt, min_sad=round(worst, 4))
    raise SceneError(
        f"No endmember set with pairwise SAD >= {MIN_ENDMEMBER_SAD} after {MAX_RESAMPLES} draws "
        f"(r={count}, n={bands}, best last min SAD {worst:.4f})"
    )


def _background_abundances(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Softmax over smoothed random fields; the reserved target channel stays 0"""
    materials = spec.endmembers - 1
    fields = rng.standard_normal((materials, spec.height, spec.width))
    fields = gaussian_filter(fields, sigma=(0, spec.field_smoothing, spec.field_smoothing), mode="wrap")
    fields = (fields - fields.mean(axis=(1, 2), keepdims=True)) / (fields.std(axis=(1, 2), keepdims=True) + 1e-12)
    logits = spec.field_sharpness * fields
    weights = np.exp(logits - logits.max(axis=0, keepdims=True))
    weights /= weights.sum(axis=0, keepdims=True)

    if spec.pure_fraction > 0 and materials > 1:
        pixels = spec.height * spec.width
        chosen = rng.choice(pixels, size=int(round(spec.pure_fraction * pixels)), replace=False)
        flat = weights.reshape(materials, -1)
        dominant = np.argmax(flat[:, chosen], axis=0)
        flat[:, chosen] = 0.0
        flat[dominant, chosen] = 1.0

    abundances = np.zeros((spec.endmembers, spec.height, spec.width))
    abundances[:materials] = weights
    return abundances


def _camouflage_target(background: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Spectrum with the false-color band-group means of background but SAD >= 0.4 rad"""
    groups = np.array_split(np.arange(background.shape[0]), 3)
    for _ in range(MAX_RESAMPLES):
        pattern = rng.choice([-1.0, 1.0], size=background.shape[0]) + 0.25 * rng.standard_normal(background.shape[0])
        # zero background-weighted mean inside each band group
        for group in groups:
            pattern[group] -= np.sum(background[group] * pattern[group]) / np.sum(background[group])
        if pattern.min() >= 0:
            continue
        ceiling = 0.95 / -pattern.min()
        for amplitude in np.linspace(0.05, ceiling, 40):
            target = background * (1.0 + amplitude * pattern)
            sad = float(spectral_angles(target[:, None], background[:, None])[0, 0])
            if sad >= CAMOUFLAGE_SAD:
                return target
    raise SceneError(f"No camouflage spectrum reached SAD {CAMOUFLAGE_SAD} after {MAX_RESAMPLES} draws")


def _box_track(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Linear motion reflected at the frame border plus per-frame jitter"""
    w = rng.uniform(spec.target_size_min, spec.target_size_max)
    h = rng.uniform(spec.target_size_min, spec.target_size_max)
    x_max, y_max = spec.width - w, spec.height - h
    x, y = rng.uniform(0, x_max), rng.uniform(0, y_max)
    vx, vy = rng.uniform(-spec.velocity_max, spec.velocity_max, size=2)

    boxes = np.zeros((spec.frames, 4))
    for t in range(spec.frames):
        jx, jy = rng.normal(0.0, spec.jitter, size=2) if spec.jitter > 0 else (0.0, 0.0)
        boxes[t] = (np.clip(x + jx, 0, x_max), np.clip(y + jy, 0, y_max), w, h)
        x, y = x + vx, y + vy
        if not 0 <= x <= x_max:
            vx = -vx
            x = float(np.clip(x, 0, x_max))
        if not 0 <= y <= y_max:
            vy = -vy
            y = float(np.clip(y, 0, y_max))
    return boxes


def box_pixel_mask(box: np.ndarray, height: int, width: int) -> np.ndarray:
    """Pixels whose centers lie inside the box (half-open)"""
    x, y, w, h = box
    cols = np.arange(width) + 0.5
    rows = np.arange(height) + 0.5
    return ((rows[:, None] >= y) & (rows[:, None] < y + h)) & ((cols[None, :] >= x) & (cols[None, :] < x + w))


def gen_sequence(spec: SceneSpec) -> SequenceRecord:
    """Mixture frames M A + noise with every piece of ground truth retained"""
    seeds = np.random.SeedSequence([spec.seed, spec.index])
    material_seed, field_seed, motion_seed, noise_seed = seeds.spawn(4)
    frame_seeds = noise_seed.spawn(spec.frames)

    endmembers = gen_endmembers(spec.endmembers, spec.bands, material_seed)
    field_rng = np.random.default_rng(field_seed)
    background = _background_abundances(spec, field_rng)
    target_weight = spec.target_weight
    if spec.camouflage:
        mean_background = mix(endmembers, background).reshape(spec.bands, -1).mean(axis=1)
        endmembers[:, -1] = _camouflage_target(mean_background, field_rng)
        target_weight = 1.0

    boxes = _box_track(spec, np.random.default_rng(motion_seed))
    target = np.zeros(spec.endmembers)
    target[-1] = 1.0

    abundances = np.zeros((spec.frames, spec.endmembers, spec.height, spec.width))
    cubes = np.zeros((spec.frames, spec.bands, spec.height, spec.width))
    for t in range(spec.frames):
        inside = box_pixel_mask(boxes[t], spec.height, spec.width)
        frame = background.copy()
        frame[:, inside] = target_weight * target[:, None] + (1.0 - target_weight) * background[:, inside]
        abundances[t] = frame

        clean = mix(endmembers, frame)
        if math.isfinite(spec.snr_db):
            sigma = math.sqrt(float(np.mean(clean ** 2)) / 10.0 ** (spec.snr_db / 10.0))
            clean = clean + np.random.default_rng(frame_seeds[t]).normal(0.0, sigma, size=clean.shape)
        cubes[t] = clean

    logger.info("sequence_generated", index=spec.index, frames=spec.frames, bands=spec.bands,
                endmembers=spec.endmembers, camouflage=spec.camouflage)
    return SequenceRecord(cubes=cubes, boxes=boxes, endmembers=endmembers, abundances=abundances)


def camouflage_stats(cube: np.ndarray, box: np.ndarray) -> CamouflageStats:
    """False-color contrast and mean spectral angle between target and background pixels"""
    cube = np.asarray(cube, dtype=np.float64)
    inside = box_pixel_mask(np.asarray(box, dtype=np.float64), cube.shape[-2], cube.shape[-1])
    if not inside.any() or inside.all():
        raise SceneError("Box must split the frame into target and background pixels")

    rendered = false_color(cube)
    contrast = float(np.mean(np.abs(rendered[:, inside].mean(axis=1) - rendered[:, ~inside].mean(axis=1))))
    background = cube[:, ~inside].mean(axis=1)
    angles = spectral_angles(cube[:, inside], background[:, None])
    return CamouflageStats(false_color_contrast=contrast, spectral_sad=float(angles.mean()))


# HSVC container

def _f32_bytes(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype="<f4").tobytes()


def encode_hsvc(record: SequenceRecord) -> bytes:
    frames = record.frames
    bands, materials = record.endmembers.shape
    height, width = record.spatial
    if record.cubes.shape != (frames, bands, height, width):
        raise SceneError(f"Cubes {record.cubes.shape} do not match ({frames}, {bands}, {height}, {width})")
    if record.boxes.shape != (frames, 4):
        raise SceneError(f"Boxes {record.boxes.shape} do not match {frames} frames")

    body = b"".join([
        HSVC_HEADER.pack(HSVC_MAGIC, HSVC_VERSION, bands, height, width, frames, materials),
        _f32_bytes(record.cubes),
        _f32_bytes(record.endmembers),
        _f32_bytes(record.abundances),
        _f32_bytes(record.boxes),
    ])
    checksum = int(np.frombuffer(body, dtype=np.uint8).sum(dtype=np.uint64))
    return body + CHECKSUM.pack(checksum)


class _ByteReader:
    """Sequential reader that reports truncation with the offending offset"""

    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.raw):
            raise HsvcFormatError(f"Truncated {what}: need {count} bytes, {len(self.raw) - self.pos} left", self.pos)
        chunk = self.raw[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def floats(self, shape: Tuple[int, ...], what: str) -> np.ndarray:
        count = int(np.prod(shape))
        chunk = self.take(4 * count, what)
        return np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape)


def decode_hsvc(raw: bytes) -> SequenceRecord:
    reader = _ByteReader(raw)
    header = reader.take(HSVC_HEADER.size, "header")
    magic, version, bands, height, width, frames, materials = HSVC_HEADER.unpack(header)
    if magic != HSVC_MAGIC:
        raise HsvcFormatError(f"Bad magic {magic!r}, expected {HSVC_MAGIC!r}", 0)
    if version != HSVC_VERSION:
        raise HsvcFormatError(f"Unsupported version {version}, expected {HSVC_VERSION}", len(HSVC_MAGIC))

    cubes = reader.floats((frames, bands, height, width), "frames")
    endmembers = reader.floats((bands, materials), "endmember matrix")
    abundances = reader.floats((frames, materials, height, width), "abundance maps")
    boxes = reader.floats((frames, 4), "boxes")

    body_end = reader.pos
    (stored,) = CHECKSUM.unpack(reader.take(CHECKSUM.size, "checksum"))
    computed = int(np.frombuffer(raw[:body_end], dtype=np.uint8).sum(dtype=np.uint64))
    if stored != computed:
        raise HsvcFormatError(f"Checksum mismatch: stored {stored}, computed {computed}", body_end)
    if reader.pos != len(raw):
        raise HsvcFormatError(f"{len(raw) - reader.pos} trailing bytes after checksum", reader.pos)

    return SequenceRecord(cubes=cubes, boxes=boxes, endmembers=endmembers, abundances=abundances)


def write_hsvc(path: Union[str, Path], record: SequenceRecord) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_hsvc(record)
    path.write_bytes(payload)
    logger.info("hsvc_written", path=str(path), frames=record.frames, size=len(payload))


def read_hsvc(path: Union[str, Path]) -> SequenceRecord:
    path = Path(path)
    record = decode_hsvc(path.read_bytes())
    logger.debug("hsvc_read", path=str(path), frames=record.frames)
    return record


# Annotations sidecar

def write_annotations(path: Union[str, Path], boxes: np.ndarray) -> None:
    """JSON object: frame index -> [x, y, w, h]"""
    payload = {str(t): [float(v) for v in box] for t, box in enumerate(np.asarray(boxes))}
    Path(path).write_bytes(orjson.dumps(payload, option=orjson.OPT_INDENT_2))


def read_annotations(path: Union[str, Path]) -> np.ndarray:
    data = orjson.loads(Path(path).read_bytes())
    if not isinstance(data, dict):
        raise SceneError(f"{path}: annotations must be a JSON object")
    try:
        order = sorted(data, key=int)
    except ValueError as e:
        raise SceneError(f"{path}: frame keys must be integers") from e
    if [int(k) for k in order] != list(range(len(order))):
        raise SceneError(f"{path}: frame indices are not contiguous from 0")
    boxes = np.array([data[k] for k in order], dtype=np.float64).reshape(-1, 4)
    return boxes


# Crops

class CropWindow(NamedTuple):
    """Square source window (x0, y0, side) resampled to out_size pixels"""
    x0: float
    y0: float
    side: float
    out_size: int

    @property
    def scale(self) -> float:
        return self.out_size / self.side

    def to_crop(self, box: np.ndarray) -> np.ndarray:
        x, y, w, h = np.asarray(box, dtype=np.float64)
        s = self.scale
        return np.array([(x - self.x0) * s, (y - self.y0) * s, w * s, h * s])

    def from_crop(self, box: np.ndarray) -> np.ndarray:
        x, y, w, h = np.asarray(box, dtype=np.float64)
        s = self.scale
        return np.array([x / s + self.x0, y / s + self.y0, w / s, h / s])


def crop_window(center: Tuple[float, float], box_size: Tuple[float, float],
                context: float, out_size: int) -> CropWindow:
    """Window of side context * sqrt(w h) centered on center"""
    side = max(context * math.sqrt(max(box_size[0], 1e-6) * max(box_size[1], 1e-6)), 1.0)
    return CropWindow(center[0] - side / 2.0, center[1] - side / 2.0, side, out_size)


def crop_and_resize(cube: np.ndarray, window: CropWindow) -> np.ndarray:
    """Nearest-neighbor resample of (n, H, W) to (n, out, out); outside pixels are 0"""
    cube = np.asarray(cube, dtype=np.float64)
    height, width = cube.shape[-2:]
    steps = (np.arange(window.out_size) + 0.5) / window.scale
    cols = np.floor(window.x0 + steps).astype(int)
    rows = np.floor(window.y0 + steps).astype(int)
    valid_cols = (cols >= 0) & (cols < width)
    valid_rows = (rows >= 0) & (rows < height)

    out = cube[..., np.clip(rows, 0, height - 1)[:, None], np.clip(cols, 0, width - 1)[None, :]]
    return out * (valid_rows[:, None] & valid_cols[None, :])


def generate_dataset(spec: SceneSpec, out_dir: Union[str, Path], count: Optional[int] = None,
                     prefix: str = "seq") -> List[Path]:
    """Write count sequences as <prefix>_NNN.hsvc plus JSON annotation sidecars"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = spec.sequences if count is None else count
    written = []
    for index in range(count):
        record = gen_sequence(spec.model_copy(update={"index": index}))
        path = out_dir / f"{prefix}_{index:03d}.hsvc"
        write_hsvc(path, record)
        write_annotations(path.with_suffix(".json"), record.boxes)
        written.append(path)
    logger.info("dataset_generated", out_dir=str(out_dir), sequences=count)
    return written


def list_sequences(data_dir: Union[str, Path]) -> List[Path]:
    paths = sorted(Path(data_dir).glob("*.hsvc"))
    if not paths:
        raise SceneError(f"No .hsvc sequences under {data_dir}")
    return paths
