"""
Autoencoder unmixing, reconstruction losses and abundance map decomposition
"""

from typing import NamedTuple, Optional, Tuple

import numpy as np
import structlog
from scipy.optimize import linear_sum_assignment

from lib.nn import AdamW, Conv2d, Module, Parameter
from lib.tensor import (
    ShapeError, Tape, Tensor, arccos, as_tensor, conv2d, leaky_relu, masked_mul,
    power, reshape, softmax, softplus, tensor_sum
)
from lib.wavelets import haar1d_channels

logger = structlog.get_logger()

SAD_EPS = 1e-12
AMD_VARIANTS = ("haar", "split", "haar_only", "random_split", "fourier")


class UnmixingError(ValueError):
    """Band, endmember or channel count mismatch"""
    pass


class FrequencyBranches(NamedTuple):
    """Low- and high-frequency material maps, each (B, c, h, w)"""
    low: Tensor
    high: Tensor


def _batched(x: Tensor) -> Tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"Expected a (C, h, w) or (B, C, h, w) tensor, got {x.shape}")
    return x, False


def _unbatched(x: Tensor, squeeze: bool) -> Tensor:
    return reshape(x, x.shape[1:]) if squeeze else x


def inverse_softplus(values: np.ndarray) -> np.ndarray:
    values = np.maximum(np.asarray(values, dtype=np.float64), 1e-300)
    return np.where(values > 30.0, values, np.log(np.expm1(np.minimum(values, 30.0))))


class UnmixNet(Module):
    """Per-pixel autoencoder: softmax abundances in, softplus endmembers out

    variant="mlp" uses 1x1 convolutions throughout; variant="conv" makes the
    first encoder layer a 3x3 convolution so abundances see a spatial neighborhood.
    """

    def __init__(self, bands: int, endmembers: int, rng: np.random.Generator,
                 hidden: Tuple[int, int] = (32, 16), variant: str = "mlp"):
        if endmembers < 2 or bands < endmembers:
            raise UnmixingError(f"Need 2 <= endmembers <= bands, got r={endmembers}, n={bands}")
        if variant not in ("mlp", "conv"):
            raise UnmixingError(f"Unknown encoder variant: {variant}")

        first_kernel = 3 if variant == "conv" else 1
        self.bands = bands
        self.endmembers = endmembers
        self.variant = variant
        self.encoder = [
            Conv2d(bands, hidden[0], first_kernel, rng, padding=first_kernel // 2),
            Conv2d(hidden[0], hidden[1], 1, rng),
            Conv2d(hidden[1], endmembers, 1, rng),
        ]
        # Softplus keeps endmember spectra non-negative
        self.endmember_logits = Parameter(inverse_softplus(rng.uniform(0.2, 0.8, size=(bands, endmembers))))

    def endmember_matrix(self) -> Tensor:
        """Activated endmember matrix M (bands x endmembers)"""
        return softplus(self.endmember_logits)

    def endmember_array(self) -> np.ndarray:
        return np.logaddexp(0.0, self.endmember_logits.data)

    def set_endmembers(self, matrix: np.ndarray) -> None:
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (self.bands, self.endmembers):
            raise UnmixingError(f"Endmember matrix {matrix.shape} does not match ({self.bands}, {self.endmembers})")
        self.endmember_logits.assign(inverse_softplus(matrix))

    def init_from_cube(self, cube: np.ndarray) -> np.ndarray:
        """Seed the decoder with maximally distant pixel spectra"""
        spectra = max_distance_endmembers(cube, self.endmembers)
        self.set_endmembers(np.maximum(spectra, 1e-6))
        return spectra


def max_distance_endmembers(cube: np.ndarray, count: int) -> np.ndarray:
    """Pick count pixel spectra by successive orthogonal-projection residual norm"""
    cube = np.asarray(cube, dtype=np.float64)
    pixels = np.moveaxis(cube, -3, 0).reshape(cube.shape[-3], -1)
    residual = pixels.copy()
    chosen = []
    for _ in range(count):
        index = int(np.argmax(np.sum(residual ** 2, axis=0)))
        chosen.append(index)
        basis, _ = np.linalg.qr(pixels[:, chosen])
        residual = pixels - basis @ (basis.T @ pixels)
    return pixels[:, chosen]


def encode(cube: Tensor, net: UnmixNet) -> Tensor:
    """Abundance map on the probability simplex, (r, h, w) or (B, r, h, w)"""
    x, squeeze = _batched(cube)
    if x.shape[1] != net.bands:
        raise UnmixingError(f"Cube has {x.shape[1]} bands, encoder expects {net.bands}")

    hidden = x
    for layer in net.encoder[:-1]:
        hidden = leaky_relu(layer(hidden))
    abundances = softmax(net.encoder[-1](hidden), axis=1)
    return _unbatched(abundances, squeeze)


def decode(abundances: Tensor, net: UnmixNet) -> Tensor:
    """Linear mixture X_hat = M A per pixel"""
    a, squeeze = _batched(abundances)
    if a.shape[1] != net.endmembers:
        raise UnmixingError(f"Abundances have {a.shape[1]} channels, decoder expects {net.endmembers}")
    kernel = reshape(net.endmember_matrix(), (net.bands, net.endmembers, 1, 1))
    return _unbatched(conv2d(a, kernel), squeeze)


def _pixel_mask(x: Tensor, mask) -> np.ndarray:
    """Per-pixel weights broadcast to (B, 1, h, w)"""
    batch, _, h, w = x.shape
    if mask is None:
        return np.ones((batch, 1, h, w))
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    if m.shape == (h, w):
        m = np.broadcast_to(m, (batch, h, w))
    if m.shape == (batch, 1, h, w):
        return m
    if m.shape != (batch, h, w):
        raise ShapeError(f"Mask shape {m.shape} does not match pixels of {x.shape}")
    return m.reshape(batch, 1, h, w)


def _check_pair(xhat: Tensor, x: Tensor, name: str) -> Tuple[Tensor, Tensor]:
    xhat, _ = _batched(xhat)
    x, _ = _batched(x)
    if xhat.shape != x.shape:
        raise ShapeError(f"{name}: shapes {xhat.shape} and {x.shape} differ")
    return xhat, x


def sad_loss(xhat: Tensor, x: Tensor, mask=None) -> Tensor:
    """Mean spectral angle (radians) over mask-selected pixels

    Pixels where either spectrum has zero norm contribute 0.
    """
    xhat, x = _check_pair(xhat, x, "sad_loss")
    weights = _pixel_mask(x, mask)
    selected = float(weights.sum())
    if selected == 0.0:
        return as_tensor(0.0)

    dot = tensor_sum(xhat * x, axis=1, keepdims=True)
    sq_hat = tensor_sum(xhat * xhat, axis=1, keepdims=True)
    sq = tensor_sum(x * x, axis=1, keepdims=True)

    # Zero-norm pixels are swapped for unit norms, then dropped by the weights
    valid = (sq_hat.data > 0) & (sq.data > 0)
    filler = (~valid).astype(np.float64)
    norms = power(sq_hat + filler, 0.5) * power(sq + filler, 0.5)
    cosine = dot / (norms + SAD_EPS)
    angles = masked_mul(arccos(cosine), weights * valid)
    return tensor_sum(angles) * (1.0 / selected)


def mse_loss(xhat: Tensor, x: Tensor, mask=None) -> Tensor:
    """Mean squared difference over mask-selected entries"""
    xhat, x = _check_pair(xhat, x, "mse_loss")
    weights = _pixel_mask(x, mask)
    selected = float(weights.sum()) * x.shape[1]
    if selected == 0.0:
        return as_tensor(0.0)
    diff = xhat - x
    return tensor_sum(masked_mul(diff * diff, weights)) * (1.0 / selected)


def reconstruction_loss(xhat: Tensor, x: Tensor, mask=None) -> Tensor:
    """L_rec = SAD + MSE"""
    return sad_loss(xhat, x, mask) + mse_loss(xhat, x, mask)


def fourier_basis(channels: int) -> np.ndarray:
    """Orthonormal real Fourier basis along a length-`channels` axis, low frequencies first"""
    rows = []
    for k in range(channels // 2 + 1):
        phase = 2.0 * np.pi * k * np.arange(channels) / channels
        rows.append(np.cos(phase))
        if 0 < k < channels / 2:
            rows.append(np.sin(phase))
    basis = np.array(rows[:channels])
    return basis / np.linalg.norm(basis, axis=1, keepdims=True)


class AbundanceDecomposer(Module):
    """Channel adaptor (1x1 conv r -> 2c) followed by a channel-axis frequency split"""

    def __init__(self, endmembers: int, rng: np.random.Generator, branch_channels: int = 3,
                 variant: str = "haar"):
        if variant not in AMD_VARIANTS:
            raise UnmixingError(f"Unknown AMD variant: {variant}")
        uses_adaptor = variant in ("haar", "split", "fourier")
        if not uses_adaptor and endmembers != 2 * branch_channels:
            raise UnmixingError(f"AMD variant '{variant}' needs r = 2c, got r={endmembers}, c={branch_channels}")

        self.endmembers = endmembers
        self.branch_channels = branch_channels
        self.variant = variant
        self.adaptor = Conv2d(endmembers, 2 * branch_channels, 1, rng) if uses_adaptor else None
        self.permutation = rng.permutation(2 * branch_channels) if variant == "random_split" else None
        self.basis = fourier_basis(2 * branch_channels) if variant == "fourier" else None

    def __call__(self, abundances: Tensor) -> FrequencyBranches:
        adapted = amd_adapt(abundances, self) if self.adaptor is not None else abundances
        return amd_decompose(adapted, self)


def amd_adapt(abundances: Tensor, decomposer: AbundanceDecomposer) -> Tensor:
    """A_p = Conv1x1(A): 2c channels, spatial shape preserved"""
    a, squeeze = _batched(abundances)
    if a.shape[1] != decomposer.endmembers:
        raise UnmixingError(f"Abundances have {a.shape[1]} channels, adaptor expects {decomposer.endmembers}")
    return _unbatched(decomposer.adaptor(a), squeeze)


def amd_decompose(adapted: Tensor, decomposer: Optional[AbundanceDecomposer] = None) -> FrequencyBranches:
    """Split A_p into (M_L, M_H); the default variant is the channel-wise 1D Haar"""
    a, squeeze = _batched(adapted)
    variant = decomposer.variant if decomposer is not None else "haar"
    channels = a.shape[1]
    if channels % 2:
        raise UnmixingError(f"AMD needs an even channel count, got {channels}")
    half = channels // 2

    if variant in ("haar", "haar_only"):
        low, high = haar1d_channels(a, axis=1)
    elif variant == "fourier":
        mixed = conv2d(a, as_tensor(decomposer.basis.reshape(channels, channels, 1, 1)))
        low, high = mixed[:, :half], mixed[:, half:]
    else:
        if decomposer is not None and decomposer.permutation is not None:
            a = a[:, decomposer.permutation]
        low, high = a[:, :half], a[:, half:]

    return FrequencyBranches(_unbatched(low, squeeze), _unbatched(high, squeeze))


def spectral_angles(estimated: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Pairwise SAD matrix between columns of two endmember matrices"""
    est = estimated / np.maximum(np.linalg.norm(estimated, axis=0, keepdims=True), SAD_EPS)
    ref = reference / np.maximum(np.linalg.norm(reference, axis=0, keepdims=True), SAD_EPS)
    return np.arccos(np.clip(est.T @ ref, -1.0, 1.0))


def match_endmembers(estimated: np.ndarray, reference: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Hungarian assignment of estimated to reference endmembers by SAD

    Returns (order, angles): estimated column order[k] matches reference column k.
    """
    if estimated.shape != reference.shape:
        raise UnmixingError(f"Endmember matrices {estimated.shape} and {reference.shape} differ")
    cost = spectral_angles(estimated, reference)
    rows, cols = linear_sum_assignment(cost)
    order = np.empty(reference.shape[1], dtype=int)
    order[cols] = rows
    return order, cost[order, np.arange(reference.shape[1])]


def abundance_rmse(estimated: np.ndarray, reference: np.ndarray, order: np.ndarray) -> float:
    """RMSE between matched abundance maps, (r, h, w) or (T, r, h, w)"""
    estimated = np.asarray(estimated)
    aligned = np.take(estimated, order, axis=estimated.ndim - 3)
    return float(np.sqrt(np.mean((aligned - reference) ** 2)))


def train_unmixing(net: UnmixNet, cube: np.ndarray, steps: int = 2000, lr: float = 5e-3,
                   weight_decay: float = 0.0, log_every: int = 200, init_endmembers: bool = False) -> float:
    """Fit encode/decode to a single cube with L_rec; returns the final loss"""
    if init_endmembers:
        net.init_from_cube(cube)
    x = as_tensor(cube)
    optimizer = AdamW(net.parameters(), lr=lr, weight_decay=weight_decay)
    loss_value = float("nan")

    for step in range(steps):
        with Tape() as tape:
            loss = reconstruction_loss(decode(encode(x, net), net), x)
            tape.backward(loss)
        optimizer.step(tape)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise UnmixingError(f"Unmixing loss became non-finite at step {step}")
        if log_every and step % log_every == 0:
            logger.debug("unmixing_step", step=step, loss=round(loss_value, 6))

    logger.info("unmixing_fit_completed", steps=steps, loss=round(loss_value, 6))
    return loss_value
