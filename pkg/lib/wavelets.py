"""
Orthonormal Haar transforms: 1D over channel pairs, 2D over spatial 2x2 blocks

Subband convention for a block [[a, b], [c, d]] (rows top to bottom):
    LL = (a + b + c + d) / 2
    HL = (a - b + c - d) / 2   horizontal difference
    LH = (a + b - c - d) / 2   vertical difference
    HH = (a - b - c + d) / 2   diagonal difference
"""

from typing import NamedTuple

import numpy as np

from lib.tensor import Tensor, as_tensor, stack

INV_SQRT2 = 1.0 / np.sqrt(2.0)


class WaveletError(ValueError):
    """Grid or channel extent incompatible with a Haar transform"""
    pass


class Subbands2D(NamedTuple):
    """Four equally-shaped subbands of a single-level 2D Haar transform"""
    LL: Tensor
    HL: Tensor
    LH: Tensor
    HH: Tensor


def haar1d_channels(a_p: Tensor, axis: int = -3):
    """Split channel pairs (2k, 2k+1) into low (sum) and high (difference) branches

    Works on (2c, h, w) or batched (B, 2c, h, w) inputs; axis selects the channel axis.
    """
    a_p = as_tensor(a_p)
    ax = axis % a_p.ndim
    channels = a_p.shape[ax]
    if channels % 2:
        raise WaveletError(f"haar1d_channels: channel count {channels} is odd")

    # (..., 2c, ...) -> (..., c, 2, ...)
    split = a_p.reshape(a_p.shape[:ax] + (channels // 2, 2) + a_p.shape[ax + 1:])
    index_first = (slice(None),) * (ax + 1) + (0,)
    index_second = (slice(None),) * (ax + 1) + (1,)
    first, second = split[index_first], split[index_second]
    return (first + second) * INV_SQRT2, (first - second) * INV_SQRT2


def ihaar1d_channels(m_low: Tensor, m_high: Tensor, axis: int = -3) -> Tensor:
    """Inverse of haar1d_channels: re-interleave the channel pairs"""
    m_low, m_high = as_tensor(m_low), as_tensor(m_high)
    if m_low.shape != m_high.shape:
        raise WaveletError(f"ihaar1d_channels: branch shapes {m_low.shape} and {m_high.shape} differ")
    ax = axis % m_low.ndim
    first = (m_low + m_high) * INV_SQRT2
    second = (m_low - m_high) * INV_SQRT2
    paired = stack([first, second], axis=ax + 1)
    shape = m_low.shape[:ax] + (2 * m_low.shape[ax],) + m_low.shape[ax + 1:]
    return paired.reshape(shape)


def haar2d(x: Tensor) -> Subbands2D:
    """Single-level 2D Haar analysis over the last two axes"""
    x = as_tensor(x)
    if x.ndim < 2:
        raise WaveletError(f"haar2d: need at least 2 dims, got shape {x.shape}")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise WaveletError(f"haar2d: spatial extent {h}x{w} is not even")

    lead = x.shape[:-2]
    blocks = x.reshape(lead + (h // 2, 2, w // 2, 2))
    keep = (slice(None),) * len(lead)
    a = blocks[keep + (slice(None), 0, slice(None), 0)]
    b = blocks[keep + (slice(None), 0, slice(None), 1)]
    c = blocks[keep + (slice(None), 1, slice(None), 0)]
    d = blocks[keep + (slice(None), 1, slice(None), 1)]

    return Subbands2D(
        LL=(a + b + c + d) * 0.5,
        HL=(a - b + c - d) * 0.5,
        LH=(a + b - c - d) * 0.5,
        HH=(a - b - c + d) * 0.5,
    )


def ihaar2d(s: Subbands2D) -> Tensor:
    """Exact inverse of haar2d"""
    ll, hl, lh, hh = (as_tensor(t) for t in s)
    shapes = {ll.shape, hl.shape, lh.shape, hh.shape}
    if len(shapes) != 1:
        raise WaveletError(f"ihaar2d: subband shapes differ {sorted(shapes)}")

    a = (ll + hl + lh + hh) * 0.5
    b = (ll - hl + lh - hh) * 0.5
    c = (ll + hl - lh - hh) * 0.5
    d = (ll - hl - lh + hh) * 0.5

    lead = ll.shape[:-2]
    h2, w2 = ll.shape[-2:]
    # (..., h2, w2, 2, 2) -> (..., h2, 2, w2, 2) -> (..., h, w)
    top = stack([a, b], axis=-1)
    bottom = stack([c, d], axis=-1)
    blocks = stack([top, bottom], axis=-2)
    n = len(lead)
    order = tuple(range(n)) + (n, n + 2, n + 1, n + 3)
    return blocks.transpose(order).reshape(lead + (2 * h2, 2 * w2))


def subband_energy(s: Subbands2D) -> float:
    """Squared L2 norm summed over the four subbands"""
    return float(sum(np.sum(t.data ** 2) for t in s))
