"""Frame-wise residual conv encoder and Fourier position features."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .substrate import Conv2d, LayerNorm, Module
from .substrate import ops as T
from .substrate.tensor import Tensor

BASE_CHANNELS = (64, 128, 256, 512)
BASE_BLOCKS = (2, 2, 2, 2)
BASE_STRIDES = (2, 2, 2, 1)


def scaled(values: Sequence[int], factor: float) -> tuple[int, ...]:
    return tuple(max(1, int(round(v * factor))) for v in values)


def fourier_features(coords: np.ndarray, n_freq: int) -> np.ndarray:
    """[c, sin(2^j pi c), cos(2^j pi c) for j < n_freq] along a new last axis."""
    feats = [coords]
    for j in range(n_freq):
        feats += [np.sin(2.0 ** j * np.pi * coords), np.cos(2.0 ** j * np.pi * coords)]
    return np.stack(feats, axis=-1)


def centered_coords(n: int) -> np.ndarray:
    """Pixel-center coordinates normalized to [-1, 1]."""
    return -1.0 + (2.0 * np.arange(n) + 1.0) / n


def fourier_basis(h: int, w: int, n_freq: int) -> np.ndarray:
    """(h, w, 2 + 4 n_freq) features: u, v, then sin/cos of u and v per frequency."""
    if n_freq < 1:
        raise ValueError("n_freq must be >= 1")
    v, u = np.meshgrid(centered_coords(h), centered_coords(w), indexing="ij")
    fu, fv = fourier_features(u, n_freq), fourier_features(v, n_freq)
    chans = [u, v]
    for j in range(n_freq):
        chans += [fu[..., 1 + 2 * j], fu[..., 2 + 2 * j], fv[..., 1 + 2 * j], fv[..., 2 + 2 * j]]
    return np.stack(chans, axis=-1)


def append_basis(e: Tensor, basis: np.ndarray) -> Tensor:
    """Concatenate ``basis`` (H', W', P) to every frame of ``e`` (..., H', W', E)."""
    if tuple(e.shape[-3:-1]) != basis.shape[:2]:
        raise ValueError(f"basis dims {basis.shape[:2]} do not match embeddings {e.shape}")
    b = T.broadcast_to(Tensor(basis.astype(e.dtype)), e.shape[:-1] + (basis.shape[-1],))
    return T.concat([e, b], axis=-1)


class ResidualBlock(Module):
    def __init__(self, rng, c_in: int, c_out: int, stride: int):
        self.conv1 = Conv2d(rng, c_in, c_out, 3, stride)
        self.norm1 = LayerNorm(c_out)
        self.conv2 = Conv2d(rng, c_out, c_out, 3, 1)
        self.norm2 = LayerNorm(c_out)
        self.proj = Conv2d(rng, c_in, c_out, 1, stride) if (c_in != c_out or stride != 1) else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.relu(self.norm1(self.conv1(x)))
        y = T.relu(self.norm2(self.conv2(y)))
        skip = self.proj(x) if self.proj is not None else x
        return y + skip


class ResNetEncoder(Module):
    """Residual stages applied frame-wise; time is folded into the batch axis."""

    def __init__(self, rng, width: float = 0.125, channels=BASE_CHANNELS, blocks=BASE_BLOCKS,
                 strides=BASE_STRIDES):
        self.channels = scaled(channels, width)
        self.strides = tuple(strides)
        self.blocks = []
        c_in = 3
        for c, n, s in zip(self.channels, blocks, strides):
            for b in range(n):
                self.blocks.append(ResidualBlock(rng, c_in, c, s if b == 0 else 1))
                c_in = c
        self.calls = 0

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    def __call__(self, x: Tensor) -> Tensor:
        """(B, T, H, W, 3) -> (B, T, H', W', E)."""
        self.calls += 1
        b, t, h, w, c = x.shape
        s = self.total_stride
        if h % s or w % s:
            raise ValueError(f"frame size {h}x{w} not divisible by {s}")
        y = x.reshape(b * t, h, w, c)
        for block in self.blocks:
            y = block(y)
        return y.reshape(b, t, *y.shape[1:])
