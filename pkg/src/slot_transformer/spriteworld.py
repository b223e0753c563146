"""Synthetic sprite videos: bouncing shapes, a gold "snitch", and a binary dataset format.

Everything is a pure function of an integer seed. Randomness comes from
SplitMix64 (Steele, Lea & Flood 2014), whose constants are fixed below, so
traces are reproducible in any language with 64-bit integer arithmetic.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

BACKGROUND = (0.3, 0.3, 0.3)
SNITCH_COLOR = (1.0, 0.8, 0.0)
PALETTE = (
    (0.9, 0.1, 0.1),
    (0.1, 0.8, 0.2),
    (0.1, 0.3, 0.9),
    (0.1, 0.8, 0.8),
    (0.8, 0.2, 0.8),
    (0.95, 0.95, 0.95),
    (0.5, 0.2, 0.7),
    (0.0, 0.0, 0.0),
)
SHAPES = ("square", "circle", "triangle")
STATIONARY = 8

MAGIC = b"SLTV"
VERSION = 1
HEADER = struct.Struct("<4sIIIIIIIQ")


class DatasetFormatError(ValueError):
    pass


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """64-bit counter generator: state advances by GAMMA, output is mix(state)."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return _mix(self.state)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) * 2.0 ** -53)

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive."""
        return lo + self.next_u64() % (hi - lo + 1)

    def split(self) -> "SplitMix64":
        return SplitMix64(self.next_u64())


def derive_seed(seed: int, index: int) -> int:
    """The ``index``-th output of SplitMix64(seed), computed by jumping ahead."""
    return _mix((seed + (index + 1) * GAMMA) & MASK64)


@dataclass(frozen=True)
class WorldConfig:
    T: int = 8
    H: int = 32
    W: int = 32
    min_objects: int = 2
    max_objects: int = 4
    speed_min: float = 0.02
    speed_max: float = 0.08
    size_min: float = 0.08
    size_max: float = 0.15
    G: int = 6
    A: int = 9

    def validate(self) -> None:
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if self.max_objects > len(PALETTE) + 1:
            raise ValueError(f"at most {len(PALETTE) + 1} objects supported")
        if not 0 < self.size_min <= self.size_max <= 0.5:
            raise ValueError("sizes must satisfy 0 < size_min <= size_max <= 0.5")
        if not 0 <= self.speed_min <= self.speed_max < 1:
            raise ValueError("speeds must satisfy 0 <= speed_min <= speed_max < 1")
        if min(self.T, self.H, self.W, self.G) < 1 or self.A != 9:
            raise ValueError("T, H, W, G must be positive and A must be 9")


@dataclass(frozen=True)
class Sprite:
    shape: str
    color: tuple[float, float, float]
    position: tuple[float, float]
    velocity: tuple[float, float]
    size: float


@dataclass(frozen=True)
class SpriteScene:
    sprites: tuple[Sprite, ...]
    snitch_index: int = 0

    @property
    def snitch(self) -> Sprite:
        return self.sprites[self.snitch_index]


@dataclass(frozen=True)
class SequenceLabels:
    grid_cell: int
    action_class: int


@dataclass
class VideoSequence:
    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1]
    labels: SequenceLabels


def generate_scene(rng_seed: int, config: WorldConfig) -> SpriteScene:
    config.validate()
    rng = SplitMix64(rng_seed)
    n = rng.randint(config.min_objects, config.max_objects)
    snitch = rng.randint(0, n - 1)
    colors = list(PALETTE)
    sprites = []
    for i in range(n):
        shape = SHAPES[rng.randint(0, len(SHAPES) - 1)]
        if i == snitch:
            color = SNITCH_COLOR
        else:
            color = colors.pop(rng.randint(0, len(colors) - 1))
        pos = (rng.uniform(), rng.uniform())
        speed = rng.uniform(config.speed_min, config.speed_max)
        angle = rng.uniform(0.0, 2 * math.pi)
        vel = (speed * math.cos(angle), speed * math.sin(angle)) if speed > 0 else (0.0, 0.0)
        size = rng.uniform(config.size_min, config.size_max)
        sprites.append(Sprite(shape, color, pos, vel, size))
    return SpriteScene(tuple(sprites), snitch)


def _reflect(x: float, dx: float) -> tuple[float, float]:
    x = x + dx
    if x >= 1.0:
        x, dx = 2.0 - x, -dx
        if x >= 1.0:
            x = math.nextafter(1.0, 0.0)
    elif x < 0.0:
        x, dx = -x, -dx
    return x, dx


def step_dynamics(scene: SpriteScene) -> SpriteScene:
    """Advance one frame; positions reflect specularly at the walls 0 and 1."""
    moved = []
    for s in scene.sprites:
        u, du = _reflect(s.position[0], s.velocity[0])
        v, dv = _reflect(s.position[1], s.velocity[1])
        moved.append(replace(s, position=(u, v), velocity=(du, dv)))
    return replace(scene, sprites=tuple(moved))


def _coverage(s: Sprite, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    u, v = s.position
    r = s.size
    if s.shape == "circle":
        return (px - u) ** 2 + (py - v) ** 2 <= r * r
    if s.shape == "square":
        return (np.abs(px - u) <= r) & (np.abs(py - v) <= r)
    if s.shape == "triangle":
        # apex up at (u, v - r), base along v + r of width 2r
        return (py <= v + r) & (np.abs(px - u) <= (py - (v - r)) / 2)
    raise ValueError(f"unknown shape {s.shape!r}")


def render_frame(scene: SpriteScene, H: int, W: int) -> np.ndarray:
    py, px = np.meshgrid((np.arange(H) + 0.5) / H, (np.arange(W) + 0.5) / W, indexing="ij")
    frame = np.empty((H, W, 3), dtype=np.float32)
    frame[:] = BACKGROUND
    for s in scene.sprites:
        frame[_coverage(s, px, py)] = s.color
    return frame


def grid_cell(position: tuple[float, float], G: int) -> int:
    u, v = position
    return min(int(v * G), G - 1) * G + min(int(u * G), G - 1)


def action_class(velocity: tuple[float, float]) -> int:
    """Eight 45-degree direction sectors centered on the axes, or STATIONARY."""
    du, dv = velocity
    if du == 0.0 and dv == 0.0:
        return STATIONARY
    angle = math.atan2(dv, du) % (2 * math.pi)
    return int(((angle + math.pi / 8) % (2 * math.pi)) // (math.pi / 4)) % 8


def make_sequence(rng_seed: int, config: WorldConfig) -> VideoSequence:
    scene = generate_scene(rng_seed, config)
    action = action_class(scene.snitch.velocity)
    frames = np.empty((config.T, config.H, config.W, 3), dtype=np.float32)
    for t in range(config.T):
        if t:
            scene = step_dynamics(scene)
        frames[t] = render_frame(scene, config.H, config.W)
    return VideoSequence(frames, SequenceLabels(grid_cell(scene.snitch.position, config.G), action))


def scene_trace(rng_seed: int, config: WorldConfig) -> list[SpriteScene]:
    scene = generate_scene(rng_seed, config)
    trace = [scene]
    for _ in range(config.T - 1):
        scene = step_dynamics(scene)
        trace.append(scene)
    return trace


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Map [0,1] to bytes with round-half-up."""
    return np.floor(np.clip(pixels, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def dequantize(data: np.ndarray) -> np.ndarray:
    return data.astype(np.float32) / np.float32(255.0)


@dataclass
class Dataset:
    frames: np.ndarray  # (N, T, H, W, 3) uint8
    grid_cells: np.ndarray  # (N,) int
    actions: np.ndarray  # (N,) int
    G: int = 6
    A: int = 9
    seed: int = 0

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.frames.shape[1:4])

    def sequence(self, i: int) -> VideoSequence:
        return VideoSequence(dequantize(self.frames[i]),
                             SequenceLabels(int(self.grid_cells[i]), int(self.actions[i])))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, frames=self.frames[idx], grid_cells=self.grid_cells[idx],
                       actions=self.actions[idx])


def generate_dataset(n: int, seed: int, config: WorldConfig) -> Dataset:
    seqs = [make_sequence(derive_seed(seed, i), config) for i in range(n)]
    return from_sequences(seqs, config.G, config.A, seed)


def from_sequences(sequences: Sequence[VideoSequence], G: int, A: int, seed: int = 0) -> Dataset:
    if not sequences:
        raise ValueError("no sequences")
    shape = sequences[0].frames.shape
    for s in sequences:
        if s.frames.shape != shape:
            raise ValueError(f"dim mismatch: {s.frames.shape} vs {shape}")
    return Dataset(
        frames=np.stack([quantize(s.frames) for s in sequences]),
        grid_cells=np.array([s.labels.grid_cell for s in sequences], dtype=np.int64),
        actions=np.array([s.labels.action_class for s in sequences], dtype=np.int64),
        G=G, A=A, seed=seed,
    )


def dataset_bytes(ds: Dataset) -> bytes:
    n, t, h, w, _ = ds.frames.shape
    parts = [HEADER.pack(MAGIC, VERSION, n, t, h, w, ds.G, ds.A, ds.seed & MASK64)]
    labels = struct.Struct("<HH")
    for i in range(n):
        parts.append(np.ascontiguousarray(ds.frames[i], dtype=np.uint8).tobytes())
        parts.append(labels.pack(int(ds.grid_cells[i]), int(ds.actions[i])))
    return b"".join(parts)


def write_dataset(path, sequences: Sequence[VideoSequence] | Dataset, *, G: int = 6, A: int = 9,
                  seed: int = 0) -> None:
    ds = sequences if isinstance(sequences, Dataset) else from_sequences(sequences, G, A, seed)
    Path(path).write_bytes(dataset_bytes(ds))


def parse_dataset(buf: bytes) -> Dataset:
    if len(buf) < HEADER.size:
        raise DatasetFormatError("truncated header")
    magic, version, n, t, h, w, G, A, seed = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    frame_bytes = t * h * w * 3
    expected = HEADER.size + n * (frame_bytes + 4)
    if len(buf) != expected:
        raise DatasetFormatError(f"expected {expected} bytes, found {len(buf)}")
    rec = np.dtype([("frames", np.uint8, (t, h, w, 3)), ("grid", "<u2"), ("action", "<u2")])
    arr = np.frombuffer(buf, dtype=rec, count=n, offset=HEADER.size)
    return Dataset(frames=arr["frames"].copy(), grid_cells=arr["grid"].astype(np.int64),
                   actions=arr["action"].astype(np.int64), G=G, A=A, seed=seed)


def read_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())
