"""Binary checkpoints: parameters, Adam moments, step, RNG state and the resolved config.

Layout (little-endian)::

    "SLTC" u32 version u32 n_params  n_params x record
    u32 n_moments  n_moments x record          (names "m/<param>", "v/<param>")
    u64 step  u64 adam_t
    u32 len  RNG state as JSON
    u32 len  config text

record = u16 name_len, name (UTF-8), u8 dtype (0 f32, 1 f64), u8 rank, rank x u32 dims, payload
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..config import Config

MAGIC = b"SLTC"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
# config keys that change what the weights mean even when shapes agree
ARCH_KEYS = ("slots", "slot_size", "iterations", "context_model", "width", "space_freqs",
             "time_freqs", "ctx_dim", "ctx_layers", "decoder_channels", "T", "H", "W", "G", "A", "task")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    moments: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    adam_t: int = 0
    rng_state: dict | None = None
    config_text: str = ""

    @property
    def config(self) -> Config:
        return Config.from_text(self.config_text)


def _write_record(out, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = CODES.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
    raw = name.encode("utf-8")
    out.write(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())


def _read_exact(buf, n: int) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def _read_record(buf) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<H", _read_exact(buf, 2))
    name = _read_exact(buf, n).decode("utf-8")
    code, rank = struct.unpack("<BB", _read_exact(buf, 2))
    if code not in DTYPES:
        raise CheckpointError(f"bad dtype code {code} for {name}")
    dims = struct.unpack(f"<{rank}I", _read_exact(buf, 4 * rank))
    dt = DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    arr = np.frombuffer(_read_exact(buf, count * dt.itemsize), dtype=dt).reshape(dims)
    return name, arr.astype(dt.newbyteorder("="))


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<II", VERSION, len(ck.params)))
    for k, v in ck.params.items():
        _write_record(out, k, v)
    out.write(struct.pack("<I", len(ck.moments)))
    for k, v in ck.moments.items():
        _write_record(out, k, v)
    out.write(struct.pack("<QQ", ck.step, ck.adam_t))
    for blob in (json.dumps(ck.rng_state, sort_keys=True).encode(), ck.config_text.encode("utf-8")):
        out.write(struct.pack("<I", len(blob)) + blob)
    return out.getvalue()


def parse_checkpoint(data: bytes) -> Checkpoint:
    buf = io.BytesIO(data)
    if _read_exact(buf, 4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, n = struct.unpack("<II", _read_exact(buf, 8))
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {VERSION}")
    params = dict(_read_record(buf) for _ in range(n))
    (nm,) = struct.unpack("<I", _read_exact(buf, 4))
    moments = dict(_read_record(buf) for _ in range(nm))
    step, adam_t = struct.unpack("<QQ", _read_exact(buf, 16))
    blobs = []
    for _ in range(2):
        (ln,) = struct.unpack("<I", _read_exact(buf, 4))
        blobs.append(_read_exact(buf, ln))
    if buf.read(1):
        raise CheckpointError("trailing bytes after checkpoint")
    return Checkpoint(params, moments, step, adam_t, json.loads(blobs[0]), blobs[1].decode("utf-8"))


def capture(model, optimizer=None, rng: np.random.Generator | None = None, step: int = 0,
            config: Config | None = None) -> Checkpoint:
    params = {k: p.data.copy() for k, p in model.named_parameters()}
    moments = {}
    adam_t = 0
    if optimizer is not None:
        for k in optimizer.params:
            moments["m/" + k] = optimizer.m[k].copy()
            moments["v/" + k] = optimizer.v[k].copy()
        adam_t = optimizer.t
    state = rng.bit_generator.state if rng is not None else None
    text = (config or getattr(model, "cfg", None) or Config()).to_text()
    return Checkpoint(params, moments, step, adam_t, state, text)


def checkpoint_save(path, model, optimizer=None, rng=None, step: int = 0, config: Config | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(capture(model, optimizer, rng, step, config)))
    tmp.replace(path)


def checkpoint_load(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def check_config(ck: Checkpoint, cfg: Config) -> None:
    saved = ck.config
    for key in ARCH_KEYS:
        a, b = getattr(saved, key), getattr(cfg, key)
        if a != b:
            raise CheckpointError(f"config mismatch for {key}: checkpoint has {a}, current config {b}")


def restore(ck: Checkpoint, model, optimizer=None, rng: np.random.Generator | None = None,
            cfg: Config | None = None) -> int:
    """Copy checkpoint state into live objects; returns the saved step."""
    if cfg is not None and ck.config_text:
        check_config(ck, cfg)
    named = dict(model.named_parameters())
    missing = sorted(set(named) - set(ck.params))
    extra = sorted(set(ck.params) - set(named))
    if missing or extra:
        raise CheckpointError(f"parameter set mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, p in named.items():
        src = ck.params[k]
        if src.shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for parameter {k}: checkpoint {src.shape}, "
                                  f"model {p.data.shape}")
    for k, p in named.items():
        p.data[...] = ck.params[k]
    if optimizer is not None:
        for k in optimizer.params:
            try:
                optimizer.m[k][...] = ck.moments["m/" + k]
                optimizer.v[k][...] = ck.moments["v/" + k]
            except KeyError as exc:
                raise CheckpointError(f"optimizer moment missing for {k}") from exc
        optimizer.t = ck.adam_t
    if rng is not None and ck.rng_state is not None:
        rng.bit_generator.state = ck.rng_state
    return ck.step
