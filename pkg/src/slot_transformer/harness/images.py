"""Binary PPM (P6) / PGM (P5) dumps of reconstructions, slot means and masks."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def to_bytes(img: np.ndarray) -> np.ndarray:
    """[0,1] floats -> u8 with round-half-up; rejects out-of-range input."""
    img = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(img)) or img.min(initial=0.0) < 0 or img.max(initial=0.0) > 1:
        raise ValueError("image values must lie in [0, 1]")
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def write_pnm(path, img: np.ndarray) -> None:
    """(H,W,3) -> P6, (H,W) or (H,W,1) -> P5."""
    data = to_bytes(img)
    if data.ndim == 3 and data.shape[-1] == 1:
        data = data[..., 0]
    if data.ndim == 3 and data.shape[-1] == 3:
        magic = b"P6"
    elif data.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"cannot write image of shape {img.shape}")
    h, w = data.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(data).tobytes())


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM: {magic!r} maxval {maxval}")
    c = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h * c], dtype=np.uint8)
    return data.reshape((h, w, c) if c == 3 else (h, w))


def dump_images(prefix, recon: np.ndarray, means: np.ndarray | None = None,
                masks: np.ndarray | None = None) -> list[Path]:
    """Write one sequence: recon (T,H,W,3), means (T,K,H,W,3), masks (T,K,H,W[,1]).

    Files are named ``<prefix>_t<step>_recon.ppm``, ``..._slot<k>_mean.ppm`` and
    ``..._slot<k>_mask.pgm``. Everything is validated before anything is written.
    """
    recon = np.asarray(recon)
    arrays = [recon] + [a for a in (means, masks) if a is not None]
    for a in arrays:
        to_bytes(a)
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, img):
        path = prefix.with_name(f"{prefix.name}_{name}")
        write_pnm(path, img)
        written.append(path)

    for t in range(recon.shape[0]):
        put(f"t{t:02d}_recon.ppm", recon[t])
        for k in range(0 if means is None else means.shape[1]):
            put(f"t{t:02d}_slot{k}_mean.ppm", means[t, k])
        for k in range(0 if masks is None else masks.shape[1]):
            put(f"t{t:02d}_slot{k}_mask.pgm", masks[t, k])
    return written
