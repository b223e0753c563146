"""Rollouts from the autoregressive prior conditioned on a frame prefix."""
from __future__ import annotations

import numpy as np

from ..generative import NoiseBundle, compose_reconstruction
from ..substrate import no_grad
from ..substrate.tensor import Tensor


def prior_rollout(model, frames: np.ndarray, p: int, seed: int = 0, sample: bool = False) -> np.ndarray:
    """Predict frames p+1..T of one (T,H,W,3) sequence from its first p frames.

    Latents are the prior means unless ``sample``; the initial slot draw comes
    from ``seed``. With p = T the result is the plain posterior reconstruction
    of all T frames.
    """
    cfg = model.cfg
    frames = np.asarray(frames)
    if frames.shape != (cfg.T, cfg.H, cfg.W, 3):
        raise ValueError(f"expected ({cfg.T}, {cfg.H}, {cfg.W}, 3) frames, got {frames.shape}")
    if not 1 <= p <= cfg.T:
        raise ValueError(f"p={p} out of range [1, {cfg.T}]")
    rng = np.random.default_rng(seed)
    init = rng.standard_normal((1, cfg.slots, cfg.slot_size))
    x = Tensor(frames[None].astype(model.dtype))
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            if p == cfg.T:
                res = model.forward(x, None, NoiseBundle.zeros(cfg, 1, init=init, dtype=model.dtype))
                return res.trace.final.recon.data[0]
            slots = model.slots
            prior = slots.prior_from_frames(x[:, :p], init)
            mu, log_sigma = prior.mu[:, p:], prior.log_sigma[:, p:]
            z = mu.data
            if sample:
                z = z + np.exp(log_sigma.data) * rng.standard_normal(z.shape).astype(z.dtype)
            dec = slots.decoder(Tensor(z))
            return compose_reconstruction(dec).data[0]
    finally:
        model.train(was_training)


def copy_last_baseline(frames: np.ndarray, p: int) -> np.ndarray:
    """Repeat the last conditioning frame for steps p+1..T."""
    return np.repeat(frames[p - 1:p], frames.shape[0] - p, axis=0)


def rollout_error(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean per-pixel L2 distance between RGB frames."""
    return float(np.mean(np.linalg.norm(pred.astype(np.float64) - target, axis=-1)))
