"""Finite-difference check of every parameter gradient of the total loss."""
from __future__ import annotations

import numpy as np

from ..config import Config
from ..generative import NoiseBundle
from ..heads import SlotTransformer
from ..spriteworld import generate_dataset
from ..substrate import GradCheckReport, grad_check, no_grad


def model_grad_check(cfg: Config, batch: int = 2, tol: float = 1e-4, n_coords: int = 3,
                     seed: int = 0, h: float = 1e-5,
                     jitter: float = 1e-3) -> GradCheckReport:
    """Check d L_total / d theta for all parameters on a small generated batch with fixed noise.

    Parameters are jittered by ``jitter`` first: zero-initialized biases put ReLU
    inputs exactly on the kink (e.g. over dead neighbourhoods in the decoder),
    where central differences and the subgradient legitimately disagree.
    """
    model = SlotTransformer(cfg, seed=seed)
    model.eval()
    jit = np.random.default_rng(seed + 1)
    for p in model.parameters():
        p.data += (jitter * jit.standard_normal(p.shape)).astype(p.dtype)
    data = generate_dataset(batch, seed, cfg.world)
    x = (data.frames.astype(np.float64) / 255.0).astype(model.dtype)
    labels = data.grid_cells if cfg.task == "localize" else data.actions
    noise = NoiseBundle.draw(np.random.default_rng(seed), cfg, batch, dtype=model.dtype)
    # the object loss stops gradients at its targets; pin them so the finite
    # differences see the same function the tape differentiates
    with no_grad():
        targets = model.forward(x, labels, noise).trace.final.z.data.copy()
    return grad_check(lambda: model.forward(x, labels, noise, targets).total, list(model.named_parameters()),
                      h=h, tol=tol, n_coords=n_coords, seed=seed)
