"""Object-latent prediction loss, the CLS-token task head, and the weighted total loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

from .config import Config
from .generative import IterationTrace, NoiseBundle, SlotModel
from .slotcore import GatedTransformerLayer
from .substrate import MLP, Linear, Module, Parameter
from .substrate import ops as T
from .substrate.tensor import Tensor


def object_prediction_loss(context_model, z: Tensor, seed: int, max_slots: int = 3,
                           target_frac: float = 1.0, target: np.ndarray | None = None) -> Tensor:
    """Blank the last T/2 steps of s random slots, predict them with the context model.

    Runs s = 1..min(max_slots, K-1), sums L2 errors over the target steps of the
    blanked slots, and averages over the batch. Targets are held constant; pass
    ``target`` to pin them to fixed values (finite-difference checks).
    """
    b, t, k, c = z.shape
    if t % 2:
        raise ValueError(f"object prediction needs an even number of steps, got T={t}")
    if max_slots >= k:
        max_slots = k - 1
    rng = np.random.default_rng(seed)
    target = T.stop_gradient(z) if target is None else Tensor(np.asarray(target, dtype=z.dtype))
    total = None
    for s in range(1, max_slots + 1):
        chosen = np.zeros((b, k), dtype=bool)
        for i in range(b):
            chosen[i, rng.choice(k, size=s, replace=False)] = True
        masked_steps = np.zeros(t, dtype=bool)
        masked_steps[t // 2:] = True
        blank = chosen[:, None, :] & masked_steps[None, :, None]  # (B, T, K)
        targets = blank.copy()
        if target_frac < 1.0:
            keep = rng.random((b, t, k)) < target_frac
            targets &= keep
        keep_in = Tensor((~blank)[..., None].astype(z.dtype))
        pred = context_model(z * keep_in)
        err = T.norm(pred - target, axis=-1)
        run = T.sum_(err * Tensor(targets.astype(z.dtype)))
        total = run if total is None else total + run
    if total is None:
        return Tensor(np.zeros((), dtype=z.dtype))
    return total * (1.0 / b)


def positional_encoding(length: int, dim: int) -> np.ndarray:
    """Sinusoidal absolute position encoding (length, dim)."""
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class TaskInput(NamedTuple):
    tokens: Tensor  # (B, L, D)
    layout: dict[str, slice]


class TaskHead(Module):
    """CLS token + projected context/mask/frame rows -> gated transformer -> MLP on row 0."""

    def __init__(self, rng, cfg: Config, embed_channels: int, grid_hw: tuple[int, int]):
        d = cfg.head_dim
        self.cfg = cfg
        self.grid_hw = grid_hw
        self.token_bias = Parameter(np.zeros(d))
        self.ctx_proj = Linear(rng, cfg.slot_size, d)
        self.mask_proj = Linear(rng, grid_hw[0] * grid_hw[1], d) if cfg.use_mask_embed else None
        self.frame_proj = Linear(rng, grid_hw[0] * grid_hw[1] * embed_channels, d) if cfg.use_frame_embed else None
        self.layers = [GatedTransformerLayer(rng, d, cfg.head_heads, cfg.head_mlp) for _ in range(cfg.head_layers)]
        self.mlp = MLP(rng, d, (cfg.head_final, cfg.head_final, cfg.n_labels))

    def pooled_masks(self, masks: Tensor) -> Tensor:
        """Average-pool (B,T,K,H,W,1) masks onto the encoder grid -> (B, T*K, H'*W')."""
        b, t, k, h, w, _ = masks.shape
        gh, gw = self.grid_hw
        m = masks.reshape(b, t, k, gh, h // gh, gw, w // gw)
        return T.mean(m, axis=(4, 6)).reshape(b, t * k, gh * gw)

    def build_input(self, context: Tensor, masks: Tensor | None, e_first: Tensor | None,
                    e_last: Tensor | None) -> TaskInput:
        b, t, k, _ = context.shape
        d = self.cfg.head_dim
        parts: list[Tensor] = []
        layout: dict[str, slice] = {}

        def put(name: str, x: Tensor):
            start = sum(p.shape[1] for p in parts)
            parts.append(x)
            layout[name] = slice(start, start + x.shape[1])

        ones = Tensor(np.ones((b, 1, d), dtype=context.dtype))
        put("token", ones + self.token_bias)
        put("context", self.ctx_proj(context).reshape(b, t * k, d))
        if self.mask_proj is not None and masks is not None:
            put("mask", self.mask_proj(self.pooled_masks(masks)))
        if self.frame_proj is not None and e_first is not None:
            put("first", self.frame_proj(e_first.reshape(b, 1, -1)))
            put("last", self.frame_proj(e_last.reshape(b, 1, -1)))
        return TaskInput(T.concat(parts, axis=1), layout)

    def __call__(self, inp: TaskInput) -> Tensor:
        x = inp.tokens
        pe = positional_encoding(x.shape[1], x.shape[2]).astype(x.dtype)
        x = x + Tensor(pe)
        for layer in self.layers:
            x = layer(x)
        return self.mlp(x[:, 0, :])


def qa_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy."""
    labels = np.asarray(labels)
    n = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError(f"label out of range [0, {n})")
    logp = T.log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(labels)), labels]
    return -T.mean(picked)


@dataclass(frozen=True)
class LossWeights:
    gen: float = 1.0
    object: float = 1.0
    qa: float = 1.0
    question: float = 0.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"negative loss weight {k}={v}")

    @classmethod
    def from_config(cls, cfg: Config) -> "LossWeights":
        return cls(cfg.w_gen, cfg.w_object, cfg.w_qa, cfg.w_question)


def total_loss(parts: Mapping[str, Tensor], w: LossWeights) -> Tensor:
    """w_gen L_gen + w_question L_question + w_object L_object + w_qa L_qa; missing parts count 0."""
    total = None
    for key, weight in (("gen", w.gen), ("question", w.question), ("object", w.object), ("qa", w.qa)):
        part = parts.get(key)
        if part is None or weight == 0:
            continue
        term = part * weight
        total = term if total is None else total + term
    if total is None:
        any_part = next((p for p in parts.values() if p is not None), None)
        dtype = any_part.dtype if any_part is not None else np.float32
        return Tensor(np.zeros((), dtype=dtype))
    return total


class ForwardResult(NamedTuple):
    trace: IterationTrace
    logits: Tensor
    losses: dict[str, Tensor]
    total: Tensor


class SlotTransformer(Module):
    """Full model: slot encoder-decoder plus task head."""

    def __init__(self, cfg: Config, seed: int | None = None):
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.cfg = cfg
        self.slots = SlotModel(cfg, rng)
        enc = self.slots.encoder
        grid = (cfg.H // enc.total_stride, cfg.W // enc.total_stride)
        self.head = TaskHead(rng, cfg, enc.out_channels, grid)
        if cfg.precision == "f64":
            self.astype(np.float64)

    def forward(self, x, labels: np.ndarray | None, noise: NoiseBundle,
                object_targets: np.ndarray | None = None) -> ForwardResult:
        cfg = self.cfg
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        trace = self.slots.run(x, noise)
        final = trace.final
        context, masks, emb = final.context, final.decode.masks, trace.embeddings
        if cfg.head_stop_grad:
            context, masks, emb = T.stop_gradient(context), T.stop_gradient(masks), T.stop_gradient(emb)
        inp = self.head.build_input(context, masks, emb[:, 0], emb[:, -1])
        logits = self.head(inp)
        losses: dict[str, Tensor] = {"gen": trace.loss_gen, "kl": trace.loss_kl, "recon": trace.loss_recon}
        if cfg.w_object > 0:
            losses["object"] = object_prediction_loss(self.slots.context, final.z, noise.object_rng_seed,
                                                      cfg.object_max_slots, cfg.object_target_frac,
                                                      object_targets)
        if labels is not None:
            losses["qa"] = qa_loss(logits, labels)
        total = total_loss(losses, LossWeights.from_config(cfg))
        return ForwardResult(trace, logits, losses, total)
