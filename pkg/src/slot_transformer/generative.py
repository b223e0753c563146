"""Variational core: posterior/prior, broadcast decoder, mixture likelihood, iterative refinement.

``SlotModel.run`` is the encode-decode-iterate loop. Every random draw enters
through a ``NoiseBundle`` so a forward pass is a deterministic function of
(parameters, input, noise).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .config import Config
from .encoder import ResNetEncoder, append_basis, fourier_basis
from .slotcore import (ContextTransformer, GatingCell, LSTMContext, MultiHeadAttention,
                       SlotAttention, init_context)
from .substrate import MLP, Conv2d, LayerNorm, Linear, Module, Parameter
from .substrate import ops as T
from .substrate.nn import glorot
from .substrate.tensor import Tensor

LOG_SIGMA_MIN = -6.0
LOG_SIGMA_MAX = 4.0
LOG_2PI = float(np.log(2 * np.pi))


class GaussianParams(NamedTuple):
    mu: Tensor
    log_sigma: Tensor

    @property
    def sigma(self) -> Tensor:
        return T.exp(self.log_sigma)


def split_params(lam: Tensor) -> GaussianParams:
    """Split (..., 2C) into mean and clamped log-sigma."""
    c = lam.shape[-1] // 2
    return GaussianParams(lam[..., :c], T.clamp(lam[..., c:], LOG_SIGMA_MIN, LOG_SIGMA_MAX))


class PosteriorHead(Module):
    """The shared linear map from context to (mu, log_sigma)."""

    def __init__(self, rng, slot_size: int, latent_size: int):
        self.proj = Linear(rng, slot_size, 2 * latent_size)

    def __call__(self, c: Tensor) -> Tensor:
        return self.proj(c)


def sample_latent(params: GaussianParams, noise: Tensor) -> Tensor:
    return params.mu + params.sigma * noise


def kl_diag_gaussian(post: GaussianParams, prior: GaussianParams) -> Tensor:
    """KL(post || prior) summed over every axis but the leading batch axis."""
    var_ratio = T.exp(2.0 * (post.log_sigma - prior.log_sigma))
    diff = (post.mu - prior.mu) * T.exp(-prior.log_sigma)
    kl = 0.5 * (var_ratio + diff * diff - 1.0) + (prior.log_sigma - post.log_sigma)
    return T.sum_(kl, axis=tuple(range(1, kl.ndim)))


class ConditionalPrior(Module):
    """Prior over all T steps from the first p steps of context.

    The prefix runs through the (shared) context model and the posterior head.
    One self-attention pass over [prefix, learned token] seeds a GRU cell that
    is rolled forward for the remaining steps, emitting (mu, log_sigma).
    """

    def __init__(self, rng, slot_size: int, latent_size: int):
        self.token = Parameter(rng.standard_normal(slot_size) * 0.1)
        self.summary = MultiHeadAttention(rng, slot_size, 1)
        self.cell = GatingCell(rng, slot_size, use_reset_gate=True, final_norm=False)
        self.in_proj = Linear(rng, latent_size, slot_size)
        self.head = Linear(rng, slot_size, 2 * latent_size)

    def __call__(self, prefix_ctx: Tensor, prefix_lam: Tensor, n_steps: int) -> Tensor:
        """prefix_ctx (B, p, K, C), prefix_lam (B, p, K, 2L) -> lambda (B, T, K, 2L)."""
        b, p, k, c = prefix_ctx.shape
        if not 1 <= p < n_steps:
            raise ValueError(f"prefix length {p} out of range for T={n_steps}")
        seq = T.transpose(prefix_ctx, (0, 2, 1, 3))
        tok = T.broadcast_to(self.token.reshape(1, 1, 1, c), (b, k, 1, c))
        summary = self.summary(T.concat([seq, tok], axis=2))
        h = summary[:, :, p, :]
        latent = prefix_lam.shape[-1] // 2
        x_prev = prefix_lam[:, p - 1, :, :latent]
        outs = []
        for _ in range(n_steps - p):
            h = self.cell(h, self.in_proj(x_prev))
            lam = self.head(h)
            outs.append(lam)
            x_prev = lam[..., :latent]
        suffix = T.stack(outs, axis=1)
        return T.concat([prefix_lam, suffix], axis=1)


class SlotDecode(NamedTuple):
    mask_logits: Tensor  # (B, T, K, H, W, 1)
    means: Tensor  # (B, T, K, H, W, 3)
    masks: Tensor  # softmax of mask_logits over K


def tap_validity(h: int, w: int, k: int = 3) -> np.ndarray:
    """(h*w, k*k) indicator of kernel taps that land inside the image (SAME padding)."""
    off = k // 2
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cols = []
    for i in range(k):
        for j in range(k):
            yy, xx = ys + i - off, xs + j - off
            cols.append(((yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)).ravel())
    return np.stack(cols, axis=-1).astype(np.float64)


class BroadcastConv(Module):
    """3x3 SAME conv of [latent tiled over H x W, position basis].

    Exactly equal to convolving the tiled input, but the latent part is
    evaluated per kernel tap instead of per pixel.
    """

    def __init__(self, rng, latent: int, basis: int, out: int):
        fan_in, fan_out = 9 * (latent + basis), 9 * out
        self.weight = Parameter(glorot(rng, fan_in, fan_out, (3, 3, latent + basis, out)))
        self.bias = Parameter(np.zeros(out))
        self.latent = latent

    def __call__(self, z: Tensor, basis: np.ndarray) -> Tensor:
        """z (N, L), basis (H, W, P) -> (N, H, W, out)."""
        h, w, _ = basis.shape
        n, lat = z.shape
        out = self.weight.shape[-1]
        wb = self.weight[:, :, lat:, :]
        from_basis = T.conv2d(Tensor(basis[None].astype(z.dtype)), wb)
        wz = T.transpose(self.weight[:, :, :lat, :], (2, 0, 1, 3)).reshape(lat, 9 * out)
        per_tap = T.matmul(z, wz).reshape(n, 9, out)
        valid = Tensor(tap_validity(h, w).astype(z.dtype)[None])
        from_latent = T.matmul(valid, per_tap).reshape(n, h, w, out)
        return from_latent + from_basis + self.bias


class BroadcastDecoder(Module):
    """Spatial broadcast decoder: 4 stride-1 convs, last one emitting mask logit + RGB."""

    def __init__(self, rng, latent: int, channels: int, h: int, w: int, space_freqs: int):
        self.basis = fourier_basis(h, w, space_freqs)
        self.first = BroadcastConv(rng, latent, self.basis.shape[-1], channels)
        self.convs = [Conv2d(rng, channels, channels), Conv2d(rng, channels, channels),
                      Conv2d(rng, channels, 4)]

    def __call__(self, z: Tensor) -> SlotDecode:
        b, t, k, lat = z.shape
        h, w, _ = self.basis.shape
        y = T.relu(self.first(z.reshape(b * t * k, lat), self.basis))
        for i, conv in enumerate(self.convs):
            y = conv(y)
            if i < len(self.convs) - 1:
                y = T.relu(y)
        y = y.reshape(b, t, k, h, w, 4)
        logits = y[..., :1]
        means = T.sigmoid(y[..., 1:])
        return SlotDecode(logits, means, T.softmax(logits, axis=2))


def compose_reconstruction(d: SlotDecode) -> Tensor:
    """x'_t = sum_k m_k r_k, (B, T, H, W, 3)."""
    return T.sum_(d.masks * d.means, axis=2)


def mixture_log_likelihood(x: Tensor, d: SlotDecode, sigma_out: float) -> Tensor:
    """Per-sequence log sum_k m_k N(x; r_k, sigma_out^2 I), summed over steps and pixels.

    Returns shape (B,).
    """
    x = T.reshape(x, (x.shape[0], x.shape[1], 1) + x.shape[2:])
    resid = (x - d.means) * (1.0 / sigma_out)
    log_comp = -0.5 * T.sum_(resid * resid, axis=-1, keepdims=True) \
        - 1.5 * (LOG_2PI + 2.0 * float(np.log(sigma_out)))
    log_mix = T.log_softmax(d.mask_logits, axis=2) + log_comp
    per_pixel = T.logsumexp(log_mix, axis=2)
    return T.sum_(per_pixel, axis=tuple(range(1, per_pixel.ndim)))


def pool_per_slot(masks: Tensor, image: Tensor) -> Tensor:
    """Mask-weighted spatial mean of ``image`` (B,T,H,W,C) per slot -> (B,T,K,C)."""
    b, t, k, h, w, _ = masks.shape
    m = masks.reshape(b, t, k, h * w)
    num = T.matmul(m, image.reshape(b, t, h * w, image.shape[-1]))
    den = T.sum_(m, axis=-1, keepdims=True) + 1e-6
    return num / den


class IterativeUpdate(Module):
    """lambda_{k+1} = lambda_k + f(z, pooled residual, eps_z, pooled eps_x); c = LN(MLP(lambda))."""

    def __init__(self, rng, slot_size: int, latent: int, hidden: int):
        self.f = Linear(rng, 2 * latent + 6, 2 * latent)
        self.to_context = MLP(rng, 2 * latent, (hidden, slot_size))
        self.norm = LayerNorm(slot_size)

    def features(self, z: Tensor, post: GaussianParams, x: Tensor, recon: Tensor, masks: Tensor,
                 sigma_out: float) -> Tensor:
        resid = x - recon
        eps_x = resid * (1.0 / sigma_out ** 2)
        eps_z = (z - post.mu) * T.exp(-2.0 * post.log_sigma)
        return T.concat([z, pool_per_slot(masks, resid), eps_z, pool_per_slot(masks, eps_x)], axis=-1)

    def delta(self, feats: Tensor) -> Tensor:
        return self.f(feats)

    def __call__(self, lam: Tensor, feats: Tensor) -> tuple[Tensor, Tensor]:
        lam_next = lam + self.delta(feats)
        return lam_next, self.norm(self.to_context(lam_next))


@dataclass
class NoiseBundle:
    init: np.ndarray  # (B, K, C)
    latents: np.ndarray  # (N_iter, B, T, K, C)
    object_rng_seed: int = 0

    @classmethod
    def draw(cls, rng: np.random.Generator, cfg: Config, batch: int, dtype=np.float32) -> "NoiseBundle":
        init = rng.standard_normal((batch, cfg.slots, cfg.slot_size)).astype(dtype)
        lat = rng.standard_normal((cfg.iterations, batch, cfg.T, cfg.slots, cfg.slot_size)).astype(dtype)
        if cfg.deterministic:
            lat[:] = 0
        return cls(init, lat, int(rng.integers(0, 2**63 - 1)))

    @classmethod
    def zeros(cls, cfg: Config, batch: int, init: np.ndarray | None = None, dtype=np.float32) -> "NoiseBundle":
        if init is None:
            init = np.zeros((batch, cfg.slots, cfg.slot_size), dtype=dtype)
        return cls(init.astype(dtype), np.zeros((cfg.iterations, batch, cfg.T, cfg.slots, cfg.slot_size), dtype=dtype))


@dataclass
class IterationStep:
    lam: Tensor
    post: GaussianParams
    z: Tensor
    decode: SlotDecode
    recon: Tensor
    log_lik: Tensor  # (B,)
    kl: Tensor  # (B,)
    update_features: Tensor
    lam_next: Tensor
    context: Tensor  # c'' used for this iteration's posterior
    attention: object = None


@dataclass
class IterationTrace:
    steps: list[IterationStep] = field(default_factory=list)
    prior: GaussianParams | None = None
    embeddings: Tensor | None = None  # (B, T, H', W', E), no position basis
    loss_gen: Tensor | None = None  # scalar, batch mean
    loss_kl: Tensor | None = None
    loss_recon: Tensor | None = None
    context_calls: int = 0
    encoder_calls: int = 0

    @property
    def n_iter(self) -> int:
        return len(self.steps)

    @property
    def final(self) -> IterationStep:
        return self.steps[-1]


class SlotModel(Module):
    """Encoder, slot machinery and decoder wired into the encode-decode-iterate loop."""

    def __init__(self, cfg: Config, rng: np.random.Generator):
        self.cfg = cfg
        c = cfg.slot_size
        self.encoder = ResNetEncoder(rng, cfg.width)
        e = self.encoder.out_channels
        s = self.encoder.total_stride
        self.space_basis = fourier_basis(cfg.H // s, cfg.W // s, cfg.space_freqs)
        self.query_mlp = MLP(rng, c, (cfg.query_hidden, cfg.query_hidden))
        self.slot_attention = SlotAttention(rng, cfg.query_hidden, e + self.space_basis.shape[-1], c)
        self.gate = GatingCell(rng, c, use_reset_gate=cfg.use_reset_gate)
        if cfg.context_model == "transformer":
            self.context = ContextTransformer(rng, c, cfg.ctx_dim, cfg.ctx_layers, cfg.ctx_heads,
                                              cfg.ctx_mlp, cfg.time_freqs, cfg.attn_dropout)
        else:
            self.context = LSTMContext(rng, c, cfg.lstm_hidden, cfg.lstm_layers)
        self.posterior = PosteriorHead(rng, c, c)
        self.prior = ConditionalPrior(rng, c, c)
        self.decoder = BroadcastDecoder(rng, c, cfg.decoder_channels, cfg.H, cfg.W, cfg.space_freqs)
        self.update = IterativeUpdate(rng, c, c, cfg.refine_hidden)

    def set_dropout_rng(self, rng) -> None:
        if isinstance(self.context, ContextTransformer):
            self.context.set_rng(rng)

    def conditional_prior(self, prefix: Tensor) -> GaussianParams:
        """Prior for all T steps from the gated first-iteration context of steps 1..p."""
        cfg = self.cfg
        b, p, k, _ = prefix.shape
        if cfg.unit_prior:
            zeros = Tensor(np.zeros((b, cfg.T, k, cfg.slot_size), dtype=prefix.dtype))
            return GaussianParams(zeros, zeros)
        prefix_ctx = self.context(prefix, total_steps=cfg.T)
        lam = self.prior(prefix_ctx, self.posterior(prefix_ctx), cfg.T)
        return split_params(lam)

    def first_gated(self, feats: Tensor, init: np.ndarray) -> tuple[Tensor, Tensor, object]:
        """Initial context, its slot-attention readout and the gated update (iteration 0)."""
        c = init_context(Tensor(init.astype(self.dtype)), feats.shape[1])
        attn = self.slot_attention(self.query_mlp(c), feats)
        return c, self.gate(c, attn.readout), attn

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor]:
        e = self.encoder(x)
        return e, append_basis(e, self.space_basis)

    def prior_from_frames(self, x_prefix: Tensor, init: np.ndarray) -> GaussianParams:
        """Prior parameters computed from the first p frames only."""
        _, feats = self.encode(x_prefix)
        _, gated, _ = self.first_gated(feats, init)
        return self.conditional_prior(gated)

    def run(self, x: Tensor, noise: NoiseBundle) -> IterationTrace:
        """Encode once, then iterate: attend, gate, (context model on k=0), sample, decode, refine."""
        cfg = self.cfg
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        trace = IterationTrace()
        enc_calls0 = self.encoder.calls
        e, feats = self.encode(x)
        trace.embeddings = e
        ctx_calls = 0
        kl_total = recon_total = None
        c = None
        for it in range(cfg.iterations):
            if it == 0:
                c, gated, attn = self.first_gated(feats, noise.init)
                ctx = self.context(gated)
                ctx_calls += 1
                if not cfg.deterministic:
                    trace.prior = self.conditional_prior(gated[:, :cfg.prefix_len])
            else:
                attn = self.slot_attention(self.query_mlp(c), feats)
                ctx = self.gate(c, attn.readout)
            lam = self.posterior(ctx)
            post = split_params(lam)
            z = sample_latent(post, Tensor(noise.latents[it].astype(self.dtype)))
            dec = self.decoder(z)
            recon = compose_reconstruction(dec)
            log_lik = mixture_log_likelihood(x, dec, cfg.sigma_out)
            if cfg.deterministic:
                kl = Tensor(np.zeros(x.shape[0], dtype=self.dtype))
            else:
                kl = kl_diag_gaussian(post, trace.prior)
            feats_it = self.update.features(z, post, x, recon, dec.masks, cfg.sigma_out)
            lam_next, c = self.update(lam, feats_it)
            trace.steps.append(IterationStep(lam, post, z, dec, recon, log_lik, kl, feats_it,
                                             lam_next, ctx, attn))
            kl_total = kl if kl_total is None else kl_total + kl
            recon_total = -log_lik if recon_total is None else recon_total - log_lik
        n = float(cfg.iterations)
        trace.loss_kl = T.mean(kl_total) * (1.0 / n)
        trace.loss_recon = T.mean(recon_total) * (1.0 / n)
        trace.loss_gen = trace.loss_kl + trace.loss_recon
        trace.context_calls = ctx_calls
        trace.encoder_calls = self.encoder.calls - enc_calls0
        return trace
