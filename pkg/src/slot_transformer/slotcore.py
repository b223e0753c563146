"""Slotted context: initialization, slot attention, gated update, per-slot temporal models.

Shapes carry a leading batch axis B: a context is (B, T, K, C).
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .encoder import centered_coords, fourier_features
from .substrate import MLP, LayerNorm, Linear, Module, Parameter
from .substrate import ops as T
from .substrate.tensor import Tensor


def init_context(noise: Tensor, n_steps: int) -> Tensor:
    """Tile a (B, K, C) standard-normal draw over ``n_steps`` time steps."""
    b, k, c = noise.shape
    return T.broadcast_to(noise.reshape(b, 1, k, c), (b, n_steps, k, c))


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return T.transpose(x, axes)


class SlotAttentionOutput(NamedTuple):
    readout: Tensor  # (B, T, K, s)
    weights: Tensor  # (B, T, N, K), each slot's column sums to 1 over pixels
    slot_probs: Tensor  # (B, T, N, K), softmax over slots before renormalization


class SlotAttention(Module):
    """Cross-attention from slot queries to pixels; softmax over the slot axis."""

    def __init__(self, rng, query_dim: int, feature_dim: int, slot_size: int):
        self.to_q = Linear(rng, query_dim, slot_size)
        self.to_k = Linear(rng, feature_dim, slot_size)
        self.to_v = Linear(rng, feature_dim, slot_size)
        self.slot_size = slot_size

    def __call__(self, queries: Tensor, features: Tensor) -> SlotAttentionOutput:
        """queries (B, T, K, q), features (B, T, H', W', F)."""
        b, t = features.shape[:2]
        flat = features.reshape(b, t, -1, features.shape[-1])
        q = self.to_q(queries)
        k = self.to_k(flat)
        v = self.to_v(flat)
        logits = T.matmul(k, _swap_last(q)) * (1.0 / np.sqrt(self.slot_size))
        probs = T.softmax(logits, axis=-1)
        weights = probs / T.sum_(probs, axis=-2, keepdims=True)
        readout = T.matmul(_swap_last(weights), v)
        return SlotAttentionOutput(readout, weights, probs)


class GatingCell(Module):
    """GRU-style merge of a state ``c`` with an input ``a``.

    z = sigmoid(W_zc c + W_za a + b_z), h = tanh(W_hc c + W_ha a + b_h),
    out = (1 - z) c + z h, optionally followed by LayerNorm. With
    ``use_reset_gate`` the candidate uses W_hc (r * c) instead.
    """

    def __init__(self, rng, size: int, use_reset_gate: bool = False, final_norm: bool = True,
                 gate_bias: float = 0.0):
        self.z_c = Linear(rng, size, size, bias=False)
        self.z_a = Linear(rng, size, size)
        self.r_c = Linear(rng, size, size, bias=False)
        self.r_a = Linear(rng, size, size)
        self.h_c = Linear(rng, size, size, bias=False)
        self.h_a = Linear(rng, size, size)
        self.z_a.bias.data[:] = gate_bias
        self.norm = LayerNorm(size) if final_norm else None
        self.use_reset_gate = use_reset_gate

    def __call__(self, c: Tensor, a: Tensor, pre_norm: bool = False) -> Tensor:
        z = T.sigmoid(self.z_c(c) + self.z_a(a))
        if self.use_reset_gate:
            r = T.sigmoid(self.r_c(c) + self.r_a(a))
            h = T.tanh(self.h_c(r * c) + self.h_a(a))
        else:
            h = T.tanh(self.h_c(c) + self.h_a(a))
        out = (1.0 - z) * c + z * h
        if self.norm is None or pre_norm:
            return out
        return self.norm(out)


class MultiHeadAttention(Module):
    def __init__(self, rng, dim: int, heads: int, dropout: float = 0.0):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim)
        self.heads = heads
        self.dropout = dropout
        self.rng: np.random.Generator | None = None

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        x = x.reshape(*lead, n, self.heads, d // self.heads)
        nl = len(lead)
        return T.transpose(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))

    def __call__(self, x: Tensor, causal: bool = False) -> Tensor:
        *lead, n, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        logits = T.matmul(q, _swap_last(k)) * (1.0 / np.sqrt(d // self.heads))
        if causal:
            mask = np.triu(np.full((n, n), -1e9, dtype=x.dtype), 1)
            logits = logits + Tensor(mask)
        w = T.softmax(logits, axis=-1)
        if self.training and self.dropout > 0 and self.rng is not None:
            keep = (self.rng.random(w.shape) >= self.dropout).astype(x.dtype) / (1 - self.dropout)
            w = w * Tensor(keep)
        y = T.matmul(w, v)
        nl = len(lead)
        y = T.transpose(y, tuple(range(nl)) + (nl + 1, nl, nl + 2)).reshape(*lead, n, d)
        return self.out(y)


class GatedTransformerLayer(Module):
    """Norm-first attention and MLP sublayers, each merged through a gating cell."""

    def __init__(self, rng, dim: int, heads: int, mlp_hidden: int, dropout: float = 0.0):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, heads, dropout)
        self.gate1 = GatingCell(rng, dim, final_norm=False, gate_bias=-2.0)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(rng, dim, (mlp_hidden, dim))
        self.gate2 = GatingCell(rng, dim, final_norm=False, gate_bias=-2.0)

    def __call__(self, x: Tensor, causal: bool = False) -> Tensor:
        x = self.gate1(x, self.attn(self.norm1(x), causal=causal))
        return self.gate2(x, self.mlp(self.norm2(x)))


def time_encoding(n_steps: int, n_freq: int) -> np.ndarray:
    """(n_steps, 1 + 2 n_freq) Fourier features of t normalized to [-1, 1]."""
    return fourier_features(centered_coords(n_steps), n_freq)


class ContextTransformer(Module):
    """Unmasked transformer over time, applied to each slot separately with shared weights."""

    def __init__(self, rng, slot_size: int, dim: int, layers: int, heads: int, mlp_hidden: int,
                 time_freqs: int = 3, dropout: float = 0.0):
        self.time_freqs = time_freqs
        self.in_proj = Linear(rng, slot_size + 1 + 2 * time_freqs, dim)
        self.layers = [GatedTransformerLayer(rng, dim, heads, mlp_hidden, dropout) for _ in range(layers)]
        self.out_proj = Linear(rng, dim, slot_size)
        self.calls = 0

    def set_rng(self, rng) -> None:
        for layer in self.layers:
            layer.attn.rng = rng

    def __call__(self, c: Tensor, total_steps: int | None = None, causal: bool = False) -> Tensor:
        """(B, T, K, C) -> (B, T, K, C); ``total_steps`` positions a prefix inside a longer clip."""
        self.calls += 1
        b, t, k, ch = c.shape
        enc = time_encoding(total_steps or t, self.time_freqs)[:t].astype(c.dtype)
        x = T.transpose(c, (0, 2, 1, 3))
        x = T.concat([x, T.broadcast_to(Tensor(enc), (b, k, t, enc.shape[-1]))], axis=-1)
        x = self.in_proj(x)
        for layer in self.layers:
            x = layer(x, causal=causal)
        return T.transpose(self.out_proj(x), (0, 2, 1, 3))


class LSTMCell(Module):
    def __init__(self, rng, n_in: int, hidden: int):
        self.x2g = Linear(rng, n_in, 4 * hidden)
        self.h2g = Linear(rng, hidden, 4 * hidden, bias=False)
        self.hidden = hidden

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        g = self.x2g(x) + self.h2g(h)
        n = self.hidden
        i = T.sigmoid(g[..., :n])
        f = T.sigmoid(g[..., n:2 * n])
        cand = T.tanh(g[..., 2 * n:3 * n])
        o = T.sigmoid(g[..., 3 * n:])
        c = f * c + i * cand
        return o * T.tanh(c), c


class LSTMContext(Module):
    """Deep unidirectional LSTM over time, one roll per slot with shared weights."""

    def __init__(self, rng, slot_size: int, hidden: int, layers: int):
        dims = [slot_size] + [hidden] * layers
        self.cells = [LSTMCell(rng, a, hidden) for a in dims[:-1]]
        self.out_proj = Linear(rng, hidden, slot_size)
        self.hidden = hidden
        self.calls = 0

    def __call__(self, c: Tensor, total_steps: int | None = None, causal: bool = False) -> Tensor:
        self.calls += 1
        b, t, k, ch = c.shape
        seq = T.transpose(c, (0, 2, 1, 3)).reshape(b * k, t, ch)
        zeros = Tensor(np.zeros((b * k, self.hidden), dtype=c.dtype))
        state = [(zeros, zeros) for _ in self.cells]
        outs = []
        for step in range(t):
            x = seq[:, step, :]
            for li, cell in enumerate(self.cells):
                h, cc = cell(x, *state[li])
                state[li] = (h, cc)
                x = h
            outs.append(self.out_proj(x))
        y = T.stack(outs, axis=1).reshape(b, k, t, ch)
        return T.transpose(y, (0, 2, 1, 3))

