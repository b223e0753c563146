"""Flat run configuration, its ``key = value`` text form, and named presets."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

from .spriteworld import WorldConfig


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # world
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
    # encoder / slots
    width: float = 0.125
    space_freqs: int = 3
    slots: int = 4
    slot_size: int = 32
    query_hidden: int = 16
    iterations: int = 2
    use_reset_gate: bool = False
    context_model: str = "transformer"
    ctx_dim: int = 32
    ctx_layers: int = 2
    ctx_heads: int = 2
    ctx_mlp: int = 64
    time_freqs: int = 3
    attn_dropout: float = 0.0
    lstm_hidden: int = 64
    lstm_layers: int = 2
    # generative
    decoder_channels: int = 8
    sigma_out: float = 0.1
    rho: float = 0.5
    unit_prior: bool = False
    deterministic: bool = False
    refine_hidden: int = 64
    # heads
    task: str = "localize"
    head_dim: int = 32
    head_layers: int = 2
    head_heads: int = 2
    head_mlp: int = 64
    head_final: int = 256
    use_mask_embed: bool = True
    use_frame_embed: bool = True
    head_stop_grad: bool = False
    object_max_slots: int = 3
    object_target_frac: float = 1.0
    w_gen: float = 0.0009765625  # 1/(H*W) at desk scale
    w_object: float = 1.0
    w_qa: float = 1.0
    w_question: float = 0.0
    # optimization
    lr: float = 2e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-6
    clip_norm: float = 1.0
    schedule: str = "constant"
    warmup: int = 0
    steps: int = 20000
    batch_size: int = 8
    seed: int = 0
    # bookkeeping
    log_every: int = 50
    eval_every: int = 1000
    eval_fraction: float = 0.1
    eval_batch: int = 16
    checkpoint_every: int = 1000
    max_psnr: float = 99.0
    precision: str = "f32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.slots < 1 or self.iterations < 1:
            raise ConfigError("slots and iterations must be >= 1")
        if self.context_model not in ("transformer", "lstm"):
            raise ConfigError(f"unknown context_model {self.context_model!r}")
        if self.task not in ("localize", "action"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.T < 2:
            raise ConfigError("T must be >= 2 for the conditional prior")
        if not 0 < self.rho < 1:
            raise ConfigError("rho must lie in (0, 1)")
        for w in ("w_gen", "w_object", "w_qa", "w_question"):
            if getattr(self, w) < 0:
                raise ConfigError(f"{w} must be non-negative")
        if self.sigma_out <= 0:
            raise ConfigError("sigma_out must be positive")

    @property
    def prefix_len(self) -> int:
        """Conditioning length p = T - ceil(rho T), kept inside [1, T-1]."""
        return min(max(self.T - math.ceil(self.rho * self.T), 1), self.T - 1)

    @property
    def n_labels(self) -> int:
        return self.G * self.G if self.task == "localize" else self.A

    @property
    def world(self) -> WorldConfig:
        return WorldConfig(T=self.T, H=self.H, W=self.W, min_objects=self.min_objects,
                           max_objects=self.max_objects, speed_min=self.speed_min,
                           speed_max=self.speed_max, size_min=self.size_min,
                           size_max=self.size_max, G=self.G, A=self.A)

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "Config | None" = None) -> "Config":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(kinds[key], val, key)
        return dataclasses.replace(base or cls(), **values)

    @classmethod
    def load(cls, path, base: "Config | None" = None) -> "Config":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), base)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _parse_value(kind: str, val: str, key: str):
    try:
        if kind == "bool":
            if val.lower() not in ("true", "false", "1", "0"):
                raise ValueError(val)
            return val.lower() in ("true", "1")
        if kind == "int":
            return int(val)
        if kind == "float":
            return float(val)
        return val
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {val!r}") from exc


# Full-scale hyper-parameters per dataset, mapped onto this config's fields.
FULL_PRESETS = {
    "clevrer": dict(T=64, H=64, W=64, width=1.0, slots=8, slot_size=64, iterations=4, ctx_dim=128,
                    ctx_layers=8, ctx_heads=4, ctx_mlp=128, query_hidden=128, decoder_channels=64,
                    rho=0.1, lr=1e-4, weight_decay=1e-4, batch_size=8, steps=500_000,
                    head_dim=128, head_layers=8, head_heads=4, head_mlp=128, head_final=2048,
                    lstm_hidden=256, lstm_layers=4),
    "cater": dict(T=80, H=64, W=64, width=1.0, slots=10, slot_size=64, iterations=4, ctx_dim=256,
                  ctx_layers=8, ctx_heads=4, ctx_mlp=256, query_hidden=128, decoder_channels=64,
                  rho=0.5, lr=1e-4, weight_decay=1e-2, batch_size=8, steps=500_000,
                  head_dim=256, head_layers=8, head_heads=4, head_mlp=256, head_final=2048,
                  lstm_hidden=512, lstm_layers=4),
    "kinetics": dict(T=300, H=256, W=256, width=1.0, slots=8, slot_size=128, iterations=4,
                     ctx_dim=256, ctx_layers=16, ctx_heads=4, ctx_mlp=256, query_hidden=128,
                     decoder_channels=64, rho=0.5, lr=1e-2, weight_decay=1e-2, steps=16_000_000,
                     head_dim=256, head_layers=16, head_heads=4, head_mlp=256, head_final=2048,
                     schedule="cosine", warmup=8000, lstm_hidden=512, lstm_layers=4),
}


def _count(cfg: Config) -> int:
    from .heads import SlotTransformer
    return SlotTransformer(cfg.replace(precision="f32")).num_parameters()


def flat_slot_size(base: Config, budget: float = 0.05) -> int:
    """Widest single-slot size whose parameter count stays within ``budget`` of the slotted model.

    Slot weights are shared across slots, so the count does not depend on K;
    multiplying the slot size by K would roughly double it at desk scale.
    """
    if base.slots == 1:
        return base.slot_size
    limit = _count(base) * (1.0 + budget)
    lo, hi = base.slot_size, base.slot_size * base.slots
    if _count(base.replace(slots=1, slot_size=hi)) <= limit:
        return hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _count(base.replace(slots=1, slot_size=mid)) <= limit:
            lo = mid
        else:
            hi = mid
    return lo


ABLATIONS = {
    "iters-1": dict(iterations=1),
    "iters-2": dict(iterations=2),
    "iters-4": dict(iterations=4),
    "deterministic": dict(deterministic=True),
    "lstm-context": dict(context_model="lstm"),
    "no-aux": dict(w_object=0.0),
}


def preset(name: str, base: Config | None = None) -> Config:
    """Named configurations: desk, gradcheck, the full-scale dataset presets, and the ablations."""
    base = base or Config()
    if name == "desk":
        return base
    if name == "gradcheck":
        return base.replace(T=4, H=8, W=8, slots=2, iterations=1, precision="f64")
    if name in FULL_PRESETS:
        return base.replace(**FULL_PRESETS[name])
    key = name.removeprefix("ablation-")
    if key == "flat-1slot":
        return base.replace(slots=1, slot_size=flat_slot_size(base))
    if key in ABLATIONS:
        return base.replace(**ABLATIONS[key])
    raise ConfigError(f"unknown preset {name!r}")


PRESET_NAMES = ("desk", "gradcheck", *FULL_PRESETS, "flat-1slot", *ABLATIONS)
