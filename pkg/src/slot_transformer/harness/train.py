"""Training and evaluation loop with CSV metrics and resumable checkpoints."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..config import Config
from ..generative import NoiseBundle
from ..heads import ForwardResult, SlotTransformer
from ..spriteworld import Dataset, dequantize
from ..substrate import backward, no_grad
from .checkpoint import Checkpoint, capture, checkpoint_bytes, checkpoint_load, restore
from .optim import Adam, clip_grads, lr_at

log = logging.getLogger("slot_transformer")

METRIC_FIELDS = ("step", "split", "loss_total", "loss_recon", "loss_kl", "loss_object", "loss_qa",
                 "acc_top1", "acc_top5", "psnr")
HEADER = ",".join(METRIC_FIELDS)


class TrainingDiverged(RuntimeError):
    """Non-finite loss or activation during a training step."""


@dataclass
class MetricsRow:
    step: int
    split: str
    loss_total: float = math.nan
    loss_recon: float = math.nan
    loss_kl: float = math.nan
    loss_object: float = math.nan
    loss_qa: float = math.nan
    acc_top1: float = math.nan
    acc_top5: float = math.nan
    psnr: float = math.nan

    def csv(self) -> str:
        vals = [str(self.step), self.split]
        vals += [format(getattr(self, f), ".9g") for f in METRIC_FIELDS[2:]]
        return ",".join(vals)

    @classmethod
    def parse(cls, line: str) -> "MetricsRow":
        parts = line.strip().split(",")
        return cls(int(parts[0]), parts[1], *(float(v) for v in parts[2:]))


def psnr(x: np.ndarray, y: np.ndarray, cap: float = 99.0) -> float:
    """Peak signal-to-noise ratio for signals in [0, 1], capped (a perfect match gives ``cap``)."""
    mse = float(np.mean((np.asarray(x, np.float64) - np.asarray(y, np.float64)) ** 2))
    if mse <= 0:
        return cap
    return min(10.0 * math.log10(1.0 / mse), cap)


def topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    k = min(k, logits.shape[-1])
    top = np.argsort(-logits, axis=-1, kind="stable")[:, :k]
    return (top == np.asarray(labels)[:, None]).any(axis=1)


def task_labels(cfg: Config, data: Dataset, idx) -> np.ndarray:
    return (data.grid_cells if cfg.task == "localize" else data.actions)[idx]


def split_indices(n: int, eval_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Train on the first N - n_eval sequences, hold out the last n_eval."""
    n_eval = int(round(n * eval_fraction)) if n > 1 else 0
    n_eval = min(n_eval, n - 1)
    return np.arange(n - n_eval), np.arange(n - n_eval, n)


def check_data(cfg: Config, data: Dataset) -> None:
    t, h, w = data.dims
    if (t, h, w) != (cfg.T, cfg.H, cfg.W):
        raise ValueError(f"data is T={t} {h}x{w} but config expects T={cfg.T} {cfg.H}x{cfg.W}")
    if cfg.task == "localize" and data.G != cfg.G:
        raise ValueError(f"data grid G={data.G} but config G={cfg.G}")


def _loss(res: ForwardResult, key: str) -> float:
    t = res.losses.get(key)
    return math.nan if t is None else float(t.data)


class Trainer:
    """Owns model, optimizer, RNG and step counter; appends rows to ``out_dir/metrics.csv``."""

    def __init__(self, cfg: Config, data: Dataset, out_dir=None, train_idx=None, eval_idx=None):
        cfg.validate()
        check_data(cfg, data)
        self.cfg = cfg
        self.data = data
        self.model = SlotTransformer(cfg)
        self.opt = Adam.from_config(self.model, cfg)
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.model.slots.set_dropout_rng(self.rng)
        if train_idx is None:
            train_idx, eval_idx = split_indices(len(data), cfg.eval_fraction)
        self.train_idx = np.asarray(train_idx)
        self.eval_idx = np.asarray(eval_idx if eval_idx is not None else [], dtype=np.int64)
        self.step = 0
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.last_row: MetricsRow | None = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            cfg.save(self.out_dir / "config.resolved")

    # -- data -------------------------------------------------------------
    def frames(self, idx) -> np.ndarray:
        return dequantize(self.data.frames[idx]).astype(self.model.dtype)

    def sample_batch(self) -> np.ndarray:
        b = self.cfg.batch_size
        return np.sort(self.rng.choice(self.train_idx, size=b, replace=len(self.train_idx) < b))

    # -- steps ------------------------------------------------------------
    def train_step(self, idx=None) -> MetricsRow:
        cfg = self.cfg
        if idx is None:
            idx = self.sample_batch()
        x = self.frames(idx)
        labels = task_labels(cfg, self.data, idx)
        noise = NoiseBundle.draw(self.rng, cfg, len(idx))
        self.model.train()
        self.model.zero_grad()
        try:
            res = self.model.forward(x, labels, noise)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"step {self.step}: {exc}; last row: {self.last_row}") from exc
        parts = {k: float(v.data) for k, v in res.losses.items()}
        if not math.isfinite(float(res.total.data)):
            raise TrainingDiverged(f"step {self.step}: non-finite loss; parts {parts}")
        try:
            backward(res.total)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"step {self.step}: backward {exc}; parts {parts}") from exc
        clip_grads(self.opt.params.values(), cfg.clip_norm)
        self.opt.step(lr_at(cfg, self.step))
        self.step += 1
        logits = res.logits.data
        row = MetricsRow(self.step, "train", float(res.total.data), _loss(res, "recon"), _loss(res, "kl"),
                         _loss(res, "object"), _loss(res, "qa"),
                         float(topk_hits(logits, labels, 1).mean()), float(topk_hits(logits, labels, 5).mean()),
                         psnr(res.trace.final.recon.data, x, cfg.max_psnr))
        self.last_row = row
        return row

    def eval_noise(self, batch: int, offset: int) -> NoiseBundle:
        cfg = self.cfg
        init = np.random.default_rng([cfg.seed, 2, offset]).standard_normal((batch, cfg.slots, cfg.slot_size))
        return NoiseBundle.zeros(cfg, batch, init=init, dtype=self.model.dtype)

    def predict(self, idx) -> tuple[np.ndarray, list[ForwardResult]]:
        """Logits for ``idx`` with posterior means and a fixed initial-slot draw."""
        out, results = [], []
        self.model.eval()
        with no_grad():
            for start in range(0, len(idx), self.cfg.eval_batch):
                chunk = np.asarray(idx[start:start + self.cfg.eval_batch])
                res = self.model.forward(self.frames(chunk), task_labels(self.cfg, self.data, chunk),
                                         self.eval_noise(len(chunk), start))
                out.append(res.logits.data)
                results.append(res)
        self.model.train()
        return np.concatenate(out), results

    def evaluate(self, idx=None, split: str = "eval") -> MetricsRow:
        idx = self.eval_idx if idx is None else np.asarray(idx)
        if len(idx) == 0:
            raise ValueError("empty evaluation split")
        logits, results = self.predict(idx)
        labels = task_labels(self.cfg, self.data, idx)
        weights = np.array([r.logits.shape[0] for r in results], dtype=np.float64) / len(idx)

        def avg(key):
            vals = [(float(r.total.data) if key == "total" else _loss(r, key)) for r in results]
            return float(np.dot(weights, vals))

        sq = [float(np.sum((r.trace.final.recon.data.astype(np.float64) - self.frames(
            idx[i * self.cfg.eval_batch:(i + 1) * self.cfg.eval_batch])) ** 2)) for i, r in enumerate(results)]
        mse = sum(sq) / (len(idx) * self.cfg.T * self.cfg.H * self.cfg.W * 3)
        p = self.cfg.max_psnr if mse <= 0 else min(10 * math.log10(1 / mse), self.cfg.max_psnr)
        return MetricsRow(self.step, split, avg("total"), avg("recon"), avg("kl"), avg("object"), avg("qa"),
                          float(topk_hits(logits, labels, 1).mean()), float(topk_hits(logits, labels, 5).mean()), p)

    # -- bookkeeping ------------------------------------------------------
    def write_row(self, row: MetricsRow) -> None:
        if self.out_dir is None:
            return
        path = self.out_dir / "metrics.csv"
        new = not path.exists()
        with path.open("a", encoding="utf-8") as f:
            if new:
                f.write(HEADER + "\n")
            f.write(row.csv() + "\n")

    def checkpoint(self) -> Checkpoint:
        return capture(self.model, self.opt, self.rng, self.step, self.cfg)

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.out_dir / "checkpoint.sltc"
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(checkpoint_bytes(self.checkpoint()))
        tmp.replace(path)
        return path

    def load(self, ck: Checkpoint | str | Path) -> None:
        if not isinstance(ck, Checkpoint):
            ck = checkpoint_load(ck)
        self.step = restore(ck, self.model, self.opt, self.rng, self.cfg)

    def fit(self, steps: int | None = None, stop=None) -> list[MetricsRow]:
        """Train until ``steps`` total steps (default cfg.steps); ``stop(eval_row)`` may end early."""
        cfg = self.cfg
        target = cfg.steps if steps is None else steps
        rows = []
        t0 = time.perf_counter()
        while self.step < target:
            row = self.train_step()
            if cfg.log_every and (self.step % cfg.log_every == 0 or self.step == target):
                self.write_row(row)
                rows.append(row)
                log.info("step %d loss %.4g recon %.4g kl %.4g qa %.4g acc %.3f psnr %.2f (%.1fs)",
                         row.step, row.loss_total, row.loss_recon, row.loss_kl, row.loss_qa, row.acc_top1,
                         row.psnr, time.perf_counter() - t0)
            done = False
            if cfg.eval_every and len(self.eval_idx) and (self.step % cfg.eval_every == 0 or self.step == target):
                erow = self.evaluate()
                self.write_row(erow)
                rows.append(erow)
                log.info("eval step %d acc %.3f top5 %.3f psnr %.2f", erow.step, erow.acc_top1,
                         erow.acc_top5, erow.psnr)
                done = stop is not None and stop(erow)
            if self.out_dir is not None and cfg.checkpoint_every and (
                    self.step % cfg.checkpoint_every == 0 or self.step == target or done):
                self.save()
            if done:
                break
        return rows


def load_trainer(ckpt_path, data: Dataset, out_dir=None, cfg: Config | None = None) -> Trainer:
    ck = checkpoint_load(ckpt_path)
    cfg = cfg or ck.config
    trainer = Trainer(cfg, data, out_dir)
    trainer.load(ck)
    return trainer
