"""Command-line entry point: gen-data, train, eval, render, grad-check, experiment."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from ..config import ABLATIONS, PRESET_NAMES, Config, preset
from ..spriteworld import dequantize, generate_dataset, read_dataset, write_dataset

log = logging.getLogger("slot_transformer")


def _world_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("world")
    g.add_argument("--T", type=int, default=8)
    g.add_argument("--H", type=int, default=32)
    g.add_argument("--W", type=int, default=32)
    g.add_argument("--min-objects", type=int, default=2)
    g.add_argument("--max-objects", type=int, default=4)
    g.add_argument("--G", type=int, default=6)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="slot-transformer", description=__doc__)
    ap.add_argument("-q", "--quiet", action="store_true", help="only print results")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="generate a sprite-world dataset file")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    _world_flags(p)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="key = value config file (applied on top of the preset)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", default="desk", choices=[*PRESET_NAMES] + [f"ablation-{n}" for n in ("flat-1slot", *ABLATIONS)])
    p.add_argument("--steps", type=int, help="override the configured step count")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.sltc")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("render", help="dump reconstructions, slot means/masks and a prior rollout")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seq", type=int, default=0)
    p.add_argument("--prefix", type=int, help="conditioning length p (default T/2)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("grad-check", help="finite-difference check of every parameter gradient")
    p.add_argument("--config", help="config file (default: the gradcheck preset)")
    p.add_argument("--f64", action="store_true", help="run in float64")
    p.add_argument("--iterations", type=int, nargs="*", help="check these iteration counts")
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("experiment", help="run an acceptance experiment")
    p.add_argument("name")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--n", type=int, help="number of generated sequences")
    p.add_argument("--seeds", type=int, nargs="*")
    p.add_argument("--run-dir", help="trained run for the rollout experiment")
    return ap


def _load_config(path, base: Config | None = None) -> Config:
    return Config.load(path, base) if path else (base or Config())


def cmd_gen_data(a) -> int:
    world = Config(T=a.T, H=a.H, W=a.W, min_objects=a.min_objects, max_objects=a.max_objects, G=a.G).world
    ds = generate_dataset(a.n, a.seed, world)
    write_dataset(a.out, ds)
    print(f"wrote {a.n} sequences to {a.out} ({Path(a.out).stat().st_size} bytes)")
    return 0


def cmd_train(a) -> int:
    from .train import Trainer

    cfg = preset(a.preset)
    if a.config:
        cfg = Config.load(a.config, cfg)
    if a.steps is not None:
        cfg = cfg.replace(steps=a.steps)
    data = read_dataset(a.data)
    tr = Trainer(cfg, data, a.out)
    ckpt = Path(a.out) / "checkpoint.sltc"
    if a.resume and ckpt.exists():
        tr.load(ckpt)
        log.info("resumed at step %d", tr.step)
    tr.fit()
    tr.save()
    row = tr.evaluate() if len(tr.eval_idx) else tr.last_row
    print(row.csv() if row else "no steps run")
    return 0


def cmd_eval(a) -> int:
    from .train import HEADER, load_trainer

    data = read_dataset(a.data)
    tr = load_trainer(a.ckpt, data)
    row = tr.evaluate(np.arange(len(data)), split="eval")
    print(HEADER)
    print(row.csv())
    return 0


def cmd_render(a) -> int:
    from ..substrate import no_grad
    from .images import dump_images
    from .rollout import prior_rollout
    from .train import load_trainer

    data = read_dataset(a.data)
    if not 0 <= a.seq < len(data):
        raise ValueError(f"--seq {a.seq} out of range for {len(data)} sequences")
    tr = load_trainer(a.ckpt, data)
    cfg = tr.cfg
    p = cfg.T // 2 if a.prefix is None else a.prefix
    frames = dequantize(data.frames[a.seq])
    out = Path(a.out)
    noise = tr.eval_noise(1, 0)
    tr.model.eval()
    with no_grad():
        res = tr.model.forward(frames[None].astype(tr.model.dtype), None, noise)
    dec = res.trace.final.decode
    written = dump_images(out / f"seq{a.seq}", res.trace.final.recon.data[0], dec.means.data[0],
                          dec.masks.data[0])
    roll = prior_rollout(tr.model, frames, p)
    written += dump_images(out / f"seq{a.seq}_rollout_p{p}", roll)
    print(f"wrote {len(written)} images to {out}")
    return 0


def cmd_grad_check(a) -> int:
    from .gradcheck import model_grad_check

    cfg = _load_config(a.config, preset("gradcheck"))
    if a.f64:
        cfg = cfg.replace(precision="f64")
    iters = a.iterations or [cfg.iterations]
    ok = True
    for n in iters:
        t0 = time.perf_counter()
        rep = model_grad_check(cfg.replace(iterations=n), tol=a.tol)
        name, _ = (rep.worst(1) or [("-", 0.0)])[0]
        status = "PASS" if rep.passed else "FAIL"
        print(f"iterations={n} params={len(rep.errors)} max_rel_err={rep.max_rel_err:.3e} ({name}) "
              f"{status} vs {a.tol:g} [{time.perf_counter() - t0:.1f}s]")
        ok &= rep.passed
    return 0 if ok else 1


def cmd_experiment(a) -> int:
    from .experiments import run_experiment

    kw = {}
    if a.name == "rollout":
        if not a.run_dir:
            raise ValueError("rollout needs --run-dir pointing at a learnability run")
        kw["run_dir"] = a.run_dir
    else:
        if a.steps is not None:
            kw["steps"] = a.steps
        if a.n is not None and a.name != "overfit":
            kw["n"] = a.n
        if a.seeds and a.name.endswith("trend"):
            kw["seeds"] = tuple(a.seeds)
    res = run_experiment(a.name, a.out, **kw)
    print(f"{res.name}: {res.status.upper()} {res.metrics if a.name != 'overfit' else res.metrics['best_psnr']}")
    return 0 if res.passed else 1


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "render": cmd_render,
            "grad-check": cmd_grad_check, "experiment": cmd_experiment}


def main(argv=None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.WARNING if a.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        return COMMANDS[a.cmd](a)
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
