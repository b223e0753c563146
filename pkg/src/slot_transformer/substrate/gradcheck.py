"""Central finite-difference checks against the tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class NonDeterministicError(RuntimeError):
    pass


def rel_err(a: float, b: float, floor: float = 1e-10) -> float:
    """|a-b| / max(|a|, |b|); differences below ``floor`` count as exact."""
    diff = abs(a - b)
    if diff <= floor:
        return 0.0
    return diff / max(abs(a), abs(b))


@dataclass
class GradCheckReport:
    tol: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def worst(self, n: int = 5) -> list[tuple[str, float]]:
        return sorted(self.errors.items(), key=lambda kv: -kv[1])[:n]


def _eval(f: Callable[[], Tensor]) -> float:
    with T.no_grad():
        return float(f().data)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    h: float = 1e-5,
    tol: float = 1e-4,
    n_coords: int = 4,
    seed: int = 0,
    alt_steps: Sequence[float] = (1e-6, 1e-4),
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    For each named tensor, checks one random direction over the whole tensor
    plus up to ``n_coords`` individual coordinates. ``f`` must read the
    tensors' current ``.data`` on every call.

    A probe whose error at step ``h`` exceeds ``tol`` is retried at each of
    ``alt_steps`` and scored by its best step: a ReLU or clamp kink inside the
    stencil, or round-off on a tiny derivative, spoils one step size, while a
    wrong gradient disagrees at all of them.
    """
    rng = np.random.default_rng(seed)
    for _, p in params:
        p.grad = np.zeros_like(p.data)
    base = f()
    if _eval(f) != float(base.data):
        raise NonDeterministicError("f differs across two evaluations at the same point")
    T.backward(base)
    report = GradCheckReport(tol=tol)
    for name, p in params:
        analytic = p.grad.copy()
        orig = p.data.copy()
        probes = [rng.standard_normal(p.shape)]
        flat = rng.permutation(p.data.size)[: min(n_coords, p.data.size)]
        for idx in flat:
            d = np.zeros(p.shape)
            d.flat[idx] = 1.0
            probes.append(d)
        worst = 0.0
        for d in probes:
            d = d.astype(p.dtype)
            exact = float((analytic.astype(np.float64) * d).sum())
            err = np.inf
            for step in (h, *alt_steps):
                p.data = orig + step * d
                fp = _eval(f)
                p.data = orig - step * d
                fm = _eval(f)
                p.data = orig
                err = min(err, rel_err(exact, (fp - fm) / (2 * step)))
                if err < tol:
                    break
            worst = max(worst, err)
        report.errors[name] = worst
    return report


def check_function(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5,
                   seed: int = 0, floor: float = 1e-10) -> float:
    """Max relative error of d sum(w * fn(inputs))/d inputs, every coordinate, f64.

    Absolute differences below ``floor`` count as exact (finite-difference round-off).
    """
    rng = np.random.default_rng(seed)
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    probe_out = fn(*leaves)
    weights = rng.standard_normal(probe_out.shape)
    wt = Tensor(weights)

    def scalar():
        return T.sum_(T.mul(fn(*leaves), wt))

    loss = scalar()
    T.backward(loss)
    worst = 0.0
    for leaf in leaves:
        grad = leaf.grad.copy()
        for i in range(leaf.data.size):
            orig = leaf.data.flat[i]
            leaf.data.flat[i] = orig + h
            fp = _eval(scalar)
            leaf.data.flat[i] = orig - h
            fm = _eval(scalar)
            leaf.data.flat[i] = orig
            worst = max(worst, rel_err(grad.flat[i], (fp - fm) / (2 * h), floor))
    return worst
