"""Central finite-difference verification of taped gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    n_checked: int
    per_param: dict[str, float] = field(default_factory=dict)

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    tol: float | None = None,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor * scale)``
    where ``scale`` is the largest gradient magnitude (at least 1), which keeps
    entries that are zero up to round-off from dominating the report. With
    ``max_entries`` only a random subset of each parameter is perturbed.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("grad_check runs in float64 only")
        p.grad = None
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    rng = rng or np.random.default_rng(0)
    worst_rel = worst_abs = 0.0
    n_checked = 0
    per_param: dict[str, float] = {}
    for k, (p, ga) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        scale = max(1.0, float(np.abs(ga).max(initial=0.0)))
        worst_here = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            ana = float(ga.reshape(-1)[i])
            err = abs(ana - num)
            rel = err / max(abs(ana), abs(num), floor * scale)
            worst_here = max(worst_here, rel)
            worst_abs = max(worst_abs, err)
            n_checked += 1
        per_param[p.name or f"param{k}"] = worst_here
        worst_rel = max(worst_rel, worst_here)
    report = GradCheckReport(worst_rel, worst_abs, n_checked, per_param)
    if tol is not None and not report.ok(tol):
        raise AssertionError(f"gradient check failed: max rel err {worst_rel:.3e} >= {tol}")
    return report
