"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from gadlab.numcore.tensor import Parameter, Tensor, backward


def numeric_grad(loss_fn: Callable[[], Tensor], p: Parameter, eps: float = 1e-6,
                 entries: np.ndarray | None = None) -> np.ndarray:
    flat = p.data.reshape(-1)
    idx = np.arange(flat.size) if entries is None else entries
    out = np.zeros(len(idx))
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(loss_fn().data)
        flat[i] = orig - eps
        lo = float(loss_fn().data)
        flat[i] = orig
        out[j] = (hi - lo) / (2 * eps)
    return out


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-6,
               max_entries: int | None = None, seed: int = 0, floor: float = 1e-10) -> dict[str, float]:
    """Relative error ``|a - n| / (|a| + |n|)`` per trainable tensor, norm-wise.

    The denominator is clamped at ``floor`` so a tensor with an exactly zero
    gradient compares absolutely.
    Frozen parameters are skipped.  With ``max_entries`` a seeded subset of
    each tensor is probed.  Returns ``{name: error}`` plus ``"max"``.
    """
    rng = np.random.default_rng(seed)
    live = [p for p in params if p.trainable]
    for p in live:
        p.grad = None
    backward(loss_fn())
    report: dict[str, float] = {}
    for k, p in enumerate(live):
        entries = None
        if max_entries is not None and p.data.size > max_entries:
            entries = np.sort(rng.choice(p.data.size, size=max_entries, replace=False))
        analytic = (np.zeros(p.data.size) if p.grad is None else p.grad.reshape(-1))
        analytic = analytic if entries is None else analytic[entries]
        numeric = numeric_grad(loss_fn, p, eps, entries)
        denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
        err = float(np.linalg.norm(analytic - numeric) / max(denom, floor))
        report[p.name or f"param{k}"] = err
    report["max"] = max(report.values(), default=0.0)
    return report
