"""Central finite-difference validation of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, no_grad

__all__ = ["GradCheckReport", "GradCheckError", "grad_check"]


class GradCheckError(RuntimeError):
    """The checked computation produced a non-finite value."""


@dataclass(frozen=True)
class GradCheckReport:
    op_name: str
    max_rel_error: float
    eps: float
    entries_checked: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def _scalarize(out: Tensor, projection: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return out.reshape(())
    return (out * Tensor(projection)).sum()


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    op_name: str = "",
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn(*inputs)`` with central differences.

    Non-scalar outputs are reduced with a fixed random projection so every
    output element contributes. ``max_entries`` samples at most that many
    coordinates per input (all coordinates when ``None``). Relative errors
    use ``max(|analytic|, |numeric|, floor)`` as denominator.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise GradCheckError(f"{op_name or 'grad_check'}: non-finite input")
    rng = np.random.default_rng(seed)

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise GradCheckError(f"{op_name or 'grad_check'}: forward produced non-finite values")
    projection = None if out.size == 1 else rng.standard_normal(out.shape)
    _scalarize(out, projection).backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    def value() -> float:
        with no_grad():
            res = fn(*inputs)
        if not np.all(np.isfinite(res.data)):
            raise GradCheckError(f"{op_name or 'grad_check'}: perturbed forward produced non-finite values")
        if projection is None:
            return float(res.data.reshape(()))
        return float((res.data * projection).sum())

    worst = 0.0
    checked = 0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        a_flat = a.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            plus = value()
            flat[i] = orig - eps
            minus = value()
            flat[i] = orig
            numeric = (plus - minus) / (2.0 * eps)
            denom = max(abs(a_flat[i]), abs(numeric), floor)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
            checked += 1
    for t in inputs:
        t.grad = None
    return GradCheckReport(op_name=op_name, max_rel_error=worst, eps=eps, entries_checked=checked)
