"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class GradcheckError(RuntimeError):
    pass


@dataclass
class GradcheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    worst: str = ""
    per_input: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __bool__(self) -> bool:
        return self.passed


def gradcheck(
    f: Callable[[], Tensor],
    inputs: Tensor | Sequence[Tensor],
    eps: float = 1e-6,
    tol: float = 1e-5,
    max_per_input: int | None = None,
    floor: float = 1e-5,
    seed: int = 0,
) -> GradcheckReport:
    """Compare analytic gradients of a scalar ``f`` against central differences.

    ``f`` is a closure re-evaluated after each in-place perturbation of the
    ``inputs`` (float64 tensors). The error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``; ``floor``
    keeps coordinates whose true gradient is ~0 from dividing roundoff by zero.
    With ``max_per_input`` set, that many coordinates per input are sampled
    (fixed ``seed``) instead of sweeping all of them.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    for t in inputs:
        if t.dtype != np.float64:
            raise GradcheckError(f"gradcheck needs float64 inputs, got {t.dtype}")
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None

    out = f()
    if out.size != 1:
        raise GradcheckError(f"gradcheck needs a scalar function, got shape {out.shape}")
    if f().data.tobytes() != out.data.tobytes():
        raise GradcheckError("function is not deterministic: two evaluations differ")
    out.backward()

    rng = np.random.default_rng(seed)
    worst_err, worst_at, n_checked = 0.0, "", 0
    per_input = []
    for k, t in enumerate(inputs):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_input is not None and flat.size > max_per_input:
            idx = np.sort(rng.choice(flat.size, max_per_input, replace=False))
        a_flat = analytic.reshape(-1)
        input_err = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            err = abs(a_flat[i] - numeric) / max(abs(a_flat[i]), abs(numeric), floor)
            input_err = max(input_err, err)
            if err > worst_err:
                worst_err = err
                worst_at = f"input {k} ({t.name or 'unnamed'}) flat index {i}: analytic {a_flat[i]:.6g} numeric {numeric:.6g}"
        per_input.append(input_err)
        n_checked += len(idx)
    return GradcheckReport(worst_err, tol, n_checked, worst_at, per_input)


def weighted_sum(out: Tensor, seed: int = 1) -> Tensor:
    """Scalarize a tensor with fixed random weights so no gradient cancels by symmetry."""
    w = np.random.default_rng(seed).standard_normal(out.shape).astype(out.dtype)
    return (out * Tensor(w)).sum()
