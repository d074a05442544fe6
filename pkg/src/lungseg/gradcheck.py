"""Finite-difference verification of analytic gradients.

Every differentiable operation in the project is expected to pass
check_gradients at 64-bit precision: central differences with step 1e-5
against autograd, max relative error below 1e-4. Large tensors are
subsampled (at least 200 entries, seeded) to keep runtime bounded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .layers import NumericError

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
MIN_SUBSAMPLE = 200


@dataclass
class GradientCheckReport:
    tolerance: float
    max_rel_error: float = 0.0
    worst_location: str = ""
    entries_checked: int = 0
    per_tensor: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def summary(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"{status}: max rel error {self.max_rel_error:.3e} at "
            f"{self.worst_location or 'n/a'} over {self.entries_checked} entries "
            f"(tolerance {self.tolerance:.1e})"
        )


def check_gradients(
    fn,
    tensors: dict[str, torch.Tensor],
    tolerance: float = DEFAULT_TOLERANCE,
    step: float = DEFAULT_STEP,
    max_entries_per_tensor: int = MIN_SUBSAMPLE,
    seed: int = 0,
) -> GradientCheckReport:
    """Compare autograd gradients of a scalar function against central differences.

    ``fn`` must recompute its scalar output from the current values of
    ``tensors`` on every call. All tensors must be float64; they are flagged
    to require grad here. Relative error uses max(|analytic|, |numeric|, 1)
    as the denominator. Non-finite values raise NumericError naming the
    offending entry.
    """
    for name, t in tensors.items():
        if t.dtype != torch.float64:
            raise ValueError(f"gradient checks run at 64-bit; {name} is {t.dtype}")
        t.requires_grad_(True)

    loss = fn()
    if loss.dim() != 0:
        raise ValueError("fn must return a scalar")
    if not torch.isfinite(loss):
        raise NumericError("fn returned a non-finite loss")
    grads = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)

    rng = np.random.default_rng(seed)
    report = GradientCheckReport(tolerance=tolerance)
    for (name, t), grad in zip(tensors.items(), grads):
        n = t.numel()
        if n > max_entries_per_tensor:
            idx = np.sort(rng.choice(n, size=max_entries_per_tensor, replace=False))
        else:
            idx = np.arange(n)
        flat = t.detach().view(-1)
        grad_flat = (
            torch.zeros_like(flat) if grad is None else grad.reshape(-1)
        )
        worst = 0.0
        for i in idx:
            i = int(i)
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
                f_plus = float(fn())
                flat[i] = orig - step
                f_minus = float(fn())
                flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"non-finite value while perturbing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * step)
            analytic = grad_flat[i].item()
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0)
            report.entries_checked += 1
            if rel > worst:
                worst = rel
            if rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst_location = f"{name}[{i}]"
        report.per_tensor[name] = worst
    return report


def check_module_gradients(
    module: torch.nn.Module,
    loss_fn,
    extra_inputs: dict[str, torch.Tensor] | None = None,
    **kwargs,
) -> GradientCheckReport:
    """check_gradients over every parameter of a module (plus extra inputs)."""
    tensors = dict(module.named_parameters())
    if extra_inputs:
        tensors.update(extra_inputs)
    return check_gradients(loss_fn, tensors, **kwargs)
