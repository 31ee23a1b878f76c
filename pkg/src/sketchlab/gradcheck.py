"""Finite-difference verification of analytic gradients.

The checker re-evaluates a scalar loss under central perturbation of every
trainable parameter element and compares against the gradients the layers
accumulated. Fragments are capped below 10k parameters — this is a desk-scale
audit tool, not a production gradient test.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import math

import numpy as np

from sketchlab.errors import ValidationError
from sketchlab.params import Parameter

MAX_CHECK_PARAMS = 10_000


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float | None
    status: str  # "ok" | "fail" | "skipped (frozen)"


@dataclass
class GradCheckReport:
    tolerance: float
    eps: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.status != "fail" for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        errs = [e.max_rel_error for e in self.entries if e.max_rel_error is not None]
        return max(errs) if errs else 0.0

    def __str__(self) -> str:
        lines = [f"gradient check (eps={self.eps:g}, tolerance={self.tolerance:g})"]
        for e in self.entries:
            err = "-" if e.max_rel_error is None else f"{e.max_rel_error:.3e}"
            lines.append(f"  {e.name:<40s} {err:>12s}  {e.status}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"  => {verdict} (max rel error {self.max_rel_error:.3e})")
        return "\n".join(lines)


def gradient_check(parameters: Iterable[Parameter],
                   loss_fn: Callable[[], float],
                   *, eps: float = 1e-3, tolerance: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    loss_fn must run the fragment's forward AND backward and return the scalar
    loss; gradients it accumulates into the parameters are read once up front
    (the checker zeroes them first). Numeric probes then re-call loss_fn with
    individual elements perturbed by +/-eps; the relative error per element is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    params = list(parameters)
    active = [p for p in params if not p.frozen]
    total = sum(p.size for p in active)
    if total > MAX_CHECK_PARAMS:
        raise ValidationError(
            f"gradient_check fragment has {total} trainable parameters; "
            f"cap is {MAX_CHECK_PARAMS}"
        )

    for p in params:
        p.zero_grad()
    loss0 = float(loss_fn())
    if not math.isfinite(loss0):
        raise ValidationError(
            f"gradient_check: loss is not finite ({loss0}); "
            "check inputs and parameter scales before differencing"
        )
    analytic = {id(p): p.grad.copy() for p in active}

    report = GradCheckReport(tolerance=tolerance, eps=eps)
    for p in params:
        if p.frozen:
            report.entries.append(GradCheckEntry(p.name, None, "skipped (frozen)"))
            continue
        a = analytic[id(p)].reshape(-1)
        flat = p.value.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + np.float32(eps)
            lp = float(loss_fn())
            flat[i] = orig - np.float32(eps)
            lm = float(loss_fn())
            flat[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise ValidationError(
                    f"gradient_check: non-finite loss while perturbing {p.name}[{i}]"
                )
            numeric = (lp - lm) / (2.0 * eps)
            denom = max(abs(a[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(a[i] - numeric) / denom)
        status = "ok" if worst < tolerance else "fail"
        report.entries.append(GradCheckEntry(p.name, worst, status))
    return report
