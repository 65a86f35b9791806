"""Central finite-difference verification of recorded gradients.

``gradient_check`` rebuilds the loss from a closure, so the function under
test must be deterministic across calls (eval-mode dropout, or a fixed
mask). Agreement is judged entrywise as
|analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|),
the absolute floor guarding entries whose true gradient is zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor, backward, zero_grad


@dataclass
class GradCheckReport:
    checked: int = 0
    max_abs_err: float = 0.0
    max_rel_err: float = 0.0
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def gradient_check(build_loss, leaves, *, step: float = 1e-3, rtol: float = 1e-3,
                   atol: float = 1e-8, max_entries_per_leaf=None, rng=None) -> GradCheckReport:
    """Compare recorded gradients of ``build_loss()`` against central differences.

    ``leaves`` maps names to requires-grad Tensors that ``build_loss`` closes
    over. When a leaf has more entries than ``max_entries_per_leaf``, entries
    are sampled without replacement from ``rng``.
    """
    leaves = dict(leaves)
    for name, t in leaves.items():
        if not isinstance(t, Tensor) or not t.requires_grad:
            raise ContractViolation(f"leaf {name!r} must be a requires-grad Tensor")
    if max_entries_per_leaf is not None and rng is None:
        raise ContractViolation("sampling entries requires an rng")

    zero_grad(leaves.values())
    loss = build_loss()
    backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in leaves.items()
    }
    zero_grad(leaves.values())

    report = GradCheckReport()
    for name, t in leaves.items():
        flat = t.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        n = flat.size
        if max_entries_per_leaf is not None and n > max_entries_per_leaf:
            idxs = rng.choice(n, size=max_entries_per_leaf, replace=False)
        else:
            idxs = np.arange(n)
        for i in idxs:
            saved = flat[i]
            flat[i] = saved + step
            up = build_loss().item()
            flat[i] = saved - step
            down = build_loss().item()
            flat[i] = saved
            numeric = (up - down) / (2.0 * step)
            err = abs(ana[i] - numeric)
            denom = max(abs(ana[i]), abs(numeric))
            report.checked += 1
            report.max_abs_err = max(report.max_abs_err, err)
            if denom > 0:
                report.max_rel_err = max(report.max_rel_err, err / denom)
            if err > atol + rtol * denom:
                report.failures.append((name, int(i), float(ana[i]), float(numeric)))
    return report
