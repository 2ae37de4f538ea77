"""Central finite-difference verification of hand-written backward passes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..tensor import Rng
from .layers import ReLU


@dataclass
class GradCheckReport:
    names: list[str] = field(default_factory=list)
    analytic: list[float] = field(default_factory=list)
    numeric: list[float] = field(default_factory=list)
    kinks_skipped: int = 0

    @property
    def rel_errors(self) -> np.ndarray:
        a = np.asarray(self.analytic)
        n = np.asarray(self.numeric)
        return np.abs(a - n) / np.maximum(1e-8, np.abs(n))

    def fraction_within(self, tol: float) -> float:
        errs = self.rel_errors
        return float(np.mean(errs <= tol)) if errs.size else 1.0

    @property
    def max_rel_error(self) -> float:
        errs = self.rel_errors
        return float(errs.max()) if errs.size else 0.0

    def extend(self, other: "GradCheckReport") -> "GradCheckReport":
        self.names += other.names
        self.analytic += other.analytic
        self.numeric += other.numeric
        self.kinks_skipped += other.kinks_skipped
        return self


def _relu_masks(relus):
    return [r._mask for r in relus]


def gradcheck(module, inputs, rng: Rng, n_coords: int = 50, h: float = 1e-4,
              check_inputs: bool = True, skip_kinks: bool = True,
              max_redraws: int = 5) -> GradCheckReport:
    """Compare ``module.backward`` with central differences of ``sum(R * module(*inputs))``.

    ``R`` is a fixed random projection. ``n_coords`` coordinates are drawn by
    cycling through the parameters (and optionally the inputs), one random
    entry per visit. With ``skip_kinks`` a coordinate whose ``+h`` or ``-h``
    evaluation changes the active set of any ReLU is redrawn (at most
    ``max_redraws`` times, then the visit passes to the next tensor): the
    difference quotient straddles a kink there and does not estimate the
    derivative. Skips are counted in ``kinks_skipped``.
    Modules are expected to be in float64.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    relus = [m for m in module.modules() if isinstance(m, ReLU)] if skip_kinks else []
    out = module(*inputs)
    proj = rng.normal(out.shape)

    module.zero_grad()
    module(*inputs)
    base_masks = [m.copy() for m in _relu_masks(relus)]
    grads = module.backward(proj)
    if not isinstance(grads, tuple):
        grads = (grads,)

    def loss() -> tuple[float, bool]:
        val = float(np.sum(module(*inputs) * proj))
        kinked = any(not np.array_equal(a, b) for a, b in zip(base_masks, _relu_masks(relus)))
        return val, kinked

    targets = [(name, p.data, p.grad.copy()) for name, p in module.named_parameters()]
    if check_inputs:
        targets += [(f"input{i}", x, g) for i, (x, g) in enumerate(zip(inputs, grads))]
    # round-robin over a shuffled tensor list so small tensors (alpha, biases) get sampled too
    order = rng.permutation(len(targets))
    report = GradCheckReport()
    n_drawn = 0
    visit = 0
    while n_drawn < n_coords and visit < n_coords * len(order):
        name, arr, garr = targets[int(order[visit % len(order)])]
        visit += 1
        for _ in range(max_redraws):
            idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
            orig = arr[idx]
            arr[idx] = orig + h
            up, kink_up = loss()
            arr[idx] = orig - h
            down, kink_down = loss()
            arr[idx] = orig
            if not (kink_up or kink_down):
                break
            report.kinks_skipped += 1
        else:
            # every draw from this tensor straddled a kink; move on to the next tensor
            continue
        report.names.append(f"{name}{list(idx)}")
        report.analytic.append(float(garr[idx]))
        report.numeric.append((up - down) / (2 * h))
        n_drawn += 1
    return report
