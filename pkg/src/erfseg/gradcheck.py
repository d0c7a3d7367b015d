"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    eps: float
    tol: float
    failures: list = field(default_factory=list)  # (tensor_idx, flat_idx, analytic, numeric)

    def __bool__(self):
        return self.passed


def grad_check(f, inputs, eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of scalar `f(*inputs)` against central
    differences, per coordinate of every requires_grad input.

    Inputs should sit at a generic point (re-sample and re-run if a relu or
    pooling kink happens to fall inside the eps window).
    """
    inputs = list(inputs)
    checked = [t for t in inputs if t.requires_grad]
    for t in checked:
        if t.dtype != np.float64:
            raise ShapeError("grad_check requires float64 inputs for FD headroom")
        t.grad = None

    with Tape() as tape:
        y = f(*inputs)
        if y.size != 1:
            raise ShapeError("grad_check needs a scalar-valued function")
        tape.backward(y)
    analytic = [
        np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in checked
    ]

    numeric = [np.zeros_like(t.data) for t in checked]
    for ti, t in enumerate(checked):
        flat = t.data.reshape(-1)
        num = numeric[ti].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f(*inputs).item()
            flat[i] = orig - eps
            f_minus = f(*inputs).item()
            flat[i] = orig
            num[i] = (f_plus - f_minus) / (2.0 * eps)

    gmax = 0.0
    for a, n in zip(analytic, numeric):
        if a.size:
            gmax = max(gmax, float(np.max(np.abs(a))), float(np.max(np.abs(n))))
    floor = max(1e-6 * gmax, 1e-12)

    max_rel = 0.0
    failures = []
    for ti, (a, n) in enumerate(zip(analytic, numeric)):
        af, nf = a.reshape(-1), n.reshape(-1)
        for i in range(af.size):
            denom = max(abs(af[i]), abs(nf[i]), floor)
            rel = abs(af[i] - nf[i]) / denom
            if rel > max_rel:
                max_rel = rel
            if rel >= tol:
                failures.append((ti, i, float(af[i]), float(nf[i])))
    return GradCheckReport(max_rel_err=max_rel, passed=max_rel < tol, eps=eps, tol=tol, failures=failures)
