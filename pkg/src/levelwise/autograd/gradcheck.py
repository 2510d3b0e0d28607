"""Gradient verification by central finite differences.

Compares tape gradients against ``(f(x+h) - f(x-h)) / 2h`` per parameter
element. Requires float64 and a deterministic builder (dropout off); the
numeric side never touches the tape, so it stays independent of the
backward rules it is checking.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import Tape


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    worst_index: tuple
    passed: bool


@dataclass
class GradCheckReport:
    checks: list
    tolerance: float

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    @property
    def max_rel_error(self):
        return max((c.max_rel_error for c in self.checks), default=0.0)

    def summary(self):
        lines = [f"gradient check (tolerance {self.tolerance:g})"]
        for c in self.checks:
            status = "ok" if c.passed else "FAIL"
            lines.append(f"  {status:4s} {c.name}: max rel error {c.max_rel_error:.3e}")
        return "\n".join(lines)


def grad_check(builder, parameters, h=1e-5, tolerance=1e-4, rel_floor=1e-6):
    """Check tape gradients of ``builder()`` against central differences.

    ``builder`` constructs and returns a scalar loss tensor from the given
    parameters; it is re-invoked for every probe, so it must be a pure
    function of the parameter values. The relative error per element is
    ``|analytic - numeric| / max(|analytic|, |numeric|, rel_floor)``.
    """
    parameters = list(parameters)
    for p in parameters:
        p.zero_grad()
    with Tape() as tape:
        loss = builder()
    tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in parameters}

    checks = []
    for p in parameters:
        flat = p.data.ravel()
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = builder().item()
            flat[i] = orig - h
            f_minus = builder().item()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * h)
        ana = analytic[p.name].ravel()
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(numeric)), rel_floor)
        rel = np.abs(ana - numeric) / denom
        worst = int(np.argmax(rel))
        checks.append(
            ParamCheck(
                name=p.name,
                max_rel_error=float(rel[worst]),
                worst_index=np.unravel_index(worst, p.shape),
                passed=bool(rel[worst] < tolerance),
            )
        )
    return GradCheckReport(checks=checks, tolerance=tolerance)
