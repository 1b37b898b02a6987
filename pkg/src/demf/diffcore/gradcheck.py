"""Central-difference gradient verification."""

from dataclasses import dataclass, field

import numpy as np

from .tensor import no_grad

# Extended precision for the finite-difference oracle when the platform has it
# (x87 80-bit long double); otherwise the oracle runs in float64.
REFINE_FRACTION = 0.1

ORACLE_DTYPE = np.longdouble if np.finfo(np.longdouble).eps < np.finfo(np.float64).eps else np.float64


@dataclass
class GradReport:
    max_rel_error: float
    tol: float
    checked: int
    # (input index, flat index, analytic, numeric, relative error) above tol
    failures: list = field(default_factory=list)

    @property
    def passed(self):
        return self.max_rel_error <= self.tol


def relative_error(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)


def grad_check(f, inputs, h=1e-5, tol=1e-6, oracle_dtype=ORACLE_DTYPE):
    """Compare analytic gradients of scalar ``f(*inputs)`` against central differences.

    Every coordinate of every input is perturbed by ``±h``; the relative error
    uses the denominator ``max(|analytic|, |numeric|, 1e-8)``.

    The analytic pass runs at the inputs' own precision. Central differences
    are first taken at that precision too; coordinates whose error exceeds
    ``REFINE_FRACTION * tol`` are re-estimated with the inputs cast to
    ``oracle_dtype``. In plain float64 the rounding noise of ``f`` divided by
    ``2h`` (about 1e-11 for O(1) losses) already exceeds ``1e-6`` relative for
    small gradient components. ``f``
    must build its constants from its inputs' dtype or from Python/float64
    values so that numpy promotes to the oracle precision.
    """
    if not 0.0 < h <= 1e-3:
        raise ValueError(f"step h must be in (0, 1e-3], got {h}")
    for t in inputs:
        if t.data.dtype.kind != "f":
            raise ValueError("grad_check needs floating-point inputs")
        t.grad = None

    loss = f(*inputs)
    loss.backward()
    analytic = [np.zeros(t.data.size) if t.grad is None else t.grad.reshape(-1).astype(np.float64) for t in inputs]
    for t in inputs:
        t.grad = None

    numeric = [_central(f, inputs, i, range(t.data.size), h, None) for i, t in enumerate(inputs)]
    # refine with margin so a pass never rests on float64 rounding noise
    suspect = [np.flatnonzero(relative_error(a, n) > REFINE_FRACTION * tol) for a, n in zip(analytic, numeric)]
    if any(s.size for s in suspect) and oracle_dtype is not None:
        originals = [t.data for t in inputs]
        try:
            for t in inputs:
                t.data = t.data.astype(oracle_dtype)
            for i, idx in enumerate(suspect):
                if idx.size:
                    numeric[i][idx] = _central(f, inputs, i, idx, h, oracle_dtype)
        finally:
            for t, data in zip(inputs, originals):
                t.data = data

    worst = 0.0
    failures = []
    for i, (a, n) in enumerate(zip(analytic, numeric)):
        err = relative_error(a, n)
        if err.size:
            worst = max(worst, float(err.max()))
        for j in np.flatnonzero(err > tol):
            failures.append((i, int(j), float(a[j]), float(n[j]), float(err[j])))
    checked = sum(t.data.size for t in inputs)
    return GradReport(max_rel_error=worst, tol=tol, checked=checked, failures=failures)


def _central(f, inputs, i, indices, h, dtype):
    """Central differences of ``f`` along the given flat coordinates of input ``i``."""
    flat = inputs[i].data.reshape(-1)
    dtype = dtype or flat.dtype
    out = np.empty(len(indices), dtype=np.float64)
    with no_grad():
        for n, j in enumerate(indices):
            orig = flat[j]
            flat[j] = orig + h
            fp = _scalar(f(*inputs), dtype)
            flat[j] = orig - h
            fm = _scalar(f(*inputs), dtype)
            flat[j] = orig
            out[n] = (fp - fm) / (2 * h)
    return out


def _scalar(t, dtype):
    return np.asarray(t.data, dtype=dtype).reshape(-1)[0]
