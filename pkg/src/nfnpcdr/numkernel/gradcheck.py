from __future__ import annotations

import numpy as np

from .tensor import backward, no_grad


class EvaluationError(ArithmeticError):
    pass


def _value(loss_fn):
    with no_grad():
        val = float(np.asarray(loss_fn().data))
    if not np.isfinite(val):
        raise EvaluationError(f"loss is not finite: {val}")
    return val


def grad_check_report(loss_fn, params, h=1e-5):
    """Per-block relative error between reverse-mode and central differences.

    For each parameter block the error is
    ``max|analytic - numeric| / max(max|analytic|, 1e-8)``; the block's
    largest gradient sets the scale so that near-zero entries do not
    dominate through finite-difference noise.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise EvaluationError(f"loss is not finite: {float(loss.data)}")
    backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}
    report = {}
    for p in params:
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = _value(loss_fn)
            flat[k] = orig - h
            down = _value(loss_fn)
            flat[k] = orig
            numeric.reshape(-1)[k] = (up - down) / (2.0 * h)
        a = analytic[p.name]
        scale = max(float(np.max(np.abs(a))) if a.size else 0.0, 1e-8)
        report[p.name] = float(np.max(np.abs(a - numeric))) / scale if a.size else 0.0
        p.zero_grad()
    return report


def grad_check(loss_fn, params, h=1e-5):
    """Largest per-block relative gradient error; see :func:`grad_check_report`.

    ``loss_fn`` takes no arguments and rebuilds a scalar loss from the current
    parameter values each call.
    """
    report = grad_check_report(loss_fn, params, h)
    return max(report.values()) if report else 0.0
