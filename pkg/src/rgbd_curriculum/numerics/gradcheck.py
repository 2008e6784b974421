"""Central finite-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import ComputationTape, ContractError, Tensor, backward, no_tape


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return np.abs(analytic - numeric) / denom


def analytic_gradients(f: Callable[[Mapping[str, Tensor]], Tensor], params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    for p in params.values():
        p.zero_grad()
    with ComputationTape() as tape:
        loss = f(params)
    backward(loss, tape)
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def finite_difference_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    grads: Mapping[str, np.ndarray] | None = None,
) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the parameter dict to a scalar tensor and must be deterministic.
    ``grads`` overrides the analytic gradients (useful for testing the oracle
    itself); by default they come from one backward pass through ``f``.
    Parameters are perturbed in place and restored afterwards.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")

    def value():
        # keep the working dtype: .item() would drop extended precision to a Python float
        with no_tape():
            return f(params).data.reshape(()).copy()

    base = value()
    if value() != base:
        raise ContractError("f is not deterministic; fix its random draws before checking")
    if grads is None:
        grads = analytic_gradients(f, params)

    report: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        numeric = np.empty(flat.size, dtype=base.dtype)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * eps)
        err = relative_error(np.asarray(grads[name], dtype=np.float64).reshape(-1), numeric.astype(np.float64))
        report[name] = float(err.max()) if err.size else 0.0
    return report
