"""Central finite-difference gradient verification.

The checker perturbs leaf values in place (restoring them afterwards) and
re-evaluates the loss eagerly, so the numeric side never touches the tape
it is validating.
"""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import Tape, Tensor

# Denominator floor 1e-2 makes `rel_error < rtol` equivalent to the
# pass rule |a-b| < rtol * max(|a|,|b|) with an absolute floor of rtol * 1e-2
# (= 1e-8 at the default rtol of 1e-6).
REL_FLOOR = 1e-2
DEFAULT_STEP = 1e-5
DEFAULT_RTOL = 1e-6
FLOAT32_RTOL = 1e-4


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Element-wise floored relative error, reduced to its maximum."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_FLOOR)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / denom))


def tape_gradients(build_loss: Callable[[], Tensor], leaves: Sequence[Tensor]) -> dict[Tensor, np.ndarray]:
    with Tape() as tape:
        loss = build_loss()
        table = tape.backward(loss)
    return {leaf: table.get(leaf, np.zeros_like(leaf.values)) for leaf in leaves}


def numeric_gradient(build_loss: Callable[[], Tensor], leaf: Tensor, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central finite differences of the loss w.r.t. one leaf tensor.

    The numeric side always evaluates in float64 (leaves are temporarily
    upcast) so the oracle stays sharp even when the tape runs in float32.
    """
    saved = leaf.values
    leaf.values = saved.astype(np.float64)
    try:
        flat = leaf.values.reshape(-1)
        grad = np.zeros(flat.shape, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(build_loss().values)
            flat[i] = orig - step
            f_minus = float(build_loss().values)
            flat[i] = orig
            grad[i] = (f_plus - f_minus) / (2.0 * step)
        return grad.reshape(saved.shape)
    finally:
        leaf.values = saved


def check_gradients(
    build_loss: Callable[[], Tensor],
    leaves: Mapping[str, Tensor],
    step: float = DEFAULT_STEP,
    rtol: float = DEFAULT_RTOL,
) -> dict[str, float]:
    """Compare tape gradients against finite differences for named leaves.

    Returns the max floored relative error per leaf name; entries above
    `rtol` indicate a failure (the caller decides how to report).
    """
    analytic = tape_gradients(build_loss, list(leaves.values()))
    errors: dict[str, float] = {}
    for name, leaf in leaves.items():
        numeric = numeric_gradient(build_loss, leaf, step=step)
        errors[name] = rel_error(analytic[leaf], numeric)
    return errors
