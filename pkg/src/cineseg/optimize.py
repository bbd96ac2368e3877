"""Shared backtracking gradient descent over parameter blocks.

The classifier trainings all use the same scheme: the first step is
normalized so ``step_size`` reads as the largest per-entry parameter
change, the step halves on any objective increase and grows 25% on
success, and the run stops only after several consecutive accepted steps
with a negligible relative decrease.
"""

from __future__ import annotations

import numpy as np

from .errors import DivergenceError

_PATIENCE = 5


def descend_blocks(objective_and_grads, blocks: list, steps: int, step_size: float,
                   rel_tol: float = 1e-9, context: str = "training",
                   growth: float = 1.25, max_step_factor: float | None = None):
    """Minimize over a list of arrays; returns (blocks, final_loss, trace).

    ``objective_and_grads(blocks)`` must return ``(loss, [grads...])`` with
    gradients aligned to ``blocks``. ``growth`` multiplies the step after a
    success; a mild value with ``max_step_factor`` keeps softmax classifiers
    out of the saturated-gradient regime.
    """
    blocks = [np.asarray(b, dtype=np.float64).copy() for b in blocks]
    loss, grads = objective_and_grads(blocks)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss at {context} step 0")
    trace = [loss]
    step = None
    step_cap = None
    stall = 0
    for it in range(steps):
        gnorm = max(float(np.max(np.abs(g))) for g in grads)
        if gnorm == 0.0:
            break
        if step is None:
            step = step_size / gnorm
            if max_step_factor is not None:
                step_cap = step * max_step_factor
        accepted = False
        while step * gnorm > 1e-14:
            trial = [b - step * g for b, g in zip(blocks, grads)]
            f, new_grads = objective_and_grads(trial)
            if not np.isfinite(f):
                raise DivergenceError(f"non-finite loss at {context} step {it + 1}")
            if f < loss:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        decrease = loss - f
        prev = loss
        blocks, loss, grads = trial, f, new_grads
        trace.append(loss)
        step *= growth
        if step_cap is not None:
            step = min(step, step_cap)
        if decrease <= rel_tol * max(abs(prev), 1e-30):
            stall += 1
            if stall >= _PATIENCE:
                break
        else:
            stall = 0
    return blocks, loss, trace
