"""Gauss-Newton with Armijo backtracking, shared by the affine and deformable solvers."""

from __future__ import annotations

import logging
from typing import Callable, List, Optional

import numpy as np

from ..errors import NonFiniteObjective

log = logging.getLogger(__name__)


def gauss_newton(evaluate: Callable, solve: Callable, p0: np.ndarray, *, max_iterations: int,
                 gradient_tolerance: float, armijo_c: float = 1e-4, max_backtracks: int = 20,
                 relative_tolerance: float = 1e-6, trace: Optional[List[dict]] = None,
                 tag: Optional[dict] = None) -> np.ndarray:
    """Minimise an objective from ``p0``.

    ``evaluate(p, model)`` returns ``(J, grad, gn_model)`` (``grad`` and
    ``gn_model`` may be None when ``model`` is False) and
    ``solve(gn_model, rhs)`` approximately solves the Gauss-Newton system.
    Accepted iterates have strictly decreasing objective.
    """
    tag = dict(tag or {})
    p = np.array(p0, dtype=float)
    J, g, model = evaluate(p, True)
    if not np.isfinite(J):
        raise NonFiniteObjective(f"objective is {J} at the initial point")
    history = [J]
    if trace is not None:
        trace.append({**tag, "iteration": 0, "objective": J, "step": 0.0,
                      "grad_norm": float(np.linalg.norm(g))})
    for it in range(1, max_iterations + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm < gradient_tolerance:
            break
        d = solve(model, -g)
        slope = float(g @ d)
        if not np.isfinite(slope) or slope >= 0:
            d = -g
            slope = -gnorm ** 2
        t = 1.0
        accepted = False
        for _ in range(max_backtracks + 1):
            trial = p + t * d
            Jt = evaluate(trial, False)[0]
            if np.isfinite(Jt) and Jt <= J + armijo_c * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            log.debug("line search failed at iteration %d (%s)", it, tag)
            if trace is not None:
                trace.append({**tag, "iteration": it, "objective": J, "step": 0.0,
                              "grad_norm": gnorm, "event": "linesearch_failed"})
            break
        J_old = J
        p = trial
        J, g, model = evaluate(p, True)
        if not np.isfinite(J):
            raise NonFiniteObjective(f"objective became {J} at iteration {it}")
        assert J <= history[-1], "accepted step increased the objective"
        history.append(J)
        if trace is not None:
            trace.append({**tag, "iteration": it, "objective": J, "step": t,
                          "grad_norm": float(np.linalg.norm(g))})
        if J_old - J <= relative_tolerance * (1.0 + abs(J_old)):
            break
    return p
