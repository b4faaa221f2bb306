"""Exact reference solutions for small OT instances."""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.optimize import linprog

from .features import GecoError
from .ot import Marginals, ScoreMatrix, SolverConfig, TransportPlan

MAX_SIDE_SUM = 12


class OracleError(GecoError):
    pass


def _entries(c) -> np.ndarray:
    return np.asarray(c.entries if isinstance(c, ScoreMatrix) else c, dtype=np.float64)


def permutation_oracle(c) -> tuple[float, tuple[int, ...]]:
    """Best assignment of a square matrix by enumerating all permutations.

    With uniform marginals the LP optimum is attained at a permutation matrix
    scaled by ``1/n``, so the returned value is ``max_sigma sum_i C[i, sigma(i)] / n``.
    """
    entries = _entries(c)
    n = entries.shape[0]
    if entries.shape != (n, n):
        raise OracleError("permutation oracle needs a square matrix")
    if n > 8:
        raise OracleError("instance too large for enumeration")
    best, best_perm = -math.inf, None
    for perm in itertools.permutations(range(n)):
        value = math.fsum(entries[i, j] for i, j in enumerate(perm)) / n
        if value > best:
            best, best_perm = value, perm
    return best, best_perm


def exact_ot_oracle(c, marg: Marginals) -> tuple[float, TransportPlan]:
    """Maximize ``<P, C>`` over the transport polytope by linear programming.

    For square instances with uniform marginals and at most 5 rows the result
    is cross-checked against :func:`permutation_oracle`.
    """
    entries = _entries(c)
    n_rows, n_cols = entries.shape
    if n_rows + n_cols > MAX_SIDE_SUM:
        raise OracleError(f"instance too large: {n_rows}+{n_cols} > {MAX_SIDE_SUM}")
    if marg.a.shape != (n_rows,) or marg.b.shape != (n_cols,):
        raise OracleError("marginal sizes do not match the score matrix")

    eq = np.zeros((n_rows + n_cols, n_rows * n_cols))
    for i in range(n_rows):
        eq[i, i * n_cols:(i + 1) * n_cols] = 1.0
    for j in range(n_cols):
        eq[n_rows + j, j::n_cols] = 1.0
    rhs = np.concatenate([marg.a, marg.b])
    res = linprog(-entries.reshape(-1), A_eq=eq, b_eq=rhs, bounds=(0, None), method="highs")
    if res.status != 0:
        raise OracleError(f"linear program failed: {res.message}")
    plan = np.clip(res.x.reshape(n_rows, n_cols), 0.0, None)
    value = math.fsum((entries * plan).reshape(-1))

    uniform = (
        n_rows == n_cols
        and np.allclose(marg.a, 1.0 / n_rows, rtol=0, atol=1e-15)
        and np.allclose(marg.b, 1.0 / n_cols, rtol=0, atol=1e-15)
    )
    if uniform and n_rows <= 5:
        perm_value, perm = permutation_oracle(entries)
        if abs(perm_value - value) > 1e-9:
            raise OracleError(f"LP value {value} disagrees with enumeration {perm_value}")
        lp_perm = tuple(int(j) for j in plan.argmax(axis=1))
        # a vertex of the Birkhoff polytope: report its value in the enumeration's exact arithmetic
        if sorted(lp_perm) == list(range(n_rows)) and np.allclose(plan * n_rows, np.eye(n_rows)[list(lp_perm)], atol=1e-9):
            value = math.fsum(entries[i, j] for i, j in enumerate(lp_perm)) / n_rows
    cfg = SolverConfig(iterations=1)
    return value, TransportPlan(plan, "exact", cfg, 0)


def project_to_polytope(values, marg: Marginals, iterations: int = 1000) -> np.ndarray:
    """Rescale a positive matrix onto ``U(a, b)`` by alternating row/column scaling."""
    p = np.array(values, dtype=np.float64)
    for _ in range(iterations):
        rows = p.sum(axis=1)
        p *= np.divide(marg.a, rows, out=np.zeros_like(rows), where=rows > 0)[:, None]
        cols = p.sum(axis=0)
        p *= np.divide(marg.b, cols, out=np.zeros_like(cols), where=cols > 0)[None, :]
    return p


def plan_value(c, plan) -> float:
    values = plan.values if isinstance(plan, TransportPlan) else np.asarray(plan)
    return math.fsum((_entries(c) * values).reshape(-1))

