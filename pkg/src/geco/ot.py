"""Dustbin-augmented score matrices and log-domain Sinkhorn solvers.

Plans maximize ``<P, C> + lam * H(P)`` (similarity convention), i.e. the
usual cost-minimizing problem with cost ``-C``. All iterations run on the
log-scalings ``u, v`` of the Gibbs kernel ``exp(C / lam)`` so that small
``lam`` never exponentiates large numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .features import FeatureMap, GecoError, normalize_rows

BALANCED = "balanced"
UNBALANCED = "unbalanced"


class SolverError(GecoError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    lam: float = 0.1
    alpha: float = 10.0
    beta: float = 10.0
    iterations: int = 10
    z: float = 0.3

    def __post_init__(self):
        if not self.lam > 0:
            raise SolverError("lambda must be positive")
        if self.iterations < 1:
            raise SolverError("iterations must be at least 1")
        if not (self.alpha > 0 and self.beta > 0):
            raise SolverError("alpha and beta must be positive")


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    """(l+1) x (m+1) similarity matrix whose last row and column hold ``z``."""

    entries: np.ndarray
    z: float

    @property
    def l(self) -> int:
        return self.entries.shape[0] - 1

    @property
    def m(self) -> int:
        return self.entries.shape[1] - 1

    @classmethod
    def from_similarities(cls, sim, z: float) -> "ScoreMatrix":
        sim = np.asarray(sim, dtype=np.float64)
        l, m = sim.shape
        entries = np.full((l + 1, m + 1), float(z))
        entries[:l, :m] = sim
        return cls(entries, float(z))


@dataclass(frozen=True, eq=False)
class Marginals:
    a: np.ndarray
    b: np.ndarray
    strict: bool = field(default=True, repr=False)

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        if np.any(a < 0) or np.any(b < 0) or not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise SolverError("marginals must be finite and nonnegative")
        if self.strict and (abs(a.sum() - 1.0) > 1e-9 or abs(b.sum() - 1.0) > 1e-9):
            raise SolverError("marginals must each sum to 1")

    @classmethod
    def uniform(cls, n_rows: int, n_cols: int) -> "Marginals":
        return cls(np.full(n_rows, 1.0 / n_rows), np.full(n_cols, 1.0 / n_cols))


@dataclass(frozen=True, eq=False)
class TransportPlan:
    values: np.ndarray
    mode: str
    config: SolverConfig
    iterations_run: int = 0


def build_score_matrix(xs: FeatureMap, xt: FeatureMap, z: float = 0.3) -> ScoreMatrix:
    if xs.dim != xt.dim:
        raise SolverError(f"feature dimension mismatch: {xs.dim} vs {xt.dim}")
    sim = normalize_rows(xs.values) @ normalize_rows(xt.values).T
    return ScoreMatrix.from_similarities(sim, z)


def _lse_rows(a: np.ndarray) -> np.ndarray:
    mx = a.max(axis=1)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        return mx + np.log(np.exp(a - mx[:, None]).sum(axis=1))


def _lse_cols(a: np.ndarray) -> np.ndarray:
    mx = a.max(axis=0)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        return mx + np.log(np.exp(a - mx[None, :]).sum(axis=0))


def damping(cfg: SolverConfig, mode: str) -> tuple[float, float]:
    """Exponents applied to the scaling updates (1 for hard marginals)."""
    if mode == BALANCED:
        return 1.0, 1.0
    if mode == UNBALANCED:
        return cfg.alpha / (cfg.alpha + cfg.lam), cfg.beta / (cfg.beta + cfg.lam)
    raise SolverError(f"unknown solver mode {mode!r}")


def _log(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(x)


def sinkhorn_potentials(
    kernel: np.ndarray,
    log_a: np.ndarray,
    log_b: np.ndarray,
    tau_a: float,
    tau_b: float,
    iterations: int,
    history: Optional[list] = None,
    tol: Optional[float] = None,
    a: Optional[np.ndarray] = None,
):
    """Run log-domain scaling updates on ``kernel = C / lam``.

    Returns ``(u, v, n_run)``. When ``history`` is a list, the ``v`` entering
    each iteration and the ``u`` it produced are appended as pairs, which is
    what reverse-mode differentiation needs. ``tol`` stops early once the L1
    row-marginal residual (against ``a``) drops below it.
    """
    v = np.zeros(kernel.shape[1])
    u = np.zeros(kernel.shape[0])
    n_run = 0
    for _ in range(iterations):
        v_in = v
        u = tau_a * (log_a - _lse_rows(kernel + v[None, :]))
        v = tau_b * (log_b - _lse_cols(kernel + u[:, None]))
        n_run += 1
        if history is not None:
            history.append((v_in, u))
        if not (np.all(np.isfinite(u) | (u == -np.inf)) and np.all(np.isfinite(v) | (v == -np.inf))):
            raise SolverError("numerical overflow; increase λ")
        if tol is not None and a is not None and n_run % 10 == 0:
            rows = np.exp(u + _lse_rows(kernel + v[None, :]))
            if np.abs(rows - a).sum() < tol:
                break
    return u, v, n_run


def plan_from_potentials(kernel, u, v) -> np.ndarray:
    return np.exp(kernel + u[:, None] + v[None, :])


def _solve(c: ScoreMatrix, marg: Marginals, cfg: SolverConfig, mode: str, tol=None) -> TransportPlan:
    if marg.a.shape != (c.entries.shape[0],) or marg.b.shape != (c.entries.shape[1],):
        raise SolverError("marginal sizes do not match the score matrix")
    tau_a, tau_b = damping(cfg, mode)
    # overflow is detected explicitly below, so numpy's warnings are redundant
    with np.errstate(over="ignore", invalid="ignore"):
        kernel = c.entries / cfg.lam
        u, v, n_run = sinkhorn_potentials(
            kernel, _log(marg.a), _log(marg.b), tau_a, tau_b, cfg.iterations, tol=tol, a=marg.a
        )
        values = plan_from_potentials(kernel, u, v)
    if not np.all(np.isfinite(values)):
        raise SolverError("numerical overflow; increase λ")
    return TransportPlan(values, mode, cfg, n_run)


def sinkhorn_balanced(c: ScoreMatrix, marg: Marginals, cfg: SolverConfig, tol=None) -> TransportPlan:
    """Entropic OT with hard marginals after exactly ``cfg.iterations`` updates."""
    return _solve(c, marg, cfg, BALANCED, tol)


def sinkhorn_unbalanced(c: ScoreMatrix, marg: Marginals, cfg: SolverConfig, tol=None) -> TransportPlan:
    """Entropic OT with KL-relaxed marginals (weights ``cfg.alpha``, ``cfg.beta``)."""
    return _solve(c, marg, cfg, UNBALANCED, tol)


def solve(c: ScoreMatrix, marg: Marginals, cfg: SolverConfig, mode: str = UNBALANCED, tol=None) -> TransportPlan:
    return _solve(c, marg, cfg, mode, tol)


def plan_row_sums(p) -> np.ndarray:
    values = p.values if isinstance(p, TransportPlan) else np.asarray(p)
    # cumsum accumulates strictly left to right
    return np.cumsum(values, axis=1)[:, -1].copy()


def plan_col_sums(p) -> np.ndarray:
    values = p.values if isinstance(p, TransportPlan) else np.asarray(p)
    return np.cumsum(values, axis=0)[-1, :].copy()


def marginal_residual(p, marg: Marginals) -> float:
    """``||P1 - a||_1 + ||P^T 1 - b||_1``."""
    return float(np.abs(plan_row_sums(p) - marg.a).sum() + np.abs(plan_col_sums(p) - marg.b).sum())
