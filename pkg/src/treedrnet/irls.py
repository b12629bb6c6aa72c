"""Iteratively reweighted least squares for l_p regression, 0 < p <= 2.

Each iteration solves the weighted normal equations
``(X^T W X) beta = X^T W y`` with ``w_i = max(|y_i - X_i beta|, eps_w)^(p - 2)``.
The floor ``eps_w`` keeps weights finite at zero residuals. For p < 1 the
objective is non-convex and the iteration finds a local minimizer.
"""
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg


class SingularSystemError(np.linalg.LinAlgError):
    """The design matrix is rank deficient."""


@dataclass
class IrlsProblem:
    X: np.ndarray
    y: np.ndarray
    p: float = 1.0
    max_iters: int = 200
    tol: float = 1e-10
    eps_w: float = 1e-8

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        n, d = self.X.shape
        if self.y.shape[0] != n:
            raise ValueError(f"X has {n} rows but y has {self.y.shape[0]} entries")
        if n < d:
            raise ValueError(f"need at least as many rows as columns (n={n}, d={d})")
        if not 0.0 < self.p <= 2.0:
            raise ValueError(f"p must lie in (0, 2], got {self.p}")
        if not self.eps_w > 0:
            raise ValueError("eps_w must be > 0")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValueError("X and y must be finite")
        if self.p < 1.0:
            warnings.warn(f"p={self.p} < 1: the l_p objective is non-convex", stacklevel=3)


@dataclass
class IrlsResult:
    beta: np.ndarray
    iterations: int
    loss: float
    converged: bool
    loss_trace: list = field(default_factory=list)  # loss at the start and after every iteration

    def to_dict(self):
        return {"beta": self.beta.tolist(), "iterations": self.iterations, "loss": self.loss,
                "converged": self.converged, "loss_trace": list(self.loss_trace)}


def lp_loss(X, y, beta, p):
    r = np.asarray(X, dtype=np.float64) @ np.asarray(beta, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(np.sum(np.abs(r) ** p))


def irls_weights(residuals, p, eps_w=1e-8):
    return np.maximum(np.abs(residuals), eps_w) ** (p - 2.0)


def weighted_lstsq(X, y, w):
    """Solve ``(X^T W X) beta = X^T W y`` with a pivoted LU factorization."""
    Xw = X * w[:, None]
    A = X.T @ Xw
    lu, piv = linalg.lu_factor(A, check_finite=False)
    return linalg.lu_solve((lu, piv), Xw.T @ y, check_finite=False)


def irls_solve(problem, beta0=None):
    X, y, p = problem.X, problem.y, problem.p
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise SingularSystemError(f"design matrix of shape {X.shape} is rank deficient")
    # start from ordinary least squares (every weight 1)
    beta = weighted_lstsq(X, y, np.ones(len(y))) if beta0 is None else np.asarray(beta0, dtype=np.float64)
    trace = [lp_loss(X, y, beta, p)]
    converged = False
    it = 0
    for it in range(1, problem.max_iters + 1):
        w = irls_weights(y - X @ beta, p, problem.eps_w)
        new = weighted_lstsq(X, y, w)
        step = float(np.linalg.norm(new - beta))
        beta = new
        trace.append(lp_loss(X, y, beta, p))
        if step <= problem.tol:
            converged = True
            break
    return IrlsResult(beta, it, trace[-1], converged, trace)


def robustness_demo(X, y, outlier_magnitude, outlier_index=0, max_iters=500, tol=1e-12):
    """Displacement of the p=2 and p=1 fits when one target is inflated.

    The contaminated target is ``y[outlier_index] * (1 + outlier_magnitude)``
    (``outlier_magnitude=99`` inflates it 100x).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_bad = y.copy()
    y_bad[outlier_index] = y[outlier_index] * (1.0 + outlier_magnitude)
    report = {"outlier_index": outlier_index, "outlier_magnitude": outlier_magnitude, "fits": {}}
    for p in (2.0, 1.0):
        clean = irls_solve(IrlsProblem(X, y, p, max_iters=max_iters, tol=tol))
        dirty = irls_solve(IrlsProblem(X, y_bad, p, max_iters=max_iters, tol=tol))
        report["fits"][f"p{p:g}"] = {
            "beta_clean": clean.beta.tolist(),
            "beta_contaminated": dirty.beta.tolist(),
            "displacement": float(np.linalg.norm(dirty.beta - clean.beta)),
            "loss_clean": clean.loss,
            "loss_contaminated": dirty.loss,
            "trace_clean": clean.loss_trace,
            "trace_contaminated": dirty.loss_trace,
        }
    return report
