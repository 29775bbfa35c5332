"""Dense vector arithmetic and damped conjugate-gradient solves.

Everything in this module is a pure function over read-only inputs, so all
operations are safe to call concurrently. Hessians are handled in operator
(matrix-free) form throughout; they are only materialized on demand for
small dense oracles.
"""

from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

# Damping added to Hessian operators before inversion. Large enough to make
# PSD operators safely positive definite, small enough to keep the convex
# desk-scale oracles exact to test tolerances.
DEFAULT_DAMPING = 0.01
DEFAULT_CG_REL_TOLERANCE = 1e-8


class ConvergenceError(RuntimeError):
    """An iterative solve failed to reach its tolerance within budget."""

    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result


def as_vector(x, dim: Optional[int] = None) -> np.ndarray:
    """Coerce to a finite 1-D float64 array, validating dimension if given."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ValueError(f"dimension mismatch: expected {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector contains NaN or Inf entries")
    return v


@dataclass(frozen=True)
class SpdOperator:
    """Matrix-free symmetric positive (semi-)definite operator with damping.

    ``apply`` computes the undamped action ``H v``; the damped action
    ``(H + damping*I) v`` is what :func:`cg_solve` inverts. With
    ``damping > 0`` the damped operator is positive definite whenever the
    underlying operator is merely PSD.
    """

    dim: int
    apply: Callable[[np.ndarray], np.ndarray]
    damping: float = 0.0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("operator dimension must be positive")
        if self.damping < 0:
            raise ValueError("damping must be nonnegative")

    def apply_damped(self, v: np.ndarray) -> np.ndarray:
        out = np.asarray(self.apply(v), dtype=np.float64)
        if self.damping != 0.0:
            out = out + self.damping * v
        return out

    def dense(self, damped: bool = True) -> np.ndarray:
        """Materialize the operator by applying it to the identity columns."""
        eye = np.eye(self.dim)
        fn = self.apply_damped if damped else self.apply
        return np.column_stack([fn(eye[:, j]) for j in range(self.dim)])


@dataclass(frozen=True)
class CgConfig:
    """Conjugate-gradient stopping rule.

    ``max_iterations=None`` means "derive the default", which is twice the
    operator dimension at solve time; explicit values must be >= 1.
    """

    rel_tolerance: float = DEFAULT_CG_REL_TOLERANCE
    max_iterations: Optional[int] = None

    def __post_init__(self):
        if self.rel_tolerance <= 0:
            raise ValueError("rel_tolerance must be positive")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")

    def iteration_budget(self, dim: int) -> int:
        return self.max_iterations if self.max_iterations is not None else 2 * dim


@dataclass(frozen=True)
class CgResult:
    solution: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool


def cg_solve(op: SpdOperator, b, cfg: Optional[CgConfig] = None) -> CgResult:
    """Solve ``(H + damping*I) x = b`` by conjugate gradients.

    Returns a :class:`CgResult` whose ``converged`` flag reflects the *true*
    residual ``||(H + damping*I) x - b||`` measured after the iteration,
    compared against ``rel_tolerance * ||b||``. Non-convergence is flagged,
    not raised; the caller decides. Deterministic for identical inputs.
    """
    if cfg is None:
        cfg = CgConfig()
    b = as_vector(b, dim=op.dim)
    b_norm = float(np.linalg.norm(b))
    tol = cfg.rel_tolerance * b_norm

    x = np.zeros_like(b)
    if b_norm == 0.0:
        return CgResult(x, 0.0, 0, True)

    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    iterations = 0
    budget = cfg.iteration_budget(op.dim)
    while iterations < budget and np.sqrt(rs) > tol:
        ap = op.apply_damped(p)
        curvature = float(p @ ap)
        if curvature <= 0.0:
            raise ValueError(
                "operator is not positive definite along a search direction "
                f"(p'Ap = {curvature:.3e}); increase damping"
            )
        alpha = rs / curvature
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
        iterations += 1

    true_residual = b - op.apply_damped(x)
    residual_norm = float(np.linalg.norm(true_residual))
    return CgResult(x, residual_norm, iterations, residual_norm <= tol)


def deterministic_sum(vectors: Iterable, dim: Optional[int] = None) -> np.ndarray:
    """Sum vectors in fixed list order; bit-identical for identical inputs.

    An empty input requires an explicit ``dim`` and returns the zero vector.
    """
    vectors = list(vectors)
    if not vectors:
        if dim is None:
            raise ValueError("empty sum requires an explicit dimension")
        return np.zeros(dim, dtype=np.float64)
    first = as_vector(vectors[0], dim=dim)
    total = first.copy()
    for v in vectors[1:]:
        total += as_vector(v, dim=first.shape[0])
    return total
