"""Dense symmetric linear algebra for Kronecker-factored preconditioning.

Computes root inverses A**(-eta/p) of symmetric positive semi-definite
accumulator matrices, either spectrally (eigendecomposition plus eigenvalue
clamping) or via the coupled inverse Newton iteration, and wraps both in a
retry guard that degrades gracefully instead of failing a training step.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "Solver",
    "RootInverseRequest",
    "NewtonTrace",
    "GuardStats",
    "NonFiniteError",
    "NoConvergenceError",
    "EpsilonZeroWithSingularError",
    "sym_eigh",
    "root_inverse_eigh",
    "root_inverse_newton",
    "guarded_root_inverse",
]

# Inputs are accumulations of G G^T terms; anything less symmetric than this
# indicates a bug upstream, not roundoff.
SYMMETRY_RTOL = 1e-12

NEWTON_DEFAULT_TOL = 1e-6
NEWTON_MAX_ITERATIONS = 1000


class NonFiniteError(ValueError):
    """Input or result contains NaN or infinity."""


class NoConvergenceError(RuntimeError):
    """The underlying iterative solver hit its iteration cap."""


class EpsilonZeroWithSingularError(ValueError):
    """epsilon=0 requested but the matrix has a zero (clamped) eigenvalue."""


class Solver(Enum):
    EIGH = "eigh"
    COUPLED_NEWTON = "newton"


@dataclass(frozen=True)
class RootInverseRequest:
    """One root-inverse computation: matrix**(-exponent_multiplier/root_p).

    The coupled Newton solver only produces plain p-th root inverses, so it
    rejects exponent_multiplier != 1.  epsilon regularizes near-singular
    inputs: the eigh path clamps eigenvalues from below, the Newton path adds
    epsilon*I before iterating.
    """

    matrix: np.ndarray
    root_p: int
    exponent_multiplier: float = 1.0
    epsilon: float = 0.0
    solver: Solver = Solver.EIGH
    tolerance: float = NEWTON_DEFAULT_TOL

    def __post_init__(self):
        if self.root_p < 1:
            raise ValueError(f"root_p must be a positive integer, got {self.root_p}")
        if self.exponent_multiplier <= 0:
            raise ValueError("exponent_multiplier must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.solver is Solver.COUPLED_NEWTON and self.exponent_multiplier != 1.0:
            raise ValueError(
                "the coupled Newton solver computes plain p-th root inverses; "
                "exponent_multiplier must be 1"
            )


@dataclass
class NewtonTrace:
    """Diagnostics from one coupled Newton solve."""

    iterations: int
    final_residual: float
    converged: bool
    c_init: float


@dataclass
class GuardStats:
    """Counts which branch of the retry guard produced each result."""

    primary: int = 0
    double_retry: int = 0
    fallback_previous: int = 0
    fallback_identity: int = 0


def _check_square_symmetric(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("matrix contains non-finite entries")
    scale = float(np.linalg.norm(a))
    skew = float(np.linalg.norm(a - a.T))
    if skew > SYMMETRY_RTOL * max(scale, 1.0):
        raise ValueError("matrix is not symmetric")
    return a


def _symmetrize(x: np.ndarray) -> np.ndarray:
    return (x + x.T) / 2


def sym_eigh(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix, eigenvalues ascending.

    Returns (w, q) with a = q @ diag(w) @ q.T and q orthogonal.  Computation
    runs in the dtype of `a`, so float32 input exercises single precision.
    """
    a = _check_square_symmetric(a)
    try:
        w, q = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        raise NoConvergenceError(f"eigendecomposition failed: {exc}") from exc
    return w, q


def root_inverse_eigh(request: RootInverseRequest) -> np.ndarray:
    """Spectral root inverse with eigenvalue clamping.

    Eigenvalues are shifted so the smallest becomes exactly epsilon:
    w_new = w - min(w_min, 0) + epsilon.  This keeps the result SPD even when
    roundoff in the accumulators produced slightly negative eigenvalues.
    """
    w, q = sym_eigh(request.matrix)
    w_min = float(w.min()) if w.size else 0.0
    w_new = w - min(w_min, 0.0) + request.epsilon
    if request.epsilon == 0.0 and np.any(w_new <= 0.0):
        raise EpsilonZeroWithSingularError(
            "matrix has a non-positive eigenvalue and epsilon is zero"
        )
    exponent = -request.exponent_multiplier / request.root_p
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        w_pow = w_new**exponent
        x = (q * w_pow) @ q.T
    return _symmetrize(x)


def _identity_like(a: np.ndarray) -> np.ndarray:
    return np.eye(a.shape[0], dtype=a.dtype)


def root_inverse_newton(
    request: RootInverseRequest,
) -> tuple[np.ndarray, NewtonTrace]:
    """Coupled inverse Newton iteration for A**(-1/p).

    Iterates
        T_k = ((p+1) I - M_k) / p
        X_{k+1} = X_k T_k
        M_{k+1} = T_k**p M_k
    from X_0 = (1/c) I, M_0 = (1/c**p) A with c = (2 ||A||_F / (p+1))**(1/p),
    stopping when the max-row-sum norm of M_k - I drops below the requested
    tolerance.  Never raises on non-convergence: the trace reports it and the
    best iterate seen is returned, so the caller can decide how to fall back.
    """
    a = _check_square_symmetric(request.matrix)
    p = request.root_p
    eye = _identity_like(a)

    if float(np.linalg.norm(a)) == 0.0:
        if request.epsilon == 0.0:
            raise EpsilonZeroWithSingularError(
                "zero matrix has no root inverse with epsilon=0"
            )
        x = (request.epsilon ** (-1.0 / p)) * eye
        return x, NewtonTrace(iterations=0, final_residual=0.0, converged=True, c_init=0.0)

    if request.epsilon > 0.0:
        a = a + request.epsilon * eye

    c = float((2.0 * np.linalg.norm(a) / (p + 1)) ** (1.0 / p))
    x = eye / c
    m = a / c**p

    best_x = x
    best_residual = float("inf")
    iterations = 0
    converged = False
    with np.errstate(over="ignore", invalid="ignore"):
        for iterations in range(1, NEWTON_MAX_ITERATIONS + 1):
            t = ((p + 1) * eye - m) / p
            x = x @ t
            m = np.linalg.matrix_power(t, p) @ m
            residual = float(np.abs(m - eye).sum(axis=1).max())
            if not np.isfinite(residual):
                break
            if residual < best_residual:
                best_residual = residual
                best_x = x
            if residual < request.tolerance:
                converged = True
                break

    trace = NewtonTrace(
        iterations=iterations,
        final_residual=best_residual,
        converged=converged,
        c_init=c,
    )
    return _symmetrize(best_x), trace


def _attempt(request: RootInverseRequest) -> np.ndarray:
    if request.solver is Solver.COUPLED_NEWTON:
        x, trace = root_inverse_newton(request)
        if not trace.converged:
            raise NoConvergenceError(
                f"Newton failed to converge in {trace.iterations} iterations "
                f"(residual {trace.final_residual:.3e})"
            )
    else:
        x = root_inverse_eigh(request)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("root inverse contains non-finite entries")
    return x


def guarded_root_inverse(
    request: RootInverseRequest,
    previous: np.ndarray | None = None,
    stats: GuardStats | None = None,
) -> np.ndarray:
    """Root inverse that never fails.

    Attempts the solve in the requested precision, retries in float64, and as
    a last resort returns the previous inverse (or a scaled identity when none
    exists yet).  Each branch taken is counted in `stats`.
    """
    if stats is None:
        stats = GuardStats()

    recoverable = (
        NonFiniteError,
        NoConvergenceError,
        EpsilonZeroWithSingularError,
        np.linalg.LinAlgError,
    )

    try:
        result = _attempt(request)
        stats.primary += 1
        return result
    except recoverable:
        pass

    try:
        retry = RootInverseRequest(
            matrix=np.asarray(request.matrix, dtype=np.float64),
            root_p=request.root_p,
            exponent_multiplier=request.exponent_multiplier,
            epsilon=request.epsilon,
            solver=request.solver,
            tolerance=request.tolerance,
        )
        result = _attempt(retry)
        stats.double_retry += 1
        return result
    except recoverable:
        pass

    if previous is not None:
        stats.fallback_previous += 1
        return previous

    stats.fallback_identity += 1
    n = np.asarray(request.matrix).shape[0]
    if request.epsilon > 0.0:
        scale = request.epsilon ** (-request.exponent_multiplier / request.root_p)
    else:
        scale = 1.0
    return scale * np.eye(n, dtype=np.float64)
