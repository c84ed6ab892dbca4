"""Reference optimizers and equivalence checks.

Small, independently written update rules that the block-preconditioned
optimizer must reproduce under documented hyperparameter mappings: momentum
as primal iterate averaging, row-wise AdaGrad as left-only diagonal
preconditioning, AdaFactor as diagonal preconditioning up to a scalar, and
full-matrix AdaGrad as the fully merged dense path.  cmd_verify drives the
check functions; the acceptance suite pins their tolerances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from minishampoo import matfun
from minishampoo.grafting import GraftKind
from minishampoo.matfun import RootInverseRequest, Solver
from minishampoo.optim import Shampoo, ShampooConfig
from minishampoo.precond import DiagonalShampooState

__all__ = [
    "OracleKind",
    "UnknownKindError",
    "make_oracle",
    "HeavyBall",
    "PrimalAveraging",
    "NesterovHeavyBall",
    "NesterovAveraging",
    "RowWiseAdaGrad",
    "AdaFactor",
    "FullMatrixAdaGrad",
    "DiagonalAdaGrad",
    "momentum_equivalence_check",
    "rowwise_equivalence_check",
    "adafactor_relation_check",
    "fullmatrix_equivalence_check",
    "solver_agreement_check",
    "SolverAgreement",
]


class UnknownKindError(ValueError):
    """Oracle kind not recognized."""


class OracleKind(Enum):
    HEAVY_BALL = "heavy_ball"
    PRIMAL_AVERAGING = "primal_averaging"
    NESTEROV_HEAVY_BALL = "nesterov_heavy_ball"
    NESTEROV_AVERAGING = "nesterov_averaging"
    ROW_WISE_ADAGRAD = "row_wise_adagrad"
    ADAFACTOR = "adafactor"
    FULL_MATRIX_ADAGRAD = "full_matrix_adagrad"
    DIAGONAL_ADAGRAD = "diagonal_adagrad"


class HeavyBall:
    """w_{t+1} = w_t - alpha p_t + delta (w_t - w_{t-1}), with w_{-1} = w_0."""

    def __init__(self, w0: np.ndarray, alpha: float, delta: float):
        self.w = np.array(w0, dtype=np.float64)
        self.w_prev = self.w.copy()
        self.alpha = alpha
        self.delta = delta

    def step(self, p: np.ndarray) -> np.ndarray:
        w_next = self.w - self.alpha * p + self.delta * (self.w - self.w_prev)
        self.w_prev = self.w
        self.w = w_next
        return self.w


class PrimalAveraging:
    """z_{t+1} = z_t - eta p_t; w_{t+1} = c w_t + (1 - c) z_{t+1}.

    Matches heavy ball / momentum under alpha = (1 - c) eta, delta = mu = c.
    With c = 0 the iterate tracks z exactly (plain descent with step eta).
    """

    def __init__(self, w0: np.ndarray, eta: float, c: float):
        self.w = np.array(w0, dtype=np.float64)
        self.z = self.w.copy()
        self.eta = eta
        self.c = c

    def step(self, p: np.ndarray) -> np.ndarray:
        self.z = self.z - self.eta * p
        self.w = self.c * self.w + (1.0 - self.c) * self.z
        return self.w


class NesterovHeavyBall:
    """Heavy ball on the Nesterov-corrected direction p_t + mu (p_t - p_{t-1})."""

    def __init__(self, w0: np.ndarray, alpha: float, delta: float, mu: float):
        self.inner = HeavyBall(w0, alpha, delta)
        self.mu = mu
        self.p_prev: np.ndarray | None = None

    @property
    def w(self) -> np.ndarray:
        return self.inner.w

    def step(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        prev = np.zeros_like(p) if self.p_prev is None else self.p_prev
        corrected = p + self.mu * (p - prev)
        self.p_prev = p
        return self.inner.step(corrected)


class NesterovAveraging:
    """Primal averaging on the Nesterov-corrected direction."""

    def __init__(self, w0: np.ndarray, eta: float, c: float, mu: float):
        self.inner = PrimalAveraging(w0, eta, c)
        self.mu = mu
        self.p_prev: np.ndarray | None = None

    @property
    def w(self) -> np.ndarray:
        return self.inner.w

    def step(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        prev = np.zeros_like(p) if self.p_prev is None else self.p_prev
        corrected = p + self.mu * (p - prev)
        self.p_prev = p
        return self.inner.step(corrected)


class RowWiseAdaGrad:
    """v_t = v_{t-1} + rowmean(G**2); E -= alpha * G / sqrt(v 1^T), v_{-1}=eps."""

    def __init__(self, e0: np.ndarray, alpha: float, epsilon: float):
        self.e = np.array(e0, dtype=np.float64)
        self.v = np.full(self.e.shape[0], float(epsilon))
        self.alpha = alpha

    def step(self, g: np.ndarray) -> np.ndarray:
        n = g.shape[1]
        self.v = self.v + (g * g).sum(axis=1) / n
        self.e = self.e - self.alpha * g / np.sqrt(self.v)[:, None]
        return self.e


class AdaFactor:
    """Row/column second-moment EMAs with a rank-1 reconstruction.

    r_t = beta2 r + (1-beta2) rowsum(G**2); c_t likewise over columns;
    A_hat = r c^T / sum(r); W -= alpha G / (sqrt(A_hat) + eps).
    Update clipping and the relative step size are deliberately omitted.
    """

    def __init__(self, w0: np.ndarray, alpha: float, beta2: float, epsilon: float = 0.0):
        self.w = np.array(w0, dtype=np.float64)
        self.r = np.zeros(self.w.shape[0])
        self.c = np.zeros(self.w.shape[1])
        self.alpha = alpha
        self.beta2 = beta2
        self.epsilon = epsilon

    def direction(self, g: np.ndarray) -> np.ndarray:
        sq = g * g
        self.r = self.beta2 * self.r + (1.0 - self.beta2) * sq.sum(axis=1)
        self.c = self.beta2 * self.c + (1.0 - self.beta2) * sq.sum(axis=0)
        a_hat = np.outer(self.r, self.c) / self.r.sum()
        return g / (np.sqrt(a_hat) + self.epsilon)

    def step(self, g: np.ndarray) -> np.ndarray:
        self.w = self.w - self.alpha * self.direction(g)
        return self.w


def _clamped_inverse_root(a: np.ndarray, p: int, epsilon: float) -> np.ndarray:
    """Independent spectral A**(-1/p) with the same eigenvalue clamp."""
    w, q = np.linalg.eigh((a + a.T) / 2)
    w = w - min(float(w.min()), 0.0) + epsilon
    return (q * w ** (-1.0 / p)) @ q.T


class FullMatrixAdaGrad:
    """A_t = sum of vec(g) vec(g)^T; w -= alpha * A_t**(-1/2) vec(g)."""

    def __init__(self, w0: np.ndarray, alpha: float, epsilon: float):
        self.w = np.array(w0, dtype=np.float64).reshape(-1)
        self.a = np.zeros((self.w.size, self.w.size))
        self.alpha = alpha
        self.epsilon = epsilon

    def direction(self, g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64).reshape(-1)
        self.a = self.a + np.outer(g, g)
        return _clamped_inverse_root(self.a, 2, self.epsilon) @ g

    def step(self, g: np.ndarray) -> np.ndarray:
        self.w = self.w - self.alpha * self.direction(g)
        return self.w


class DiagonalAdaGrad:
    """A += g**2; w -= alpha * g / (sqrt(A) + eps)."""

    def __init__(self, w0: np.ndarray, alpha: float, epsilon: float):
        self.w = np.array(w0, dtype=np.float64)
        self.a = np.zeros_like(self.w)
        self.alpha = alpha
        self.epsilon = epsilon

    def step(self, g: np.ndarray) -> np.ndarray:
        self.a = self.a + g * g
        self.w = self.w - self.alpha * g / (np.sqrt(self.a) + self.epsilon)
        return self.w


_ORACLES = {
    OracleKind.HEAVY_BALL: HeavyBall,
    OracleKind.PRIMAL_AVERAGING: PrimalAveraging,
    OracleKind.NESTEROV_HEAVY_BALL: NesterovHeavyBall,
    OracleKind.NESTEROV_AVERAGING: NesterovAveraging,
    OracleKind.ROW_WISE_ADAGRAD: RowWiseAdaGrad,
    OracleKind.ADAFACTOR: AdaFactor,
    OracleKind.FULL_MATRIX_ADAGRAD: FullMatrixAdaGrad,
    OracleKind.DIAGONAL_ADAGRAD: DiagonalAdaGrad,
}


def make_oracle(kind: OracleKind, w0: np.ndarray, **hyperparams):
    """Instantiate a reference optimizer; raises UnknownKindError otherwise."""
    try:
        cls = _ORACLES[kind]
    except (KeyError, TypeError):
        raise UnknownKindError(f"no oracle for kind {kind!r}") from None
    return cls(w0, **hyperparams)


# -- equivalence checks ----------------------------------------------------


def _quadratic_problem(rng: np.random.Generator, dim: int):
    """Gradient oracle of 0.5 w^T Q w - b^T w with spectrum in [0.1, 1]."""
    q_mat, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    eigs = np.linspace(0.1, 1.0, dim)
    quad = (q_mat * eigs) @ q_mat.T
    quad = (quad + quad.T) / 2
    b = rng.standard_normal(dim)
    return lambda w: quad @ w - b


def _warmup_config(alpha: float, mu: float, nesterov: bool) -> ShampooConfig:
    # grafting warmup forever: the step reduces to SGD(+momentum) exactly
    return ShampooConfig(
        lr=alpha,
        lr_schedule="constant",
        betas=(0.0, 1.0),
        momentum=mu,
        use_nesterov=nesterov,
        weight_decay=0.0,
        grafting=GraftKind.SGD,
        start_preconditioning_step=math.inf,
        precondition_frequency=1,
    )


def momentum_equivalence_check(
    steps: int = 200,
    dim: int = 8,
    alpha: float = 0.05,
    mu: float = 0.9,
    seed: int = 0,
    nesterov: bool = False,
) -> float:
    """Momentum trajectory vs primal iterate averaging on a seeded quadratic.

    Mapping: c = mu, eta = alpha / (1 - c), delta = mu.  Returns the max
    infinity-norm iterate deviation over the run.
    """
    rng = np.random.default_rng(seed)
    grad = _quadratic_problem(rng, dim)
    w0 = rng.standard_normal(dim)

    opt = Shampoo([w0.copy()], _warmup_config(alpha, mu, nesterov))
    eta = alpha / (1.0 - mu)
    if nesterov:
        avg = NesterovAveraging(w0, eta=eta, c=mu, mu=mu)
    else:
        avg = PrimalAveraging(w0, eta=eta, c=mu)

    worst = 0.0
    for _ in range(steps):
        opt.step([grad(opt.slots[0].param)])
        avg.step(grad(avg.w))
        worst = max(worst, float(np.abs(opt.slots[0].param - avg.w).max()))
    return worst


def rowwise_equivalence_check(
    steps: int = 50,
    rows: int = 4,
    cols: int = 3,
    alpha: float = 0.1,
    epsilon: float = 1e-6,
    seed: int = 0,
) -> float:
    """Row-wise AdaGrad vs left-only diagonal preconditioning.

    The row-wise accumulator averages squared rows over the column count n,
    so the equivalent left-factor accumulator carries epsilon scaled by n and
    the step size scaled by sqrt(n).  Returns the max iterate deviation.
    """
    rng = np.random.default_rng(seed)
    e0 = rng.standard_normal((rows, cols))
    gs = [rng.standard_normal((rows, cols)) for _ in range(steps)]

    oracle = RowWiseAdaGrad(e0, alpha=alpha, epsilon=epsilon)

    state = DiagonalShampooState((rows, cols), beta2=1.0, epsilon=cols * epsilon)
    e_shampoo = e0.copy()
    alpha_bar = math.sqrt(cols) * alpha

    worst = 0.0
    for t, g in enumerate(gs):
        oracle.step(g)
        state.update(g)
        direction = state.precondition(g, t, mode_exponents=(-0.5, None))
        e_shampoo = e_shampoo - alpha_bar * direction
        worst = max(worst, float(np.abs(oracle.e - e_shampoo).max()))
    return worst


def adafactor_relation_check(
    steps: int = 50,
    rows: int = 4,
    cols: int = 3,
    beta2: float = 0.999,
    seed: int = 0,
) -> float:
    """AdaFactor direction vs diagonal preconditioning at exponent -1/2.

    With epsilon 0 and shared EMA accumulators, AdaFactor's direction equals
    sqrt(sum(r_t)) times the two-sided diagonal direction.  Returns the max
    per-step deviation of that scaled comparison.
    """
    rng = np.random.default_rng(seed)
    w0 = rng.standard_normal((rows, cols))
    oracle = AdaFactor(w0, alpha=1.0, beta2=beta2, epsilon=0.0)
    state = DiagonalShampooState(
        (rows, cols), beta2=beta2, epsilon=0.0, bias_correction=False
    )

    worst = 0.0
    for t in range(steps):
        g = rng.standard_normal((rows, cols))
        d_adafactor = oracle.direction(g)
        state.update(g)
        d_diag = state.precondition(g, t, mode_exponents=(-0.5, -0.5))
        scale = math.sqrt(float(oracle.r.sum()))
        worst = max(worst, float(np.abs(d_adafactor - scale * d_diag).max()))
    return worst


def fullmatrix_equivalence_check(
    steps: int = 10,
    shape: tuple[int, int] = (2, 3),
    alpha: float = 0.1,
    epsilon: float = 1e-4,
    seed: int = 0,
    exponent_override: int = 0,
) -> float:
    """Fully merged dense path vs full-matrix AdaGrad on a seeded quadratic.

    A parameter whose dimensions all merge is preconditioned by the inverse
    square root of the full second-moment matrix.  Both sides share the SGD
    graft magnitude so iterates must coincide.  exponent_override exists so a
    deliberately wrong exponent can be shown to break the equivalence.

    The equivalence holds for any shared epsilon, but the check's conditioning
    does not: while the accumulator is rank-deficient the clamped inverse root
    varies like epsilon**(-3/2) under rounding-level perturbations, so a tiny
    epsilon drowns the comparison in amplified noise.  The default keeps that
    amplification orders of magnitude below the tolerances used by callers.
    """
    rng = np.random.default_rng(seed)
    dim = int(np.prod(shape))
    grad_vec = _quadratic_problem(rng, dim)
    w0 = rng.standard_normal(shape)

    config = ShampooConfig(
        lr=alpha,
        lr_schedule="constant",
        betas=(0.0, 1.0),
        epsilon=epsilon,
        momentum=0.0,
        use_nesterov=False,
        weight_decay=0.0,
        max_preconditioner_dim=max(dim, 1),
        precondition_frequency=1,
        start_preconditioning_step=0,
        exponent_override=exponent_override,
        grafting=GraftKind.SGD,
    )
    opt = Shampoo([w0.copy()], config)

    oracle = FullMatrixAdaGrad(w0, alpha=alpha, epsilon=epsilon)

    worst = 0.0
    for _ in range(steps):
        g_opt = grad_vec(opt.slots[0].param.reshape(-1)).reshape(shape)
        opt.step([g_opt])

        g_ref = grad_vec(oracle.w)
        direction = oracle.direction(g_ref)
        norm = np.linalg.norm(direction)
        if norm > 0.0:
            direction = (np.linalg.norm(g_ref) / norm) * direction
        oracle.w = oracle.w - alpha * direction

        worst = max(
            worst, float(np.abs(opt.slots[0].param.reshape(-1) - oracle.w).max())
        )
    return worst


@dataclass
class SolverAgreement:
    """Worst-case diagnostics from comparing the two root-inverse solvers."""

    max_identity_residual_eigh: float
    max_identity_residual_newton: float
    max_relative_disagreement: float


def solver_agreement_check(
    trials: int = 50, max_dim: int = 16, cond: float = 1e6, seed: int = 0
) -> SolverAgreement:
    """Both solvers on seeded SPD matrices: X**p A ~ I and mutual agreement."""
    rng = np.random.default_rng(seed)
    worst_eigh = 0.0
    worst_newton = 0.0
    worst_gap = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, max_dim + 1))
        p = int(rng.choice([2, 4]))
        q_mat, _ = np.linalg.qr(rng.standard_normal((n, n)))
        if n == 1:
            eigs = np.array([1.0])
        else:
            eigs = np.exp(np.linspace(0.0, np.log(cond), n)) / cond
        a = (q_mat * eigs) @ q_mat.T
        a = (a + a.T) / 2

        x_e = matfun.root_inverse_eigh(RootInverseRequest(a, root_p=p))
        x_n, trace = matfun.root_inverse_newton(
            RootInverseRequest(a, root_p=p, solver=Solver.COUPLED_NEWTON)
        )
        eye = np.eye(n)
        worst_eigh = max(
            worst_eigh, float(np.linalg.norm(np.linalg.matrix_power(x_e, p) @ a - eye))
        )
        worst_newton = max(
            worst_newton,
            float(np.linalg.norm(np.linalg.matrix_power(x_n, p) @ a - eye)),
        )
        gap = np.linalg.norm(x_n - x_e) / max(np.linalg.norm(x_e), 1e-300)
        worst_gap = max(worst_gap, float(gap))
        if not trace.converged:
            worst_gap = math.inf
    return SolverAgreement(worst_eigh, worst_newton, worst_gap)
