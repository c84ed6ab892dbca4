"""Learning-rate grafting.

Maintains a cheap first-order method's second-moment state alongside the
block preconditioner and transfers that method's per-block step magnitude
onto the preconditioned direction: the graft decides how far, the block
preconditioner decides which way.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

__all__ = ["GraftKind", "GraftState", "rescale_to_graft"]


class GraftKind(Enum):
    SGD = "sgd"
    ADAGRAD = "adagrad"
    RMSPROP = "rmsprop"
    ADAM = "adam"
    NORMALIZED_ADAGRAD = "normalized_adagrad"
    NORMALIZED_RMSPROP = "normalized_rmsprop"
    NORMALIZED_ADAM = "normalized_adam"


_NORMALIZED = {
    GraftKind.NORMALIZED_ADAGRAD,
    GraftKind.NORMALIZED_RMSPROP,
    GraftKind.NORMALIZED_ADAM,
}
_SUM_KINDS = {GraftKind.ADAGRAD, GraftKind.NORMALIZED_ADAGRAD}
_BIAS_CORRECTED = {GraftKind.ADAM, GraftKind.NORMALIZED_ADAM}


class GraftState:
    """Second-moment accumulator for one block's grafted method.

    State updates consume the raw (post-weight-decay) gradient; directions
    consume the filtered, bias-corrected gradient.  SGD keeps no accumulator.
    Normalized kinds scale the gradient to unit Frobenius norm before it
    enters the accumulator (a zero gradient is left unchanged).
    """

    def __init__(
        self,
        kind: GraftKind,
        shape: tuple[int, ...],
        *,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
        bias_correction: bool = True,
        dtype: np.dtype = np.float64,
    ):
        if epsilon <= 0 and kind is not GraftKind.SGD:
            raise ValueError("grafting epsilon must be positive")
        self.kind = kind
        self.shape = tuple(shape)
        self.beta2 = beta2
        self.epsilon = epsilon
        self.bias_correction = bias_correction
        self.accumulator = (
            None if kind is GraftKind.SGD else np.zeros(self.shape, dtype=dtype)
        )
        self.step = 0

    def update(self, g: np.ndarray) -> None:
        if tuple(g.shape) != self.shape:
            raise ValueError(f"expected gradient of shape {self.shape}, got {g.shape}")
        self.step += 1
        if self.kind is GraftKind.SGD:
            return
        if self.kind in _NORMALIZED:
            norm = float(np.linalg.norm(g))
            if norm > 0.0:
                g = g / norm
        sq = g * g
        if self.kind in _SUM_KINDS:
            self.accumulator += sq
        else:
            self.accumulator *= self.beta2
            self.accumulator += (1.0 - self.beta2) * sq

    def direction(self, g_effective: np.ndarray) -> np.ndarray:
        """Grafted method's own step direction for the effective gradient."""
        if self.kind is GraftKind.SGD:
            return np.array(g_effective, dtype=np.float64, copy=True)
        acc = np.asarray(self.accumulator, dtype=np.float64)
        if self.kind in _BIAS_CORRECTED and self.bias_correction and self.step > 0:
            acc = acc / (1.0 - self.beta2**self.step)
        return g_effective / (np.sqrt(acc) + self.epsilon)


def rescale_to_graft(p_shampoo: np.ndarray, p_graft: np.ndarray) -> np.ndarray:
    """Transfer the graft's step magnitude onto the preconditioned direction.

    Returns -||p_graft||_F * p_shampoo / ||p_shampoo||_F (the sign folds the
    descent step into the result).  A zero preconditioned direction falls
    back to -p_graft.
    """
    if p_shampoo.shape != p_graft.shape:
        raise ValueError(
            f"direction shapes differ: {p_shampoo.shape} vs {p_graft.shape}"
        )
    shampoo_norm = float(np.linalg.norm(p_shampoo))
    if shampoo_norm == 0.0:
        return -np.asarray(p_graft, dtype=np.float64)
    graft_norm = float(np.linalg.norm(p_graft))
    return (-graft_norm / shampoo_norm) * p_shampoo
