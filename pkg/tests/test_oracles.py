"""Reference optimizers and cross-implementation equivalence checks."""

from __future__ import annotations

import numpy as np
import pytest

from minishampoo.oracles import (
    HeavyBall,
    OracleKind,
    PrimalAveraging,
    RowWiseAdaGrad,
    UnknownKindError,
    adafactor_relation_check,
    fullmatrix_equivalence_check,
    make_oracle,
    momentum_equivalence_check,
    rowwise_equivalence_check,
    solver_agreement_check,
)


class TestMomentumAveragingPair:
    def test_heavy_ball_equals_averaging_on_quadratic(self):
        # With c = delta and eta = alpha / (1 - c) the two recurrences
        # generate identical iterates from the same start.
        rng = np.random.default_rng(0)
        dim = 6
        a = rng.standard_normal((dim, dim))
        quad = a @ a.T / dim + 0.1 * np.eye(dim)
        w0 = rng.standard_normal(dim)
        mu, alpha = 0.9, 0.05
        hb = HeavyBall(w0, alpha=alpha, delta=mu)
        pa = PrimalAveraging(w0, eta=alpha / (1 - mu), c=mu)
        for _ in range(100):
            hb.step(quad @ hb.w)
            pa.step(quad @ pa.w)
            np.testing.assert_allclose(hb.w, pa.w, atol=1e-10)

    def test_c_zero_tracks_inner_iterate(self):
        rng = np.random.default_rng(1)
        w0 = rng.standard_normal(4)
        pa = PrimalAveraging(w0, eta=0.1, c=0.0)
        for _ in range(5):
            pa.step(rng.standard_normal(4))
            np.testing.assert_array_equal(pa.w, pa.z)

    def test_shampoo_momentum_matches_averaging_oracle(self):
        for seed in range(3):
            dev = momentum_equivalence_check(steps=100, seed=seed, nesterov=False)
            assert dev <= 1e-10

    def test_shampoo_nesterov_matches_averaging_oracle(self):
        for seed in range(3):
            dev = momentum_equivalence_check(steps=100, seed=seed, nesterov=True)
            assert dev <= 1e-10


class TestRowWisePair:
    def test_worked_example(self):
        # One gradient [[1, 0], [0, 2]] from zero accumulators: rowmeans of
        # squares are 0.5 and 2, so rows shrink by those square roots.
        g = np.array([[1.0, 0.0], [0.0, 2.0]])
        o = RowWiseAdaGrad(np.zeros((2, 2)), alpha=1.0, epsilon=0.0)
        o.step(g)
        expected = -np.array(
            [[1.0 / np.sqrt(0.5), 0.0], [0.0, 2.0 / np.sqrt(2.0)]]
        )
        np.testing.assert_allclose(o.e, expected, atol=1e-14)

    def test_matches_left_diagonal_shampoo(self):
        for seed in range(3):
            dev = rowwise_equivalence_check(steps=50, seed=seed)
            assert dev <= 1e-12


class TestAdaFactorPair:
    def test_relation_holds(self):
        for seed in range(3):
            dev = adafactor_relation_check(steps=50, seed=seed)
            assert dev <= 1e-10


class TestFullMatrixPair:
    def test_fully_merged_block_matches(self):
        for seed in range(3):
            dev = fullmatrix_equivalence_check(steps=10, seed=seed)
            assert dev <= 1e-10

    def test_mutated_exponent_breaks_it(self):
        # Forcing root 4 on the merged vector must visibly diverge from the
        # inverse-square-root reference; guards the check against vacuity.
        dev = fullmatrix_equivalence_check(steps=10, seed=0, exponent_override=4)
        assert dev > 1e-6


class TestFactory:
    HYPERPARAMS = {
        OracleKind.HEAVY_BALL: {"alpha": 0.1, "delta": 0.9},
        OracleKind.PRIMAL_AVERAGING: {"eta": 0.1, "c": 0.9},
        OracleKind.NESTEROV_HEAVY_BALL: {"alpha": 0.1, "delta": 0.9, "mu": 0.9},
        OracleKind.NESTEROV_AVERAGING: {"eta": 0.1, "c": 0.9, "mu": 0.9},
        OracleKind.ROW_WISE_ADAGRAD: {"alpha": 0.1, "epsilon": 1e-6},
        OracleKind.ADAFACTOR: {"alpha": 0.1, "beta2": 0.999},
        OracleKind.FULL_MATRIX_ADAGRAD: {"alpha": 0.1, "epsilon": 1e-10},
        OracleKind.DIAGONAL_ADAGRAD: {"alpha": 0.1, "epsilon": 1e-10},
    }

    def test_all_kinds_construct_and_step(self):
        rng = np.random.default_rng(2)
        for kind in OracleKind:
            o = make_oracle(kind, np.zeros((3, 2)), **self.HYPERPARAMS[kind])
            o.step(rng.standard_normal((3, 2)))

    def test_unknown_kind(self):
        with pytest.raises(UnknownKindError):
            make_oracle("not_a_kind", np.zeros((2, 2)))


class TestSolverAgreement:
    def test_quick_agreement(self):
        result = solver_agreement_check(trials=10, max_dim=8, seed=0)
        assert result.max_identity_residual_eigh <= 1e-6
        assert result.max_identity_residual_newton <= 1e-6
        assert result.max_relative_disagreement <= 1e-6
