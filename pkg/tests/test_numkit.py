"""Conjugate-gradient solver and deterministic reduction tests."""

import numpy as np
import pytest

from coresel.numkit import CgConfig, SpdOperator, as_vector, cg_solve, deterministic_sum


def diag_operator(entries, damping=0.0):
    d = np.asarray(entries, dtype=np.float64)
    return SpdOperator(dim=len(d), apply=lambda v: d * v, damping=damping)


def dense_operator(A, damping=0.0):
    A = np.asarray(A, dtype=np.float64)
    return SpdOperator(dim=A.shape[0], apply=lambda v: A @ v, damping=damping)


def random_spd(rng, n, eig_range=(0.5, 2.0)):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    eigs = rng.uniform(*eig_range, size=n)
    return (Q * eigs) @ Q.T


class TestCgSolve:
    def test_diagonal_system(self):
        res = cg_solve(diag_operator([2.0, 4.0]), [2.0, 4.0])
        assert res.converged
        np.testing.assert_allclose(res.solution, [1.0, 1.0], atol=1e-12)

    def test_damped_diagonal_closed_form(self):
        res = cg_solve(diag_operator([2.0, 4.0], damping=0.01), [2.0, 4.0])
        np.testing.assert_allclose(res.solution, [2.0 / 2.01, 4.0 / 4.01], atol=1e-12)

    def test_zero_rhs(self):
        res = cg_solve(diag_operator([2.0, 4.0]), [0.0, 0.0])
        assert res.converged and res.iterations == 0
        np.testing.assert_allclose(res.solution, 0.0)

    def test_matches_dense_solve_on_random_spd(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            A = random_spd(rng, 10)
            b = rng.normal(size=10)
            res = cg_solve(dense_operator(A), b, CgConfig(rel_tolerance=1e-10))
            exact = np.linalg.solve(A, b)
            assert res.converged
            np.testing.assert_allclose(res.solution, exact, rtol=1e-8)

    def test_residual_contract(self):
        rng = np.random.default_rng(3)
        A = random_spd(rng, 12)
        b = rng.normal(size=12)
        cfg = CgConfig(rel_tolerance=1e-9)
        res = cg_solve(dense_operator(A), b, cfg)
        assert res.converged == (res.residual_norm <= cfg.rel_tolerance * np.linalg.norm(b))
        assert res.converged

    def test_non_convergence_is_flagged_not_raised(self):
        rng = np.random.default_rng(11)
        A = random_spd(rng, 30, eig_range=(1e-4, 10.0))
        b = rng.normal(size=30)
        res = cg_solve(dense_operator(A), b, CgConfig(rel_tolerance=1e-14, max_iterations=2))
        assert not res.converged
        assert res.iterations == 2

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            cg_solve(diag_operator([1.0, 2.0]), [1.0, 2.0, 3.0])

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        A = random_spd(rng, 8)
        b = rng.normal(size=8)
        r1 = cg_solve(dense_operator(A), b)
        r2 = cg_solve(dense_operator(A), b)
        assert np.array_equal(r1.solution, r2.solution)
        assert r1.iterations == r2.iterations


class TestSpdOperator:
    def test_rejects_negative_damping(self):
        with pytest.raises(ValueError):
            SpdOperator(dim=2, apply=lambda v: v, damping=-1.0)

    def test_dense_materialization(self):
        rng = np.random.default_rng(2)
        A = random_spd(rng, 5)
        op = dense_operator(A, damping=0.3)
        np.testing.assert_allclose(op.dense(damped=True), A + 0.3 * np.eye(5), atol=1e-14)
        np.testing.assert_allclose(op.dense(damped=False), A, atol=1e-14)

    def test_symmetry_probe(self):
        # x'(A y) == y'(A x) within tolerance for random probes
        rng = np.random.default_rng(9)
        A = random_spd(rng, 10)
        op = dense_operator(A, damping=0.01)
        for _ in range(20):
            x, y = rng.normal(size=10), rng.normal(size=10)
            defect = abs(x @ op.apply_damped(y) - y @ op.apply_damped(x))
            assert defect <= 1e-9 * np.linalg.norm(x) * np.linalg.norm(y)


class TestDeterministicSum:
    def test_basic(self):
        np.testing.assert_array_equal(
            deterministic_sum([np.array([1.0, 0.0]), np.array([0.0, 1.0])]), [1.0, 1.0])

    def test_empty_with_declared_dim(self):
        np.testing.assert_array_equal(deterministic_sum([], dim=3), [0.0, 0.0, 0.0])

    def test_empty_without_dim_raises(self):
        with pytest.raises(ValueError):
            deterministic_sum([])

    def test_bit_identical_for_identical_inputs(self):
        rng = np.random.default_rng(1)
        vs = [rng.normal(size=6) for _ in range(50)]
        a = deterministic_sum(vs)
        b = deterministic_sum([v.copy() for v in vs])
        assert np.array_equal(a, b)

    def test_permutation_agrees_within_tolerance(self):
        rng = np.random.default_rng(4)
        vs = [rng.normal(size=8) for _ in range(100)]
        perm = rng.permutation(100)
        a = deterministic_sum(vs)
        b = deterministic_sum([vs[i] for i in perm])
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_rejects_mismatched_dims(self):
        with pytest.raises(ValueError):
            deterministic_sum([np.zeros(2), np.zeros(3)])

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            as_vector([np.nan, 1.0])


class TestNeumannExpansion:
    def test_second_order_error_shrinks_quadratically(self):
        """Inverse-of-perturbed-matrix expansion: dropping the eps^2 tail
        leaves an error that falls by ~4x when eps halves."""
        rng = np.random.default_rng(42)
        for _ in range(20):
            A = random_spd(rng, 10)
            S = rng.normal(size=(10, 10))
            B = (S + S.T) / 2
            A_inv = np.linalg.inv(A)

            def expansion_error(eps):
                exact = np.linalg.inv(A + eps * B)
                approx = A_inv - eps * A_inv @ B @ A_inv
                return np.linalg.norm(exact - approx)

            eps = 1e-3
            ratio = expansion_error(eps) / expansion_error(eps / 2)
            assert 3.5 <= ratio <= 4.5
