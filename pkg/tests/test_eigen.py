from unittest import TestCase, mock

import numpy as np

from detector import correlation, eigen
from detector.eigen import DegenerateIterate, ExitReason, InvalidStructure


def dense_leading_eigenvector(M: np.ndarray) -> np.ndarray:
    values, vectors = np.linalg.eigh(M)
    v = vectors[:, np.argmax(values)]
    return v if v.sum() >= 0 else -v


class PowerIterationDetectorTest(TestCase):
    def test_converges_to_exact_reference(self):
        w, zeta = 10, 1e-3
        M = correlation.expected_R(0.5, 0.5, 0.5, w, 0)
        v_ref = np.full(w, 1.0 / np.sqrt(w))
        result = eigen.power_iteration_detector(M, v_ref, zeta, np.random.default_rng(0))
        self.assertEqual(result.exit_reason, ExitReason.CONVERGED_TO_REFERENCE)
        aligned = result.q if result.q @ v_ref > 0 else -result.q
        self.assertLessEqual(np.linalg.norm(aligned - v_ref), np.sqrt(2 * zeta))

    def test_wrong_reference_exits_on_rayleigh(self):
        M = np.diag([2.0, 1.0])
        result = eigen.power_iteration_detector(
            M, np.array([0.0, 1.0]), 1e-3, np.random.default_rng(1)
        )
        self.assertEqual(result.exit_reason, ExitReason.RAYLEIGH_EXCEEDED)

    def test_spiked_matrix_matches_dense_eigenvector(self):
        rng = np.random.default_rng(2)
        w, zeta = 12, 1e-4
        for trial in range(5):
            u = rng.normal(size=w)
            u /= np.linalg.norm(u)
            noise = rng.normal(scale=0.05, size=(w, w))
            M = np.eye(w) + 6.0 * np.outer(u, u) + (noise + noise.T) / 2
            v_ref = dense_leading_eigenvector(M)
            result = eigen.power_iteration_detector(M, v_ref, zeta, rng)
            with self.subTest(trial=trial):
                self.assertEqual(result.exit_reason, ExitReason.CONVERGED_TO_REFERENCE)
                angle = np.arccos(min(1.0, abs(result.q @ v_ref)))
                self.assertLessEqual(angle, np.arccos(np.sqrt(1 - zeta)) + 1e-12)

    def test_max_iter_exit(self):
        M = np.diag([1.0, 0.999999, 0.999999, 0.999999, 0.999999, 0.999999])
        result = eigen.power_iteration_detector(
            M, np.eye(6)[0], 1e-3, np.random.default_rng(3), max_iter=5
        )
        self.assertEqual(result.exit_reason, ExitReason.MAX_ITER)
        self.assertEqual(result.iterations, 5)

    def test_default_max_iter(self):
        self.assertEqual(eigen.default_max_iter(10), 200)

    def test_zero_matrix_exhausts_restarts(self):
        with self.assertRaises(DegenerateIterate):
            eigen.power_iteration_detector(
                np.zeros((4, 4)), np.full(4, 0.5), 1e-3, np.random.default_rng(4)
            )

    @mock.patch("detector.eigen._power_iteration", wraps=eigen._power_iteration)
    def test_zero_matrix_uses_every_restart(self, mk_power_iteration):
        with self.assertRaises(DegenerateIterate):
            eigen.power_iteration_detector(
                np.zeros((4, 4)), np.full(4, 0.5), 1e-3, np.random.default_rng(4)
            )
        self.assertEqual(mk_power_iteration.call_count, 5)

    def test_restart_after_degenerate_iterate(self):
        M = correlation.expected_R(0.5, 0.5, 0.5, 4, 0)
        v_ref = np.full(4, 0.5)
        expected = eigen.EigenResult(v_ref, 0, ExitReason.CONVERGED_TO_REFERENCE)
        with mock.patch(
            "detector.eigen._power_iteration", side_effect=[DegenerateIterate(), expected]
        ) as mk_power_iteration:
            result = eigen.power_iteration_detector(M, v_ref, 1e-3, np.random.default_rng(0))
        self.assertIs(result, expected)
        self.assertEqual(mk_power_iteration.call_count, 2)

    def test_exit_postconditions_on_random_matrices(self):
        rng = np.random.default_rng(12)
        for trial in range(300):
            w = int(rng.integers(2, 16))
            A = rng.normal(size=(w, 3 * w))
            M = np.corrcoef(A + rng.uniform(0, 3) * rng.normal(size=(1, 3 * w)))
            v_ref = np.full(w, 1.0 / np.sqrt(w))
            max_iter = int(rng.integers(0, 30))
            result = eigen.power_iteration_detector(M, v_ref, 1e-3, rng, max_iter)
            with self.subTest(trial=trial):
                self.assertAlmostEqual(np.linalg.norm(result.q), 1.0, delta=1e-12)
                self.assertLessEqual(result.iterations, max_iter)
                if result.exit_reason is ExitReason.RAYLEIGH_EXCEEDED:
                    self.assertGreater(
                        abs(result.q @ M @ result.q), abs(v_ref @ M @ v_ref) - 1e-12
                    )
                elif result.exit_reason is ExitReason.CONVERGED_TO_REFERENCE:
                    self.assertGreaterEqual((v_ref @ result.q) ** 2, 1 - 1e-3)
                else:
                    self.assertEqual(result.iterations, max_iter)

    def test_same_generator_state_same_result(self):
        M = correlation.expected_R(0.6, 0.5, 0.3, 2, 3)
        v_ref = np.full(5, 1.0 / np.sqrt(5))
        a = eigen.power_iteration_detector(M, v_ref, 1e-3, np.random.default_rng(5))
        b = eigen.power_iteration_detector(M, v_ref, 1e-3, np.random.default_rng(5))
        np.testing.assert_array_equal(a.q, b.q)
        self.assertEqual(a.iterations, b.iterations)


class PerturbationStatisticTest(TestCase):
    def test_reference_vector(self):
        self.assertAlmostEqual(eigen.perturbation_statistic(np.full(9, 1 / 3.0), 9), 0.0)

    def test_sign_aligned(self):
        self.assertAlmostEqual(eigen.perturbation_statistic(-np.full(9, 1 / 3.0), 9), 0.0)

    def test_unit_basis_vector(self):
        self.assertAlmostEqual(eigen.perturbation_statistic(np.eye(4)[0], 4), 1.0)

    def test_invariant_to_sign(self):
        q = np.random.default_rng(6).normal(size=7)
        q /= np.linalg.norm(q)
        self.assertAlmostEqual(
            eigen.perturbation_statistic(q, 7), eigen.perturbation_statistic(-q, 7)
        )


class StructuredEigsTest(TestCase):
    def test_symmetric_case(self):
        xi_plus, xi_minus = eigen.xi(3, 3, 0.4, 0.4, 0.2)
        self.assertAlmostEqual(xi_plus, 1.0)
        self.assertAlmostEqual(xi_minus, -1.0)

    def test_matches_dense_oracle(self):
        for k1, k2, gamma1, gamma2, gamma12 in (
            (2, 3, 0.6, 0.5, 0.3),
            (1, 9, 0.1, 0.5, 0.2),
            (5, 5, 0.7, 0.3, 0.4),
            (9, 1, 0.5, 0.2, -0.1),
        ):
            R = correlation.expected_R(gamma1, gamma2, gamma12, k1, k2)
            expected = eigen.expected_leading_eigenvector(k1, k2, gamma1, gamma2, gamma12)
            structured = eigen.structured_eigs(k1, k2, gamma1, gamma2, gamma12)
            with self.subTest(k1=k1, k2=k2):
                dense = dense_leading_eigenvector(R)
                expected = expected if expected.sum() >= 0 else -expected
                np.testing.assert_allclose(expected, dense, atol=1e-10)
                self.assertAlmostEqual(
                    structured.lambda_plus, np.linalg.eigvalsh(R).max(), delta=1e-10
                )

    def test_worked_example(self):
        structured = eigen.structured_eigs(2, 3, 0.6, 0.5, 0.3)
        self.assertAlmostEqual(structured.xi_plus, 0.935958, delta=1e-4)
        self.assertAlmostEqual(structured.lambda_plus, 2.561572, delta=1e-4)
        self.assertAlmostEqual(
            structured.lambda_plus, 1 + (0.6 + 1.0 + np.sqrt(2.32)) / 2, delta=1e-12
        )

    def test_decoupled_blocks(self):
        with self.assertRaises(InvalidStructure):
            eigen.xi(2, 3, 0.6, 0.5, 0.0)

    def test_empty_block(self):
        with self.assertRaises(InvalidStructure):
            eigen.xi(0, 3, 0.6, 0.5, 0.3)


class StructuredLambdasTest(TestCase):
    def test_direct_formula(self):
        lambdas = eigen.structured_lambdas(0.5, 10)
        self.assertAlmostEqual(lambdas.lambda1, 5.5)
        self.assertAlmostEqual(lambdas.lambda_rest, 0.5)
        self.assertAlmostEqual(lambdas.ratio, 1.0 / 11.0)

    def test_identity(self):
        lambdas = eigen.structured_lambdas(0.0, 6)
        self.assertEqual((lambdas.lambda1, lambdas.lambda_rest), (1.0, 1.0))

    def test_matches_dense_oracle(self):
        w, gamma1 = 40, 2.0 / 3.0
        lambdas = eigen.structured_lambdas(gamma1, w)
        values = np.linalg.eigvalsh(correlation.expected_R(gamma1, gamma1, gamma1, w, 0))
        self.assertAlmostEqual(lambdas.lambda1, 27.0)
        self.assertAlmostEqual(lambdas.ratio, values[-2] / values[-1], delta=1e-12)

    def test_rejects_non_psd_gamma(self):
        with self.assertRaises(InvalidStructure):
            eigen.structured_lambdas(-0.5, 4)

    def test_predicted_iterations(self):
        self.assertAlmostEqual(
            eigen.predicted_iterations(0.5, 10, 1e-3), np.log(1e-3) / np.log(1.0 / 11.0)
        )


class PowerIterationStackTest(TestCase):
    def test_rows_follow_their_own_exit(self):
        Ms = np.stack(
            [
                correlation.expected_R(0.5, 0.5, 0.5, 6, 0),
                correlation.expected_R(0.9, 0.9, 0.2, 2, 4),
            ]
        )
        v_ref = np.full(6, 1.0 / np.sqrt(6))
        result = eigen.power_iteration_stack(Ms, v_ref, 1e-3, np.random.default_rng(0))
        self.assertEqual(
            result.exit_reasons,
            [ExitReason.CONVERGED_TO_REFERENCE, ExitReason.RAYLEIGH_EXCEEDED],
        )
        np.testing.assert_allclose(np.linalg.norm(result.Q, axis=1), 1.0, atol=1e-12)

    def test_max_iter_rows(self):
        M = np.diag([1.0, 0.999999, 0.999999, 0.999999])
        result = eigen.power_iteration_stack(
            np.stack([M, M]), np.eye(4)[0], 1e-3, np.random.default_rng(3), max_iter=4
        )
        self.assertEqual(result.exit_reasons, [ExitReason.MAX_ITER] * 2)
        np.testing.assert_array_equal(result.iterations, [4, 4])

    def test_zero_matrix_is_degenerate(self):
        with self.assertRaises(DegenerateIterate):
            eigen.power_iteration_stack(
                np.zeros((2, 4, 4)), np.full(4, 0.5), 1e-3, np.random.default_rng(4)
            )

    def test_exit_postconditions_on_random_stacks(self):
        rng = np.random.default_rng(13)
        for trial in range(100):
            w, L = int(rng.integers(2, 12)), int(rng.integers(1, 6))
            Ms = np.stack(
                [
                    np.corrcoef(
                        rng.normal(size=(w, 40)) + rng.uniform(0, 3) * rng.normal(size=(1, 40))
                    )
                    for _ in range(L)
                ]
            )
            v_ref = np.full(w, 1.0 / np.sqrt(w))
            max_iter = int(rng.integers(0, 30))
            result = eigen.power_iteration_stack(Ms, v_ref, 1e-3, rng, max_iter)
            for row in range(L):
                q, M, reason = result.Q[row], Ms[row], result.exit_reasons[row]
                with self.subTest(trial=trial, row=row):
                    self.assertAlmostEqual(np.linalg.norm(q), 1.0, delta=1e-12)
                    self.assertLessEqual(result.iterations[row], max_iter)
                    if reason is ExitReason.RAYLEIGH_EXCEEDED:
                        self.assertGreater(abs(q @ M @ q), abs(v_ref @ M @ v_ref) - 1e-12)
                    elif reason is ExitReason.CONVERGED_TO_REFERENCE:
                        self.assertGreaterEqual((v_ref @ q) ** 2, 1 - 1e-3)
                    else:
                        self.assertEqual(result.iterations[row], max_iter)

    def test_rayleigh_at_start(self):
        result = eigen.EigenStack(
            np.eye(3),
            np.array([0, 1, 0]),
            [ExitReason.RAYLEIGH_EXCEEDED, ExitReason.RAYLEIGH_EXCEEDED, ExitReason.MAX_ITER],
        )
        np.testing.assert_array_equal(result.rayleigh_at_start(), [True, False, False])


class StatisticScaleTest(TestCase):
    def test_sign_invariance_on_many_unit_vectors(self):
        rng = np.random.default_rng(14)
        Q = rng.normal(size=(10_000, 9))
        Q /= np.linalg.norm(Q, axis=1, keepdims=True)
        np.testing.assert_allclose(
            eigen.perturbation_statistics(Q), eigen.perturbation_statistics(-Q), atol=1e-15
        )
        for q in Q[:200]:
            self.assertAlmostEqual(
                eigen.perturbation_statistic(q, 9), eigen.perturbation_statistic(-q, 9), delta=1e-15
            )

    def test_vectorized_matches_single(self):
        Q = np.random.default_rng(15).normal(size=(50, 6))
        Q /= np.linalg.norm(Q, axis=1, keepdims=True)
        np.testing.assert_allclose(
            eigen.perturbation_statistics(Q),
            [eigen.perturbation_statistic(q, 6) for q in Q],
            atol=1e-15,
        )

    def test_structured_eigs_on_many_tuples(self):
        rng = np.random.default_rng(16)
        checked = 0
        while checked < 200:
            k1, k2 = (int(k) for k in rng.integers(1, 11, size=2))
            gamma1, gamma2 = rng.uniform(0.05, 0.95, size=2)
            gamma12 = rng.choice([-1, 1]) * rng.uniform(0.05, 1.0) * np.sqrt(gamma1 * gamma2)
            R = correlation.expected_R(gamma1, gamma2, gamma12, k1, k2)
            structured = eigen.structured_eigs(k1, k2, gamma1, gamma2, gamma12)
            values = np.linalg.eigvalsh(R)
            with self.subTest(k1=k1, k2=k2, gammas=(gamma1, gamma2, gamma12)):
                self.assertAlmostEqual(structured.lambda_plus, values[-1], delta=1e-10)
                self.assertTrue(np.min(np.abs(values - structured.lambda_minus)) < 1e-10)
                expected = eigen.expected_leading_eigenvector(k1, k2, gamma1, gamma2, gamma12)
                dense = dense_leading_eigenvector(R)
                expected = expected if expected @ dense >= 0 else -expected
                np.testing.assert_allclose(expected, dense, atol=1e-10)
            checked += 1
