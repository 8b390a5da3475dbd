"""
Tests for the numeric kernel layer: matmul, masked softmax, cross-entropy,
sampling and the seeded Rng.
"""

import math
import unittest

import numpy as np
import torch

from hwattn.engine.numerics import (
    NumericsError,
    Rng,
    ShapeError,
    cross_entropy,
    masked_softmax,
    matmul,
    sample_token,
    softmax,
)

NEG_INF = float("-inf")


class TestMatmul(unittest.TestCase):
    def test_identity(self):
        out = matmul(torch.eye(2), torch.tensor([[3.0, 4.0], [5.0, 6.0]]))
        torch.testing.assert_close(out, torch.tensor([[3.0, 4.0], [5.0, 6.0]]))

    def test_dot_product(self):
        out = matmul(torch.tensor([[1.0, 2.0]]), torch.tensor([[3.0], [4.0]]))
        self.assertEqual(out.item(), 11.0)

    def test_matches_triple_loop(self):
        rng = Rng(3)
        a, b = rng.normal((7, 5)), rng.normal((5, 3))
        out = matmul(a, b)
        for i in range(7):
            for j in range(3):
                expected = sum(float(a[i, k]) * float(b[k, j]) for k in range(5))
                self.assertTrue(math.isclose(float(out[i, j]), expected, abs_tol=1e-6))

    def test_shape_mismatch_names_both_shapes(self):
        with self.assertRaises(ShapeError) as ctx:
            matmul(torch.zeros(2, 3), torch.zeros(2, 3))
        self.assertEqual(ctx.exception.a_shape, (2, 3))
        self.assertIn("(2, 3) and (2, 3)", str(ctx.exception))


class TestMaskedSoftmax(unittest.TestCase):
    def test_control_values(self):
        logits = torch.tensor([2.0, 2.0])
        torch.testing.assert_close(masked_softmax(logits, torch.tensor([0.0, 0.0])), torch.tensor([0.5, 0.5]))
        torch.testing.assert_close(masked_softmax(logits, torch.tensor([0.0, NEG_INF])), torch.tensor([1.0, 0.0]))
        out = masked_softmax(logits.double(), torch.tensor([0.0, -math.log(3.0)], dtype=torch.float64))
        self.assertTrue(math.isclose(float(out[0]), 0.75, abs_tol=1e-9))
        self.assertTrue(math.isclose(float(out[1]), 0.25, abs_tol=1e-9))

    def test_zero_mask_equals_softmax(self):
        logits = Rng(1).normal((4, 6))
        self.assertTrue(torch.equal(masked_softmax(logits, torch.zeros(4, 6)), torch.softmax(logits, dim=-1)))
        self.assertTrue(torch.equal(softmax(logits), torch.softmax(logits, dim=-1)))

    def test_shift_invariance_and_large_penalty(self):
        logits = Rng(2).normal((3, 5))
        mask = torch.zeros(3, 5)
        mask[:, 3:] = -1.0e4
        base = masked_softmax(logits, mask)
        shifted = masked_softmax(logits + 100.0, mask)
        self.assertLessEqual(float((base - shifted).abs().max()), 1e-6)
        torch.testing.assert_close(base.sum(dim=-1), torch.ones(3))

    def test_all_masked_row_is_an_error(self):
        with self.assertRaises(NumericsError):
            masked_softmax(torch.zeros(2, 2), torch.tensor([[0.0, NEG_INF], [NEG_INF, NEG_INF]]))

    def test_positive_mask_entry_is_an_error(self):
        with self.assertRaises(NumericsError):
            masked_softmax(torch.zeros(1, 2), torch.tensor([[0.0, 1.0]]))

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            masked_softmax(torch.zeros(2, 2), torch.zeros(2, 3))


class TestCrossEntropy(unittest.TestCase):
    def test_uniform_logits(self):
        loss = cross_entropy(torch.zeros(3, 4), torch.tensor([0, 1, 3]))
        self.assertTrue(math.isclose(float(loss), math.log(4.0), rel_tol=1e-6))

    def test_peaked_logits_approach_zero(self):
        logits = torch.full((2, 5), -50.0)
        logits[0, 1] = 50.0
        logits[1, 4] = 50.0
        self.assertLess(float(cross_entropy(logits, torch.tensor([1, 4]))), 1e-6)

    def test_matches_logsumexp_by_hand(self):
        logits = Rng(5).normal((3, 5)).double()
        targets = [4, 0, 2]
        expected = 0.0
        for row, t in zip(logits.tolist(), targets):
            expected += math.log(sum(math.exp(v) for v in row)) - row[t]
        expected /= 3
        loss = cross_entropy(logits, torch.tensor(targets))
        self.assertTrue(math.isclose(float(loss), expected, abs_tol=1e-6))
        self.assertEqual(cross_entropy(logits.float(), torch.tensor(targets)).dtype, torch.float32)

    def test_target_outside_vocab(self):
        with self.assertRaises(NumericsError):
            cross_entropy(torch.zeros(2, 4), torch.tensor([0, 4]))

    def test_row_count_mismatch(self):
        with self.assertRaises(ShapeError):
            cross_entropy(torch.zeros(3, 4), torch.tensor([0, 1]))


class TestSampling(unittest.TestCase):
    def test_greedy_ignores_rng(self):
        self.assertEqual(sample_token(torch.tensor([0.1, 3.0, -1.0]), None, 0.0), 1)

    def test_top_k_one_is_greedy(self):
        logits = Rng(0).normal((16,))
        self.assertEqual(sample_token(logits, Rng(9), 1.0, top_k=1), int(torch.argmax(logits)))

    def test_sampling_is_seeded(self):
        logits = torch.zeros(10)
        a = [sample_token(logits, r, 1.0) for r in [Rng(4)] * 20]
        b = [sample_token(logits, r, 1.0) for r in [Rng(4)] * 20]
        self.assertEqual(a, b)

    def test_negative_temperature(self):
        with self.assertRaises(NumericsError):
            sample_token(torch.zeros(3), Rng(0), -1.0)


class TestRng(unittest.TestCase):
    def test_same_seed_same_stream(self):
        self.assertTrue(np.array_equal(Rng(42).random(8), Rng(42).random(8)))
        self.assertTrue(torch.equal(Rng(42).normal((3, 3), std=0.02), Rng(42).normal((3, 3), std=0.02)))

    def test_children_are_independent_of_parent_consumption(self):
        parent = Rng(7)
        first = parent.child("data").integers(0, 1000, size=5)
        parent.random(100)
        second = parent.child("data").integers(0, 1000, size=5)
        self.assertTrue(np.array_equal(first, second))
        self.assertFalse(np.array_equal(first, parent.child("init").integers(0, 1000, size=5)))

    def test_split(self):
        streams = Rng(1).split(3)
        draws = [s.random() for s in streams]
        self.assertEqual(len(set(draws)), 3)

    def test_normal_dtype(self):
        self.assertEqual(Rng(0).normal((2,)).dtype, torch.float32)
        self.assertEqual(Rng.ALGORITHM, "philox4x64-10")


if __name__ == "__main__":
    unittest.main()
