"""
Tests for the skew-KL divergence, the combined adaptation loss and one
teacher/student update, including a central finite-difference gradient check.
"""

import copy
import math
import unittest
from dataclasses import replace

import numpy as np
import torch

from hwattn.adapt.distill import (
    DistillConfig,
    distill_loss,
    generated_slice,
    make_optimizer,
    skew_kl,
    skew_kl_from_logits,
    teacher_student_step,
)
from hwattn.engine.masking import WindowSpec, causal_full_mask, hybrid_mask
from hwattn.engine.model import ModelConfig, SequenceLayout, init_model
from hwattn.engine.numerics import Rng, ShapeError
from hwattn.run.exceptions import ConfigError

TINY = ModelConfig(n_layers=2, d_model=16, n_q_heads=2, n_kv_heads=1, d_ff=32, vocab_size=12, max_position=64)


class TestSkewKL(unittest.TestCase):
    def test_control_values(self):
        p, q = torch.tensor([1.0, 0.0]), torch.tensor([0.5, 0.5])
        self.assertTrue(math.isclose(float(skew_kl(p, q, 0.0)), math.log(2.0), rel_tol=1e-12))
        self.assertTrue(math.isclose(float(skew_kl(p, q, 0.1)), math.log(1.0 / 0.55), rel_tol=1e-12))
        self.assertEqual(float(skew_kl(q, q, 0.1)), 0.0)

    def test_non_negative_over_random_pairs(self):
        rng = Rng(0)
        p = torch.from_numpy(rng.dirichlet([0.5] * 8, size=10_000))
        q = torch.from_numpy(rng.dirichlet([0.5] * 8, size=10_000))
        values = skew_kl(p, q, 0.1)
        self.assertGreaterEqual(float(values.min()), 0.0)
        self.assertLessEqual(float(skew_kl(p, p, 0.1).abs().max()), 1e-9)
        self.assertGreater(float(values.min()), 0.0)

    def test_skew_zero_matches_kl(self):
        rng = Rng(1)
        p = torch.from_numpy(rng.dirichlet([1.0] * 6, size=50))
        q = torch.from_numpy(rng.dirichlet([1.0] * 6, size=50))
        direct = (p * (p.log() - q.log())).sum(dim=-1)
        self.assertLessEqual(float((skew_kl(p, q, 0.0) - direct).abs().max()), 1e-7)

    def test_finite_with_zero_student_mass(self):
        value = skew_kl(torch.tensor([0.5, 0.5]), torch.tensor([1.0, 0.0]), 0.1)
        self.assertTrue(math.isfinite(float(value)))

    def test_logits_form_matches_probability_form(self):
        rng = Rng(2)
        t_logits, s_logits = rng.normal((5, 9)).double(), rng.normal((5, 9)).double()
        from_probs = skew_kl(torch.softmax(t_logits, -1), torch.softmax(s_logits, -1), 0.1)
        torch.testing.assert_close(skew_kl_from_logits(t_logits, s_logits, 0.1), from_probs, atol=1e-12, rtol=0)

    def test_skew_one_is_rejected(self):
        with self.assertRaises(ValueError):
            skew_kl(torch.tensor([1.0, 0.0]), torch.tensor([0.5, 0.5]), 1.0)

    def test_continuity_at_zero(self):
        p, q = torch.tensor([0.3, 0.7]), torch.tensor([0.6, 0.4])
        self.assertLess(abs(float(skew_kl(p, q, 1e-9)) - float(skew_kl(p, q, 0.0))), 1e-7)


class TestDistillLoss(unittest.TestCase):
    def setUp(self):
        rng = Rng(3)
        self.teacher = rng.normal((2, 6, 12))
        self.student = rng.normal((2, 6, 12))
        self.targets = torch.from_numpy(rng.integers(0, 12, size=(2, 6)))

    def test_parts_reconstruct_total(self):
        cfg = DistillConfig(lam=0.7)
        total, ce, kl = distill_loss(self.teacher, self.student, self.targets, cfg)
        self.assertLessEqual(abs(float(total) - (float(ce) + 0.7 * float(kl))), 1e-6)

    def test_arms(self):
        _, ce, kl = distill_loss(self.teacher, self.student, self.targets, DistillConfig())
        total, _, _ = distill_loss(self.teacher, self.student, self.targets, DistillConfig(enable_kl=False))
        self.assertEqual(float(total), float(ce))
        total, _, _ = distill_loss(self.teacher, self.student, self.targets, DistillConfig(lam=0.0))
        self.assertEqual(float(total), float(ce))
        total, _, _ = distill_loss(self.teacher, self.student, self.targets, DistillConfig(lam=2.0, enable_ce=False))
        self.assertTrue(math.isclose(float(total), 2.0 * float(kl), rel_tol=1e-6))

    def test_identical_logits(self):
        total, ce, kl = distill_loss(self.student, self.student, self.targets, DistillConfig())
        self.assertLess(abs(float(kl)), 1e-12)
        self.assertTrue(math.isclose(float(total), float(ce), abs_tol=1e-12))

    def test_teacher_gets_no_gradient(self):
        teacher = self.teacher.clone().requires_grad_(True)
        student = self.student.clone().requires_grad_(True)
        total, _, _ = distill_loss(teacher, student, self.targets, DistillConfig())
        total.backward()
        self.assertIsNone(teacher.grad)
        self.assertIsNotNone(student.grad)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            distill_loss(self.teacher, self.student[:, :5], self.targets, DistillConfig())

    def test_config_needs_a_term(self):
        with self.assertRaises(ConfigError):
            DistillConfig(enable_ce=False, enable_kl=False).validate()
        with self.assertRaises(ConfigError):
            DistillConfig(skew=1.0).validate()

    def test_generated_slice(self):
        self.assertEqual(generated_slice(SequenceLayout(4, 6)), slice(3, 9))


class TestTeacherStudentStep(unittest.TestCase):
    def setUp(self):
        self.layout = SequenceLayout(prefix_len=4, gen_len=10)
        self.teacher = init_model(TINY, Rng(0)).eval().requires_grad_(False)
        self.batch = torch.from_numpy(Rng(1).integers(0, TINY.vocab_size, size=(3, self.layout.total)))

    def _run(self, steps: int, mask):
        student = copy.deepcopy(self.teacher).requires_grad_(True)
        opt = make_optimizer(student, 1e-3, steps)
        return [teacher_student_step(self.teacher, student, self.batch, mask, DistillConfig(), opt)[0] for _ in range(steps)]

    def test_identical_student_has_zero_kl(self):
        reports = self._run(1, causal_full_mask(self.layout))
        self.assertLess(reports[0].kl, 1e-12)
        self.assertEqual(reports[0].step, 0)

    def test_teacher_unchanged(self):
        before = {k: v.clone() for k, v in self.teacher.state_dict().items()}
        self._run(3, hybrid_mask(self.layout, WindowSpec.bounded(2)))
        for name, tensor in self.teacher.state_dict().items():
            self.assertTrue(torch.equal(tensor, before[name]), name)

    def test_deterministic_trajectory(self):
        mask = hybrid_mask(self.layout, WindowSpec.bounded(2))
        a = [r.total for r in self._run(4, mask)]
        b = [r.total for r in self._run(4, mask)]
        self.assertEqual(a, b)
        self.assertGreater(a[0], 0.0)

    def test_gradient_matches_finite_differences(self):
        teacher = init_model(TINY, Rng(0)).double().eval()
        student = init_model(TINY, Rng(5)).double()
        mask = hybrid_mask(self.layout, WindowSpec.bounded(3))
        rows = generated_slice(self.layout)
        targets = self.batch[:, self.layout.prefix_len :]
        cfg = DistillConfig(lam=0.5)
        with torch.no_grad():
            teacher_logits = teacher(self.batch, causal_full_mask(self.layout)).logits[:, rows]

        def loss() -> torch.Tensor:
            return distill_loss(teacher_logits, student(self.batch, mask).logits[:, rows], targets, cfg)[0]

        student.zero_grad()
        loss().backward()
        eps = 1e-6
        for name in ("blocks.0.attn.q_proj.weight", "blocks.1.fc1.weight", "embed.weight", "lm_head.weight"):
            param = dict(student.named_parameters())[name]
            index = np.unravel_index(int(param.grad.abs().argmax()), tuple(param.shape))
            analytic = float(param.grad[index])
            with torch.no_grad():
                original = float(param[index])
                param[index] = original + eps
                plus = float(loss())
                param[index] = original - eps
                minus = float(loss())
                param[index] = original
            numeric = (plus - minus) / (2 * eps)
            self.assertTrue(math.isclose(analytic, numeric, rel_tol=1e-3), f"{name}: {analytic} vs {numeric}")


if __name__ == "__main__":
    unittest.main()
