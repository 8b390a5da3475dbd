"""
Tests for the prompt / generated / local attention decomposition.
"""

import math
import unittest

import torch

from hwattn.analysis.attention_stats import AttentionStats, attention_decomposition, coverage, published_stats
from hwattn.engine.masking import WindowSpec, causal_full_mask, hybrid_mask
from hwattn.engine.model import ModelConfig, SequenceLayout, forward, init_model
from hwattn.engine.numerics import Rng
from hwattn.run import Global as gl

SMALL = ModelConfig(n_layers=2, d_model=32, n_q_heads=4, n_kv_heads=2, d_ff=64, vocab_size=40, max_position=256)


class TestPublishedRows(unittest.TestCase):
    def test_coverage_recomputed(self):
        for name, expected in (("cosyvoice2-10s", 87.6), ("indextts-10s", 84.8), ("sparktts-10s", 91.0)):
            stats = published_stats(name)
            self.assertTrue(math.isclose(stats.coverage, expected, abs_tol=0.1), f"{name}: {stats.coverage}")
            self.assertTrue(math.isclose(stats.coverage, gl.PUBLISHED_ATTENTION[name]["coverage"], abs_tol=0.1))
            self.assertEqual(stats.identity_gap(), 0.0)

    def test_window_comes_from_preset(self):
        self.assertEqual(published_stats("sparktts-10s").window_used, 64)


class TestDecomposition(unittest.TestCase):
    def test_hand_built_rows(self):
        layout = SequenceLayout(prefix_len=2, gen_len=4)
        weights = torch.zeros(1, 6, 6)
        for q in range(6):
            weights[0, q, : q + 1] = 1.0 / (q + 1)
        for q in (3, 4, 5):
            weights[0, q] = 0.0
            weights[0, q, 0] = 0.5
            weights[0, q, 2] = 0.25
            weights[0, q, q] = 0.25
        stats = attention_decomposition([weights], layout, w=1)
        self.assertEqual(stats.n_queries, 3)
        self.assertTrue(math.isclose(stats.prompt_mass, 50.0, abs_tol=1e-9))
        self.assertTrue(math.isclose(stats.local_w_over_gen, 200.0 / 3.0, abs_tol=1e-9))
        self.assertTrue(math.isclose(stats.coverage, 50.0 + 100.0 / 3.0, abs_tol=1e-9))

    def test_all_prefix_mass(self):
        layout = SequenceLayout(prefix_len=3, gen_len=5)
        weights = torch.zeros(2, 8, 8)
        weights[..., 0] = 1.0
        stats = attention_decomposition([weights, weights], layout, w=2)
        self.assertEqual(stats.prompt_mass, 100.0)
        self.assertEqual(stats.generated_mass, 0.0)
        self.assertEqual(stats.coverage, 100.0)

    def test_captured_weights(self):
        model = init_model(SMALL, Rng(2)).eval()
        layout = SequenceLayout(prefix_len=6, gen_len=40)
        tokens = torch.from_numpy(Rng(3).integers(0, SMALL.vocab_size, size=(3, layout.total)))
        full = forward(model, tokens, causal_full_mask(layout), capture_attention=True).attention_weights
        stats = attention_decomposition(full, layout, w=8)
        self.assertEqual(stats.n_queries, layout.total - layout.prefix_len - 8)
        self.assertLess(stats.identity_gap(), 1e-9)
        self.assertTrue(0.0 < stats.local_w_over_gen < 100.0)
        self.assertTrue(math.isclose(stats.prompt_mass + stats.generated_mass, 100.0, abs_tol=1e-9))

        windowed = forward(model, tokens, hybrid_mask(layout, WindowSpec.bounded(8)), capture_attention=True).attention_weights
        kept = attention_decomposition(windowed, layout, w=8)
        self.assertTrue(math.isclose(kept.local_w_over_gen, 100.0, abs_tol=1e-4))
        self.assertTrue(math.isclose(kept.coverage, 100.0, abs_tol=1e-4))

    def test_layer_weights(self):
        layout = SequenceLayout(prefix_len=1, gen_len=3)
        prompt_only = torch.zeros(1, 4, 4)
        prompt_only[..., 0] = 1.0
        self_only = torch.eye(4).unsqueeze(0)
        stats = attention_decomposition([prompt_only, self_only], layout, w=1, layer_weights=[3.0, 1.0])
        self.assertTrue(math.isclose(stats.prompt_mass, 75.0, abs_tol=1e-9))

    def test_errors(self):
        layout = SequenceLayout(prefix_len=2, gen_len=3)
        weights = torch.eye(5).unsqueeze(0)
        with self.assertRaises(ValueError):
            attention_decomposition([], layout, w=1)
        with self.assertRaises(ValueError):
            attention_decomposition([weights], layout, w=3)
        with self.assertRaises(ValueError):
            attention_decomposition([torch.eye(4).unsqueeze(0)], layout, w=1)
        with self.assertRaises(ValueError):
            attention_decomposition([weights], layout, w=1, layer_weights=[1.0, 2.0])


class TestCoverage(unittest.TestCase):
    def test_identity(self):
        self.assertTrue(math.isclose(coverage(60.0, 40.0, 50.0), 80.0))
        stats = AttentionStats.from_components(60.0, 40.0, 50.0, window_used=4)
        self.assertEqual(stats.as_row("demo")["coverage"], 80.0)
        self.assertEqual(set(stats.as_row()), set(gl.ATTENTION_STATS_COLUMNS))


if __name__ == "__main__":
    unittest.main()
