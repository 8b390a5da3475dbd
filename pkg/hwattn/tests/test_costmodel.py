"""
Tests for the analytical KV-cache and FLOPs model against the published presets.
"""

import math
import unittest

from hwattn.analysis.costmodel import (
    attention_flops,
    constant_flops,
    cost_report,
    derive_prefix_len,
    flops_per_step,
    kv_cost,
    preset_report,
    published_summary,
    visible_len_at,
)
from hwattn.engine.masking import WindowSpec
from hwattn.engine.model import ModelConfig
from hwattn.run import Global as gl

TOY = ModelConfig()


class TestPublishedNumbers(unittest.TestCase):
    def test_reductions_from_mb(self):
        for name, expected in (("cosyvoice2-10s", 49.9), ("indextts-10s", 66.2), ("sparktts-10s", 60.5)):
            summary = published_summary(name)
            self.assertTrue(math.isclose(summary["reduction_pct"], expected, abs_tol=0.1), f"{name}: {summary['reduction_pct']}")

    def test_speedups_from_gflops(self):
        for name, expected in (("cosyvoice2-10s", 1.55), ("indextts-10s", 1.89), ("sparktts-10s", 1.51)):
            summary = published_summary(name)
            self.assertTrue(math.isclose(summary["speedup"], expected, abs_tol=0.02), f"{name}: {summary['speedup']}")

    def test_implied_prefix_matches_presets(self):
        for name in gl.PRESETS:
            implied = published_summary(name)["implied_prefix_len"]
            self.assertLessEqual(abs(implied - gl.get_preset(name)["prefix_len"]), 1.0, name)

    def test_preset_reductions(self):
        for name, published in gl.PUBLISHED_COST.items():
            report = preset_report(name)
            self.assertLessEqual(abs(report.reduction_pct - published["reduction_pct"]), 0.2, name)

    def test_derive_prefix_len(self):
        # (p + 32) / (p + 250) = 0.5 gives p = 186
        self.assertTrue(math.isclose(derive_prefix_len(10.0, 5.0, 250, 32), 186.0))


class TestCostReport(unittest.TestCase):
    def test_visible_len(self):
        w = WindowSpec.bounded(32)
        self.assertEqual(visible_len_at(80, 1, w), 81)
        self.assertEqual(visible_len_at(80, 33, w), 113)
        self.assertEqual(visible_len_at(80, 250, w), 113)
        self.assertEqual(visible_len_at(80, 250, WindowSpec.unbounded()), 330)

    def test_flops_split(self):
        self.assertEqual(flops_per_step(TOY, 100), constant_flops(TOY) + attention_flops(TOY, 100))
        self.assertEqual(flops_per_step(TOY, 100, include_constant=False), 4 * TOY.n_layers * TOY.d_model * 100)

    def test_full_equals_windowed_before_window_binds(self):
        report = cost_report(TOY, 24, 20, WindowSpec.bounded(32))
        self.assertEqual(report.full_kv_bytes, report.windowed_kv_bytes)
        self.assertEqual(report.reduction_pct, 0.0)
        self.assertEqual(report.flops_speedup, 1.0)

    def test_windowed_table(self):
        w = WindowSpec.bounded(32)
        report = cost_report(TOY, 80, 250, w)
        steps = report.steps
        self.assertEqual(len(steps), 250)
        self.assertEqual(int(steps["windowed_kv_bytes"].iloc[-1]), kv_cost(TOY, 80, 250, w))
        self.assertEqual(steps["windowed_kv_bytes"].iloc[40:].nunique(), 1)
        self.assertTrue((steps["full_kv_bytes"].diff().dropna() > 0).all())
        self.assertTrue((steps["cum_full_flops"] >= steps["cum_windowed_flops"]).all())
        self.assertGreater(report.flops_speedup, 1.0)
        self.assertTrue(math.isclose(report.reduction_pct, 100.0 * (1 - 112 / 330)))
        summary = report.summary()
        self.assertEqual(summary["window"], "32")
        self.assertTrue(math.isclose(summary["full_kv_mb"], report.full_kv_bytes / 1024**2))


if __name__ == "__main__":
    unittest.main()
