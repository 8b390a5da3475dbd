"""
Tests for the synthetic task, teacher pretraining, student adaptation and the
ablation runner, all on the tiny bundled configuration.
"""

import math
import os
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from hwattn.adapt.distill import DistillConfig
from hwattn.adapt.harness import (
    AblationGrid,
    AblationSetup,
    adapt_student,
    build_tables,
    entropy_rate,
    generate_dataset,
    pretrain_teacher,
    run_ablations,
    sample_sequences,
    summarize_ablations,
    unigram_nll,
)
from hwattn.adapt.schedule import CurriculumSchedule
from hwattn.engine.numerics import Rng
from hwattn.run import Global as gl
from hwattn.run.exceptions import ConfigError
from hwattn.run.run_config import RunConfig

TINY = RunConfig().from_file(gl.CONFIGS_DIR / "tiny.cfg")


class TestSyntheticTask(unittest.TestCase):
    def test_deterministic_and_shaped(self):
        a = generate_dataset(TINY.task, Rng(0).child("data"))
        b = generate_dataset(TINY.task, Rng(0).child("data"))
        self.assertTrue(np.array_equal(a.train, b.train))
        self.assertTrue(np.array_equal(a.valid, b.valid))
        self.assertEqual(a.train.shape, (TINY.task.n_train, TINY.task.total_len))
        self.assertEqual(a.valid.shape, (TINY.task.n_valid, TINY.task.total_len))
        other = generate_dataset(TINY.task, Rng(1).child("data"))
        self.assertFalse(np.array_equal(a.train, other.train))

    def test_prefix_carries_style(self):
        data = generate_dataset(TINY.task, Rng(0))
        alphabet = TINY.task.alphabet_size
        self.assertTrue(np.array_equal(data.train[:, 0], alphabet + data.train_styles))
        self.assertTrue((data.train[:, 1:] < alphabet).all())

    def test_transition_rows_are_distributions(self):
        tables = generate_dataset(TINY.task, Rng(0)).tables
        self.assertTrue(np.allclose(tables.transitions.sum(axis=-1), 1.0))
        self.assertGreater(tables.transitions.min(), 0.0)

    def test_entropy_rate_below_unigram(self):
        data = generate_dataset(TINY.task, Rng(0))
        h = entropy_rate(data.tables)
        self.assertGreater(h, 0.0)
        self.assertLess(h, math.log(TINY.task.branching) + 0.5)
        self.assertLess(h, unigram_nll(data))

    def test_noise_free_streams_follow_the_table(self):
        spec = replace(TINY.task, noise=0.0, transition_order=1)
        data = generate_dataset(spec, Rng(0))
        probs = data.tables.transitions
        self.assertTrue(((probs > 0).sum(axis=-1) == spec.branching).all())
        p = spec.prefix_len
        for seqs, styles in ((data.train, data.train_styles), (data.valid, data.valid_styles)):
            # order 1: the context is the previous symbol
            observed = probs[styles[:, None], seqs[:, p - 1 : -1], seqs[:, p:]]
            self.assertGreater(observed.min(), 0.0)

    def test_empirical_transitions_match_table(self):
        spec = replace(
            TINY.task, vocab_size=10, n_styles=2, prefix_len=4, n_style_tokens=2, seq_len=100, transition_order=1
        ).validate()
        rng = Rng(3)
        tables = build_tables(spec, rng)
        styles = np.arange(2000) % spec.n_styles
        seqs = sample_sequences(spec, tables, styles, rng.child("sequences"))
        p = spec.prefix_len
        counts = np.zeros_like(tables.transitions)
        np.add.at(counts, (np.repeat(styles, spec.seq_len), seqs[:, p - 1 : -1].ravel(), seqs[:, p:].ravel()), 1)
        self.assertEqual(int(counts.sum()), 2000 * 100)
        expected = counts.sum(axis=-1, keepdims=True) * tables.transitions
        total_variation = 0.5 * np.abs(counts - expected).sum() / counts.sum()
        self.assertLessEqual(total_variation, 0.02)

    def test_bad_task(self):
        with self.assertRaises(ConfigError):
            replace(TINY.task, n_style_tokens=TINY.task.prefix_len + 1).validate()
        with self.assertRaises(ConfigError):
            replace(TINY.task, noise=1.5).validate()


class TestTraining(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.dir = Path(cls.tmp.name)
        cls.train = replace(TINY.train, teacher_steps=60)
        cls.teacher = pretrain_teacher(
            TINY.task,
            TINY.model,
            cls.train.teacher_steps,
            Rng(TINY.seed),
            cls.train,
            checkpoint_path=cls.dir / gl.TEACHER_CKPT,
            log_path=cls.dir / gl.PRETRAIN_LOG_CSV,
        )

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_teacher_learns(self):
        self.assertLess(self.teacher.valid_nll, math.log(TINY.model.vocab_size))
        self.assertTrue(self.teacher.checkpoint.exists())
        log = pd.read_csv(self.dir / gl.PRETRAIN_LOG_CSV)
        self.assertEqual(list(log.columns), ["step", "train_loss", "valid_nll", "token_acc"])
        self.assertEqual(int(log["step"].iloc[-1]), 60)

    def test_zero_pretrain_steps(self):
        with self.assertRaises(ConfigError):
            pretrain_teacher(TINY.task, TINY.model, 0, Rng(0), TINY.train)

    def test_task_must_fit_model(self):
        with self.assertRaises(ConfigError):
            pretrain_teacher(TINY.task, replace(TINY.model, vocab_size=8), 1, Rng(0), TINY.train)

    def test_sw_only_evaluates_truncated_teacher(self):
        result = adapt_student(self.teacher.model, TINY.schedule, TINY.distill, 0, Rng(0), self.teacher.dataset, self.train)
        self.assertEqual(len(result.loss_curve), 0)
        self.assertTrue(math.isfinite(result.final_nll))
        again = adapt_student(self.teacher.checkpoint, TINY.schedule, TINY.distill, 0, Rng(1), self.teacher.dataset, self.train)
        self.assertEqual(result.final_nll, again.final_nll)

    def test_adaptation_curve(self):
        steps = self.train.adapt_steps
        result = adapt_student(
            self.teacher.model,
            TINY.schedule,
            DistillConfig(),
            steps,
            Rng(0),
            self.teacher.dataset,
            self.train,
            checkpoint_path=self.dir / gl.STUDENT_CKPT,
            loss_csv_path=self.dir / gl.LOSS_CURVE_CSV,
        )
        curve = pd.read_csv(self.dir / gl.LOSS_CURVE_CSV)
        self.assertEqual(list(curve.columns), gl.LOSS_CURVE_COLUMNS)
        self.assertEqual(len(curve), steps)
        self.assertEqual(int(curve["window"].iloc[0]), TINY.schedule.w_start)
        self.assertEqual(int(curve["window"].iloc[-1]), TINY.schedule.w_target)
        self.assertTrue(math.isinf(curve["tau"].iloc[-1]))
        self.assertTrue((curve["window"].diff().dropna() <= 0).all())
        self.assertTrue(result.checkpoint.exists())

    def test_adaptation_is_deterministic(self):
        run = lambda: adapt_student(  # noqa: E731
            self.teacher.model, TINY.schedule, DistillConfig(), 4, Rng(3), self.teacher.dataset, self.train
        ).loss_curve
        pd.testing.assert_frame_equal(run(), run())

    def test_teacher_left_untouched(self):
        before = {k: v.clone() for k, v in self.teacher.model.state_dict().items()}
        adapt_student(self.teacher.model, TINY.schedule, DistillConfig(), 3, Rng(0), self.teacher.dataset, self.train)
        for name, tensor in self.teacher.model.state_dict().items():
            self.assertTrue(bool((tensor == before[name]).all()), name)

    def test_smoke_grid(self):
        setup = AblationSetup(
            teacher_ckpt=str(self.teacher.checkpoint),
            spec=TINY.task,
            data_seed=TINY.seed,
            sched=TINY.schedule,
            distill=TINY.distill,
            train=replace(self.train, adapt_steps=4),
        )
        table = run_ablations(AblationGrid.named("smoke"), setup)
        self.assertEqual(len(table), 4)
        self.assertTrue((table["status"] == "ok").all())
        self.assertTrue(set(gl.ABLATION_REPORT_COLUMNS) <= set(table.columns))
        sw_only = table[table["arm"] == "sw-only"]
        self.assertTrue((sw_only["steps"] == 0).all())
        # both sw-only rows evaluate the same truncated teacher
        self.assertEqual(sw_only["final_nll"].nunique(), 1)
        summary, checks = summarize_ablations(table)
        self.assertEqual(len(summary), 4)
        self.assertIsNone(checks["ce_kl_best"])
        self.assertIn(checks["adapted_beats_sw_only"], (True, False))


class TestConvergedTeacher(unittest.TestCase):
    """Noise-free first-order task, trained long enough to approach the entropy rate."""

    @classmethod
    def setUpClass(cls):
        cls.spec = replace(TINY.task, noise=0.0, transition_order=1, n_train=512, n_valid=64)
        cls.train = replace(TINY.train, teacher_steps=1200, batch_size=16, eval_interval=300, eval_batch_size=64)
        cls.teacher = pretrain_teacher(cls.spec, TINY.model, cls.train.teacher_steps, Rng(TINY.seed), cls.train)

    def test_valid_nll_near_entropy_rate(self):
        self.assertLess(self.teacher.valid_nll, self.teacher.unigram_nll)
        self.assertLessEqual(self.teacher.valid_nll / self.teacher.entropy_rate, 1.10)

    def test_window_covering_stream_keeps_teacher_nll(self):
        seq_len = self.spec.seq_len
        sched = CurriculumSchedule(w_start=2 * seq_len, w_target=seq_len, t_c=10)
        untouched = adapt_student(self.teacher.model, sched, DistillConfig(), 0, Rng(0), self.teacher.dataset, self.train)
        self.assertAlmostEqual(untouched.final_nll, self.teacher.valid_nll, places=9)
        gentle = replace(self.train, adapt_lr=1e-4)
        adapted = adapt_student(self.teacher.model, sched, DistillConfig(), 20, Rng(0), self.teacher.dataset, gentle)
        self.assertEqual(len(adapted.loss_curve), 20)
        self.assertTrue((adapted.loss_curve["window"] >= seq_len).all())
        self.assertLessEqual(abs(adapted.final_nll - self.teacher.valid_nll), 0.03 * self.teacher.valid_nll)


class TestAblationGrid(unittest.TestCase):
    def test_default_grid(self):
        grid = AblationGrid.named("default")
        self.assertEqual(len(grid.cells()), 24)
        self.assertEqual(grid.cells()[0], ("sw-only", "direct", 0))

    def test_unknown(self):
        with self.assertRaises(ConfigError):
            AblationGrid.named("huge")
        with self.assertRaises(ConfigError):
            AblationGrid(("ce+kl", "mystery"), ("direct",), (0,)).validate()

    def test_summary_checks(self):
        rows = []
        for arm, nll in (("sw-only", 3.0), ("ce-only", 2.2), ("kl-only", 2.4), ("ce+kl", 2.0)):
            for strategy, bump in (("direct", 0.1), ("curriculum", 0.0)):
                for seed in (0, 1):
                    rows.append(
                        {"arm": arm, "strategy": strategy, "seed": seed, "final_nll": nll + bump + 0.01 * seed,
                         "token_acc": 0.5, "steps": 0 if arm == "sw-only" else 10, "status": "ok"}
                    )
        rows.append({"arm": "ce+kl", "strategy": "direct", "seed": 2, "final_nll": math.nan,
                     "token_acc": math.nan, "steps": 10, "status": "failed"})
        summary, checks = summarize_ablations(pd.DataFrame(rows))
        self.assertEqual(checks, {"ce_kl_best": True, "curriculum_beats_direct": True, "adapted_beats_sw_only": True})
        row = summary[(summary["arm"] == "ce+kl") & (summary["strategy"] == "direct")].iloc[0]
        self.assertEqual(int(row["n"]), 2)
        self.assertTrue(math.isclose(row["mean_nll"], 2.105, abs_tol=1e-9))


@unittest.skipUnless(os.environ.get("HWATTN_SLOW"), "set HWATTN_SLOW=1 for the toy-scale acceptance run")
class TestToyAcceptance(unittest.TestCase):
    def test_adapted_student_close_to_teacher(self):
        cfg = RunConfig().from_file(gl.DEFAULT_CONFIG)
        teacher = pretrain_teacher(cfg.task, cfg.model, cfg.train.teacher_steps, Rng(cfg.seed), cfg.train)
        self.assertLess(teacher.valid_nll, teacher.unigram_nll)
        gaps = []
        for seed in (0, 1, 2):
            sw_only = adapt_student(teacher.model, cfg.schedule, cfg.distill, 0, Rng(seed), teacher.dataset, cfg.train)
            adapted = adapt_student(
                teacher.model, cfg.schedule, cfg.distill, cfg.train.adapt_steps, Rng(seed).child("adapt"), teacher.dataset, cfg.train
            )
            self.assertLess(adapted.final_nll, sw_only.final_nll)
            gaps.append(adapted.final_nll - teacher.valid_nll)
        self.assertLess(float(np.mean(gaps)), 0.05 * teacher.valid_nll)


if __name__ == "__main__":
    unittest.main()
