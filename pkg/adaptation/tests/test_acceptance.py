"""
End-to-end behaviour on the toy two-moons task.

These runs take minutes, so they are tagged ``slow`` and skipped by the
default test run. Use ``./runtest.sh --slow`` to include them.
"""
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase, tag

from adaptation.experiments import apply_overrides, read_metrics, run_experiment, validate_config

SEEDS = range(5)


def toy_config(output_dir, seed, n_source=400, n_target=400):
    return {
        'dataset': {'generator': 'two_moons', 'n_source': n_source, 'n_target': n_target,
                    'rotation_degrees': 30, 'noise_std': 0.1},
        'model': {'feature_dim': 16, 'hidden_dim': 64},
        'optimizer': {'kind': 'adam', 'lr': 0.005, 'weight_decay': 0.0005},
        'training': {'epochs': 100, 'warmup_epochs': 5, 'batch_size': 64},
        'seed': seed,
        'output_dir': str(output_dir),
    }


@tag('slow')
class ToyAdaptationTestCase(SimpleTestCase):
    """Directional checks of adaptation, weighting and monitoring."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)

    def run_seeds(self, name, overrides=(), **sizes):
        """Mean final target accuracy of one setting over the seeds."""
        scores = []
        for seed in SEEDS:
            out = self.dir / name / f'seed-{seed}'
            raw = apply_overrides(toy_config(out, seed, **sizes), overrides)
            scores.append(run_experiment(validate_config(raw))['final_target_accuracy'])
        return float(np.mean(scores))

    def test_warmup_learns_the_source(self):
        """Test warm-up alone separates a low-noise source above 95%."""
        out = self.dir / 'warmup'
        raw = apply_overrides(toy_config(out, 0, n_source=200, n_target=200),
                              ['dataset.noise_std=0.05', 'training.epochs=20', 'training.warmup_epochs=20'])
        summary = run_experiment(validate_config(raw))
        self.assertGreater(summary['final_source_accuracy'], 0.95)

    def test_adaptation_beats_source_only(self):
        source_only = self.run_seeds('source-only', ['training.warmup_epochs=100'])
        adapted = self.run_seeds('dwl')
        self.assertGreaterEqual(adapted - source_only, 0.10)

    def test_dynamic_tau_keeps_up_with_best_static(self):
        dynamic = self.run_seeds('dynamic')
        static = [
            self.run_seeds(f'static-{tau}', ['training.weighting_mode=static', f'training.tau_fixed={tau}'])
            for tau in (0.1, 0.3, 0.5, 0.7, 0.9)
        ]
        self.assertGreaterEqual(dynamic, max(static) - 0.01)

    def test_sample_weighting_helps_imbalanced_domains(self):
        sizes = {'n_source': 200, 'n_target': 800}
        weighted = self.run_seeds('weighting-on', **sizes)
        unweighted = self.run_seeds('weighting-off', ['training.sample_weighting=false'], **sizes)
        self.assertGreaterEqual(weighted, unweighted)

    def test_alignment_and_discriminability_improve_together(self):
        """Test MMD falls and J(W) rises between the first and last quarter of training."""
        out = self.dir / 'monitor'
        run_experiment(validate_config(toy_config(out, 0)))
        rows = read_metrics(out / 'metrics.csv')
        quarter = len(rows) // 4
        first, last = rows[:quarter], rows[-quarter:]
        self.assertLess(np.mean([r['mmd_raw'] for r in last]), np.mean([r['mmd_raw'] for r in first]))
        self.assertGreater(np.mean([r['j_raw'] for r in last]), np.mean([r['j_raw'] for r in first]))

    def test_dynamic_tau_at_least_matches_fixed_half_on_imbalanced_domains(self):
        sizes = {'n_source': 200, 'n_target': 800}
        dynamic = self.run_seeds('imbalanced-dynamic', **sizes)
        static = self.run_seeds('imbalanced-static',
                                ['training.weighting_mode=static', 'training.tau_fixed=0.5'], **sizes)
        self.assertGreaterEqual(dynamic, static)
