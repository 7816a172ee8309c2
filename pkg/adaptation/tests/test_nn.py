import json
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from adaptation import tensor as T
from adaptation.exceptions import ModelError, NumericError, OptimizerError
from adaptation.nn import (
    NETWORK_NAMES, Direction, Optimizer, Parameter, init_model, load_checkpoint,
    make_optimizers, save_checkpoint,
)


class InitModelTestCase(SimpleTestCase):
    """Network construction."""

    def test_same_seed_gives_identical_parameters(self):
        """Test init is bit-identical for a fixed seed."""
        first = init_model(4, 3, 5, 2, seed=7).state_arrays()
        second = init_model(4, 3, 5, 2, seed=7).state_arrays()
        self.assertEqual(first.keys(), second.keys())
        for name in first:
            np.testing.assert_array_equal(first[name], second[name])

    def test_auxiliary_classifiers_differ(self):
        """Test C1 and C2 start from different parameters."""
        model = init_model(4, 3, 5, 2, seed=7)
        w1 = model.classifier_aux1.layers[0].weight.values
        w2 = model.classifier_aux2.layers[0].weight.values
        self.assertFalse(np.array_equal(w1, w2))

    def test_initial_weights_are_bounded(self):
        model = init_model(9, 3, 5, 2, seed=1)
        weight = model.generator.layers[0].weight.values
        self.assertLessEqual(np.abs(weight).max(), np.sqrt(1.0 / 9))

    def test_classifier_rows_sum_to_one(self):
        """Test a zero input gives probability rows summing to one."""
        model = init_model(4, 3, 5, 6, seed=0)
        for name in ('classifier', 'classifier_aux1', 'classifier_aux2'):
            probs = model.predict_proba(np.zeros((5, 4)), name).values
            self.assertEqual(probs.shape, (5, 6))
            np.testing.assert_allclose(probs.sum(axis=1), np.ones(5), atol=1e-12)

    def test_discriminator_outputs_probabilities(self):
        model = init_model(4, 3, 5, 2, seed=0)
        out = model.discriminator(model.features(np.ones((6, 4)))).values
        self.assertEqual(out.shape, (6, 1))
        self.assertTrue(np.all((out > 0) & (out < 1)))

    def test_generator_features_are_bounded(self):
        model = init_model(4, 3, 5, 2, seed=0)
        features = model.features(np.random.default_rng(0).normal(scale=1e3, size=(20, 4))).values
        self.assertTrue(np.all(np.abs(features) <= 1.0))

    def test_assigning_non_finite_values(self):
        param = Parameter(np.zeros((2, 2)), 'w')
        with self.assertRaises(NumericError):
            param.assign([[0.0, np.inf], [0.0, 0.0]])
        np.testing.assert_array_equal(param.values, np.zeros((2, 2)))

    def test_non_positive_dimension(self):
        with self.assertRaises(ModelError):
            init_model(4, 0, 5, 2, seed=0)

    def test_dropout_only_when_training(self):
        model = init_model(4, 3, 8, 2, seed=0, dropout=0.5)
        features = model.features(np.ones((3, 4)))
        np.testing.assert_array_equal(model.discriminator(features).values,
                                      model.discriminator(features).values)
        self.assertEqual(model.discriminator(features, training=True).shape, (3, 1))

    def test_unknown_network(self):
        with self.assertRaises(ModelError):
            init_model(4, 3, 5, 2, seed=0).network('critic')


class OptimizerTestCase(SimpleTestCase):
    """Single optimizer steps."""

    def param(self, value=1.0, grad=0.5):
        p = Parameter([value], name='p')
        p.grad = np.array([grad])
        return p

    def test_sgd_minimize(self):
        """Test SGD lr=0.1 moves 1.0 against a 0.5 gradient to 0.95."""
        p = self.param()
        Optimizer([p], kind='sgd', lr=0.1, momentum=0.0).step(Direction.MINIMIZE)
        self.assertAlmostEqual(p.values[0], 0.95, places=12)

    def test_sgd_maximize(self):
        p = self.param()
        Optimizer([p], kind='sgd', lr=0.1, momentum=0.0).step('maximize')
        self.assertAlmostEqual(p.values[0], 1.05, places=12)

    def test_adam_first_step_is_about_lr(self):
        """Test the first bias-corrected Adam step is close to lr."""
        p = self.param()
        Optimizer([p], kind='adam', lr=0.001).step(Direction.MINIMIZE)
        self.assertAlmostEqual(1.0 - p.values[0], 0.001, places=6)

    def test_maximize_then_minimize_returns(self):
        """Test ascent then descent with the same gradient is a round trip."""
        p = self.param(value=0.3, grad=-0.7)
        optimizer = Optimizer([p], kind='sgd', lr=0.05, momentum=0.0)
        optimizer.step(Direction.MAXIMIZE)
        p.grad = np.array([-0.7])
        optimizer.step(Direction.MINIMIZE)
        self.assertAlmostEqual(p.values[0], 0.3, delta=1e-12)

    def test_update_only_depends_on_gradient(self):
        """Test two params with the same gradient move by the same amount."""
        a, b = self.param(value=1.0), self.param(value=-4.0)
        Optimizer([a, b], kind='sgd', lr=0.1, momentum=0.0).step()
        self.assertAlmostEqual(1.0 - a.values[0], -4.0 - b.values[0], places=12)

    def test_weight_decay_shrinks_in_both_directions(self):
        for direction in Direction:
            p = self.param(value=2.0, grad=0.0)
            Optimizer([p], kind='sgd', lr=0.1, momentum=0.0, weight_decay=0.5).step(direction)
            self.assertAlmostEqual(p.values[0], 1.9, places=12)

    def test_missing_gradient(self):
        p = Parameter([1.0], name='p')
        with self.assertRaises(OptimizerError):
            Optimizer([p], kind='sgd', lr=0.1).step()

    def test_non_finite_gradient(self):
        p = self.param(grad=np.nan)
        with self.assertRaises(OptimizerError):
            Optimizer([p], kind='sgd', lr=0.1).step()
        self.assertEqual(p.values[0], 1.0)

    def test_step_clears_gradients(self):
        p = self.param()
        Optimizer([p], kind='sgd', lr=0.1).step()
        self.assertIsNone(p.grad)

    def test_unknown_kind(self):
        with self.assertRaises(OptimizerError):
            Optimizer([], kind='rmsprop')

    def test_unwatched_network_does_not_move(self):
        """Test only the watched player changes after a step."""
        model = init_model(2, 2, 3, 2, seed=0)
        optimizers = make_optimizers(model, kind='sgd', lr=0.1, weight_decay=0.0)
        self.assertEqual(set(optimizers), set(NETWORK_NAMES))
        before = {name: values.copy() for name, values in model.state_arrays().items()}

        tape = T.Tape()
        tape.watch(*model.parameters('discriminator'))
        out = model.discriminator(model.features(np.ones((4, 2))))
        tape.backward(T.sum(out))
        optimizers['discriminator'].step(Direction.MAXIMIZE)

        after = model.state_arrays()
        for name, values in before.items():
            if name.startswith('discriminator'):
                continue
            np.testing.assert_array_equal(values, after[name])
        self.assertFalse(np.array_equal(before['discriminator.1.bias'],
                                        after['discriminator.1.bias']))


class CheckpointTestCase(SimpleTestCase):
    """Checkpoint save/load."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = Path(self.tmp.name) / 'checkpoint.npz'

    def test_round_trip(self):
        """Test a saved model loads back with identical parameters and dims."""
        model = init_model(5, 4, 6, 3, seed=11)
        save_checkpoint(model, self.path)
        loaded = load_checkpoint(self.path)
        self.assertEqual(loaded.dims(), model.dims())
        for name, values in model.state_arrays().items():
            np.testing.assert_array_equal(values, loaded.state_arrays()[name])

    def test_rejects_foreign_file(self):
        np.savez(self.path, weights=np.zeros(3))
        with self.assertRaises(ModelError):
            load_checkpoint(self.path)

    def test_rejects_garbage(self):
        self.path.write_bytes(b'not a checkpoint')
        with self.assertRaises(ModelError):
            load_checkpoint(self.path)

    def rewrite(self, **changes):
        with np.load(self.path) as archive:
            arrays = {name: archive[name] for name in archive.files}
        arrays.update(changes)
        np.savez(self.path, **arrays)

    def test_rejects_other_versions(self):
        save_checkpoint(init_model(2, 2, 3, 2, seed=0), self.path)
        with np.load(self.path) as archive:
            meta = json.loads(str(archive['__meta__']))
        meta['version'] = 1
        self.rewrite(__meta__=np.array(json.dumps(meta)))
        with self.assertRaises(ModelError):
            load_checkpoint(self.path)

    def test_rejects_non_finite_parameters(self):
        model = init_model(2, 2, 3, 2, seed=0)
        save_checkpoint(model, self.path)
        poisoned = np.full(model.generator.layers[0].weight.shape, np.nan)
        self.rewrite(**{'generator.0.weight': poisoned})
        with self.assertRaises(ModelError):
            load_checkpoint(self.path)
