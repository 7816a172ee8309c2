"""
Dynamic weighted learning: the three losses and the alternating minimax schedule.

Per batch, after warm-up, the trainer runs five sub-steps:

    A  minimize L_ce                    over G, C, C1, C2
    B  maximize tau * L_da              over D        (G fixed)
    C  minimize tau * L_gen             over G        (D fixed)
    D  maximize (1-tau) * L_cd - L_ce   over C1, C2   (G, C fixed)
    E  minimize (1-tau) * L_cd          over G, C     (C1, C2 fixed)

L_gen is L_da with the domain labels swapped: G pulls source features toward
"target" and target features toward "source".

Warm-up epochs run sub-step A only. tau is refreshed once per epoch from the
MMD and J(W) measured on a fixed evaluation subsample; warm-up measurements
only seed the normalisation extrema.
"""
import enum
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.metrics import confusion_matrix

from . import tensor as T
from .data import WeightingScheme, batch_iter
from .exceptions import (
    DataError, EstimatorError, NumericError, OptimizerError, TrainingDivergedError,
)
from .metrics import INITIAL_TAU, LDA_EPS, BalanceState, discriminability, mmd, update_and_balance
from .nn import EPS_PROB, Direction

logger = logging.getLogger(__name__)

SUBSTEPS = ('A', 'B', 'C', 'D', 'E')
CLASSIFIERS = ('classifier', 'classifier_aux1', 'classifier_aux2')


class WeightingMode(str, enum.Enum):
    DYNAMIC = 'dynamic'
    STATIC = 'static'
    NONE_CD = 'none-cd'
    NONE_DA = 'none-da'


# Losses over probability tensors

def _clamped(probs):
    return T.clip(probs, EPS_PROB, 1.0 - EPS_PROB)


def cross_entropy(probs, labels):
    """Mean negative log-likelihood of the true class."""
    n, k = probs.shape
    if n == 0:
        raise DataError('cross-entropy needs at least one row')
    onehot = np.zeros((n, k))
    onehot[np.arange(n), np.asarray(labels, dtype=np.int64)] = 1.0
    log_likelihood = T.sum(T.log(_clamped(probs)) * T.constant(onehot))
    return log_likelihood * (-1.0 / n)


def alignment_loss(d_source, d_target):
    """mean log D(source) + mean log(1 - D(target))."""
    if d_source.size == 0 or d_target.size == 0:
        raise DataError('alignment loss needs both domains')
    ones = T.constant(np.ones(d_target.shape))
    return T.mean(T.log(_clamped(d_source))) + T.mean(T.log(ones - _clamped(d_target)))


def generator_alignment_loss(d_source, d_target):
    """-mean log(1 - D(source)) - mean log D(target)."""
    if d_source.size == 0 or d_target.size == 0:
        raise DataError('alignment loss needs both domains')
    ones = T.constant(np.ones(d_source.shape))
    return -(T.mean(T.log(ones - _clamped(d_source))) + T.mean(T.log(_clamped(d_target))))


def discrepancy_loss(probs, probs_aux1, probs_aux2):
    """Mean over rows of |C1-C2|_1 + |C-C1|_1 + |C-C2|_1."""
    n = probs.shape[0]
    if n == 0:
        raise DataError('discrepancy loss needs target rows')
    total = (T.l1_norm(probs_aux1 - probs_aux2)
             + T.l1_norm(probs - probs_aux1)
             + T.l1_norm(probs - probs_aux2))
    return total * (1.0 / n)


# Losses over a model and a batch

def loss_ce(model, batch, classifier='classifier'):
    if len(batch.source_labels) == 0:
        raise DataError('empty source batch')
    probs = model.predict_proba(T.constant(batch.source_inputs), classifier)
    return cross_entropy(probs, batch.source_labels)


def _domain_outputs(model, batch, training):
    if len(batch.source_inputs) == 0 or len(batch.target_inputs) == 0:
        raise DataError('alignment loss needs both domains')
    d_source = model.discriminator(model.features(T.constant(batch.source_inputs)), training=training)
    d_target = model.discriminator(model.features(T.constant(batch.target_inputs)), training=training)
    return d_source, d_target


def loss_da(model, batch, training=False):
    return alignment_loss(*_domain_outputs(model, batch, training))


def loss_gen(model, batch, training=False):
    return generator_alignment_loss(*_domain_outputs(model, batch, training))


def loss_cd(model, batch):
    if len(batch.target_inputs) == 0:
        raise DataError('empty target batch')
    features = model.features(T.constant(batch.target_inputs))
    return discrepancy_loss(*(model.network(name)(features) for name in CLASSIFIERS))


@dataclass(frozen=True)
class LossBundle:
    ce: float
    da: float
    cd: float
    tau: float
    total: float

    @classmethod
    def combine(cls, ce, da, cd, tau):
        return cls(ce=ce, da=da, cd=cd, tau=tau, total=ce + tau * da + (1.0 - tau) * cd)


def discrepancy_gain(model, batch, tau):
    """(1 - tau) * L_cd - L_ce(C1) - L_ce(C2), the quantity C1 and C2 ascend.

    Returns the gain and the L_cd term it was built from.
    """
    cd = loss_cd(model, batch)
    source_features = model.features(T.constant(batch.source_inputs))
    ce_aux = (cross_entropy(model.classifier_aux1(source_features), batch.source_labels)
              + cross_entropy(model.classifier_aux2(source_features), batch.source_labels))
    return cd * (1.0 - tau) - ce_aux, cd


def objective(model, batch, tau):
    """The full weighted objective ce + tau * da + (1 - tau) * cd as one tensor."""
    return loss_ce(model, batch) + tau * loss_da(model, batch) + (1.0 - tau) * loss_cd(model, batch)


# Evaluation

def evaluate(model, features, labels):
    """Fraction of rows whose main-classifier arg-max equals the label."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] == 0:
        raise DataError(f"evaluate needs a non-empty matrix, got shape {features.shape}")
    if labels.shape != (features.shape[0],):
        raise DataError(f"expected {features.shape[0]} labels, got {labels.shape}")
    return float(np.mean(model.predict(features) == labels))


def confusion_counts(model, features, labels, num_classes):
    """Raw K x K counts, rows are true classes and columns predictions."""
    return confusion_matrix(labels, model.predict(features), labels=list(range(num_classes)))


# Training schedule

@dataclass(frozen=True)
class TrainSchedule:
    epochs: int
    warmup_epochs: int = 5
    substeps: tuple = SUBSTEPS

    def __post_init__(self):
        if self.warmup_epochs < 1:
            raise ValueError('warmup_epochs must be at least 1')
        if self.epochs < 1:
            raise ValueError('epochs must be at least 1')

    def is_warmup(self, epoch):
        """Epochs are numbered from 1."""
        return epoch <= self.warmup_epochs


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 100
    warmup_epochs: int = 5
    batch_size: int = 128
    a: float = 0.5
    sample_weighting: bool = True
    weighting_mode: WeightingMode = WeightingMode.DYNAMIC
    tau_fixed: float = 0.5
    tau_smoothing: float = 0.5
    weighting_scheme: WeightingScheme = WeightingScheme.SAMPLING
    eval_subsample: int = 512
    lda_eps: float = LDA_EPS
    divergence_limit: float = 1e6


METRICS_COLUMNS = (
    'epoch', 'phase', 'loss_ce', 'loss_da', 'loss_cd', 'loss_total', 'tau',
    'mmd_raw', 'mmd_normalized', 'j_raw', 'j_normalized',
    'source_accuracy', 'target_accuracy', 'target_error',
)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    phase: str
    loss_ce: float
    loss_da: float
    loss_cd: float
    loss_total: float
    tau: float
    mmd_raw: float
    mmd_normalized: object
    j_raw: float
    j_normalized: object
    source_accuracy: float
    target_accuracy: object
    target_error: object
    wall_time_seconds: float = field(default=0.0, compare=False)

    def as_row(self):
        values = asdict(self)
        return [values[column] for column in METRICS_COLUMNS]


class DwlTrainer:
    """Owns the model, its optimizers and the balance state for one run."""

    def __init__(self, model, optimizers, dataset, config, shuffle_seed=0, eval_seed=0):
        self.model = model
        self.optimizers = optimizers
        self.config = config
        self.schedule = TrainSchedule(config.epochs, config.warmup_epochs)
        self.view = dataset.training_view()
        self.num_classes = dataset.num_classes
        self.batches = batch_iter(self.view, config.batch_size, a=config.a, seed=shuffle_seed,
                                  weighting=config.sample_weighting, scheme=config.weighting_scheme)
        self.weights = self.batches.weights
        self.balance = BalanceState()
        self.tau = INITIAL_TAU

        # Inputs are only rescaled outside training under the input scheme
        w_s, w_t = self.batches.input_scale.source, self.batches.input_scale.target
        self._source_eval = (self.view.source_features * w_s, self.view.source_labels)
        self._target_eval = None
        if dataset.target_labels is not None:
            self._target_eval = (self.view.target_features * w_t, dataset.target_labels)

        # Fixed evaluation rows for the per-epoch MMD and J(W) estimates
        rng = np.random.default_rng(eval_seed)
        source_index = self._sample_index(rng, self.view.n_s)
        target_index = self._sample_index(rng, self.view.n_t)
        self._fixed_source = self.view.source_features[source_index] * w_s
        self._fixed_labels = self.view.source_labels[source_index]
        self._fixed_target = self.view.target_features[target_index] * w_t

    def _sample_index(self, rng, n):
        count = min(self.config.eval_subsample, n)
        return np.sort(rng.permutation(n)[:count])

    def current_tau(self, epoch):
        if self.schedule.is_warmup(epoch):
            return INITIAL_TAU
        mode = WeightingMode(self.config.weighting_mode)
        if mode is WeightingMode.STATIC:
            return float(self.config.tau_fixed)
        if mode is WeightingMode.NONE_CD:
            return 1.0
        if mode is WeightingMode.NONE_DA:
            return 0.0
        return self.tau

    def _guard(self, substep, epoch, batch_no, value):
        if not math.isfinite(value) or abs(value) > self.config.divergence_limit:
            raise TrainingDivergedError(substep, epoch, batch_no, f"loss value {value}")
        return value

    def _run(self, substep, epoch, batch_no, step):
        try:
            value = step()
        except (NumericError, OptimizerError) as e:
            raise TrainingDivergedError(substep, epoch, batch_no, str(e)) from e
        return self._guard(substep, epoch, batch_no, value)

    def _minimize(self, *names):
        for name in names:
            self.optimizers[name].step(Direction.MINIMIZE)

    def _maximize(self, *names):
        for name in names:
            self.optimizers[name].step(Direction.MAXIMIZE)

    # Sub-steps. Each returns the value of the loss it optimised.

    def step_source(self, batch):
        """A: supervised loss on the source for G and all three classifiers."""
        model = self.model
        tape = T.Tape('A')
        tape.watch(*model.parameters('generator', *CLASSIFIERS))
        features = model.features(T.constant(batch.source_inputs))
        losses = [cross_entropy(model.network(name)(features), batch.source_labels)
                  for name in CLASSIFIERS]
        total = losses[0] + losses[1] + losses[2]
        tape.backward(total)
        self._minimize('generator', *CLASSIFIERS)
        self._last_ce = losses[0].item()
        return total.item()

    def step_discriminator(self, batch, tau):
        """B: D ascends tau * L_da."""
        tape = T.Tape('B')
        tape.watch(*self.model.parameters('discriminator'))
        da = loss_da(self.model, batch, training=True)
        tape.backward(da * tau)
        self._maximize('discriminator')
        self._last_da = da.item()
        return da.item()

    def step_align(self, batch, tau):
        """C: G descends tau * L_gen, the label-swapped alignment loss."""
        tape = T.Tape('C')
        tape.watch(*self.model.parameters('generator'))
        gen = loss_gen(self.model, batch, training=True)
        tape.backward(gen * tau)
        self._minimize('generator')
        return gen.item()

    def step_discrepancy_max(self, batch, tau):
        """D: C1, C2 ascend (1 - tau) * L_cd while staying source-accurate."""
        tape = T.Tape('D')
        tape.watch(*self.model.parameters('classifier_aux1', 'classifier_aux2'))
        gain, cd = discrepancy_gain(self.model, batch, tau)
        tape.backward(gain)
        self._maximize('classifier_aux1', 'classifier_aux2')
        self._last_cd = cd.item()
        return gain.item()

    def step_discrepancy_min(self, batch, tau):
        """E: G and C descend (1 - tau) * L_cd."""
        tape = T.Tape('E')
        tape.watch(*self.model.parameters('generator', 'classifier'))
        cd = loss_cd(self.model, batch)
        tape.backward(cd * (1.0 - tau))
        self._minimize('generator', 'classifier')
        return cd.item()

    def _train_batch(self, batch, epoch, batch_no, tau, warmup):
        self._last_ce = self._last_da = self._last_cd = None
        self._run('A', epoch, batch_no, lambda: self.step_source(batch))
        if not warmup:
            if tau > 0.0:
                self._run('B', epoch, batch_no, lambda: self.step_discriminator(batch, tau))
                self._run('C', epoch, batch_no, lambda: self.step_align(batch, tau))
            else:
                logger.debug("tau=0: skipping alignment sub-steps B and C")
            self._run('D', epoch, batch_no, lambda: self.step_discrepancy_max(batch, tau))
            if tau < 1.0:
                self._run('E', epoch, batch_no, lambda: self.step_discrepancy_min(batch, tau))
            else:
                logger.debug("tau=1: skipping discrepancy sub-step E")

        # Monitoring values for whatever the sub-steps did not measure
        if self._last_da is None:
            self._last_da = self._run('monitor', epoch, batch_no, lambda: loss_da(self.model, batch).item())
        if self._last_cd is None:
            self._last_cd = self._run('monitor', epoch, batch_no, lambda: loss_cd(self.model, batch).item())
        return self._last_ce, self._last_da, self._last_cd

    def measure(self):
        """Raw MMD and pooled J(W) on the fixed evaluation subsample."""
        source_features = self.model.features(self._fixed_source).values
        target_features = self.model.features(self._fixed_target).values
        pseudo_labels = np.argmax(self.model.classifier(target_features).values, axis=1)
        mmd_value = mmd(source_features, target_features)
        j_value = discriminability(source_features, self._fixed_labels, target_features, pseudo_labels,
                                   self.num_classes, eps=self.config.lda_eps)
        return mmd_value, j_value

    def observe(self, warmup):
        """Fold this epoch's measurement into the balance state and pick the next tau.

        Warm-up epochs only widen the running extrema; the applied tau moves
        from adaptation epochs on, blended with its previous value by
        ``tau_smoothing``.
        """
        mmd_value, j_value = self.measure()
        self.balance = update_and_balance(self.balance, mmd_value, j_value)
        if not warmup:
            smoothing = self.config.tau_smoothing
            self.tau = smoothing * self.tau + (1.0 - smoothing) * self.balance.tau
        return mmd_value, j_value

    def _evaluate_epoch(self, warmup):
        mmd_value, j_value = self.observe(warmup)
        source_accuracy = evaluate(self.model, *self._source_eval)
        target_accuracy = None
        if self._target_eval is not None:
            target_accuracy = evaluate(self.model, *self._target_eval)
        return mmd_value, j_value, source_accuracy, target_accuracy

    def train_epoch(self, epoch):
        """Run one epoch and return its metrics row; refreshes tau for the next epoch."""
        started = time.perf_counter()
        warmup = self.schedule.is_warmup(epoch)
        tau = self.current_tau(epoch)

        totals = np.zeros(3)
        batches = 0
        for batch_no, batch in enumerate(self.batches.epoch(), start=1):
            totals += self._train_batch(batch, epoch, batch_no, tau, warmup)
            batches += 1
        ce, da, cd = totals / batches
        losses = LossBundle.combine(ce, da, cd, tau)

        try:
            mmd_value, j_value, source_accuracy, target_accuracy = self._evaluate_epoch(warmup)
        except (NumericError, EstimatorError) as e:
            raise TrainingDivergedError('measure', epoch, None, str(e)) from e
        target_error = None if target_accuracy is None else 1.0 - target_accuracy

        row = EpochMetrics(
            epoch=epoch,
            phase='warmup' if warmup else 'adapt',
            loss_ce=losses.ce,
            loss_da=losses.da,
            loss_cd=losses.cd,
            loss_total=losses.total,
            tau=tau,
            mmd_raw=mmd_value,
            mmd_normalized=self.balance.mmd_normalized,
            j_raw=j_value,
            j_normalized=self.balance.j_normalized,
            source_accuracy=source_accuracy,
            target_accuracy=target_accuracy,
            target_error=target_error,
            wall_time_seconds=time.perf_counter() - started,
        )
        logger.info(
            "epoch %d [%s] ce=%.4f da=%.4f cd=%.4f tau=%.3f mmd=%.4g J=%.4g src=%.3f tgt=%s",
            epoch, row.phase, ce, da, cd, tau, mmd_value, j_value, source_accuracy,
            'n/a' if target_accuracy is None else f'{target_accuracy:.3f}',
        )
        return row

    def fit(self, on_epoch=None):
        history = []
        for epoch in range(1, self.schedule.epochs + 1):
            row = self.train_epoch(epoch)
            history.append(row)
            if on_epoch is not None:
                on_epoch(row)
        return history

    def target_confusion(self):
        if self._target_eval is None:
            return None
        return confusion_counts(self.model, *self._target_eval, self.num_classes)
