"""
Layers, the five DWL networks, optimizers and checkpoints.

The generator G maps inputs to features, the discriminator D maps features to
a domain probability and the classifiers C, C1, C2 map features to class
probabilities. Networks are plain callables over ``Tensor``; gradients flow
into whichever parameters the caller watched on its tape.
"""
import enum
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import ModelError, NumericError, OptimizerError

logger = logging.getLogger(__name__)

# Probabilities are clamped into [EPS_PROB, 1 - EPS_PROB] before any log.
EPS_PROB = 1e-7

CHECKPOINT_FORMAT = 'dwl-checkpoint'
CHECKPOINT_VERSION = 2

NETWORK_NAMES = ('generator', 'discriminator', 'classifier', 'classifier_aux1', 'classifier_aux2')


class Parameter(T.Tensor):
    """A trainable leaf tensor; only optimizers replace its values."""

    def __init__(self, values, name=''):
        super().__init__(values)
        self.name = name

    def assign(self, values):
        array = np.array(values, dtype=np.float64)
        if array.shape != self.shape:
            raise ModelError(f"{self.name}: cannot assign shape {array.shape} to {self.shape}")
        if not np.all(np.isfinite(array)):
            raise NumericError('assign', f'{self.name}: non-finite values')
        array.setflags(write=False)
        self.values = array

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class Linear:
    """Affine layer ``x @ weight + bias`` with weight of shape [in x out]."""

    def __init__(self, in_dim, out_dim, rng, name='linear'):
        bound = math.sqrt(1.0 / in_dim)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Parameter(rng.uniform(-bound, bound, size=(in_dim, out_dim)), f'{name}.weight')
        self.bias = Parameter(rng.uniform(-bound, bound, size=(out_dim,)), f'{name}.bias')

    def __call__(self, x):
        return T.matmul(x, self.weight) + T.repeat_rows(self.bias, x.shape[0])

    def parameters(self):
        return [self.weight, self.bias]


class MLP:
    """ReLU multilayer perceptron with an optional output activation."""

    OUTPUTS = (None, 'tanh', 'sigmoid', 'softmax')

    def __init__(self, dims, rng, name, output=None, dropout=0.0):
        if output not in self.OUTPUTS:
            raise ModelError(f"unknown output activation {output!r}")
        if not 0.0 <= dropout < 1.0:
            raise ModelError(f"dropout must lie in [0, 1), got {dropout}")
        self.name = name
        self.dims = tuple(dims)
        self.output = output
        self.dropout = dropout
        self.layers = [
            Linear(d_in, d_out, rng, name=f'{name}.{i}')
            for i, (d_in, d_out) in enumerate(zip(self.dims[:-1], self.dims[1:]))
        ]
        self._dropout_rng = np.random.default_rng(rng.integers(2**32)) if dropout else None

    def __call__(self, x, training=False):
        h = x if isinstance(x, T.Tensor) else T.constant(x)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i == last:
                break
            h = T.relu(h)
            if training and self.dropout:
                keep = self._dropout_rng.random(h.shape) >= self.dropout
                h = h * T.constant(keep / (1.0 - self.dropout))
        if self.output == 'tanh':
            h = T.tanh(h)
        elif self.output == 'sigmoid':
            h = T.sigmoid(h)
        elif self.output == 'softmax':
            h = T.softmax(h)
        return h

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


@dataclass
class DwlModel:
    """Parameter sets of G, D, C, C1 and C2."""

    generator: MLP
    discriminator: MLP
    classifier: MLP
    classifier_aux1: MLP
    classifier_aux2: MLP
    input_dim: int
    feature_dim: int
    hidden_dim: int
    num_classes: int
    dropout: float = 0.0

    def network(self, name):
        if name not in NETWORK_NAMES:
            raise ModelError(f"unknown network {name!r}")
        return getattr(self, name)

    def parameters(self, *names):
        names = names or NETWORK_NAMES
        return [p for name in names for p in self.network(name).parameters()]

    def features(self, x):
        return self.generator(x)

    def predict_proba(self, x, classifier='classifier'):
        return self.network(classifier)(self.generator(x))

    def predict(self, x):
        """Arg-max class of the main classifier, no tape involved."""
        return np.argmax(self.predict_proba(x).values, axis=1)

    def dims(self):
        return {
            'input_dim': self.input_dim,
            'feature_dim': self.feature_dim,
            'hidden_dim': self.hidden_dim,
            'num_classes': self.num_classes,
            'dropout': self.dropout,
        }

    def state_arrays(self):
        return {p.name: p.values for p in self.parameters()}


def init_model(input_dim, feature_dim, hidden_dim, num_classes, seed, dropout=0.0):
    """Build all five networks with uniform(-sqrt(1/in), sqrt(1/in)) weights.

    Each network draws from its own child of ``SeedSequence(seed)`` so the
    three classifiers start from different parameters.
    """
    for label, value in (('input_dim', input_dim), ('feature_dim', feature_dim),
                         ('hidden_dim', hidden_dim), ('num_classes', num_classes)):
        if int(value) != value or value < 1:
            raise ModelError(f"{label} must be a positive integer, got {value!r}")

    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(NETWORK_NAMES))]
    g_rng, d_rng, c_rng, c1_rng, c2_rng = streams
    classifier_dims = (feature_dim, hidden_dim, num_classes)

    return DwlModel(
        generator=MLP((input_dim, hidden_dim, feature_dim), g_rng, 'generator', output='tanh'),
        discriminator=MLP((feature_dim, hidden_dim, 1), d_rng, 'discriminator',
                          output='sigmoid', dropout=dropout),
        classifier=MLP(classifier_dims, c_rng, 'classifier', output='softmax'),
        classifier_aux1=MLP(classifier_dims, c1_rng, 'classifier_aux1', output='softmax'),
        classifier_aux2=MLP(classifier_dims, c2_rng, 'classifier_aux2', output='softmax'),
        input_dim=int(input_dim),
        feature_dim=int(feature_dim),
        hidden_dim=int(hidden_dim),
        num_classes=int(num_classes),
        dropout=float(dropout),
    )


class Direction(str, enum.Enum):
    MINIMIZE = 'minimize'
    MAXIMIZE = 'maximize'


@dataclass
class Optimizer:
    """Adam or SGD with momentum over a fixed list of parameters.

    ``maximize`` applies the same rule to the negated gradient (gradient
    ascent). Weight decay is added as an L2 term after the sign flip so it
    always shrinks weights.
    """

    params: list
    kind: str = 'adam'
    lr: float = 0.0002
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    state: dict = field(default_factory=dict, repr=False)

    KINDS = ('adam', 'sgd')

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise OptimizerError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise OptimizerError(f"learning rate must be positive, got {self.lr}")
        for p in self.params:
            if self.kind == 'adam':
                self.state[id(p)] = {'m': np.zeros(p.shape), 'v': np.zeros(p.shape), 't': 0}
            else:
                self.state[id(p)] = {'velocity': np.zeros(p.shape)}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, direction=Direction.MINIMIZE):
        direction = Direction(direction)
        sign = 1.0 if direction is Direction.MINIMIZE else -1.0

        # Check everything before touching any parameter
        for p in self.params:
            if p.grad is None:
                raise OptimizerError(f"{p.name}: no gradient, run backward first")
            if not np.all(np.isfinite(p.grad)):
                raise OptimizerError(f"{p.name}: non-finite gradient")

        for p in self.params:
            grad = sign * p.grad
            if self.weight_decay:
                grad = grad + self.weight_decay * p.values
            state = self.state[id(p)]
            if self.kind == 'adam':
                state['t'] += 1
                state['m'] = self.beta1 * state['m'] + (1.0 - self.beta1) * grad
                state['v'] = self.beta2 * state['v'] + (1.0 - self.beta2) * grad * grad
                m_hat = state['m'] / (1.0 - self.beta1 ** state['t'])
                v_hat = state['v'] / (1.0 - self.beta2 ** state['t'])
                update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            else:
                state['velocity'] = self.momentum * state['velocity'] + grad
                update = self.lr * state['velocity']
            p.assign(p.values - update)

        self.zero_grad()


def make_optimizers(model, kind='adam', lr=0.0002, weight_decay=0.0005, momentum=0.9):
    """One optimizer per network so each minimax player steps on its own."""
    return {
        name: Optimizer(model.network(name).parameters(), kind=kind, lr=lr,
                        momentum=momentum, weight_decay=weight_decay)
        for name in NETWORK_NAMES
    }


def save_checkpoint(model, path):
    """Write every parameter array plus a JSON header into one ``.npz`` file."""
    meta = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'dims': model.dims(),
        'parameters': {name: list(values.shape) for name, values in model.state_arrays().items()},
    }
    with open(path, 'wb') as handle:
        np.savez(handle, __meta__=np.array(json.dumps(meta, sort_keys=True)), **model.state_arrays())
    logger.info("Saved checkpoint to %s", path)


def load_checkpoint(path):
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise ModelError(f"cannot read checkpoint {path}: {e}") from e

    with archive:
        if '__meta__' not in archive.files:
            raise ModelError(f"{path}: missing checkpoint header")
        meta = json.loads(str(archive['__meta__']))
        if meta.get('format') != CHECKPOINT_FORMAT or meta.get('version') != CHECKPOINT_VERSION:
            raise ModelError(
                f"{path}: unsupported checkpoint {meta.get('format')} v{meta.get('version')}"
            )
        model = init_model(seed=0, **meta['dims'])
        for param in model.parameters():
            if param.name not in archive.files:
                raise ModelError(f"{path}: missing parameter {param.name}")
            values = archive[param.name]
            if list(values.shape) != meta['parameters'].get(param.name) or values.shape != param.shape:
                raise ModelError(
                    f"{path}: {param.name} has shape {values.shape}, expected {param.shape}"
                )
            try:
                param.assign(values)
            except NumericError as e:
                raise ModelError(f"{path}: {param.name} holds non-finite values") from e
    return model
