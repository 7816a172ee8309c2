"""
Experiment orchestration: single runs, ablation grids and embedding export.

Output files of a run directory:

    metrics.csv     one row per epoch, columns ``dwl.METRICS_COLUMNS``
    timings.csv     epoch,wall_time_seconds
    summary.json    final/best target accuracy, final tau, config echo
    checkpoint.npz  parameters (format described in README)
    checkpoints/    epoch-NNN.npz every ``checkpoint_every`` epochs, when set
    confusion.csv   final target confusion counts, rows true, columns predicted
    dataset.csv     only with ``export_dataset``
    error.json      only when the run failed
"""
import csv
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures.process import BrokenProcessPool
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import data
from .dwl import METRICS_COLUMNS, DwlTrainer, TrainingConfig, WeightingMode
from .exceptions import ConfigError, DwlError, ModelError
from .nn import init_model, load_checkpoint, make_optimizers, save_checkpoint
from .serializers import ExperimentConfigSerializer

logger = logging.getLogger(__name__)

ABLATION_AXES = ('weighting_mode', 'sample_weighting')


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict
    model: dict
    optimizer: dict
    training: TrainingConfig
    seed: int
    output_dir: str
    export_dataset: bool = False
    checkpoint_every: int = 0

    def config_echo(self):
        training = asdict(self.training)
        training['weighting_mode'] = WeightingMode(training['weighting_mode']).value
        training['weighting_scheme'] = data.WeightingScheme(training['weighting_scheme']).value
        return {
            'dataset': dict(self.dataset),
            'model': dict(self.model),
            'optimizer': dict(self.optimizer),
            'training': training,
            'seed': self.seed,
            'output_dir': self.output_dir,
            'export_dataset': self.export_dataset,
            'checkpoint_every': self.checkpoint_every,
        }


# Configuration

def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw, overrides):
    """Apply ``dotted.key=value`` overrides to a raw config dict (copied)."""
    config = json.loads(json.dumps(raw))
    for item in overrides or ():
        if '=' not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split('=', 1)
        node = config
        *parents, leaf = key.strip().split('.')
        for part in parents:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {key!r} descends into a non-section value")
            node = child
        node[leaf] = _parse_value(value)
    return config


def load_config(path, overrides=()):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return apply_overrides(raw, overrides)


def validate_config(raw):
    """Validate a raw config dict into an ``ExperimentConfig``."""
    serializer = ExperimentConfigSerializer(data=raw)
    if not serializer.is_valid():
        raise ConfigError('Invalid experiment configuration', details=serializer.errors)
    values = serializer.validated_data
    training = dict(values['training'])
    training['weighting_mode'] = WeightingMode(training['weighting_mode'])
    training['weighting_scheme'] = data.WeightingScheme(training['weighting_scheme'])
    return ExperimentConfig(
        dataset=dict(values['dataset']),
        model=dict(values['model']),
        optimizer=dict(values['optimizer']),
        training=TrainingConfig(**training),
        seed=values['seed'],
        output_dir=values['output_dir'],
        export_dataset=values['export_dataset'],
        checkpoint_every=values['checkpoint_every'],
    )


def derive_seeds(seed):
    """Independent integer seeds for data, model init, shuffling and evaluation."""
    names = ('data', 'model', 'shuffle', 'eval')
    states = np.random.SeedSequence(seed).generate_state(len(names))
    return {name: int(value) for name, value in zip(names, states)}


def build_dataset(spec, seed):
    generator = spec['generator']
    if generator == 'two_moons':
        return data.make_two_moons_shift(
            spec['n_source'], spec['n_target'],
            rotation_degrees=spec['rotation_degrees'],
            translation=tuple(spec['translation']),
            noise_std=spec['noise_std'],
            seed=seed,
        )
    if generator == 'blobs':
        return data.make_blobs_shift(
            spec['n_source'], spec['n_target'],
            num_classes=spec['num_classes'],
            num_features=spec['num_features'],
            shift=spec.get('shift'),
            noise_std=spec['noise_std'],
            seed=seed,
        )
    if generator == 'idx':
        return data.make_idx_domains(
            spec['source_images'], spec['source_labels'],
            spec['target_images'], spec['target_labels'],
            max_source=spec.get('max_source'),
            max_target=spec.get('max_target'),
            image_size=tuple(spec['image_size']),
            num_classes=spec['num_classes'],
        )
    raise ConfigError(f"unknown dataset generator {generator!r}")


# Output helpers

def format_value(value):
    if value is None:
        return ''
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_json(path, payload):
    with open(path, 'w') as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write('\n')


def write_error_record(output_dir, error, **extra):
    """Machine-readable ``error.json`` next to the outputs of a failed command."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    record = error.to_record() if isinstance(error, DwlError) else {
        'status': 'error', 'error': str(error), 'kind': type(error).__name__,
    }
    record.update(extra)
    write_json(output_dir / 'error.json', record)
    return record


def read_metrics(path):
    """Parse a metrics.csv back into typed dicts (blank cells become None)."""
    rows = []
    with open(path, newline='') as handle:
        reader = csv.DictReader(handle)
        if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        for record in reader:
            row = {}
            for column in METRICS_COLUMNS:
                cell = record[column]
                if column == 'epoch':
                    row[column] = int(cell)
                elif column == 'phase':
                    row[column] = cell
                else:
                    row[column] = float(cell) if cell != '' else None
            rows.append(row)
    return rows


# Single run

def run_experiment(config):
    """Train one configuration and write its output directory; returns the summary.

    Any failure leaves an ``error.json`` in the output directory before it
    propagates.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    history = []
    try:
        return _run(config, out, history)
    except Exception as e:
        logger.error("Run %s failed: %s", out, e)
        write_error_record(out, e, epochs_completed=len(history))
        raise


def _run(config, out, history):
    seeds = derive_seeds(config.seed)

    dataset = build_dataset(config.dataset, seeds['data'])
    if config.export_dataset:
        data.export_dataset(dataset, out / 'dataset.csv')

    model = init_model(
        dataset.input_dim,
        config.model['feature_dim'],
        config.model['hidden_dim'],
        dataset.num_classes,
        seed=seeds['model'],
        dropout=config.model['dropout'],
    )
    optimizers = make_optimizers(model, **config.optimizer)
    trainer = DwlTrainer(model, optimizers, dataset, config.training,
                         shuffle_seed=seeds['shuffle'], eval_seed=seeds['eval'])
    logger.info(
        "Run %s: %s n_s=%d n_t=%d w_s=%.4f w_t=%.4f mode=%s",
        out, dataset.name, dataset.n_s, dataset.n_t, trainer.weights.source,
        trainer.weights.target, config.training.weighting_mode.value,
    )

    with open(out / 'metrics.csv', 'w', newline='') as metrics_file, \
            open(out / 'timings.csv', 'w', newline='') as timings_file:
        metrics_writer = csv.writer(metrics_file)
        timings_writer = csv.writer(timings_file)
        metrics_writer.writerow(METRICS_COLUMNS)
        timings_writer.writerow(['epoch', 'wall_time_seconds'])

        def on_epoch(row):
            history.append(row)
            metrics_writer.writerow([format_value(v) for v in row.as_row()])
            timings_writer.writerow([row.epoch, f'{row.wall_time_seconds:.6f}'])
            metrics_file.flush()
            if config.checkpoint_every and row.epoch % config.checkpoint_every == 0:
                checkpoints = out / 'checkpoints'
                checkpoints.mkdir(exist_ok=True)
                save_checkpoint(model, checkpoints / f'epoch-{row.epoch:03d}.npz')

        trainer.fit(on_epoch=on_epoch)

    save_checkpoint(model, out / 'checkpoint.npz')

    confusion = trainer.target_confusion()
    if confusion is not None:
        with open(out / 'confusion.csv', 'w', newline='') as handle:
            writer = csv.writer(handle)
            writer.writerow(['true_label'] + [f'pred_{k}' for k in range(dataset.num_classes)])
            for label, counts in enumerate(confusion):
                writer.writerow([label] + [int(c) for c in counts])

    accuracies = [row.target_accuracy for row in history if row.target_accuracy is not None]
    final = history[-1]
    summary = {
        'status': 'success',
        'epochs': len(history),
        'final_target_accuracy': final.target_accuracy,
        'best_target_accuracy': max(accuracies) if accuracies else None,
        'best_epoch': (history[int(np.argmax(accuracies))].epoch if accuracies else None),
        'final_source_accuracy': final.source_accuracy,
        'final_tau': final.tau,
        'next_tau': trainer.current_tau(final.epoch + 1),
        'sample_weights': {'w_s': trainer.weights.source, 'w_t': trainer.weights.target},
        'config': config.config_echo(),
    }
    write_json(out / 'summary.json', summary)
    return summary


# Ablation

def _cell_settings(axis, value):
    """Translate one grid value into config overrides."""
    if axis == 'weighting_mode':
        mode, _, tau = str(value).partition(':')
        overrides = {'training.weighting_mode': WeightingMode(mode).value}
        if tau:
            overrides['training.tau_fixed'] = float(tau)
        return overrides
    if axis == 'sample_weighting':
        if isinstance(value, str):
            value = value.lower() in ('on', 'true', '1', 'yes')
        return {'training.sample_weighting': bool(value)}
    key = axis if '.' in axis else f'training.{axis}'
    return {key: value}


def _cell_label(axis, value):
    if axis == 'sample_weighting':
        on = value if isinstance(value, bool) else str(value).lower() in ('on', 'true', '1', 'yes')
        return 'weighting-on' if on else 'weighting-off'
    return f"{axis.split('.')[-1]}-{value}".replace(':', '-')


def expand_grid(grid):
    """Cartesian product of the grid axes as (label, {axis: value}, overrides)."""
    if not isinstance(grid, dict) or not grid:
        raise ConfigError('ablation grid must be a non-empty JSON object')
    missing = [axis for axis in ABLATION_AXES if axis not in grid]
    if missing:
        raise ConfigError(f"ablation grid must cover {', '.join(missing)}")
    axes = list(grid)
    for axis in axes:
        if not isinstance(grid[axis], list) or not grid[axis]:
            raise ConfigError(f"grid axis {axis!r} needs a non-empty list of values")

    cells = []
    for combo in itertools.product(*(grid[axis] for axis in axes)):
        overrides = {}
        for axis, value in zip(axes, combo):
            try:
                overrides.update(_cell_settings(axis, value))
            except ValueError as e:
                raise ConfigError(f"invalid value {value!r} for grid axis {axis!r}") from e
        label = '__'.join(_cell_label(axis, value) for axis, value in zip(axes, combo))
        cells.append((label, dict(zip(axes, combo)), overrides))
    return cells


def _failure(error):
    return {'status': 'error', 'error': str(error), 'kind': type(error).__name__}


def _run_job(raw):
    """Worker entry point; a failing run becomes an error record, never an exception."""
    logger.info("Ablation run %s (seed %s)", raw['output_dir'], raw['seed'])
    try:
        summary = run_experiment(validate_config(raw))
        return {'status': 'success', 'target_accuracy': summary['final_target_accuracy']}
    except DwlError as e:
        return _failure(e)
    except Exception as e:
        logger.exception("Ablation run %s crashed", raw['output_dir'])
        return _failure(e)


def run_ablation(base_raw, grid, seeds, output_dir, workers=1):
    """Run every grid cell over ``seeds`` seeds and write ``ablation.csv``."""
    if seeds < 1:
        raise ConfigError('seeds must be at least 1')
    output_dir = Path(output_dir)
    cells = expand_grid(grid)
    base_seed = int(base_raw.get('seed', 0))

    jobs = []
    for index, (label, _, overrides) in enumerate(cells):
        for offset in range(seeds):
            raw = apply_overrides(base_raw, [f'{k}={json.dumps(v)}' for k, v in overrides.items()])
            raw['seed'] = base_seed + offset
            raw['output_dir'] = str(output_dir / f'{index:02d}-{label}' / f'seed-{base_seed + offset}')
            jobs.append((index, raw))

    logger.info("Ablation: %d cells x %d seeds = %d runs", len(cells), seeds, len(jobs))
    raws = [raw for _, raw in jobs]
    if workers > 1:
        results = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_job, raw) for raw in raws]
            for raw, future in zip(raws, futures):
                try:
                    results.append(future.result())
                except BrokenProcessPool as e:
                    logger.error("Ablation worker for %s died: %s", raw['output_dir'], e)
                    results.append(_failure(e))
    else:
        results = [_run_job(raw) for raw in raws]

    rows = []
    axes = list(grid)
    for index, (label, values, _) in enumerate(cells):
        cell_results = [res for (job_cell, _), res in zip(jobs, results) if job_cell == index]
        accuracies = [res['target_accuracy'] for res in cell_results
                      if res['status'] == 'success' and res['target_accuracy'] is not None]
        failures = [res for res in cell_results if res['status'] != 'success']
        for failure in failures:
            logger.warning("Ablation cell %s: run failed: %s", label, failure['error'])
        rows.append({
            'cell': label,
            **{axis: values[axis] for axis in axes},
            'runs': len(cell_results),
            'failures': len(failures),
            'mean_target_accuracy': float(np.mean(accuracies)) if accuracies else None,
            'std_target_accuracy': float(np.std(accuracies, ddof=1)) if len(accuracies) > 1 else (
                0.0 if accuracies else None),
        })

    output_dir.mkdir(parents=True, exist_ok=True)
    columns = ['cell'] + axes + ['runs', 'failures', 'mean_target_accuracy', 'std_target_accuracy']
    with open(output_dir / 'ablation.csv', 'w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(row[column]) for column in columns])
    return rows


# Embedding export

def export_embeddings(checkpoint_path, config, path):
    """Write G features of both domains as ``domain,label,feat0..featF-1`` rows."""
    model = load_checkpoint(checkpoint_path)
    dataset = build_dataset(config.dataset, derive_seeds(config.seed)['data'])
    if model.input_dim != dataset.input_dim:
        raise ModelError(
            f"checkpoint expects input_dim {model.input_dim}, dataset has {dataset.input_dim}"
        )
    if model.num_classes != dataset.num_classes:
        raise ModelError(
            f"checkpoint has {model.num_classes} classes, dataset has {dataset.num_classes}"
        )

    training = config.training
    if training.sample_weighting and training.weighting_scheme is data.WeightingScheme.INPUT:
        weights = data.weight_samples(dataset, training.a)
    else:
        weights = data.SampleWeights(1.0, 1.0)
    source = model.features(dataset.source_features * weights.source).values
    target = model.features(dataset.target_features * weights.target).values

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(['domain', 'label'] + [f'feat{i}' for i in range(model.feature_dim)])
        for row, label in zip(source, dataset.source_labels):
            writer.writerow(['source', int(label)] + [format_value(v) for v in row])
        target_labels = dataset.target_labels
        for i, row in enumerate(target):
            label = '' if target_labels is None else int(target_labels[i])
            writer.writerow(['target', label] + [format_value(v) for v in row])
    logger.info("Exported %d embeddings to %s", len(source) + len(target), path)
    return path
