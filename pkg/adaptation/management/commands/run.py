from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from adaptation.exceptions import ConfigError, DwlError, TrainingDivergedError
from adaptation.experiments import load_config, run_experiment, validate_config, write_error_record

EXIT_CONFIG = 2
EXIT_DIVERGED = 3


class Command(BaseCommand):
    help = 'Train one DWL experiment and write metrics.csv, summary.json and a checkpoint.'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help='Experiment config (JSON)')
        parser.add_argument('--seed', type=int, help='Override the config seed')
        parser.add_argument('--out', help='Output directory (overrides output_dir)')
        parser.add_argument(
            '--override', nargs='*', default=[], metavar='KEY=VALUE',
            help='Dotted config overrides, e.g. training.epochs=20'
        )

    def handle(self, *args, **options):
        output_dir = options['out'] or str(Path(settings.DWL_OUTPUT_ROOT) / 'run')
        try:
            overrides = list(options['override'])
            if options['seed'] is not None:
                overrides.append(f"seed={options['seed']}")
            raw = load_config(options['config'], overrides)
            if options['out']:
                raw['output_dir'] = options['out']
            output_dir = raw.get('output_dir', output_dir)
            config = validate_config(raw)
        except ConfigError as e:
            write_error_record(output_dir, e)
            raise CommandError(f"{e}: {e.details}" if e.details else str(e), returncode=EXIT_CONFIG)

        try:
            summary = run_experiment(config)
        except TrainingDivergedError as e:
            raise CommandError(str(e), returncode=EXIT_DIVERGED)
        except DwlError as e:
            raise CommandError(str(e), returncode=EXIT_CONFIG)

        self.stdout.write(self.style.SUCCESS(
            f"Finished {summary['epochs']} epochs: target accuracy "
            f"{summary['final_target_accuracy']}, final tau {summary['final_tau']:.4f} "
            f"-> {config.output_dir}"
        ))
