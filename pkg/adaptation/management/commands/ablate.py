import json
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from adaptation.exceptions import ConfigError
from adaptation.experiments import format_value, load_config, run_ablation, write_error_record

EXIT_CONFIG = 2


class Command(BaseCommand):
    help = 'Run an ablation grid over several seeds and write ablation.csv.'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help='Base experiment config (JSON)')
        parser.add_argument('--grid', required=True, help='Grid (JSON object of axis -> values)')
        parser.add_argument('--seeds', type=int, default=3, help='Seeds per grid cell')
        parser.add_argument('--out', help='Output directory for the ablation')
        parser.add_argument('--workers', type=int, default=settings.DWL_ABLATION_WORKERS,
                            help='Parallel worker processes')

    def handle(self, *args, **options):
        output_dir = options['out'] or str(Path(settings.DWL_OUTPUT_ROOT) / 'ablation')
        try:
            base = load_config(options['config'])
            grid_path = Path(options['grid'])
            if not grid_path.exists():
                raise ConfigError(f"grid file not found: {grid_path}")
            try:
                grid = json.loads(grid_path.read_text())
            except json.JSONDecodeError as e:
                raise ConfigError(f"grid file {grid_path} is not valid JSON: {e}") from e
            rows = run_ablation(base, grid, options['seeds'], output_dir, workers=options['workers'])
        except ConfigError as e:
            write_error_record(output_dir, e)
            raise CommandError(str(e), returncode=EXIT_CONFIG)

        for row in rows:
            self.stdout.write(
                f"{row['cell']}: {format_value(row['mean_target_accuracy'])} "
                f"+/- {format_value(row['std_target_accuracy'])} "
                f"({row['runs'] - row['failures']}/{row['runs']} runs)"
            )
        self.stdout.write(self.style.SUCCESS(f"Wrote {Path(output_dir) / 'ablation.csv'}"))
