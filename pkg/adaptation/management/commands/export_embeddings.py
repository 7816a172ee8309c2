from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from adaptation.exceptions import ConfigError, DwlError
from adaptation.experiments import export_embeddings, load_config, validate_config, write_error_record

EXIT_CONFIG = 2


class Command(BaseCommand):
    help = 'Export generator features of both domains for external plotting.'

    def add_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True, help='checkpoint.npz written by run')
        parser.add_argument('--data', required=True,
                            help='Experiment config whose dataset section describes the data')
        parser.add_argument('--out', help='Embeddings CSV path (default: next to the checkpoint)')
        parser.add_argument('--override', nargs='*', default=[], metavar='KEY=VALUE')

    def handle(self, *args, **options):
        checkpoint = Path(options['checkpoint'])
        if options['out']:
            out = Path(options['out'])
        elif checkpoint.stem == 'checkpoint':
            out = checkpoint.with_name('embeddings.csv')
        else:
            out = checkpoint.with_name(f'{checkpoint.stem}-embeddings.csv')
        try:
            if not checkpoint.exists():
                raise ConfigError(f"checkpoint not found: {checkpoint}")
            config = validate_config(load_config(options['data'], options['override']))
            path = export_embeddings(checkpoint, config, out)
        except DwlError as e:
            write_error_record(out.parent, e)
            raise CommandError(str(e), returncode=EXIT_CONFIG)
        self.stdout.write(self.style.SUCCESS(f"Wrote {path}"))
