from pathlib import Path

from django.conf import settings

from apps.appearance.recaptioner import CLIENTS, get_recaptioner, load_instruction, recaption_dataset
from apps.backbone.weights import BackboneConfig
from apps.core.utils import make_generator
from apps.data.datasets import RECAPTION_CACHE, load_motion_dataset, save_recaption_cache
from apps.runs.base import PipelineCommand


class Command(PipelineCommand):
    help = "Recaption every clip of a dataset and store the recaption cache."
    command_name = 'recaption'

    def add_arguments(self, parser):
        parser.add_argument('--dataset', required=True)
        parser.add_argument('--out', help=f"Cache file; defaults to <dataset>/{RECAPTION_CACHE}.")
        parser.add_argument('--recaptioner', choices=sorted(CLIENTS))
        parser.add_argument('--instruction', help="Instruction template file.")
        parser.add_argument('--seed', type=int, default=0, help="Seed of the frame choice.")
        parser.add_argument('--workers', type=int, default=1)

    def run(self, **options):
        dataset = load_motion_dataset(options['dataset'])
        out = Path(options['out'] or Path(options['dataset']) / RECAPTION_CACHE)
        self.recorder.manifest_path = out.with_suffix('.manifest.json')
        self.recorder.add_input('dataset', options['dataset'])
        self.recorder.add_input('instruction', options['instruction'])
        self.recorder.add_seed('frame_choice', options['seed'])
        backend = options['recaptioner'] or settings.MOTION_TRANSFER['RECAPTIONER']['BACKEND']
        self.recorder.set_config({'recaptioner': backend, 'workers': options['workers']})
        specs = recaption_dataset(
            dataset.prompt_specs(), dataset.clips, get_recaptioner(backend), make_generator(options['seed']),
            instruction=load_instruction(options['instruction']),
            max_tokens=BackboneConfig.from_settings().max_tokens,
            workers=options['workers'],
        )
        save_recaption_cache(dataset, specs, out)
        self.recorder.add_output('recaptions', out)
        for name, spec in zip(dataset.names, specs):
            self.stdout.write(f"{name}\t{spec.recaptioned_prompt}")
