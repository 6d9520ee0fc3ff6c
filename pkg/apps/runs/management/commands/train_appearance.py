from pathlib import Path

from django.core.management.base import CommandError

from apps.appearance.recaptioner import CLIENTS, get_recaptioner, load_instruction
from apps.backbone.weights import load_backbone
from apps.data.datasets import RECAPTION_CACHE, load_motion_dataset, load_recaption_cache, load_subject_images
from apps.runs.base import PipelineCommand
from apps.training.checkpoints import save_spatial_checkpoint
from apps.training.config import resolve_train_config
from apps.training.trainer import train_appearance

TRAIN_FLAGS = {
    'steps': 'max_steps',
    'lr': 'learning_rate',
    'rank': 'lora_rank',
    'alpha': 'lora_alpha',
    'batch_size': 'batch_size',
    'seed': 'seed',
    'use_recaptioner': 'use_recaptioner',
}


def add_train_arguments(parser):
    parser.add_argument('--config', help="Run config file of 'key = value' lines.")
    parser.add_argument('--backbone', help="Backbone archive; defaults to the configured one.")
    parser.add_argument('--steps', type=int)
    parser.add_argument('--lr', type=float)
    parser.add_argument('--rank', type=int)
    parser.add_argument('--alpha', type=float)
    parser.add_argument('--batch-size', type=int)
    parser.add_argument('--seed', type=int)
    parser.add_argument('--log', help="JSON-lines training log; defaults to <out>.log.jsonl.")


class Command(PipelineCommand):
    help = "Stage 1: train spatial adapters on a motion dataset or a set of subject images."
    command_name = 'train-appearance'

    def add_arguments(self, parser):
        source = parser.add_mutually_exclusive_group(required=True)
        source.add_argument('--dataset', help="Motion dataset directory.")
        source.add_argument('--subject', help="Directory of still images of one subject.")
        parser.add_argument('--subject-prompt', help="Prompt shared by the subject images.")
        parser.add_argument('--out', required=True, help="Spatial checkpoint to write.")
        parser.add_argument('--recaptions',
                            help=f"Stored recaption cache; defaults to <dataset>/{RECAPTION_CACHE} when present.")
        parser.add_argument('--recaptioner', choices=sorted(CLIENTS))
        parser.add_argument('--instruction', help="Instruction template file.")
        parser.add_argument('--no-recaptioner', dest='use_recaptioner', action='store_const', const=False,
                            help="Train on the base prompts.")
        add_train_arguments(parser)

    def run(self, **options):
        if options['subject'] and not options['subject_prompt']:
            raise CommandError("--subject needs --subject-prompt")
        config, layers = resolve_train_config(options['config'], self.flags(options, TRAIN_FLAGS))
        self.recorder.set_config(config.as_dict(), layers)
        self.recorder.add_seed('train', config.seed)
        out = Path(options['out'])
        out.parent.mkdir(parents=True, exist_ok=True)
        self.recorder.manifest_path = out.with_suffix('.manifest.json')
        log_path = Path(options['log'] or out.with_suffix('.log.jsonl'))

        if options['subject']:
            dataset = load_subject_images(options['subject'], options['subject_prompt'])
            self.recorder.add_input('subject', options['subject'])
        else:
            dataset = load_motion_dataset(options['dataset'])
            self.recorder.add_input('dataset', options['dataset'])
        prompts = None
        recaptions = options['recaptions']
        if recaptions is None and options['dataset'] and config.use_recaptioner:
            stored = Path(options['dataset']) / RECAPTION_CACHE
            recaptions = stored if stored.is_file() else None
        if recaptions:
            prompts = load_recaption_cache(dataset, recaptions)
            self.recorder.add_input('recaptions', recaptions)

        backbone = load_backbone(options['backbone'])
        self.recorder.add_input('backbone', options['backbone'])
        self.recorder.add_checkpoint('backbone', backbone.checksum())
        client = get_recaptioner(options['recaptioner']) if config.use_recaptioner and prompts is None else None
        checkpoint, _ = train_appearance(
            backbone, dataset, config, client=client,
            instruction=load_instruction(options['instruction']) if client else None,
            log_path=log_path, prompts=prompts,
        )
        save_spatial_checkpoint(checkpoint, out)
        self.recorder.add_checkpoint('spatial', checkpoint.checksum())
        self.recorder.add_output('spatial_checkpoint', out)
        self.recorder.add_output('training_log', log_path)
        self.stdout.write(f"Wrote spatial checkpoint for {dataset.motion_id!r} to {out}")
