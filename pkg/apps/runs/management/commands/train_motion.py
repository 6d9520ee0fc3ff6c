from pathlib import Path

from apps.appearance.providers import PROVIDERS, get_provider
from apps.backbone.weights import load_backbone
from apps.data.datasets import load_motion_dataset
from apps.motion_enhancer.verbs import TAGGERS, get_tagger
from apps.runs.base import PipelineCommand
from apps.runs.management.commands.train_appearance import TRAIN_FLAGS, add_train_arguments
from apps.training.checkpoints import load_spatial_checkpoint, save_motion_checkpoint
from apps.training.config import resolve_train_config
from apps.training.trainer import train_motion

MOTION_FLAGS = {
    **{key: value for key, value in TRAIN_FLAGS.items() if key != 'use_recaptioner'},
    'lambda_reg': 'lambda_reg',
    'frames': 'frames_per_sample',
    'verb_index': 'verb_index',
    'use_injector': 'use_injector',
    'use_enhancer': 'use_enhancer',
    'full_temporal_finetune': 'full_temporal_finetune',
}


class Command(PipelineCommand):
    help = "Stage 2: train temporal adapters, the motion enhancer and the appearance injector."
    command_name = 'train-motion'

    def add_arguments(self, parser):
        parser.add_argument('--dataset', required=True, help="Motion dataset directory.")
        parser.add_argument('--spatial', required=True, help="Spatial checkpoint from train-appearance.")
        parser.add_argument('--out', required=True, help="Motion checkpoint to write.")
        parser.add_argument('--lambda', dest='lambda_reg', type=float, help="Weight of the residual regularizer.")
        parser.add_argument('--frames', type=int, help="Frames per training sample.")
        parser.add_argument('--verb-index', type=int, help="Verb position, overriding the tagger.")
        parser.add_argument('--provider', choices=sorted(PROVIDERS), help="Image embedding provider.")
        parser.add_argument('--tagger', choices=sorted(TAGGERS))
        parser.add_argument('--no-injector', dest='use_injector', action='store_const', const=False)
        parser.add_argument('--no-enhancer', dest='use_enhancer', action='store_const', const=False)
        parser.add_argument('--full-finetune', dest='full_temporal_finetune', action='store_const', const=True,
                            help="Train the temporal transformer weights instead of temporal adapters.")
        add_train_arguments(parser)

    def run(self, **options):
        config, layers = resolve_train_config(options['config'], self.flags(options, MOTION_FLAGS))
        self.recorder.set_config(config.as_dict(), layers)
        self.recorder.add_seed('train', config.seed)
        out = Path(options['out'])
        out.parent.mkdir(parents=True, exist_ok=True)
        self.recorder.manifest_path = out.with_suffix('.manifest.json')
        log_path = Path(options['log'] or out.with_suffix('.log.jsonl'))

        dataset = load_motion_dataset(options['dataset'])
        spatial = load_spatial_checkpoint(options['spatial'])
        backbone = load_backbone(options['backbone'])
        self.recorder.add_input('dataset', options['dataset'])
        self.recorder.add_input('spatial', options['spatial'])
        self.recorder.add_input('backbone', options['backbone'])
        self.recorder.add_checkpoint('backbone', backbone.checksum())
        self.recorder.add_checkpoint('spatial', spatial.checksum())

        tagger = get_tagger(options['tagger']) if config.verb_index is None else None
        checkpoint, records = train_motion(
            backbone, dataset, spatial, config,
            provider=get_provider(options['provider']), tagger=tagger, log_path=log_path,
        )
        save_motion_checkpoint(checkpoint, out)
        self.recorder.add_checkpoint('motion', checkpoint.checksum())
        self.recorder.add_output('motion_checkpoint', out)
        self.recorder.add_output('training_log', log_path)
        final = records[-1] if records else {}
        self.stdout.write(
            f"Wrote motion checkpoint for {checkpoint.motion_id!r} to {out} "
            f"(final loss {final.get('loss', float('nan')):.4f})"
        )
