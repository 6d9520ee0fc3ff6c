from apps.backbone.weights import load_backbone
from apps.core.utils import ensure_dir
from apps.motion_enhancer.verbs import TAGGERS, get_tagger
from apps.runs.base import PipelineCommand
from apps.sampling.config import resolve_sample_config
from apps.sampling.output import save_generation
from apps.sampling.pipeline import generate
from apps.training.checkpoints import load_motion_checkpoint, load_spatial_checkpoint

SAMPLE_FLAGS = {
    'steps': 'num_steps',
    'cfg': 'guidance_scale',
    'eta': 'eta',
    'frames': 'frames',
    'fps': 'fps',
    'seed': 'seed',
    'height': 'height',
    'width': 'width',
}


def add_sample_arguments(parser):
    parser.add_argument('--config', help="Run config file of 'key = value' lines.")
    parser.add_argument('--backbone', help="Backbone archive; defaults to the configured one.")
    parser.add_argument('--steps', type=int, help="DDIM steps.")
    parser.add_argument('--cfg', type=float, help="Classifier-free guidance scale.")
    parser.add_argument('--eta', type=float)
    parser.add_argument('--frames', type=int)
    parser.add_argument('--fps', type=float)
    parser.add_argument('--seed', type=int)
    parser.add_argument('--height', type=int, help="Frame height; defaults to the backbone's.")
    parser.add_argument('--width', type=int, help="Frame width; defaults to the backbone's.")
    parser.add_argument('--full-scale', action='store_true',
                        help="Default to the full-size model's frame count, rate and size.")


class Command(PipelineCommand):
    help = "Generate a video from a prompt with a motion checkpoint and, optionally, a subject checkpoint."
    command_name = 'generate'

    def add_arguments(self, parser):
        parser.add_argument('--prompt', required=True)
        parser.add_argument('--out', required=True, help="Output directory.")
        parser.add_argument('--motion', help="Motion checkpoint.")
        parser.add_argument('--subject', help="Spatial checkpoint of a custom subject.")
        parser.add_argument('--verb-index', type=int, help="Verb position, overriding verb matching.")
        parser.add_argument('--tagger', choices=sorted(TAGGERS))
        parser.add_argument('--preview', action='store_true', help="Also write preview.gif.")
        add_sample_arguments(parser)

    def run(self, **options):
        config, layers = resolve_sample_config(
            options['config'], self.flags(options, SAMPLE_FLAGS), full_scale=options['full_scale'],
        )
        self.recorder.set_config(config.as_dict(), layers)
        self.recorder.add_seed('sample', config.seed)
        out = ensure_dir(options['out'])
        self.recorder.manifest_path = out / 'manifest.json'

        backbone = load_backbone(options['backbone'])
        self.recorder.add_input('backbone', options['backbone'])
        hashes = {'backbone': backbone.checksum()}
        motion = subject = None
        if options['motion']:
            motion = load_motion_checkpoint(options['motion'])
            self.recorder.add_input('motion', options['motion'])
            hashes['motion'] = motion.checksum()
        if options['subject']:
            subject = load_spatial_checkpoint(options['subject'])
            self.recorder.add_input('subject', options['subject'])
            hashes['subject'] = subject.checksum()
        for role, checksum in hashes.items():
            self.recorder.add_checkpoint(role, checksum)

        tagger = get_tagger(options['tagger']) if motion is not None and options['verb_index'] is None else None
        clip = generate(
            backbone, options['prompt'], motion=motion, subject=subject, config=config,
            verb_index=options['verb_index'], tagger=tagger,
        )
        written = save_generation(
            clip, out,
            {'seed': config.seed, 'prompt': options['prompt'], 'config': config.as_dict(),
             'checkpoint_hashes': hashes},
            preview=options['preview'],
        )
        for path in written:
            self.recorder.add_output(path.suffix.lstrip('.'), path)
        self.stdout.write(f"Wrote {clip.frame_count} frames to {out}")
