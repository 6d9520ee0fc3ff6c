from apps.core.utils import ensure_dir
from apps.data.datasets import save_motion_dataset, write_frames
from apps.data.synth import TRAJECTORY_VERBS, SynthSpec, synth_dataset, synth_subject_images
from apps.runs.base import PipelineCommand


def _names(value):
    return [item.strip() for item in value.split(',') if item.strip()]


class Command(PipelineCommand):
    help = "Render a synthetic motion dataset, or still images of a subject with --subject."
    command_name = 'synth-data'

    def add_arguments(self, parser):
        parser.add_argument('--out', required=True, help="Dataset directory to write.")
        parser.add_argument('--trajectory', choices=sorted(TRAJECTORY_VERBS), default='circle')
        parser.add_argument('--motion-id', help="Defaults to the trajectory name.")
        parser.add_argument('--shapes', type=_names, default=['square'], help="Comma-separated, cycled over clips.")
        parser.add_argument('--colors', type=_names, default=['red'], help="Comma-separated, cycled over clips.")
        parser.add_argument('--background', default='white')
        parser.add_argument('--clips', type=int, default=4)
        parser.add_argument('--frames', type=int, default=8)
        parser.add_argument('--height', type=int, default=32)
        parser.add_argument('--width', type=int, default=32)
        parser.add_argument('--size', type=float, default=8.0)
        parser.add_argument('--fps', type=float, default=8.0)
        parser.add_argument('--seed', type=int, default=0, help="Jitter seed of the first clip.")
        parser.add_argument('--subject', action='store_true',
                            help="Write --clips still images of the first shape and colour instead.")

    def run(self, **options):
        self.recorder.add_seed('jitter', options['seed'])
        self.recorder.set_config({key: options[key] for key in (
            'trajectory', 'shapes', 'colors', 'background', 'clips', 'frames',
            'height', 'width', 'size', 'fps', 'seed', 'subject',
        )})
        out = ensure_dir(options['out'])
        self.recorder.manifest_path = out / 'manifest.json'
        specs = [
            SynthSpec(
                shape=options['shapes'][index % len(options['shapes'])],
                color=options['colors'][index % len(options['colors'])],
                trajectory=options['trajectory'],
                background=options['background'],
                jitter_seed=options['seed'] + index,
                size=options['size'],
            )
            for index in range(options['clips'])
        ]
        if options['subject']:
            images = synth_subject_images(specs[0], options['clips'], options['height'], options['width'])
            for index, image in enumerate(images):
                write_frames(image, out)
                (out / '0000.png').rename(out / f'image{index:02d}.png')
            self.recorder.add_output('subject_images', out)
            self.stdout.write(f"Wrote {len(images)} subject images to {out}")
            return
        dataset = synth_dataset(
            specs, options['motion_id'] or options['trajectory'], options['frames'],
            options['height'], options['width'], options['fps'],
        )
        save_motion_dataset(dataset, out)
        self.recorder.add_output('dataset', out)
        self.stdout.write(f"Wrote {len(dataset)} clips of {dataset.motion_id!r} to {out}")
