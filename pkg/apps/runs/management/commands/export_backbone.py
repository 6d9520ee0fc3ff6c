from pathlib import Path

from apps.backbone.weights import build_backbone, save_backbone
from apps.runs.base import PipelineCommand


class Command(PipelineCommand):
    help = "Write the seeded backbone weights to an archive that later runs can pin."
    command_name = 'export-backbone'

    def add_arguments(self, parser):
        parser.add_argument('--out', required=True, help="Archive path (.safetensors).")

    def run(self, **options):
        backbone = build_backbone()
        out = Path(options['out'])
        out.parent.mkdir(parents=True, exist_ok=True)
        self.recorder.manifest_path = out.with_suffix('.manifest.json')
        self.recorder.set_config(backbone.config.as_dict())
        self.recorder.add_seed('backbone', backbone.config.seed)
        save_backbone(backbone, out)
        self.recorder.add_checkpoint('backbone', backbone.checksum())
        self.recorder.add_output('backbone', out)
        self.stdout.write(f"Wrote backbone {backbone.checksum()[:12]} to {out}")
