import json
from pathlib import Path

from apps.appearance.providers import PROVIDERS, get_provider
from apps.backbone.weights import load_backbone
from apps.data.datasets import load_motion_dataset
from apps.data.prompts import SYNTH_CONTEXTS, SYNTH_SUBJECTS, build_eval_prompts
from apps.eval.benchmark import decoupling_summary, evaluate_benchmark
from apps.eval.embedders import EMBEDDERS, get_embedder
from apps.runs.base import PipelineCommand
from apps.runs.management.commands.generate import SAMPLE_FLAGS, add_sample_arguments
from apps.sampling.config import resolve_sample_config
from apps.training.checkpoints import load_motion_checkpoint


def _names(value):
    return [item.strip() for item in value.split(',') if item.strip()]


class Command(PipelineCommand):
    help = "Score motion checkpoints on six prompts per motion and write the metrics table."
    command_name = 'evaluate'

    def add_arguments(self, parser):
        parser.add_argument('--checkpoint', action='append', required=True, help="Motion checkpoint; repeatable.")
        parser.add_argument('--references', action='append', required=True,
                            help="Reference dataset directory; repeatable, one per motion.")
        parser.add_argument('--out', required=True, help="Table file (tab-separated).")
        parser.add_argument('--provider', choices=sorted(PROVIDERS), help="Image/text embedding provider.")
        parser.add_argument('--embedder', choices=sorted(EMBEDDERS), default='trajectory')
        parser.add_argument('--subjects', type=_names, default=list(SYNTH_SUBJECTS))
        parser.add_argument('--contexts', type=_names, default=list(SYNTH_CONTEXTS))
        parser.add_argument('--reference-seed', type=int, default=0)
        parser.add_argument('--workers', type=int, default=1, help="Threads for per-video scoring.")
        parser.add_argument('--target-color', help="With --source-color, also write a decoupling summary.")
        parser.add_argument('--source-color')
        add_sample_arguments(parser)

    def run(self, **options):
        config, layers = resolve_sample_config(
            options['config'], self.flags(options, SAMPLE_FLAGS), full_scale=options['full_scale'],
        )
        self.recorder.set_config(
            {**config.as_dict(), 'embedder': options['embedder'], 'subjects': options['subjects'],
             'contexts': options['contexts']},
            layers,
        )
        self.recorder.add_seed('sample', config.seed)
        self.recorder.add_seed('reference', options['reference_seed'])
        out = Path(options['out'])
        out.parent.mkdir(parents=True, exist_ok=True)
        self.recorder.manifest_path = out.with_suffix('.manifest.json')

        backbone = load_backbone(options['backbone'])
        self.recorder.add_checkpoint('backbone', backbone.checksum())
        checkpoints = {}
        for path in options['checkpoint']:
            checkpoint = load_motion_checkpoint(path)
            checkpoints[checkpoint.motion_id] = checkpoint
            self.recorder.add_input(f'checkpoint.{checkpoint.motion_id}', path)
            self.recorder.add_checkpoint(checkpoint.motion_id, checkpoint.checksum())
        references = {}
        for path in options['references']:
            dataset = load_motion_dataset(path)
            references[dataset.motion_id] = dataset
            self.recorder.add_input(f'references.{dataset.motion_id}', path)

        provider = get_provider(options['provider'])
        embedder = get_embedder(options['embedder'])
        report = evaluate_benchmark(
            backbone, checkpoints, references, provider, embedder,
            subjects=options['subjects'], contexts=options['contexts'], config=config,
            seed=options['reference_seed'], workers=options['workers'],
        )
        report.write_table(out)
        self.recorder.add_output('table', out)
        aggregate = report.aggregate()
        self.stdout.write(
            f"clip_t {aggregate.clip_t:.4f}  clip_e {aggregate.clip_e:.4f}  "
            f"temp_cons {aggregate.temp_cons:.4f}  mofid {aggregate.mofid:.4f}"
        )

        if options['target_color'] and options['source_color']:
            summaries = {}
            for motion_id in sorted(references):
                checkpoint = checkpoints[motion_id]
                summaries[motion_id] = decoupling_summary(
                    backbone, checkpoint, references[motion_id].clips,
                    build_eval_prompts(options['subjects'], options['contexts'], checkpoint.verb),
                    embedder, options['target_color'], options['source_color'],
                    config=config, seed=options['reference_seed'],
                )
            summary_path = out.with_suffix('.decoupling.json')
            summary_path.write_text(json.dumps(summaries, indent=2, sort_keys=True) + '\n')
            self.recorder.add_output('decoupling', summary_path)
