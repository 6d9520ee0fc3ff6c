"""
Evaluation prompts: six instances of "A {subject} is {verb} {context}".
"""
from itertools import product

from apps.appearance.recaptioner import PromptSpec
from apps.backbone.text import tokenize
from apps.core.exceptions import EmptyInputError
from apps.motion_enhancer.verbs import AUXILIARIES

TEMPLATE = 'A {subject} is {verb} {context}'
TEMPLATE_COUNT = 6

SYNTH_SUBJECTS = ('blue triangle', 'green disk', 'yellow square')
SYNTH_CONTEXTS = ('on a white background', 'on a black background')


def build_eval_prompts(subjects, contexts, verb):
    """
    Six prompts cycling through every subject for each context in turn.

    Raises:
    - EmptyInputError: no subjects, no contexts or an empty verb.
    """
    subjects, contexts = list(subjects), list(contexts)
    if not subjects or not contexts or not verb:
        raise EmptyInputError("Evaluation prompts need subjects, contexts and a verb")
    pairs = [(subject, context) for context, subject in product(contexts, subjects)]
    specs = []
    for index in range(TEMPLATE_COUNT):
        subject, context = pairs[index % len(pairs)]
        text = TEMPLATE.format(subject=subject, verb=verb, context=context)
        verb_index = len(tokenize(f'a {subject} is'))
        specs.append(PromptSpec(text, verb_index=verb_index))
    return specs


def entity_prompt(spec):
    """
    The subject phrase alone, e.g. "a panda" for "A panda is skateboarding in
    the park".
    """
    text = spec.base_prompt if isinstance(spec, PromptSpec) else spec
    tokens = tokenize(text)
    cut = next((index for index, word in enumerate(tokens) if word in AUXILIARIES and index > 0), None)
    if cut is None and isinstance(spec, PromptSpec) and spec.verb_index is not None:
        cut = spec.verb_index
    return ' '.join(tokens[:cut] if cut else tokens)
