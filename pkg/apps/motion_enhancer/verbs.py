"""
Motion-verb location in prompts.

Two taggers are available. ``RuleTagger`` is bundled and hermetic:

1. the first ``-ing`` word directly after an auxiliary (``is``, ``are``,
   ``was``, ``were``, ``am``, ``be``, ``being``, ``been``);
2. otherwise the first word of ``MOTION_LEXICON``;
3. otherwise the first ``-ing`` word of five letters or more that is not in
   ``ING_NOUNS``.

``SpacyTagger`` parses the prompt and takes the syntactic root when it is a
verb, else the earliest verb. spaCy tokens are mapped back to prompt words by
character offset, so a word spaCy splits resolves to its first piece.
"""
import logging

from django.conf import settings

from apps.backbone.text import tokenize
from apps.core.exceptions import ProviderError, VerbNotFoundError

logger = logging.getLogger(__name__)

AUXILIARIES = frozenset({'is', 'are', 'was', 'were', 'am', 'be', 'being', 'been'})

MOTION_LEXICON = frozenset({
    'circling', 'bouncing', 'sweeping', 'lifting', 'skateboarding', 'running',
    'walking', 'jumping', 'dancing', 'swimming', 'riding', 'flying', 'spinning',
    'rotating', 'rolling', 'sliding', 'waving', 'cycling', 'surfing', 'skiing',
    'climbing', 'boxing', 'juggling', 'rowing', 'kicking', 'throwing',
    'circles', 'bounces', 'sweeps', 'lifts', 'runs', 'walks', 'jumps', 'dances',
    'swims', 'rides', 'flies', 'spins', 'rolls', 'slides', 'waves', 'climbs',
})

ING_NOUNS = frozenset({
    'thing', 'something', 'nothing', 'anything', 'everything', 'morning',
    'evening', 'building', 'ceiling', 'clothing', 'painting', 'pudding',
    'king', 'ring', 'string', 'spring', 'wing', 'earring', 'wedding',
})


class VerbTagger:
    name = 'base'

    def locate(self, tokens):
        """Index of the motion verb in ``tokens``; raises VerbNotFoundError."""
        raise NotImplementedError


class RuleTagger(VerbTagger):
    name = 'rule'

    def locate(self, tokens):
        for index in range(1, len(tokens)):
            if tokens[index - 1] in AUXILIARIES and tokens[index].endswith('ing'):
                return index
        for index, word in enumerate(tokens):
            if word in MOTION_LEXICON:
                return index
        for index, word in enumerate(tokens):
            if word.endswith('ing') and len(word) >= 5 and word not in ING_NOUNS:
                return index
        raise VerbNotFoundError(f"No motion verb in {' '.join(tokens)!r}; set verb_index explicitly")


class SpacyTagger(VerbTagger):
    name = 'spacy'

    def __init__(self, model=None):
        try:
            import spacy
        except ImportError as exc:
            raise ProviderError("The spacy tagger needs the 'spacy' package") from exc
        model = model or settings.MOTION_TRANSFER['TAGGER']['SPACY_MODEL']
        try:
            self.nlp = spacy.load(model)
        except OSError as exc:
            raise ProviderError(f"spaCy model {model!r} is not installed") from exc

    def locate(self, tokens):
        text = ' '.join(tokens)
        starts = []
        offset = 0
        for word in tokens:
            starts.append(offset)
            offset += len(word) + 1
        doc = self.nlp(text)
        verbs = [token for token in doc if token.pos_ == 'VERB']
        roots = [token for token in verbs if token.dep_ == 'ROOT']
        chosen = (roots or verbs or [None])[0]
        if chosen is None:
            raise VerbNotFoundError(f"No verb in {text!r}; set verb_index explicitly")
        return max(index for index, start in enumerate(starts) if start <= chosen.idx)


TAGGERS = {
    'rule': RuleTagger,
    'spacy': SpacyTagger,
}


def get_tagger(name=None):
    name = name or settings.MOTION_TRANSFER['TAGGER']['BACKEND']
    try:
        return TAGGERS[name]()
    except KeyError:
        raise ProviderError(f"Unknown tagger {name!r}; choose from {sorted(TAGGERS)}")


def locate_verb(tokens, tagger=None):
    """
    Parameters:
    - tokens (list[str] | str): prompt words, or a prompt to tokenize.
    - tagger (VerbTagger | None): defaults to the configured tagger.

    Raises:
    - VerbNotFoundError: empty prompt or no verb.
    """
    if isinstance(tokens, str):
        tokens = tokenize(tokens)
    if not tokens:
        raise VerbNotFoundError("Cannot locate a verb in an empty prompt")
    tagger = tagger or get_tagger()
    index = tagger.locate(list(tokens))
    logger.debug("Verb of %r is %r (%s tagger)", ' '.join(tokens), tokens[index], tagger.name)
    return index


def relocate_verb(tokens, verb, tagger=None):
    """
    Find a known verb word in a new prompt: the first exact match, else
    whatever the tagger picks.
    """
    if isinstance(tokens, str):
        tokens = tokenize(tokens)
    if verb in tokens:
        return tokens.index(verb)
    return locate_verb(tokens, tagger)
