"""
Prompt recaptioning.

A recaptioner expands a base prompt ("a red square is circling") with the
appearance of one reference frame, so stage 1 binds appearance to the
spatial adapters through words instead of leaving it for the temporal ones.

Clients:
- ``HttpRecaptionerClient`` posts ``{instruction, prompt, image}`` (image as a
  base64 PNG) to a JSON endpoint and reads back ``{text}``.
- ``MockRecaptionerClient`` is offline and deterministic; see its docstring
  for the exact rule.
"""
import base64
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import httpx
import torch
from django.conf import settings
from PIL import Image

from apps.appearance.providers import PALETTE_NAMES, palette_indices
from apps.backbone.text import tokenize
from apps.core.exceptions import (
    ProviderError,
    RecaptionBudgetError,
    RecaptionTimeoutError,
    RecaptionValidationError,
)
from apps.motion_enhancer.verbs import AUXILIARIES

logger = logging.getLogger(__name__)


@dataclass
class PromptSpec:
    """
    Attributes:
    - base_prompt (str): e.g. "a red square is circling".
    - recaptioned_prompt (str | None): set once recaptioned.
    - verb_index (int | None): verb position in ``tokenize(base_prompt)``.
    """
    base_prompt: str
    recaptioned_prompt: Optional[str] = None
    verb_index: Optional[int] = None

    @property
    def tokens(self):
        return tokenize(self.base_prompt)

    @property
    def training_prompt(self):
        return self.recaptioned_prompt or self.base_prompt


def load_instruction(path=None):
    path = Path(path or settings.MOTION_TRANSFER['RECAPTIONER']['INSTRUCTION'])
    return path.read_text().strip()


def frame_to_png(frame):
    """Encode an ``[H, W, 3]`` frame in [0, 1] as PNG bytes."""
    pixels = (frame.clamp(0, 1) * 255).round().to(torch.uint8).numpy()
    buffer = io.BytesIO()
    Image.fromarray(pixels).save(buffer, format='PNG')
    return buffer.getvalue()


class RecaptionerClient:
    name = 'base'

    def expand(self, instruction, prompt, frame):
        """Return the expanded prompt text for ``prompt`` given ``frame``."""
        raise NotImplementedError


class HttpRecaptionerClient(RecaptionerClient):
    name = 'http'

    def __init__(self, endpoint=None, timeout=None, retries=None, transport=None):
        section = settings.MOTION_TRANSFER['RECAPTIONER']
        self.endpoint = endpoint or section['ENDPOINT']
        self.retries = section['RETRIES'] if retries is None else retries
        self.client = httpx.Client(
            timeout=section['TIMEOUT'] if timeout is None else timeout,
            transport=transport,
        )

    def expand(self, instruction, prompt, frame):
        """
        Raises:
        - RecaptionTimeoutError: every attempt timed out.
        - ProviderError: the endpoint answered with an error or a malformed body.
        """
        payload = {
            'instruction': instruction,
            'prompt': prompt,
            'image': base64.b64encode(frame_to_png(frame)).decode('ascii'),
        }
        attempts = self.retries + 1
        for attempt in range(1, attempts + 1):
            try:
                response = self.client.post(self.endpoint, json=payload)
                response.raise_for_status()
            except httpx.TimeoutException:
                logger.warning("Recaptioner timed out (attempt %d/%d)", attempt, attempts)
                continue
            except httpx.HTTPStatusError as exc:
                if exc.response.status_code >= 500 and attempt < attempts:
                    logger.warning("Recaptioner returned %s (attempt %d/%d)",
                                   exc.response.status_code, attempt, attempts)
                    continue
                raise ProviderError(f"Recaptioner returned {exc.response.status_code}") from exc
            except httpx.HTTPError as exc:
                raise ProviderError(f"Recaptioner request failed: {exc}") from exc
            try:
                return str(response.json()['text'])
            except (ValueError, KeyError, TypeError) as exc:
                raise ProviderError("Recaptioner response has no 'text' field") from exc
        raise RecaptionTimeoutError(f"Recaptioner at {self.endpoint} timed out", retries=self.retries)


class MockRecaptionerClient(RecaptionerClient):
    """
    Deterministic stand-in driven by the frame's colour statistics.

    Every pixel is snapped to its nearest palette colour.
    - background: palette colour of the per-channel median of the border pixels.
    - foreground: most frequent palette colour other than the background.
    - tone: "bright" if the largest per-channel mean over foreground pixels is
      at least 0.5, else "dark".
    - region: "upper"/"lower" and "left"/"right" from the foreground centroid
      against the frame centre.

    The subject gets "in {tone} {foreground}" inserted before the first
    auxiliary verb and ", {region} of a plain {background} frame" is
    appended. Without an auxiliary both phrases are appended. A frame with no
    foreground pixels returns the prompt unchanged.
    """
    name = 'mock'

    def describe(self, frame):
        indices = palette_indices(frame)
        border = torch.cat([frame[0], frame[-1], frame[:, 0], frame[:, -1]])
        background = int(palette_indices(border.median(dim=0).values.unsqueeze(0))[0])
        mask = indices != background
        if not bool(mask.any()):
            return None
        foreground = int(torch.bincount(indices[mask], minlength=len(PALETTE_NAMES)).argmax())
        mask = indices == foreground
        tone = 'bright' if float(frame[mask].mean(dim=0).max()) >= 0.5 else 'dark'
        rows, cols = torch.nonzero(mask, as_tuple=True)
        height, width = indices.shape
        vertical = 'upper' if rows.float().mean() < (height - 1) / 2 else 'lower'
        horizontal = 'left' if cols.float().mean() < (width - 1) / 2 else 'right'
        return {
            'foreground': PALETTE_NAMES[foreground],
            'background': PALETTE_NAMES[background],
            'tone': tone,
            'region': f'{vertical} {horizontal}',
        }

    def expand(self, instruction, prompt, frame):
        described = self.describe(frame)
        if described is None:
            return prompt
        appearance = f"in {described['tone']} {described['foreground']}"
        scene = f"{described['region']} of a plain {described['background']} frame"
        words = prompt.rstrip(' .').split()
        for position, word in enumerate(words):
            if word.lower().strip('.,;:!?') in AUXILIARIES and position > 0:
                words.insert(position, appearance)
                return f"{' '.join(words)}, {scene}"
        return f"{' '.join(words)}, {appearance}, {scene}"


CLIENTS = {
    'mock': MockRecaptionerClient,
    'http': HttpRecaptionerClient,
}


def get_recaptioner(name=None):
    name = name or settings.MOTION_TRANSFER['RECAPTIONER']['BACKEND']
    try:
        return CLIENTS[name]()
    except KeyError:
        raise ProviderError(f"Unknown recaptioner {name!r}; choose from {sorted(CLIENTS)}")


def _is_subsequence(needles, haystack):
    remaining = iter(haystack)
    return all(word in remaining for word in needles)


def protected_tokens(spec):
    """Base tokens a recaption must keep in order: the subject and the verb."""
    tokens = spec.tokens
    if spec.verb_index is None:
        return tokens
    subject = [word for word in tokens[:spec.verb_index] if word not in AUXILIARIES]
    return subject + [tokens[spec.verb_index]]


def recaption(base, frame, client, instruction=None, max_tokens=None):
    """
    Expand ``base`` with appearance detail taken from ``frame``.

    Returns:
    - PromptSpec: ``base`` with ``recaptioned_prompt`` set. An empty answer
      leaves the base prompt as the recaption.

    Raises:
    - RecaptionTimeoutError: the client gave up after its retries.
    - RecaptionValidationError: the answer dropped the subject or the verb, or
      is longer than ``max_tokens``.
    """
    instruction = load_instruction() if instruction is None else instruction
    text = (client.expand(instruction, base.base_prompt, frame) or '').strip()
    if not text:
        return replace(base, recaptioned_prompt=base.base_prompt)
    tokens = tokenize(text)
    if not _is_subsequence(protected_tokens(base), tokens):
        raise RecaptionValidationError(f"Recaption {text!r} drops words of {base.base_prompt!r}")
    if max_tokens is not None and len(tokens) > max_tokens:
        raise RecaptionValidationError(f"Recaption has {len(tokens)} tokens; limit is {max_tokens}")
    return replace(base, recaptioned_prompt=text)


def recaption_dataset(specs, clips, client, generator, instruction=None, budget=None,
                      max_tokens=None, workers=1):
    """
    Recaption one prompt per clip from a uniformly chosen frame of that clip.

    Timeouts and validation failures fall back to the base prompt and are
    logged. Frame choices are drawn up front, so results do not depend on
    ``workers``.

    Raises:
    - RecaptionBudgetError: more than ``budget`` clips fell back.
    """
    instruction = load_instruction() if instruction is None else instruction
    budget = settings.MOTION_TRANSFER['RECAPTIONER']['FALLBACK_BUDGET'] if budget is None else budget
    picks = [int(torch.randint(clip.frame_count, (1,), generator=generator)) for clip in clips]

    def run(item):
        spec, clip, pick = item
        try:
            return recaption(spec, clip.frames[pick], client, instruction, max_tokens), None
        except (RecaptionTimeoutError, RecaptionValidationError, ProviderError) as exc:
            return replace(spec, recaptioned_prompt=spec.base_prompt), exc

    items = list(zip(specs, clips, picks))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, items))
    else:
        outcomes = [run(item) for item in items]

    failures = 0
    for (spec, _, pick), (_, error) in zip(items, outcomes):
        if error is not None:
            failures += 1
            logger.warning("Recaption of %r (frame %d) fell back to the base prompt: %s",
                           spec.base_prompt, pick, error)
    if failures > budget:
        raise RecaptionBudgetError(f"{failures} recaptions failed; the fallback budget is {budget}")
    return [spec for spec, _ in outcomes]
