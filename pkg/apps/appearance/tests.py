import json

import httpx
import torch
from django.test import SimpleTestCase

from apps.appearance.injector import (
    AppearanceInjection,
    InjectorWeights,
    inject_appearance,
    random_frame_embeddings,
)
from apps.appearance.providers import PALETTE_NAMES, ToyColorProvider, embed_frame, embed_frames, get_provider
from apps.appearance.recaptioner import (
    HttpRecaptionerClient,
    MockRecaptionerClient,
    PromptSpec,
    RecaptionerClient,
    load_instruction,
    protected_tokens,
    recaption,
    recaption_dataset,
)
from apps.backbone.types import HiddenStates, VideoClip
from apps.core.exceptions import (
    MissingInjectorBlockError,
    ProviderError,
    RecaptionBudgetError,
    RecaptionTimeoutError,
    RecaptionValidationError,
    ShapeError,
)


def square_frame(size=16, colour=(1.0, 0.0, 0.0), background=(0.5, 0.5, 0.5), top=2, left=2, side=4):
    frame = torch.tensor(background).expand(size, size, 3).clone()
    frame[top:top + side, left:left + side] = torch.tensor(colour)
    return frame


class ProviderTestCase(SimpleTestCase):
    def setUp(self):
        self.provider = ToyColorProvider()

    def test_single_colour_frame_is_one_hot(self):
        frame = torch.tensor([0.0, 0.0, 1.0]).expand(1, 4, 4, 3)
        vector = embed_frames(frame, self.provider)[0]
        expected = torch.zeros(len(PALETTE_NAMES))
        expected[PALETTE_NAMES.index('blue')] = 1.0
        self.assertTrue(torch.allclose(vector, expected))

    def test_frame_embedding_has_unit_norm(self):
        embedding = embed_frame(square_frame(), self.provider, index=3)
        self.assertEqual(tuple(embedding.vector.shape), (1, len(PALETTE_NAMES)))
        self.assertAlmostEqual(float(embedding.vector.norm()), 1.0, places=6)
        self.assertEqual(embedding.source_frame_index, 3)

    def test_text_counts_colour_words(self):
        vector = self.provider.embed_text("a red square on red")
        self.assertEqual(float(vector[PALETTE_NAMES.index('red')]), 2.0)
        self.assertEqual(float(vector.sum()), 2.0)

    def test_text_without_colours_is_uniform(self):
        self.assertTrue(torch.equal(self.provider.embed_text("a panda"), torch.ones(len(PALETTE_NAMES))))

    def test_unknown_provider(self):
        with self.assertRaises(ProviderError):
            get_provider('nope')


class InjectorTestCase(SimpleTestCase):
    def setUp(self):
        self.weights = InjectorWeights({'down0': 2, 'up0': 2}, image_dim=2)

    def test_hand_example(self):
        with torch.no_grad():
            self.weights.maps['down0'].weight.copy_(torch.eye(2))
        hidden = torch.zeros(4, 3, 2)
        injected = inject_appearance(hidden, torch.tensor([[1.0, -1.0]]), self.weights, 'down0')
        self.assertTrue(torch.equal(injected, torch.tensor([1.0, -1.0]).expand(4, 3, 2)))

    def test_zero_maps_are_identity(self):
        hidden = torch.randn(4, 3, 2)
        injected = inject_appearance(hidden, torch.tensor([[0.3, 0.7]]), self.weights, 'up0')
        self.assertTrue(torch.equal(injected, hidden))

    def test_added_term_is_constant_over_frames(self):
        generator = torch.Generator().manual_seed(0)
        with torch.no_grad():
            self.weights.maps['down0'].weight.copy_(torch.randn(2, 2, generator=generator))
        hidden = torch.randn(2 * 4, 5, 2, generator=generator)
        emb = torch.randn(2, 2, generator=generator)
        added = inject_appearance(hidden, emb, self.weights, 'down0', batch=2) - hidden
        self.assertLess(float(added.var(dim=1).max()), 1e-10)
        self.assertFalse(torch.allclose(added[0], added[4]))

    def test_missing_block(self):
        with self.assertRaises(MissingInjectorBlockError):
            inject_appearance(torch.zeros(1, 1, 2), torch.zeros(1, 2), self.weights, 'down7')

    def test_spatial_layout_rejected(self):
        hidden = HiddenStates(torch.zeros(2, 4, 2), 'spatial', batch=1, frames=2, height=2, width=2)
        with self.assertRaises(ShapeError):
            inject_appearance(hidden, torch.zeros(1, 2), self.weights, 'down0')

    def test_injection_callable_passes_batch(self):
        with torch.no_grad():
            self.weights.maps['up0'].weight.copy_(torch.eye(2))
        injection = AppearanceInjection(torch.tensor([[2.0, 0.0]]), self.weights)
        out = injection(torch.zeros(6, 2, 2), 'up0', 3)
        self.assertTrue(torch.equal(out, torch.tensor([2.0, 0.0]).expand(6, 2, 2)))

    def test_random_frame_embeddings_pick_real_frames(self):
        embeddings = torch.arange(2 * 4 * 3, dtype=torch.float32).reshape(2, 4, 3)
        picked = random_frame_embeddings(embeddings, torch.Generator().manual_seed(0))
        self.assertEqual(tuple(picked.shape), (2, 3))
        for row in range(2):
            self.assertTrue(any(torch.equal(picked[row], frame) for frame in embeddings[row]))


class MockRecaptionerTestCase(SimpleTestCase):
    def setUp(self):
        self.client = MockRecaptionerClient()

    def test_expands_subject_and_appends_scene(self):
        text = self.client.expand('', "a red square is circling", square_frame())
        self.assertEqual(text, "a red square in bright red is circling, upper left of a plain gray frame")

    def test_without_auxiliary_appends_both(self):
        frame = square_frame(colour=(0.45, 0.45, 0.45), background=(1.0, 1.0, 1.0), top=10, left=10)
        text = self.client.expand('', "a square circles", frame)
        self.assertEqual(text, "a square circles, in dark gray, lower right of a plain white frame")

    def test_plain_frame_returns_prompt(self):
        frame = torch.full((8, 8, 3), 0.5)
        self.assertEqual(self.client.expand('', "a red square is circling", frame), "a red square is circling")

    def test_instruction_asset_loads(self):
        self.assertIn("action verb", load_instruction())


class _FixedClient(RecaptionerClient):
    name = 'fixed'

    def __init__(self, answer=None, error=None):
        self.answer = answer
        self.error = error

    def expand(self, instruction, prompt, frame):
        if self.error is not None:
            raise self.error
        return self.answer


class RecaptionTestCase(SimpleTestCase):
    def setUp(self):
        self.spec = PromptSpec("a red square is circling", verb_index=4)

    def test_protected_tokens_skip_auxiliaries(self):
        self.assertEqual(protected_tokens(self.spec), ['a', 'red', 'square', 'circling'])

    def test_valid_recaption_is_kept(self):
        result = recaption(self.spec, square_frame(), MockRecaptionerClient(), instruction='')
        self.assertTrue(result.recaptioned_prompt.startswith("a red square in bright red"))
        self.assertEqual(result.training_prompt, result.recaptioned_prompt)

    def test_verb_position_stays_on_the_base_prompt(self):
        result = recaption(self.spec, square_frame(), MockRecaptionerClient(), instruction='')
        self.assertEqual(result.verb_index, 4)
        self.assertEqual(result.base_prompt, "a red square is circling")
        self.assertEqual(result.tokens[result.verb_index], 'circling')

    def test_dropping_the_verb_is_rejected(self):
        with self.assertRaises(RecaptionValidationError):
            recaption(self.spec, square_frame(), _FixedClient("a red square on gray"), instruction='')

    def test_too_long_recaption_is_rejected(self):
        with self.assertRaises(RecaptionValidationError):
            recaption(self.spec, square_frame(), MockRecaptionerClient(), instruction='', max_tokens=6)

    def test_empty_answer_keeps_base(self):
        result = recaption(self.spec, square_frame(), _FixedClient(''), instruction='')
        self.assertEqual(result.recaptioned_prompt, self.spec.base_prompt)

    def test_failures_fall_back_within_budget(self):
        clips = [VideoClip(square_frame().unsqueeze(0).repeat(3, 1, 1, 1))] * 2
        client = _FixedClient(error=RecaptionTimeoutError("slow", retries=0))
        specs = recaption_dataset([self.spec] * 2, clips, client, torch.Generator().manual_seed(0),
                                  instruction='', budget=2)
        self.assertEqual([spec.recaptioned_prompt for spec in specs], [self.spec.base_prompt] * 2)

    def test_failures_over_budget(self):
        clips = [VideoClip(square_frame().unsqueeze(0))] * 2
        client = _FixedClient(error=RecaptionTimeoutError("slow", retries=0))
        with self.assertRaises(RecaptionBudgetError):
            recaption_dataset([self.spec] * 2, clips, client, torch.Generator().manual_seed(0),
                              instruction='', budget=1)

    def test_workers_do_not_change_results(self):
        clips = [VideoClip(square_frame(top=top).unsqueeze(0).repeat(2, 1, 1, 1)) for top in (1, 10, 5)]
        serial = recaption_dataset([self.spec] * 3, clips, MockRecaptionerClient(),
                                   torch.Generator().manual_seed(4), instruction='', budget=0)
        threaded = recaption_dataset([self.spec] * 3, clips, MockRecaptionerClient(),
                                     torch.Generator().manual_seed(4), instruction='', budget=0, workers=3)
        self.assertEqual(serial, threaded)


class HttpRecaptionerTestCase(SimpleTestCase):
    def make_client(self, handler, retries=2):
        return HttpRecaptionerClient(endpoint='http://recaptioner.test/expand', timeout=1.0,
                                     retries=retries, transport=httpx.MockTransport(handler))

    def test_posts_prompt_and_image(self):
        seen = []

        def handler(request):
            seen.append(json.loads(request.content))
            return httpx.Response(200, json={'text': "a red square in red is circling"})

        text = self.make_client(handler).expand('describe', "a red square is circling", square_frame())
        self.assertEqual(text, "a red square in red is circling")
        self.assertEqual(seen[0]['instruction'], 'describe')
        self.assertEqual(seen[0]['prompt'], "a red square is circling")
        self.assertTrue(seen[0]['image'])

    def test_timeouts_exhaust_retries(self):
        calls = []

        def handler(request):
            calls.append(request)
            raise httpx.ReadTimeout("timed out", request=request)

        with self.assertRaises(RecaptionTimeoutError):
            self.make_client(handler, retries=2).expand('', "a square is circling", square_frame())
        self.assertEqual(len(calls), 3)

    def test_server_error_is_retried(self):
        responses = iter([httpx.Response(503), httpx.Response(200, json={'text': 'ok'})])
        self.assertEqual(self.make_client(lambda request: next(responses)).expand('', 'p', square_frame()), 'ok')

    def test_client_error_is_not_retried(self):
        with self.assertRaises(ProviderError):
            self.make_client(lambda request: httpx.Response(400)).expand('', 'p', square_frame())

    def test_malformed_body(self):
        with self.assertRaises(ProviderError):
            self.make_client(lambda request: httpx.Response(200, json={'caption': 'x'})).expand('', 'p', square_frame())
