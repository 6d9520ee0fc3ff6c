import math

import torch
from django.test import SimpleTestCase

from apps.appearance.providers import FrameEmbedding
from apps.backbone.types import ConditionEmbedding
from apps.core.exceptions import (
    DimensionMismatchError,
    DoubleEnhancementError,
    EmptyInputError,
    MissingVerbIndexError,
    ProviderError,
    VerbNotFoundError,
)
from apps.motion_enhancer.enhancer import (
    EnhancerMlp,
    ResidualEmbedding,
    compute_residual,
    enhance_condition,
    enhance_tokens,
    pool_video_embedding,
    reg_loss,
)
from apps.motion_enhancer.verbs import RuleTagger, get_tagger, locate_verb, relocate_verb


def random_mlp(image_dim=3, text_dim=4, hidden_dim=5, seed=0):
    generator = torch.Generator().manual_seed(seed)
    mlp = EnhancerMlp(image_dim, text_dim, hidden_dim, generator=generator, dtype=torch.float64)
    with torch.no_grad():
        mlp.fc2.weight.normal_(0.0, 0.5, generator=generator)
    return mlp


class EnhancerMlpTestCase(SimpleTestCase):
    def test_fresh_mlp_outputs_zero(self):
        mlp = EnhancerMlp(3, 4, generator=torch.Generator().manual_seed(0))
        self.assertTrue(torch.equal(mlp(torch.ones(3), torch.ones(4)), torch.zeros(4)))
        self.assertGreater(float(mlp.fc1.weight.abs().sum()), 0.0)

    def test_matches_scalar_loops(self):
        mlp = random_mlp()
        pooled = torch.tensor([0.2, -0.4, 0.9], dtype=torch.float64)
        base = torch.tensor([1.0, 0.5, -1.5, 0.25], dtype=torch.float64)
        inputs = pooled.tolist() + base.tolist()
        w1 = mlp.fc1.weight.tolist()
        w2 = mlp.fc2.weight.tolist()
        hidden = []
        for row in w1:
            h = sum(weight * value for weight, value in zip(row, inputs))
            hidden.append(0.5 * h * (1.0 + math.erf(h / math.sqrt(2.0))))
        expected = [sum(weight * value for weight, value in zip(row, hidden)) for row in w2]
        actual = compute_residual(pooled, base, mlp).vector
        for got, want in zip(actual.tolist(), expected):
            self.assertAlmostEqual(got, want, places=12)

    def test_gradients(self):
        mlp = random_mlp()
        pooled = torch.randn(3, dtype=torch.float64, requires_grad=True)
        base = torch.randn(4, dtype=torch.float64, requires_grad=True)
        self.assertTrue(torch.autograd.gradcheck(mlp, (pooled, base)))

    def test_batched_pooled_broadcasts_base(self):
        mlp = random_mlp()
        pooled = torch.randn(2, 3, dtype=torch.float64)
        base = torch.randn(4, dtype=torch.float64)
        batched = mlp(pooled, base)
        self.assertEqual(tuple(batched.shape), (2, 4))
        self.assertTrue(torch.allclose(batched[1], mlp(pooled[1], base)))

    def test_width_mismatch(self):
        with self.assertRaises(DimensionMismatchError):
            EnhancerMlp(3, 4)(torch.zeros(5), torch.zeros(4))


class PoolingTestCase(SimpleTestCase):
    def test_mean_over_frames(self):
        pooled = pool_video_embedding([
            FrameEmbedding(torch.tensor([[1.0, 0.0]])),
            FrameEmbedding(torch.tensor([[0.0, 1.0]])),
        ])
        self.assertTrue(torch.equal(pooled, torch.tensor([0.5, 0.5])))

    def test_tensor_input(self):
        frames = torch.tensor([[[1.0, 3.0], [3.0, 5.0]]])
        self.assertTrue(torch.equal(pool_video_embedding(frames), torch.tensor([[2.0, 4.0]])))

    def test_empty(self):
        with self.assertRaises(EmptyInputError):
            pool_video_embedding([])

    def test_mixed_widths(self):
        with self.assertRaises(DimensionMismatchError):
            pool_video_embedding([torch.zeros(2), torch.zeros(3)])


class EnhanceConditionTestCase(SimpleTestCase):
    def setUp(self):
        self.cond = ConditionEmbedding(torch.zeros(4, 2), tokens=['a', 'dog', 'is', 'running'], verb_index=3)

    def test_only_verb_row_changes(self):
        enhanced = enhance_condition(self.cond, ResidualEmbedding(torch.tensor([1.0, -2.0])))
        expected = torch.zeros(4, 2)
        expected[3] = torch.tensor([1.0, -2.0])
        self.assertTrue(torch.equal(enhanced.token_embeddings, expected))
        self.assertTrue(enhanced.enhanced)
        self.assertFalse(self.cond.enhanced)

    def test_batched_rows(self):
        tokens = torch.zeros(2, 3, 1)
        out = enhance_tokens(tokens, torch.tensor([0, 2]), torch.tensor([[1.0], [5.0]]))
        self.assertEqual(out[:, :, 0].tolist(), [[1.0, 0.0, 0.0], [0.0, 0.0, 5.0]])

    def test_double_enhancement(self):
        enhanced = enhance_condition(self.cond, torch.ones(2))
        with self.assertRaises(DoubleEnhancementError):
            enhance_condition(enhanced, torch.ones(2))

    def test_missing_verb_index(self):
        with self.assertRaises(MissingVerbIndexError):
            enhance_condition(ConditionEmbedding(torch.zeros(4, 2)), torch.ones(2))

    def test_width_mismatch(self):
        with self.assertRaises(DimensionMismatchError):
            enhance_condition(self.cond, torch.ones(3))


class RegLossTestCase(SimpleTestCase):
    def test_squared_norm(self):
        self.assertEqual(float(reg_loss(ResidualEmbedding(torch.tensor([3.0, 4.0])))), 25.0)

    def test_batch_mean(self):
        self.assertEqual(float(reg_loss(torch.tensor([[3.0, 4.0], [0.0, 0.0]]))), 12.5)


class VerbTaggerTestCase(SimpleTestCase):
    def setUp(self):
        self.tagger = RuleTagger()

    def test_ing_after_auxiliary(self):
        self.assertEqual(locate_verb("a panda is skateboarding on the beach", self.tagger), 3)

    def test_lexicon_word(self):
        self.assertEqual(locate_verb("a square circles", self.tagger), 2)

    def test_fallback_ing_word(self):
        self.assertEqual(locate_verb("a car drifting fast", self.tagger), 2)

    def test_ing_nouns_are_skipped(self):
        with self.assertRaises(VerbNotFoundError):
            locate_verb("a building in the morning", self.tagger)

    def test_empty_prompt(self):
        with self.assertRaises(VerbNotFoundError):
            locate_verb("", self.tagger)

    def test_relocate_prefers_exact_word(self):
        self.assertEqual(relocate_verb("the dog by the pond is circling", 'circling', self.tagger), 6)
        self.assertEqual(relocate_verb("a cat is bouncing", 'circling', self.tagger), 3)

    def test_unknown_tagger(self):
        with self.assertRaises(ProviderError):
            get_tagger('nope')
