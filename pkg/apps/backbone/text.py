"""
Frozen toy text encoder.

Words are hashed into a fixed vocabulary (id 0 is padding), embedded, given
learned positions and passed through one self-attention layer, so every row
depends on its context. Prompts are padded to ``max_tokens`` rows; the empty
prompt therefore encodes to the all-padding "null" condition used by
classifier-free guidance.
"""
import re
import zlib

import torch
from torch import nn

from apps.backbone.types import ConditionEmbedding
from apps.core.exceptions import ConditionLengthError

_WORD = re.compile(r"[a-z0-9]+(?:'[a-z]+)?")


def tokenize(text):
    """Lower-cased word tokens; punctuation is dropped."""
    return _WORD.findall(text.lower())


class TextEncoder(nn.Module):

    def __init__(self, dim=32, max_tokens=32, vocab_size=4096, heads=4):
        super().__init__()
        self.dim = dim
        self.max_tokens = max_tokens
        self.vocab_size = vocab_size
        self.token_embedding = nn.Embedding(vocab_size, dim)
        self.position_embedding = nn.Parameter(torch.randn(max_tokens, dim) * 0.1)
        self.attention = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm = nn.LayerNorm(dim)

    def token_id(self, word):
        return 1 + zlib.crc32(word.encode()) % (self.vocab_size - 1)

    def token_ids(self, tokens):
        if len(tokens) > self.max_tokens:
            raise ConditionLengthError(
                f"Prompt has {len(tokens)} tokens; the encoder takes at most {self.max_tokens}"
            )
        ids = [self.token_id(word) for word in tokens]
        ids += [0] * (self.max_tokens - len(ids))
        return torch.tensor(ids, dtype=torch.long)

    def forward(self, ids):
        hidden = self.token_embedding(ids) + self.position_embedding[: ids.shape[-1]]
        attended, _ = self.attention(hidden, hidden, hidden, need_weights=False)
        return self.norm(hidden + attended)

    @torch.no_grad()
    def encode(self, text, verb_index=None):
        """
        Encode a prompt into a ``ConditionEmbedding`` of ``max_tokens`` rows.

        Raises:
        - ConditionLengthError: more words than ``max_tokens``.
        """
        tokens = tokenize(text)
        ids = self.token_ids(tokens).unsqueeze(0)
        return ConditionEmbedding(self(ids)[0], tokens=tokens, verb_index=verb_index)

    def null_condition(self):
        return self.encode('')
