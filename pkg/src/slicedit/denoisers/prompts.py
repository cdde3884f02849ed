from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

N_TOKENS = 8
TOKEN_DIM = 64


@dataclass(frozen=True, eq=False)
class PromptEmbedding:
    tokens: np.ndarray  # (N_TOKENS, TOKEN_DIM)
    source_text: str

    @property
    def is_null(self) -> bool:
        return self.source_text == ""

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PromptEmbedding)
            and self.source_text == other.source_text
            and np.array_equal(self.tokens, other.tokens)
        )

    def __hash__(self) -> int:
        return hash(self.source_text)


@lru_cache(maxsize=256)
def embed_prompt(text: str) -> PromptEmbedding:
    """Deterministic stand-in text encoder: one seeded Gaussian vector per
    (text, position). The empty prompt maps to all-zero tokens."""
    tokens = np.zeros((N_TOKENS, TOKEN_DIM), dtype=np.float32)
    if text:
        for pos in range(N_TOKENS):
            digest = hashlib.sha256(f"{text}\x00{pos}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            tokens[pos] = rng.standard_normal(TOKEN_DIM)
    tokens.flags.writeable = False
    return PromptEmbedding(tokens, text)


NULL_PROMPT = embed_prompt("")
