"""Prompt conditioning: a learned token-embedding table, mean-pooled.

Stands in for a large pretrained text encoder: the prompt vocabulary is
closed (six template instantiations), so a jointly trained embedding table
preserves the conditioning pathway without any pretrained weights.
"""

from __future__ import annotations

import numpy as np

from dermdiff.corpus import DISEASES, TONES, build_prompt
from dermdiff.neuralcore import ParameterSet, SeedStream, Tape


def tokenize(text: str) -> list[str]:
    return [t.strip(",.") for t in text.lower().split() if t.strip(",.")]


def closed_vocabulary() -> list[str]:
    """Sorted vocabulary of the six prompt template instantiations."""
    words = set()
    for d in DISEASES:
        for t in TONES:
            words.update(tokenize(build_prompt(d, t).text))
    return sorted(words)


class ConditionEncoder:
    """Token embedding table over the closed prompt vocabulary."""

    def __init__(self, pset: ParameterSet, dim: int = 64, vocab: list[str] | None = None):
        self.pset = pset
        self.dim = dim
        self.vocab = list(vocab) if vocab is not None else closed_vocabulary()
        self.index = {w: i for i, w in enumerate(self.vocab)}

    @classmethod
    def create(cls, pset: ParameterSet, seed_stream: SeedStream, dim: int = 64) -> "ConditionEncoder":
        enc = cls(pset, dim=dim)
        rng = seed_stream.child("cond-init").generator()
        # Lookup rows act like biases, so they get the full unit fan-in range.
        pset.add("cond/embed", rng.uniform(-1.0, 1.0, size=(len(enc.vocab), dim)))
        return enc

    def token_ids(self, text: str) -> np.ndarray:
        try:
            return np.array([self.index[w] for w in tokenize(text)], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"prompt token {exc.args[0]!r} outside the closed vocabulary") from None

    def encode(self, tape: Tape, texts: list[str]):
        """Mean-pooled condition vectors for a batch of prompts: (N, dim) var.

        Gradients scatter back into the embedding table, so the table trains
        jointly with whatever consumes the condition.
        """
        ids = np.stack([self.token_ids(t) for t in texts])  # (N, n_tok), same length by template
        table = self.pset.params["cond/embed"]
        tokens = table[ids]  # (N, n_tok, dim)
        pooled = tokens.mean(axis=1)
        n_tok = ids.shape[1]

        def param_backward(gy):
            grad = np.zeros_like(table)
            per_token = np.repeat(gy / n_tok, n_tok, axis=0)  # (N*n_tok, dim)
            np.add.at(grad, ids.reshape(-1), per_token)
            return [grad]

        return tape.custom([], pooled, lambda gy: [], param_names=("cond/embed",),
                           param_backward=param_backward)

    def encode_tokens(self, tape: Tape, texts: list[str]):
        """Unpooled per-token embeddings: (N, n_tok, dim) var (for cross-attention)."""
        ids = np.stack([self.token_ids(t) for t in texts])
        table = self.pset.params["cond/embed"]
        tokens = table[ids]

        def param_backward(gy):
            grad = np.zeros_like(table)
            np.add.at(grad, ids.reshape(-1), gy.reshape(-1, self.dim))
            return [grad]

        return tape.custom([], tokens, lambda gy: [], param_names=("cond/embed",),
                           param_backward=param_backward)

    def condition_vector(self, text: str) -> np.ndarray:
        """Pooled condition vector for one prompt, outside any tape."""
        ids = self.token_ids(text)
        return self.pset.params["cond/embed"][ids].mean(axis=0)
