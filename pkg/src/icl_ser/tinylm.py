"""Small random autoregressive models and an exhaustive decoder used to audit beam search."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .inference import beam_search, greedy_decode
from .model.layers import DecoderBlock, Linear, causal_mask, sinusoidal_positions
from .tensor import Tensor, no_grad


@dataclass
class TinyLM:
    """One decoder block over a random memory; the BOS id is ``vocab_size``."""

    embedding: np.ndarray
    block: DecoderBlock
    out: Linear
    memory: np.ndarray
    eos: int

    @classmethod
    def random(cls, rng: np.random.Generator, vocab_size: int, dim: int = 8, heads: int = 2,
               memory_len: int = 5) -> "TinyLM":
        return cls(
            embedding=rng.normal(size=(vocab_size + 1, dim)),
            block=DecoderBlock(dim, heads, 2 * dim, rng),
            out=Linear(dim, vocab_size, rng),
            memory=rng.normal(size=(1, memory_len, dim)),
            eos=int(rng.integers(vocab_size)),
        )

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0] - 1

    def step(self, prefixes: np.ndarray) -> np.ndarray:
        n, t = prefixes.shape
        tokens = np.concatenate([np.full((n, 1), self.vocab_size), prefixes], axis=1).astype(np.int64)
        with no_grad():
            x = Tensor(self.embedding[tokens] + sinusoidal_positions(t + 1, self.embedding.shape[1]))
            memory = Tensor(np.repeat(self.memory, n, axis=0))
            z = self.out(self.block(x, memory, causal_mask(t + 1))).data[:, -1]
        z = z - z.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def exhaustive_argmax(step: Callable[[np.ndarray], np.ndarray], vocab_size: int, max_len: int,
                      eos: int) -> tuple[tuple[int, ...], float]:
    """Best complete sequence: ends at its first EOS, or runs to ``max_len`` without one.

    Ties go to the lexicographically smaller sequence, matching beam search.
    """
    best: tuple[float, tuple[int, ...]] = (-np.inf, ())
    frontier = [((), 0.0)]
    for t in range(max_len):
        prefixes = np.array([p for p, _ in frontier], dtype=np.int64).reshape(len(frontier), t)
        logp = step(prefixes)
        nxt = []
        for (p, score), row in zip(frontier, logp):
            for tok in range(vocab_size):
                seq, s = p + (tok,), score + float(row[tok])
                if tok == eos or t + 1 == max_len:
                    if s > best[0] or (s == best[0] and seq < best[1]):
                        best = (s, seq)
                else:
                    nxt.append((seq, s))
        frontier = nxt
        if not frontier:
            break
    return best[1], best[0]


@dataclass
class DecodeAudit:
    n_models: int
    beam_matches: int
    greedy_matches: int
    beam_misses: list[dict]

    @property
    def beam_rate(self) -> float:
        return self.beam_matches / self.n_models

    @property
    def greedy_rate(self) -> float:
        return self.greedy_matches / self.n_models


def audit_decoding(n_models: int = 200, seed: int = 0, beam_size: int = 4,
                   max_vocab: int = 10, max_len: int = 3) -> DecodeAudit:
    """Compare beam search with exhaustive search and greedy decoding on random tiny models."""
    rng = np.random.default_rng(seed)
    beam_ok = greedy_ok = 0
    misses = []
    for i in range(n_models):
        model = TinyLM.random(rng, vocab_size=int(rng.integers(3, max_vocab + 1)))
        length = int(rng.integers(1, max_len + 1))
        best, score = exhaustive_argmax(model.step, model.vocab_size, length, model.eos)
        got = beam_search(model.step, beam_size, length, model.eos)
        if got.tokens == best:
            beam_ok += 1
        else:
            misses.append({"model": i, "vocab": model.vocab_size, "max_len": length, "beam": got.tokens,
                           "beam_score": got.log_prob, "exhaustive": best, "exhaustive_score": score})
        one = beam_search(model.step, 1, length, model.eos)
        greedy_ok += one.tokens == greedy_decode(model.step, length, model.eos)[0]
    return DecodeAudit(n_models, beam_ok, greedy_ok, misses)


__all__ = ["TinyLM", "exhaustive_argmax", "audit_decoding", "DecodeAudit"]

