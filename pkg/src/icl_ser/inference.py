"""Beam-search decoding and zero-/k-shot in-context inference."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .corpus import Utterance, Vocab
from .model import SpeechLM, assemble_context
from .model.context import PromptContext
from .selection import EnrollmentSet
from .tensor import no_grad

DEFAULT_BEAM = 4
DEFAULT_MAX_LEN = 4


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class BeamHypothesis:
    tokens: tuple[int, ...]
    log_prob: float
    finished: bool = False

    def sort_key(self):
        return (-self.log_prob, self.tokens)


@dataclass(frozen=True)
class BeamResult:
    tokens: tuple[int, ...]
    log_prob: float
    truncated: bool
    beam: tuple[BeamHypothesis, ...]


class _Beam:
    """Live hypotheses plus an archive of finished ones.

    EOS competes for beam slots like any token, which keeps beam size 1
    identical to greedy decoding; once selected, a finished hypothesis leaves
    the live beam and can no longer be evicted.
    """

    def __init__(self, beam_size: int, eos: int, max_len: int):
        self.size = beam_size
        self.eos = eos
        self.max_len = max_len
        self.hyps = [BeamHypothesis((), 0.0)]
        self.finished: list[BeamHypothesis] = []

    @property
    def done(self) -> bool:
        if not self.hyps:
            return True
        best_done = max((h.log_prob for h in self.finished), default=-np.inf)
        # scores only fall as hypotheses grow
        return best_done >= max(h.log_prob for h in self.hyps)

    def live(self) -> list[BeamHypothesis]:
        return self.hyps

    def advance(self, log_probs: np.ndarray) -> None:
        pool = []
        for h, row in zip(self.hyps, log_probs):
            order = np.lexsort((np.arange(row.size), -row))[: self.size]
            for tok in order:
                tok = int(tok)
                pool.append(BeamHypothesis(h.tokens + (tok,), h.log_prob + float(row[tok]), tok == self.eos))
        pool.sort(key=BeamHypothesis.sort_key)
        chosen = pool[: self.size]
        self.finished.extend(h for h in chosen if h.finished)
        self.hyps = [h for h in chosen if not h.finished]

    def result(self) -> BeamResult:
        # reaching the length cap also ends a hypothesis, flagged as truncated
        capped = [h for h in self.hyps if len(h.tokens) >= self.max_len]
        complete = sorted(self.finished + capped or self.hyps, key=BeamHypothesis.sort_key)
        best = complete[0]
        return BeamResult(best.tokens, best.log_prob, not best.finished, tuple(complete[: self.size]))


StepFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def beam_search_batch(step_fn: StepFn, n_examples: int, beam_size: int = DEFAULT_BEAM,
                      max_len: int = DEFAULT_MAX_LEN, eos: int = 2) -> list[BeamResult]:
    """Run independent beams for ``n_examples`` in lock step.

    ``step_fn(example_index, prefixes)`` returns next-token log-probabilities
    (n, V) for the generated prefixes (n, t); BOS is the caller's concern.
    Scores are summed log-probabilities without length normalisation; ties
    go to the lexicographically smaller token sequence.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    beams = [_Beam(beam_size, eos, max_len) for _ in range(n_examples)]
    for t in range(max_len):
        active = [i for i, b in enumerate(beams) if not b.done]
        if not active:
            break
        owners, prefixes = [], []
        for i in active:
            for h in beams[i].live():
                owners.append(i)
                prefixes.append(h.tokens)
        logp = step_fn(np.array(owners, dtype=np.int64), np.array(prefixes, dtype=np.int64).reshape(len(prefixes), t))
        row = 0
        for i in active:
            n = len(beams[i].live())
            beams[i].advance(logp[row:row + n])
            row += n
    return [b.result() for b in beams]


def beam_search(step_fn: Callable[[np.ndarray], np.ndarray], beam_size: int = DEFAULT_BEAM,
                max_len: int = DEFAULT_MAX_LEN, eos: int = 2) -> BeamResult:
    """Single-example beam search; ``step_fn(prefixes)`` -> (n, V) log-probs."""
    return beam_search_batch(lambda _, p: step_fn(p), 1, beam_size, max_len, eos)[0]


def greedy_decode(step_fn: Callable[[np.ndarray], np.ndarray], max_len: int = DEFAULT_MAX_LEN,
                  eos: int = 2) -> tuple[tuple[int, ...], float]:
    tokens: tuple[int, ...] = ()
    score = 0.0
    for _ in range(max_len):
        row = step_fn(np.array([tokens], dtype=np.int64).reshape(1, len(tokens)))[0]
        tok = int(np.lexsort((np.arange(row.size), -row))[0])
        tokens += (tok,)
        score += float(row[tok])
        if tok == eos:
            break
    return tokens, score


def sequence_log_prob(step_fn: Callable[[np.ndarray], np.ndarray], tokens: Sequence[int]) -> float:
    """Independent re-scoring of a token sequence, one step at a time."""
    total = 0.0
    for t, tok in enumerate(tokens):
        prefix = np.array([tokens[:t]], dtype=np.int64).reshape(1, t)
        total += float(step_fn(prefix)[0, tok])
    return total


def model_step_fn(model: SpeechLM, memory: np.ndarray, lengths: np.ndarray) -> StepFn:
    bos = model.vocab.bos

    def step(owners: np.ndarray, prefixes: np.ndarray) -> np.ndarray:
        full = np.concatenate([np.full((len(owners), 1), bos), prefixes], axis=1)
        return model.next_log_probs(memory[owners], lengths[owners], full)

    return step


# -- ICL inference ----------------------------------------------------------------

@dataclass(frozen=True)
class Prediction:
    text: str
    tokens: tuple[int, ...]
    log_prob: float
    truncated: bool


def build_context(model: SpeechLM, target: Utterance, enrollment: EnrollmentSet | None,
                  instruction: Sequence[int]) -> PromptContext:
    pairs = []
    if enrollment is not None:
        if enrollment.speaker_id != target.speaker_id or any(
                u.speaker_id != target.speaker_id for u in enrollment.utterances):
            raise ContractError(
                f"enrollment speaker {enrollment.speaker_id} does not match target speaker {target.speaker_id}"
            )
        pairs = enrollment.pairs(model.vocab)
    return assemble_context(instruction, pairs, target, model.cfg.max_sequences, model.cfg.pair_order)


def predict_contexts(model: SpeechLM, contexts: Sequence[PromptContext], beam_size: int = DEFAULT_BEAM,
                     max_len: int = DEFAULT_MAX_LEN, batch_size: int = 128) -> list[Prediction]:
    out: list[Prediction] = []
    vocab = model.vocab
    for start in range(0, len(contexts), batch_size):
        chunk = contexts[start:start + batch_size]
        with no_grad():
            c, lengths = model.encode_contexts(chunk)
        results = beam_search_batch(model_step_fn(model, c.data, lengths), len(chunk), beam_size, max_len, vocab.eos)
        out.extend(Prediction(vocab.detokenize(r.tokens), r.tokens, r.log_prob, r.truncated) for r in results)
    return out


def infer_icl(model: SpeechLM, target: Utterance, enrollment: EnrollmentSet | None,
              instruction: Sequence[int], beam_size: int = DEFAULT_BEAM,
              max_len: int = DEFAULT_MAX_LEN) -> Prediction:
    """Predict the emotion text for ``target`` conditioned on its speaker's enrollment pairs."""
    ctx = build_context(model, target, enrollment, instruction)
    return predict_contexts(model, [ctx], beam_size, max_len)[0]


def exact_match(predicted: str, reference: str, eos: str = "<eos>") -> bool:
    """String equality; the only normalisation is dropping a trailing EOS marker."""
    def strip(s: str) -> str:
        s = s.rstrip()
        return s[: -len(eos)].rstrip() if s.endswith(eos) else s
    return strip(predicted) == strip(reference)
