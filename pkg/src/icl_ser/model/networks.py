"""Speech encoder, classifier head, Q-Former and the encoder-decoder speech LM."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .. import tensor as T
from ..corpus import Emotion, N_EMOTIONS, Vocab, VocabularyError
from ..tensor import Tensor, no_grad
from .context import PromptContext, SEGMENT_IDS
from .layers import (
    DecoderBlock,
    EncoderBlock,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    causal_mask,
    key_padding_mask,
    sinusoidal_positions,
)


class EmptyInputError(ValueError):
    pass


@dataclass
class ModelConfig:
    feature_dim: int = 16
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 128
    speech_layers: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    qformer_layers: int = 2
    query_len: int = 8
    max_sequences: int = 16
    dropout_rate: float = 0.1
    pair_order: str = "speech-label"
    speech_whitening: bool = True
    vocab: tuple[str, ...] = field(default_factory=lambda: Vocab.default().tokens)
    init_seed: int = 0

    def __post_init__(self):
        self.vocab = tuple(self.vocab)
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim={self.model_dim} not divisible by heads={self.heads}")
        if self.query_len < 1:
            raise ValueError("query_len must be >= 1")
        if self.pair_order not in ("speech-label", "label-speech"):
            raise ValueError(f"unknown pair_order {self.pair_order!r}")
        words = set(self.vocab)
        need = {e.word for e in Emotion} | set(Vocab.default().tokens)
        if not need <= words:
            raise ValueError(f"vocab lacks required tokens: {sorted(need - words)}")

    def make_vocab(self) -> Vocab:
        return Vocab(self.vocab)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab"] = list(self.vocab)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def pad_batch(arrays: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length (T, F) arrays into (B, T_max, F) zero-padded plus lengths."""
    lengths = np.array([a.shape[0] for a in arrays], dtype=np.int64)
    if lengths.size == 0 or lengths.min() == 0:
        raise EmptyInputError("speech input must contain at least one frame")
    out = np.zeros((len(arrays), int(lengths.max()), arrays[0].shape[1]))
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = a
    return out, lengths


def _time_mask(lengths: np.ndarray, max_len: int) -> np.ndarray:
    return (np.arange(max_len)[None, :] < lengths[:, None]).astype(np.float64)[..., None]


class SpeechEncoder(Module):
    """Two conv + max-pool stages (x4 time reduction) followed by transformer blocks."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.model_dim
        self.conv1 = Linear(3 * cfg.feature_dim, d, rng)
        self.conv2 = Linear(3 * d, d, rng)
        self.blocks = [EncoderBlock(d, cfg.heads, cfg.ffn_dim, rng) for _ in range(cfg.speech_layers)]
        self.ln = LayerNorm(d)

    @staticmethod
    def output_lengths(lengths: np.ndarray) -> np.ndarray:
        half = (np.asarray(lengths) + 1) // 2
        return (half + 1) // 2

    def _conv_relu_pool(self, x: Tensor, conv: Linear, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
        t = x.shape[1]
        p = T.pad_axis(x, 1, 1, 1)
        window = T.concat([p[:, 0:t], p[:, 1:t + 1], p[:, 2:t + 2]], axis=-1)
        # relu output is >= 0, so zeroed padding never wins the max below
        y = T.relu(conv(window)) * _time_mask(lengths, t)
        if t % 2:
            y = T.pad_axis(y, 1, 0, 1)
            t += 1
        y = T.max(y.reshape(y.shape[0], t // 2, 2, y.shape[-1]), axis=2)
        return y, (lengths + 1) // 2

    def __call__(self, frames: np.ndarray, lengths: np.ndarray, rate: float = 0.0, rng=None) -> Tensor:
        x = Tensor(frames * _time_mask(lengths, frames.shape[1]))
        x, lengths = self._conv_relu_pool(x, self.conv1, lengths)
        x, lengths = self._conv_relu_pool(x, self.conv2, lengths)
        x = x + sinusoidal_positions(x.shape[1], x.shape[2])
        mask = key_padding_mask(lengths, x.shape[1])
        for block in self.blocks:
            x = block(x, mask, rate, rng)
        return self.ln(x)


class AttentivePool(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.proj = Linear(dim, dim, rng)
        self.score = Parameter(rng.normal(0.0, 1.0 / math.sqrt(dim), (dim, 1)))

    def weights(self, h: Tensor, lengths: np.ndarray) -> Tensor:
        s = (T.tanh(self.proj(h)) @ self.score).reshape(h.shape[0], h.shape[1])
        s = s + np.where(np.arange(h.shape[1])[None, :] < lengths[:, None], 0.0, -1e9)
        return T.softmax(s, axis=-1)

    def __call__(self, h: Tensor, lengths: np.ndarray) -> Tensor:
        a = self.weights(h, lengths)
        return (h * a.reshape(a.shape[0], a.shape[1], 1)).sum(axis=1)


class EmotionClassifier(Module):
    """Speech encoder, attentive pooling and a linear softmax head over the emotions."""

    def __init__(self, cfg: ModelConfig):
        rng = np.random.default_rng(cfg.init_seed)
        self.cfg = cfg
        self.speech_encoder = SpeechEncoder(cfg, rng)
        self.pool = AttentivePool(cfg.model_dim, rng)
        self.head = Linear(cfg.model_dim, N_EMOTIONS, rng)

    def logits(self, frames: Sequence[np.ndarray], rng=None) -> Tensor:
        x, lengths = pad_batch(frames)
        rate = self.cfg.dropout_rate if rng is not None else 0.0
        h = self.speech_encoder(x, lengths, rate, rng)
        return self.head(self.pool(h, SpeechEncoder.output_lengths(lengths)))

    def encode_speech(self, frames: np.ndarray) -> Tensor:
        x, lengths = pad_batch([frames])
        return self.speech_encoder(x, lengths)[0]

    def attentive_pool(self, h: Tensor) -> Tensor:
        h = T.as_tensor(h)
        if h.shape[0] == 0:
            raise EmptyInputError("attentive pooling needs at least one row")
        return self.pool(h.reshape(1, *h.shape), np.array([h.shape[0]]))[0]

    def classify(self, frames: np.ndarray) -> np.ndarray:
        with no_grad():
            return T.softmax(self.logits([frames]), axis=-1).data[0]

    def predict(self, frames: Sequence[np.ndarray], batch_size: int = 256) -> np.ndarray:
        out = []
        with no_grad():
            for i in range(0, len(frames), batch_size):
                out.append(self.logits(frames[i:i + batch_size]).data.argmax(-1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


class SpeechNormalizer(Module):
    """Fixed affine whitening of frozen speech features, fitted once from training data.

    Identity until :meth:`fit` is called; never updated by the optimizer.
    """

    def __init__(self, dim: int):
        self.mean = Parameter(np.zeros(dim))
        self.transform = Parameter(np.eye(dim))
        self.set_trainable(False)

    def fit(self, rows: np.ndarray, shrinkage: float = 1e-3) -> None:
        mean = rows.mean(axis=0)
        cov = np.cov(rows, rowvar=False)
        evals, evecs = np.linalg.eigh(cov)
        # the encoder's final layer norm leaves a near-null direction; shrink toward the mean eigenvalue
        evals = np.maximum(evals, 0.0) + shrinkage * evals.mean()
        self.mean.data = mean
        self.transform.data = (evecs / np.sqrt(evals)) @ evecs.T

    def __call__(self, h: Tensor, lengths: np.ndarray) -> Tensor:
        return ((h - self.mean) @ self.transform) * _time_mask(lengths, h.shape[1])


class QFormer(Module):
    """Learned queries that self-attend and cross-attend (unmasked) to speech representations."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.model_dim
        self.query = Parameter(rng.normal(0.0, 1.0, (cfg.query_len, d)))
        self.blocks = [DecoderBlock(d, cfg.heads, cfg.ffn_dim, rng) for _ in range(cfg.qformer_layers)]
        self.ln = LayerNorm(d)

    def __call__(self, h: Tensor, lengths: np.ndarray, rate: float = 0.0, rng=None) -> Tensor:
        n, length, d = h.shape
        memory = h + sinusoidal_positions(length, d)
        mask = key_padding_mask(lengths, length)
        x = self.query.reshape(1, *self.query.shape) + np.zeros((n, 1, 1))
        for block in self.blocks:
            x = block(x, memory, None, mask, rate, rng)
        return self.ln(x)


class SpeechLM(Module):
    """Frozen-able speech encoder -> Q-Former -> transformer encoder-decoder over a cross-modal prompt."""

    def __init__(self, cfg: ModelConfig):
        rng = np.random.default_rng(cfg.init_seed + 1)
        d = cfg.model_dim
        self.cfg = cfg
        self.vocab = cfg.make_vocab()
        self.speech_encoder = SpeechEncoder(cfg, rng)
        self.speech_norm = SpeechNormalizer(d)
        self.qformer = QFormer(cfg, rng)
        self.token_emb = Parameter(rng.normal(0.0, 1.0, (len(self.vocab), d)))
        self.segment_emb = Parameter(rng.normal(0.0, 1.0, (len(SEGMENT_IDS), d)))
        self.seqpos_emb = Parameter(rng.normal(0.0, 1.0, (cfg.max_sequences, d)))
        self.enc_blocks = [EncoderBlock(d, cfg.heads, cfg.ffn_dim, rng) for _ in range(cfg.enc_layers)]
        self.enc_ln = LayerNorm(d)
        self.dec_blocks = [DecoderBlock(d, cfg.heads, cfg.ffn_dim, rng) for _ in range(cfg.dec_layers)]
        self.dec_ln = LayerNorm(d)
        self.out = Linear(d, len(self.vocab), rng)
        self.speech_cache: dict[str, np.ndarray] = {}

    # -- speech side -----------------------------------------------------------

    def load_state_dict(self, state, strict: bool = True) -> None:
        super().load_state_dict(state, strict)
        self.speech_cache.clear()

    @property
    def speech_frozen(self) -> bool:
        return not any(p.requires_grad for p in self.speech_encoder.parameters())

    def freeze_speech_encoder(self) -> None:
        self.speech_encoder.set_trainable(False)

    def _encode_frames(self, frames: Sequence[np.ndarray], rate, rng) -> Tensor:
        x, lengths = pad_batch(frames)
        return self.speech_encoder(x, lengths, rate, rng)

    def speech_representations(self, speech: Sequence[tuple[np.ndarray, str | None]],
                               rate: float = 0.0, rng=None) -> tuple[Tensor, np.ndarray]:
        """Speech-encoder outputs for a list of (frames, cache key), padded to a batch."""
        lengths = SpeechEncoder.output_lengths(np.array([f.shape[0] for f, _ in speech]))
        if not self.speech_frozen:
            return self._encode_frames([f for f, _ in speech], rate, rng), lengths
        missing = [(f, key) for f, key in speech if key is None or key not in self.speech_cache]
        fresh: dict[int, np.ndarray] = {}
        if missing:
            with no_grad():
                h = self._encode_frames([f for f, _ in missing], 0.0, None).data
            for (f, key), n, row in zip(missing, SpeechEncoder.output_lengths(
                    np.array([f.shape[0] for f, _ in missing])), h):
                arr = row[:n].copy()
                if key is None:
                    fresh[id(f)] = arr
                else:
                    self.speech_cache[key] = arr
        out = np.zeros((len(speech), int(lengths.max()), self.cfg.model_dim))
        for i, (f, key) in enumerate(speech):
            arr = fresh[id(f)] if key is None or key not in self.speech_cache else self.speech_cache[key]
            out[i, : arr.shape[0]] = arr
        return Tensor(out), lengths

    def encode_speech(self, frames: np.ndarray) -> Tensor:
        if frames.shape[0] == 0:
            raise EmptyInputError("speech input must contain at least one frame")
        return self._encode_frames([frames], 0.0, None)[0]

    def fit_speech_normalizer(self, frames: Sequence[np.ndarray], batch_size: int = 256) -> None:
        """Whitening statistics over every valid speech-encoder output row of ``frames``."""
        rows = []
        with no_grad():
            for i in range(0, len(frames), batch_size):
                chunk = frames[i:i + batch_size]
                x, lengths = pad_batch(chunk)
                h = self.speech_encoder(x, lengths).data
                for row, n in zip(h, SpeechEncoder.output_lengths(lengths)):
                    rows.append(row[:n])
        self.speech_norm.fit(np.concatenate(rows))
        self.speech_cache.clear()

    def _convert(self, h: Tensor, lengths: np.ndarray, rate: float = 0.0, rng=None) -> Tensor:
        if self.cfg.speech_whitening:
            h = self.speech_norm(h, lengths)
        return self.qformer(h, lengths, rate, rng)

    def qformer_convert(self, h) -> Tensor:
        h = T.as_tensor(h)
        if h.shape[0] == 0:
            raise EmptyInputError("Q-Former input must contain at least one row")
        return self._convert(h.reshape(1, *h.shape), np.array([h.shape[0]]))[0]

    # -- prompt encoder --------------------------------------------------------

    def encode_contexts(self, contexts: Sequence[PromptContext], rng=None) -> tuple[Tensor, np.ndarray]:
        """Encode a batch of prompts; returns C (B, L_max, D) and the row counts."""
        cfg = self.cfg
        rate = cfg.dropout_rate if rng is not None else 0.0
        speech = [s for ctx in contexts for s in ctx.speech]
        vocab_size = len(self.vocab)
        q = cfg.query_len
        pieces = [self.token_emb]
        if speech:
            h, h_len = self.speech_representations(speech, rate, rng)
            u = self._convert(h, h_len, rate, rng)
            pieces.append(u.reshape(len(speech) * q, cfg.model_dim))
        pool = T.concat(pieces + [Tensor(np.zeros((1, cfg.model_dim)))], axis=0)
        pad_row = pool.shape[0] - 1

        layouts = []
        offset = 0
        for ctx in contexts:
            layouts.append(ctx.layout(q, speech_offset=offset))
            offset += len(ctx.speech)
        lengths = np.array([len(lay[0]) for lay in layouts])
        if any(int(lay[2].max(initial=0)) >= cfg.max_sequences for lay in layouts):
            raise ValueError(f"prompt exceeds max_sequences={cfg.max_sequences}")
        width = int(lengths.max())
        rows = np.full((len(contexts), width), pad_row)
        seg = np.zeros((len(contexts), width), dtype=np.int64)
        seqpos = np.zeros((len(contexts), width), dtype=np.int64)
        for i, (src, seg_i, pos_i) in enumerate(layouts):
            # speech rows index into the Q-Former block placed after the vocabulary
            rows[i, : len(src)] = np.where(src >= 0, src, vocab_size + (-src - 1))
            seg[i, : len(src)] = seg_i
            seqpos[i, : len(src)] = pos_i

        x = pool[rows] + self.segment_emb[seg] + self.seqpos_emb[seqpos]
        x = x + sinusoidal_positions(width, cfg.model_dim)
        x = T.dropout(x, rate, rng)
        mask = key_padding_mask(lengths, width)
        for block in self.enc_blocks:
            x = block(x, mask, rate, rng)
        return self.enc_ln(x), lengths

    def encode_context(self, ctx: PromptContext) -> Tensor:
        c, _ = self.encode_contexts([ctx])
        return c[0]

    # -- decoder ---------------------------------------------------------------

    def decode(self, memory: Tensor, memory_lengths: np.ndarray, tokens: np.ndarray, rng=None) -> Tensor:
        """Teacher-forced logits (B, L, V) for decoder inputs ``tokens`` (B, L)."""
        rate = self.cfg.dropout_rate if rng is not None else 0.0
        tokens = np.asarray(tokens, dtype=np.int64)
        b, length = tokens.shape
        x = self.token_emb[tokens] + sinusoidal_positions(length, self.cfg.model_dim)
        x = T.dropout(x, rate, rng)
        self_mask = causal_mask(length)
        mem_mask = key_padding_mask(memory_lengths, memory.shape[1])
        for block in self.dec_blocks:
            x = block(x, memory, self_mask, mem_mask, rate, rng)
        return self.out(self.dec_ln(x))

    def _check_tokens(self, tokens: Sequence[int]) -> None:
        for t in tokens:
            if not 0 <= int(t) < len(self.vocab):
                raise VocabularyError(f"token id {t} is not in the vocabulary of size {len(self.vocab)}")

    def decode_step(self, memory: Tensor, prefix: Sequence[int]) -> Tensor:
        """Next-token logits after ``prefix`` (the BOS token is prepended here)."""
        self._check_tokens(prefix)
        memory = T.as_tensor(memory)
        if memory.ndim == 2:
            memory = memory.reshape(1, *memory.shape)
        tokens = np.array([[self.vocab.bos, *prefix]])
        logits = self.decode(memory, np.array([memory.shape[1]]), tokens)
        return logits[0, -1]

    def next_log_probs(self, memory: np.ndarray, memory_lengths: np.ndarray,
                       prefixes: np.ndarray) -> np.ndarray:
        """Log-softmax of the next token for equal-length prefixes, BOS included."""
        with no_grad():
            logits = self.decode(Tensor(memory), memory_lengths, prefixes).data[:, -1]
        z = logits - logits.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def loss_positions(self, labels: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Teacher-forced decoder inputs, targets and the 0/1 weight of each target position."""
        width = max(len(z) for z in labels)
        inputs = np.full((len(labels), width), self.vocab.pad)
        targets = np.full((len(labels), width), self.vocab.pad)
        weights = np.zeros((len(labels), width))
        for i, z in enumerate(labels):
            inputs[i, 0] = self.vocab.bos
            inputs[i, 1:len(z)] = z[:-1]
            targets[i, : len(z)] = z
            weights[i, : len(z)] = 1.0
        return inputs, targets, weights

    def label_loss(self, contexts: Sequence[PromptContext], labels: Sequence[Sequence[int]],
                   alpha: float = 0.0, rng=None) -> Tensor:
        """Label-smoothed NLL of the target label text given each prompt.

        Only the target label tokens are prediction targets; enrollment labels
        enter through the encoder context alone.
        """
        c, lengths = self.encode_contexts(contexts, rng)
        inputs, targets, weights = self.loss_positions(labels)
        logits = self.decode(c, lengths, inputs, rng)
        return T.label_smoothing_ce(logits, targets, alpha, weights)
