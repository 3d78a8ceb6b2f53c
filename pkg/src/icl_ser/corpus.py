"""Synthetic speaker-emotion corpus, vocabulary and JSONL persistence.

Each emotion has a fixed prototype vector. A speaker adds a personal offset
to every frame and, with probability one half, exchanges the prototypes of
the confusable emotion pair. Frames are drawn i.i.d. around the (possibly
swapped) prototype, so per-speaker evidence is needed to tell the pair apart.
"""
from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class Emotion(enum.IntEnum):
    ANGER = 0
    DISGUST = 1
    FEAR = 2
    JOY = 3
    SADNESS = 4
    SURPRISE = 5
    NEUTRAL = 6

    @property
    def word(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, value: "str | int | Emotion") -> "Emotion":
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise ValueError(f"unknown emotion {value!r}") from None


N_EMOTIONS = len(Emotion)

INSTRUCTION = (
    "Please select the appropriate emotion for the input speech from the following: "
    "Neutral, Surprise, Sadness, Joy, Fear, Disgust, Anger."
)

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_NO_SPACE_BEFORE = {",", ".", ":"}


class VocabularyError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0])


class Vocab:
    """Closed word-level vocabulary; punctuation marks are separate tokens."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = tuple(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for special in (PAD, BOS, EOS):
            if special not in self.index:
                raise ValueError(f"vocabulary lacks {special}")
        self.pad, self.bos, self.eos = self.index[PAD], self.index[BOS], self.index[EOS]
        self.emotion_ids = tuple(self.index[e.word] for e in Emotion)

    @classmethod
    def default(cls) -> "Vocab":
        words: list[str] = [PAD, BOS, EOS]
        for w in _TOKEN_RE.findall(INSTRUCTION) + [e.word for e in Emotion]:
            if w not in words:
                words.append(w)
        return cls(words)

    def __len__(self) -> int:
        return len(self.tokens)

    def tokenize(self, text: str) -> list[int]:
        out = []
        for w in _TOKEN_RE.findall(text):
            if w not in self.index:
                raise VocabularyError(f"out-of-vocabulary word {w!r}")
            out.append(self.index[w])
        return out

    def detokenize(self, ids: Iterable[int]) -> str:
        words: list[str] = []
        for i in ids:
            i = int(i)
            if i == self.eos:
                break
            if i in (self.pad, self.bos):
                continue
            if not 0 <= i < len(self.tokens):
                raise VocabularyError(f"token id {i} outside vocabulary of size {len(self.tokens)}")
            words.append(self.tokens[i])
        text = ""
        for w in words:
            text += w if (not text or w in _NO_SPACE_BEFORE) else " " + w
        return text

    def label_tokens(self, emotion: Emotion) -> list[int]:
        return [self.index[Emotion(emotion).word], self.eos]


@dataclass(eq=False)
class Utterance:
    uid: str
    speaker_id: int
    emotion: Emotion
    frames: np.ndarray
    split: str = ""

    @property
    def label_word(self) -> str:
        return self.emotion.word

    def label_text(self, vocab: Vocab) -> list[int]:
        return vocab.label_tokens(self.emotion)

    def same_as(self, other: "Utterance") -> bool:
        return (
            self.uid == other.uid
            and self.speaker_id == other.speaker_id
            and self.emotion == other.emotion
            and self.split == other.split
            and self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
        )


@dataclass
class SpeakerProfile:
    speaker_id: int
    offset: np.ndarray
    confusion_flag: bool
    noise_sigma: float

    def permutation(self, pair: tuple[Emotion, Emotion]) -> list[int]:
        """Which prototype each emotion is rendered with."""
        perm = list(range(N_EMOTIONS))
        if self.confusion_flag:
            a, b = pair
            perm[a], perm[b] = int(b), int(a)
        return perm


@dataclass
class CorpusSpec:
    n_train_speakers: int = 40
    n_valid_speakers: int = 10
    n_test_speakers: int = 10
    utterances_per_emotion: int = 8
    feature_dim: int = 16
    noise_sigma: float = 0.5
    offset_sigma: float = 0.2
    prototype_norm: float = 1.0
    confusable_pair: tuple[str, str] = ("joy", "surprise")
    min_frames: int = 12
    max_frames: int = 24
    prototype_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        self.confusable_pair = tuple(self.confusable_pair)
        a, b = self.pair
        if a == b:
            raise ValueError("confusable pair must name two different emotions")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ValueError(f"bad frame range [{self.min_frames}, {self.max_frames}]")

    @property
    def pair(self) -> tuple[Emotion, Emotion]:
        return Emotion.parse(self.confusable_pair[0]), Emotion.parse(self.confusable_pair[1])

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown corpus spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusable_pair"] = list(self.confusable_pair)
        return d


@dataclass
class Corpus:
    spec: CorpusSpec
    prototypes: np.ndarray
    profiles: dict[int, SpeakerProfile]
    train: list[Utterance] = field(default_factory=list)
    valid: list[Utterance] = field(default_factory=list)
    test: list[Utterance] = field(default_factory=list)

    def split(self, name: str) -> list[Utterance]:
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]


def make_prototypes(feature_dim: int, seed: int, norm: float = 1.0) -> np.ndarray:
    if feature_dim < N_EMOTIONS:
        raise ValueError(
            f"feature_dim={feature_dim} cannot hold {N_EMOTIONS} orthogonal emotion prototypes"
        )
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((feature_dim, N_EMOTIONS)))
    return norm * q.T


def generate_corpus(spec: CorpusSpec) -> Corpus:
    protos = make_prototypes(spec.feature_dim, spec.prototype_seed, spec.prototype_norm)
    rng = np.random.default_rng(spec.seed)
    corpus = Corpus(spec=spec, prototypes=protos, profiles={})
    sizes = (("train", spec.n_train_speakers), ("valid", spec.n_valid_speakers), ("test", spec.n_test_speakers))
    speaker_id = 0
    for split, n in sizes:
        out = corpus.split(split)
        for _ in range(n):
            profile = SpeakerProfile(
                speaker_id=speaker_id,
                offset=spec.offset_sigma * rng.standard_normal(spec.feature_dim),
                confusion_flag=bool(rng.random() < 0.5),
                noise_sigma=spec.noise_sigma,
            )
            corpus.profiles[speaker_id] = profile
            perm = profile.permutation(spec.pair)
            for emotion in Emotion:
                centre = protos[perm[emotion]] + profile.offset
                for i in range(spec.utterances_per_emotion):
                    t = int(rng.integers(spec.min_frames, spec.max_frames + 1))
                    frames = centre + spec.noise_sigma * rng.standard_normal((t, spec.feature_dim))
                    out.append(Utterance(
                        uid=f"{split}-s{speaker_id:03d}-{emotion.name.lower()}-{i:02d}",
                        speaker_id=speaker_id,
                        emotion=emotion,
                        frames=frames,
                        split=split,
                    ))
            speaker_id += 1
    return corpus


def by_speaker(utterances: Iterable[Utterance]) -> dict[int, list[Utterance]]:
    out: dict[int, list[Utterance]] = {}
    for u in utterances:
        out.setdefault(u.speaker_id, []).append(u)
    return out


def bayes_ceiling(spec: CorpusSpec, n_samples: int = 200_000, seed: int = 12345) -> dict[str, float]:
    """Monte-Carlo Bayes-optimal accuracy under the generative model.

    ``zero_shot`` does not know whether the speaker swaps the confusable pair;
    ``informed`` does. Both marginalise the unknown speaker offset. The frame
    mean is sufficient, with per-axis variance ``offset_sigma**2 +
    noise_sigma**2 / T``. Ties earn fractional credit.
    """
    rng = np.random.default_rng(seed)
    protos = make_prototypes(spec.feature_dim, spec.prototype_seed, spec.prototype_norm)
    a, b = spec.pair
    swap = np.arange(N_EMOTIONS)
    swap[a], swap[b] = b, a

    emo = rng.integers(0, N_EMOTIONS, n_samples)
    flag = rng.random(n_samples) < 0.5
    t = rng.integers(spec.min_frames, spec.max_frames + 1, n_samples)
    var = spec.offset_sigma ** 2 + spec.noise_sigma ** 2 / t
    rendered = np.where(flag, swap[emo], emo)
    xbar = protos[rendered] + np.sqrt(var)[:, None] * rng.standard_normal((n_samples, spec.feature_dim))

    # log N(xbar; p_c, var I) up to terms shared by all classes
    d2 = ((xbar[:, None, :] - protos[None, :, :]) ** 2).sum(-1)
    ll = -0.5 * d2 / var[:, None]
    ll_swapped = ll[:, swap]
    zero_shot_ll = np.logaddexp(ll, ll_swapped) + math.log(0.5)
    zero_shot_ll[:, [i for i in range(N_EMOTIONS) if i not in (a, b)]] = ll[
        :, [i for i in range(N_EMOTIONS) if i not in (a, b)]
    ]
    informed_ll = np.where(flag[:, None], ll_swapped, ll)

    def credit(scores: np.ndarray) -> float:
        best = scores.max(axis=1, keepdims=True)
        ties = scores >= best
        hit = ties[np.arange(n_samples), emo]
        return float((hit / ties.sum(axis=1)).mean())

    return {"zero_shot": credit(zero_shot_ll), "informed": credit(informed_ll)}


# -- JSONL -----------------------------------------------------------------------

class CorpusFormatError(ValueError):
    pass


def utterance_to_record(u: Utterance) -> dict:
    return {
        "uid": u.uid,
        "speaker_id": int(u.speaker_id),
        "emotion": u.emotion.name.lower(),
        "split": u.split,
        "frames": u.frames.tolist(),
    }


def record_to_utterance(rec: dict) -> Utterance:
    frames = np.asarray(rec["frames"], dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValueError(f"frames must be a non-empty 2-d array, got shape {frames.shape}")
    return Utterance(
        uid=str(rec.get("uid", "")),
        speaker_id=int(rec["speaker_id"]),
        emotion=Emotion.parse(rec["emotion"]),
        frames=frames,
        split=str(rec.get("split", "")),
    )


def write_jsonl(path: str | Path, utterances: Iterable[Utterance]) -> None:
    # json writes floats with repr(), the shortest string that round-trips
    with open(path, "w", encoding="utf-8") as fh:
        for u in utterances:
            fh.write(json.dumps(utterance_to_record(u), separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path: str | Path) -> list[Utterance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(record_to_utterance(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed record: {exc}") from exc
    return out


def write_corpus(corpus: Corpus, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for split in ("train", "valid", "test"):
        p = out_dir / f"{split}.jsonl"
        write_jsonl(p, corpus.split(split))
        paths.append(p)
    meta = {
        "spec": corpus.spec.to_dict(),
        "prototypes": corpus.prototypes.tolist(),
        "profiles": [
            {"speaker_id": p.speaker_id, "offset": p.offset.tolist(),
             "confusion_flag": p.confusion_flag, "noise_sigma": p.noise_sigma}
            for p in corpus.profiles.values()
        ],
    }
    (out_dir / "corpus_meta.json").write_text(json.dumps(meta, indent=1))
    return paths


def load_corpus(data_dir: str | Path) -> Corpus:
    data_dir = Path(data_dir)
    meta_path = data_dir / "corpus_meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"corpus metadata not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    corpus = Corpus(
        spec=CorpusSpec.from_dict(meta["spec"]),
        prototypes=np.asarray(meta["prototypes"]),
        profiles={
            int(p["speaker_id"]): SpeakerProfile(
                int(p["speaker_id"]), np.asarray(p["offset"]), bool(p["confusion_flag"]), float(p["noise_sigma"])
            )
            for p in meta["profiles"]
        },
    )
    for split in ("train", "valid", "test"):
        corpus.split(split).extend(read_jsonl(data_dir / f"{split}.jsonl"))
    return corpus
