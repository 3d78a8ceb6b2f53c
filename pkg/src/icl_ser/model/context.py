"""Cross-modal prompt layout: instruction, enrollment pairs, target speech."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SEGMENT_IDS = {"text": 0, "speech": 1}

ROLES = ("instruction", "enroll_speech", "enroll_label", "target")


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class SubSequence:
    role: str
    modality: str
    seq_pos: int
    tokens: tuple[int, ...] = ()
    speech_index: int = -1


@dataclass
class PromptContext:
    subsequences: list[SubSequence]
    speech: list[tuple[np.ndarray, str | None]] = field(default_factory=list)

    @property
    def k(self) -> int:
        return sum(1 for s in self.subsequences if s.role == "enroll_speech")

    def modalities(self) -> list[str]:
        return [s.modality for s in self.subsequences]

    def roles(self) -> list[str]:
        return [s.role for s in self.subsequences]

    def n_rows(self, query_len: int) -> int:
        return sum(query_len if s.modality == "speech" else len(s.tokens) for s in self.subsequences)

    def layout(self, query_len: int, speech_offset: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-row source, segment id and sequence-position id.

        Text rows carry their token id (>= 0). Speech rows carry ``-(r + 1)``
        where ``r`` is the row in the flattened batch of Q-Former outputs.
        """
        src, seg, pos = [], [], []
        for s in self.subsequences:
            if s.modality == "text":
                src.extend(s.tokens)
                n = len(s.tokens)
            else:
                base = (speech_offset + s.speech_index) * query_len
                src.extend(-(base + j) - 1 for j in range(query_len))
                n = query_len
            seg.extend([SEGMENT_IDS[s.modality]] * n)
            pos.extend([s.seq_pos] * n)
        return np.array(src, dtype=np.int64), np.array(seg, dtype=np.int64), np.array(pos, dtype=np.int64)


def _speech_of(item) -> tuple[np.ndarray, str | None]:
    if isinstance(item, np.ndarray):
        return item, None
    return item.frames, getattr(item, "uid", None) or None


def assemble_context(
    instruction: Sequence[int],
    enrollment: Sequence[tuple[object, Sequence[int]]],
    target,
    max_sequences: int = 16,
    pair_order: str = "speech-label",
) -> PromptContext:
    """Lay out ``[instruction] (speech_i, label_i)*k [target speech]``.

    ``enrollment`` holds (speech, label tokens) pairs where speech is either a
    frame array or an utterance with ``frames``/``uid``. ``pair_order`` set to
    ``"label-speech"`` puts each label before its speech instead.
    """
    k = len(enrollment)
    needed = 2 * k + 2
    if needed > max_sequences:
        raise CapacityError(f"{k} enrollment pairs need {needed} sub-sequences, capacity is {max_sequences}")
    subs = [SubSequence("instruction", "text", 0, tuple(int(t) for t in instruction))]
    speech = []
    for speech_item, label in enrollment:
        sp = SubSequence("enroll_speech", "speech", 0, speech_index=len(speech))
        lab = SubSequence("enroll_label", "text", 0, tuple(int(t) for t in label))
        speech.append(_speech_of(speech_item))
        subs.extend((sp, lab) if pair_order == "speech-label" else (lab, sp))
    subs.append(SubSequence("target", "speech", 0, speech_index=len(speech)))
    speech.append(_speech_of(target))
    subs = [SubSequence(s.role, s.modality, i, s.tokens, s.speech_index) for i, s in enumerate(subs)]
    return PromptContext(subs, speech)
