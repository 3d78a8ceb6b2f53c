"""Enrollment selection under target-relation x label-relation settings.

Target relation: TU (unconstrained), TO (target emotion appears at least
once), TE (target emotion absent). Label relation: LU (unconstrained), LD
(pairwise distinct labels), LO(e) (every label is e).

Sampling is uniform over the label multisets that satisfy the setting and the
pool, then uniform over concrete utterances for those labels; the drawn pairs
are returned in random order.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .corpus import Emotion, N_EMOTIONS, Utterance

MAX_SHOTS = 7


class SelectionError(ValueError):
    pass


class InfeasibleSelectionError(SelectionError):
    pass


class PoolExhaustedError(SelectionError):
    pass


@dataclass(frozen=True)
class SelectionSetting:
    target: str = "TU"
    label: str = "LU"
    emotion: Emotion | None = None

    def __post_init__(self):
        if self.target not in ("TU", "TO", "TE"):
            raise ValueError(f"unknown target relation {self.target!r}")
        if self.label not in ("LU", "LD", "LO"):
            raise ValueError(f"unknown label relation {self.label!r}")
        if (self.label == "LO") != (self.emotion is not None):
            raise ValueError("LO takes exactly one emotion; LU and LD take none")

    @classmethod
    def parse(cls, text: str) -> "SelectionSetting":
        """Parse ``"TU+LD"``, ``"TU+LO:neutral"`` and the like."""
        try:
            target, label = text.strip().split("+")
        except ValueError:
            raise ValueError(f"setting must look like 'TU+LU', got {text!r}") from None
        emotion = None
        if ":" in label:
            label, name = label.split(":", 1)
            emotion = Emotion.parse(name)
        return cls(target.strip().upper(), label.strip().upper(), emotion)

    def __str__(self) -> str:
        base = f"{self.target}+{self.label}"
        return f"{base}:{self.emotion.name.lower()}" if self.emotion is not None else base

    def allows(self, counts: np.ndarray, target_emotion: int) -> np.ndarray:
        """Vectorised predicate over rows of label-count vectors."""
        counts = np.atleast_2d(counts)
        k = counts.sum(axis=1)
        ok = np.ones(len(counts), dtype=bool)
        if self.target == "TO":
            ok &= counts[:, target_emotion] >= 1
        elif self.target == "TE":
            ok &= counts[:, target_emotion] == 0
        if self.label == "LD":
            ok &= (counts <= 1).all(axis=1)
        elif self.label == "LO":
            ok &= counts[:, int(self.emotion)] == k
        return ok

    def infeasibility(self, k: int, target_emotion: int) -> str | None:
        """Reason no label multiset of size ``k`` can satisfy the setting, else None."""
        if not 0 <= k <= MAX_SHOTS:
            return f"k={k} outside 0..{MAX_SHOTS}"
        if self.allows(label_multisets(k), int(target_emotion)).any():
            return None
        t = Emotion(int(target_emotion)).name.lower()
        if self.target == "TO" and k == 0:
            return "TO needs at least one enrollment pair (k >= 1)"
        if self.label == "LO" and self.target == "TO":
            return f"TO+LO({self.emotion.name.lower()}) needs the target emotion {t} among the labels"
        if self.label == "LO" and self.target == "TE":
            return f"TE+LO({t}) cannot exclude the target emotion it requires"
        if self.label == "LD" and self.target == "TE":
            return f"TE+LD allows at most {N_EMOTIONS - 1} distinct non-target labels, k={k}"
        return f"no label assignment of size {k} satisfies {self}"


@lru_cache(maxsize=None)
def label_multisets(k: int) -> np.ndarray:
    """All count vectors over the emotions that sum to ``k`` (rows)."""
    rows = []
    for combo in itertools.combinations_with_replacement(range(N_EMOTIONS), k):
        counts = np.zeros(N_EMOTIONS, dtype=np.int64)
        for c in combo:
            counts[c] += 1
        rows.append(counts)
    out = np.array(rows, dtype=np.int64).reshape(-1, N_EMOTIONS)
    out.setflags(write=False)
    return out


@dataclass
class EnrollmentSet:
    speaker_id: int
    utterances: list[Utterance] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.utterances)

    @property
    def labels(self) -> list[Emotion]:
        return [u.emotion for u in self.utterances]

    def pairs(self, vocab) -> list[tuple[Utterance, list[int]]]:
        return [(u, u.label_text(vocab)) for u in self.utterances]


def select_procedure(
    target: Utterance,
    k: int,
    pool: Sequence[Utterance],
    setting: SelectionSetting,
    rng: np.random.Generator,
) -> EnrollmentSet:
    """Draw ``k`` enrollment utterances for ``target`` from its speaker's pool."""
    reason = setting.infeasibility(k, int(target.emotion))
    if reason is not None:
        raise InfeasibleSelectionError(reason)
    by_label: list[list[Utterance]] = [[] for _ in range(N_EMOTIONS)]
    for u in pool:
        if u.speaker_id != target.speaker_id:
            raise SelectionError(
                f"pool utterance {u.uid} belongs to speaker {u.speaker_id}, target to {target.speaker_id}"
            )
        if u.uid != target.uid:
            by_label[int(u.emotion)].append(u)
    avail = np.array([len(c) for c in by_label])
    multisets = label_multisets(k)
    ok = setting.allows(multisets, int(target.emotion)) & (multisets <= avail).all(axis=1)
    candidates = multisets[ok]
    if len(candidates) == 0:
        raise PoolExhaustedError(
            f"speaker {target.speaker_id} pool (per-emotion counts {avail.tolist()}) "
            f"cannot supply {k} pairs under {setting}"
        )
    counts = candidates[rng.integers(len(candidates))]
    chosen: list[Utterance] = []
    for label, c in enumerate(counts):
        if c:
            idx = rng.choice(len(by_label[label]), size=int(c), replace=False)
            chosen.extend(by_label[label][i] for i in idx)
    order = rng.permutation(len(chosen))
    return EnrollmentSet(target.speaker_id, [chosen[i] for i in order])


def check_constraints(
    enrollment: EnrollmentSet, target: Utterance, setting: SelectionSetting
) -> tuple[bool, list[str]]:
    """Re-verify a drawn set against its setting; returns (valid, violations)."""
    violations = []
    labels = [u.emotion for u in enrollment.utterances]
    if len(labels) > MAX_SHOTS:
        violations.append(f"k={len(labels)} exceeds {MAX_SHOTS}")
    if any(u.uid == target.uid for u in enrollment.utterances):
        violations.append("target utterance selected")
    if any(u.speaker_id != target.speaker_id for u in enrollment.utterances):
        violations.append("speaker mismatch")
    if enrollment.speaker_id != target.speaker_id:
        violations.append("enrollment set tagged with another speaker")
    present = target.emotion in labels
    if setting.target == "TO" and not present:
        violations.append("target emotion absent")
    if setting.target == "TE" and present:
        violations.append("target emotion present")
    if setting.label == "LD" and len(set(labels)) != len(labels):
        violations.append("repeated label")
    if setting.label == "LO" and any(l != setting.emotion for l in labels):
        violations.append(f"label other than {setting.emotion.name.lower()}")
    return not violations, violations


TU_LU = SelectionSetting("TU", "LU")


def sample_meta_episode(
    target: Utterance,
    pool: Sequence[Utterance],
    rng: np.random.Generator,
    k_values: Sequence[int] = tuple(range(MAX_SHOTS + 1)),
    setting: SelectionSetting = TU_LU,
) -> EnrollmentSet:
    """Meta-training episode: ``k`` uniform over ``k_values``, then ``select_procedure``."""
    k = int(k_values[rng.integers(len(k_values))])
    return select_procedure(target, k, pool, setting, rng)
