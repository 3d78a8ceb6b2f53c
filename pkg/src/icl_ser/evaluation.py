"""Speaker-level accuracy statistics and experiment cells over (k, setting)."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import INSTRUCTION, Utterance, by_speaker
from .inference import DEFAULT_BEAM, DEFAULT_MAX_LEN, build_context, exact_match, predict_contexts
from .model import SpeechLM
from .selection import EnrollmentSet, SelectionError, SelectionSetting, select_procedure

CSV_HEADER = ("model", "k", "setting", "ua_spk", "sigma", "median", "max", "min")
INFEASIBLE = "infeasible"


@dataclass
class SpeakerResult:
    speaker_id: int
    matches: list[bool] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        if not self.matches:
            raise ValueError(f"speaker {self.speaker_id} has no scored utterances")
        return sum(bool(m) for m in self.matches) / len(self.matches)


@dataclass
class MetricsRow:
    model: str
    k: int
    setting: str
    ua_spk: float | None = None
    sigma: float | None = None
    median: float | None = None
    max: float | None = None
    min: float | None = None
    note: str = ""

    @property
    def feasible(self) -> bool:
        return self.ua_spk is not None

    def csv_fields(self) -> list[str]:
        if not self.feasible:
            return [self.model, str(self.k), self.setting] + [INFEASIBLE] * 5
        vals = (self.ua_spk, self.sigma, self.median, self.max, self.min)
        return [self.model, str(self.k), self.setting] + [f"{v:.6f}" for v in vals]


def ua_spk(results: Sequence[SpeakerResult], ddof: int = 0) -> dict[str, float]:
    """Unweighted mean of per-speaker accuracies plus spread statistics.

    ``sigma`` is the population standard deviation by default (``ddof=0``).
    """
    if not results:
        raise ValueError("ua_spk needs at least one speaker")
    acc = [r.accuracy for r in results]
    if ddof and len(acc) <= ddof:
        raise ValueError(f"ddof={ddof} needs more than {ddof} speakers")
    mean = sum(acc) / len(acc)
    var = sum((a - mean) ** 2 for a in acc) / (len(acc) - ddof)
    return {
        "ua_spk": mean,
        "sigma": var ** 0.5,
        "median": statistics.median(acc),
        "max": max(acc),
        "min": min(acc),
    }


def speaker_results(speaker_ids: Iterable[int], matches: Iterable[bool]) -> list[SpeakerResult]:
    grouped: dict[int, SpeakerResult] = {}
    for s, m in zip(speaker_ids, matches):
        grouped.setdefault(int(s), SpeakerResult(int(s))).matches.append(bool(m))
    return [grouped[s] for s in sorted(grouped)]


def derive_seed(master: int, *parts) -> int:
    text = ":".join(str(p) for p in (master,) + parts)
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def draw_enrollments(utterances: Sequence[Utterance], k: int, setting: SelectionSetting,
                     seed: int) -> list[EnrollmentSet]:
    """One enrollment set per target, each from its own hashed seed stream."""
    pools = by_speaker(utterances)
    out = []
    for u in utterances:
        rng = np.random.default_rng(derive_seed(seed, str(setting), k, u.speaker_id, u.uid))
        out.append(select_procedure(u, k, pools[u.speaker_id], setting, rng))
    return out


def cell_infeasibility(utterances: Sequence[Utterance], k: int, setting: SelectionSetting) -> str | None:
    for e in sorted({int(u.emotion) for u in utterances}):
        reason = setting.infeasibility(k, e)
        if reason is not None:
            return reason
    return None


@dataclass
class CellOutcome:
    row: MetricsRow
    predictions: list[dict] = field(default_factory=list)


def setting_label(k: int, setting: SelectionSetting) -> str:
    # seven distinct labels necessarily include the target, so TU+LD is TO+LD here
    if k == 7 and setting.label == "LD" and setting.target == "TU":
        return "TU+LD=TO+LD"
    return str(setting)


def evaluate_cell(model: SpeechLM, utterances: Sequence[Utterance], k: int, setting: SelectionSetting,
                  seed: int, tag: str = "model", beam_size: int = DEFAULT_BEAM,
                  max_len: int = DEFAULT_MAX_LEN, instruction: Sequence[int] | None = None,
                  enrollments: Sequence[EnrollmentSet] | None = None) -> CellOutcome:
    label = setting_label(k, setting)
    reason = cell_infeasibility(utterances, k, setting)
    if reason is None and enrollments is None:
        try:
            enrollments = draw_enrollments(utterances, k, setting, seed)
        except SelectionError as exc:
            reason = str(exc)
    if reason is not None:
        return CellOutcome(MetricsRow(tag, k, label, note=reason))
    if instruction is None:
        instruction = model.vocab.tokenize(INSTRUCTION)
    contexts = [build_context(model, u, e, instruction) for u, e in zip(utterances, enrollments)]
    preds = predict_contexts(model, contexts, beam_size, max_len)
    matches = [exact_match(p.text, u.label_word) for p, u in zip(preds, utterances)]
    stats = ua_spk(speaker_results([u.speaker_id for u in utterances], matches))
    records = [
        {"utterance_ref": u.uid, "k": k, "setting": label, "predicted": p.text,
         "reference": u.label_word, "match": m}
        for u, p, m in zip(utterances, preds, matches)
    ]
    return CellOutcome(MetricsRow(tag, k, label, **stats), records)


def order_sensitivity(model: SpeechLM, utterances: Sequence[Utterance], k: int, setting: SelectionSetting,
                      seed: int, n_permutations: int = 3, beam_size: int = DEFAULT_BEAM) -> dict:
    """UA_spk under random re-orderings of the same enrollment sets (diagnostic)."""
    base = draw_enrollments(utterances, k, setting, seed)
    scores = []
    for p in range(n_permutations):
        permuted = []
        for u, e in zip(utterances, base):
            rng = np.random.default_rng(derive_seed(seed, "perm", p, u.uid))
            permuted.append(EnrollmentSet(e.speaker_id, [e.utterances[i] for i in rng.permutation(e.k)]))
        out = evaluate_cell(model, utterances, k, setting, seed, beam_size=beam_size, enrollments=permuted)
        scores.append(out.row.ua_spk)
    return {"k": k, "setting": str(setting), "ua_spk": scores, "variance": float(np.var(scores))}


def rows_to_csv(rows: Iterable[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow(r.csv_fields())
    return buf.getvalue()


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class ExperimentConfig:
    model_tag: str = "proposed"
    split: str = "test"
    ks: tuple[int, ...] = (0, 1, 2, 3, 4)
    settings: tuple[str, ...] = ("TU+LD",)
    seed: int = 2024
    beam_size: int = DEFAULT_BEAM
    max_len: int = DEFAULT_MAX_LEN

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown eval config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("ks", "settings"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def run_experiment(model: SpeechLM, utterances: Sequence[Utterance], cfg: ExperimentConfig,
                   predictions_path: str | Path | None = None) -> list[MetricsRow]:
    """Evaluate every (k, setting) cell; infeasible cells become marker rows."""
    rows, records = [], []
    for setting_text in cfg.settings:
        setting = SelectionSetting.parse(setting_text)
        for k in cfg.ks:
            out = evaluate_cell(model, utterances, k, setting, cfg.seed, cfg.model_tag, cfg.beam_size, cfg.max_len)
            rows.append(out.row)
            records.extend(out.predictions)
    if predictions_path is not None:
        with open(predictions_path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return rows
