"""Classifier training, stage-1 speech-LM fine-tuning and MetaICL episodes."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .corpus import INSTRUCTION, Corpus, Utterance, by_speaker
from .evaluation import draw_enrollments, evaluate_cell, speaker_results, ua_spk
from .inference import build_context
from .model import Checkpoint, EmotionClassifier, ModelConfig, SpeechLM, load_checkpoint, save_checkpoint
from .model.layers import Module
from .selection import MAX_SHOTS, SelectionSetting, sample_meta_episode
from .tensor import NonFiniteError, RAdam, warmup_constant

log = logging.getLogger(__name__)

STAGES = ("classifier", "stage1", "metaicl")


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    stage: str = "classifier"
    batch_size: int = 16
    learning_rate: float = 3e-4
    warmup_steps: int = 200
    max_steps: int = 3000
    label_smoothing: float = 0.1
    dropout: float = 0.1
    seed: int = 0
    freeze_speech_encoder: bool | None = None
    eval_every: int = 250
    eval_seed: int = 777
    eval_ks: tuple[int, ...] = (0, 1, 2, 3, 4)
    episode_setting: str = "TU+LU"
    episode_ks: tuple[int, ...] = tuple(range(MAX_SHOTS + 1))
    beam_size: int = 4
    freeze_groups: tuple[str, ...] = ()

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.freeze_speech_encoder is None:
            self.freeze_speech_encoder = self.stage != "classifier"
        self.eval_ks = tuple(self.eval_ks)
        self.episode_ks = tuple(int(k) for k in self.episode_ks)
        self.freeze_groups = tuple(self.freeze_groups)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("eval_ks", "episode_ks", "freeze_groups"):
            d[key] = list(d[key])
        return d


class MetricsLog:
    """Step-indexed CSV: step, split, k, loss, ua_spk."""

    header = ("step", "split", "k", "loss", "ua_spk")

    def __init__(self, path: str | Path | None = None, append: bool = False):
        self.rows: list[tuple] = []
        self.path = Path(path) if path else None
        if self.path and not (append and self.path.exists()):
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(self.header)

    def add(self, step: int, split: str, k="", loss="", ua="") -> None:
        row = (step, split, k, "" if loss == "" else f"{loss:.6f}", "" if ua == "" else f"{ua:.6f}")
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(row)


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def _fit(
    model: Module,
    stage: str,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    batch_loss: Callable[[np.random.Generator], T.Tensor],
    evaluate: Callable[[], tuple[float, dict]],
    workdir: Path | None,
    resume: bool,
    metrics: MetricsLog,
) -> Checkpoint:
    params = model.trainable_parameters()
    names = [n for n, p in model.named_parameters() if p.requires_grad]
    opt = RAdam(params, lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    step, best_score, best_step = 0, -math.inf, -1
    best_state = model.state_dict()
    last_path = workdir / f"{stage}.last.ckpt" if workdir else None
    best_path = workdir / f"{stage}.best.ckpt" if workdir else None

    if resume and last_path is not None and last_path.exists():
        last = load_checkpoint(last_path)
        model.load_state_dict(last.params)
        opt.state.step = int(last.meta["optim_step"])
        opt.state.m = [last.optimizer[f"m.{n}"].copy() for n in names]
        opt.state.v = [last.optimizer[f"v.{n}"].copy() for n in names]
        rng = _restore_rng(last.rng_state)
        step = last.step
        best_score, best_step = last.meta["best_score"], last.meta["best_step"]
        best_state = load_checkpoint(best_path).params if best_path.exists() else model.state_dict()
        log.info("%s: resumed at step %d", stage, step)

    def snapshot(state: dict, at_step: int, extra: dict) -> Checkpoint:
        return Checkpoint(
            config={"model": model_cfg.to_dict(), "train": cfg.to_dict()},
            stage=stage, step=at_step, params=state, meta=extra,
        )

    t0 = time.perf_counter()
    recent: list[float] = []
    while step < cfg.max_steps:
        opt.zero_grad()
        loss = batch_loss(rng)
        if not np.isfinite(loss.data):
            raise DivergenceError(f"{stage}: non-finite loss at step {step + 1}")
        loss.backward()
        try:
            opt.step(warmup_constant(step, cfg.learning_rate, cfg.warmup_steps))
        except NonFiniteError as exc:
            raise DivergenceError(f"{stage}: {exc}") from exc
        step += 1
        recent.append(float(loss.data))
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            train_loss = float(np.mean(recent))
            recent = []
            metrics.add(step, "train", loss=train_loss)
            score, per_k = evaluate()
            for k, ua in per_k.items():
                metrics.add(step, "valid", k=k, ua=ua)
            if score > best_score:
                best_score, best_step, best_state = score, step, model.state_dict()
                if best_path:
                    save_checkpoint(best_path, snapshot(best_state, step, {"valid_score": score}))
            log.info("%s step %d loss %.4f valid %.4f (best %.4f @ %d) %.0fs",
                     stage, step, train_loss, score, best_score, best_step, time.perf_counter() - t0)
            if last_path:
                last = snapshot(model.state_dict(), step,
                                {"best_score": best_score, "best_step": best_step, "optim_step": opt.state.step})
                last.rng_state = _rng_state(rng)
                last.optimizer = {f"m.{n}": m for n, m in zip(names, opt.state.m)}
                last.optimizer.update({f"v.{n}": v for n, v in zip(names, opt.state.v)})
                save_checkpoint(last_path, last)
    return snapshot(best_state, best_step, {"valid_score": best_score, "final_step": step})


# -- classifier -------------------------------------------------------------------

def classifier_ua(model: EmotionClassifier, utterances: Sequence[Utterance]) -> float:
    preds = model.predict([u.frames for u in utterances])
    matches = [int(p) == int(u.emotion) for p, u in zip(preds, utterances)]
    return ua_spk(speaker_results([u.speaker_id for u in utterances], matches))["ua_spk"]


def train_classifier(corpus: Corpus, model_cfg: ModelConfig, cfg: TrainConfig,
                     workdir: str | Path | None = None, resume: bool = False,
                     metrics_path: str | Path | None = None) -> Checkpoint:
    """Label-smoothed NLL of emotion labels; returns the best-validation checkpoint."""
    if not corpus.train:
        raise ValueError("training split is empty")
    model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "dropout_rate": cfg.dropout})
    model = EmotionClassifier(model_cfg)
    train = corpus.train
    labels = np.array([int(u.emotion) for u in train])

    def batch_loss(rng):
        idx = rng.choice(len(train), size=min(cfg.batch_size, len(train)), replace=False)
        logits = model.logits([train[i].frames for i in idx], rng=rng)
        return T.label_smoothing_ce(logits, labels[idx], cfg.label_smoothing)

    def evaluate():
        ua = classifier_ua(model, corpus.valid)
        return ua, {"": ua}

    metrics = MetricsLog(metrics_path, append=resume)
    return _fit(model, "classifier", model_cfg, cfg, batch_loss, evaluate,
                Path(workdir) if workdir else None, resume, metrics)


def load_classifier(ckpt: Checkpoint) -> EmotionClassifier:
    model = EmotionClassifier(ModelConfig.from_dict(ckpt.config["model"]))
    model.load_state_dict(ckpt.params)
    return model


# -- speech LM stages -------------------------------------------------------------

PARAM_GROUPS = {
    "speech_encoder": ("speech_encoder.",),
    "speech_norm": ("speech_norm.",),
    "qformer": ("qformer.",),
    "embeddings": ("token_emb", "segment_emb", "seqpos_emb"),
    "encoder": ("enc_blocks.", "enc_ln."),
    "decoder": ("dec_blocks.", "dec_ln.", "out."),
}


def apply_freezing(model: SpeechLM, cfg: TrainConfig) -> None:
    # the whitening statistics are fitted, never trained
    groups = set(cfg.freeze_groups) | {"speech_norm"}
    if cfg.freeze_speech_encoder:
        groups.add("speech_encoder")
    for name, p in model.named_parameters():
        p.requires_grad = not any(name.startswith(pref) for g in groups for pref in PARAM_GROUPS[g])


def load_speech_lm(ckpt: Checkpoint) -> SpeechLM:
    model = SpeechLM(ModelConfig.from_dict(ckpt.config["model"]))
    model.load_state_dict(ckpt.params)
    return model


class _ValidSet:
    """Fixed validation prompts so every evaluation scores identical inputs."""

    def __init__(self, model: SpeechLM, utterances: Sequence[Utterance], ks: Sequence[int],
                 setting: SelectionSetting, seed: int):
        self.utterances = list(utterances)
        self.cells = {k: draw_enrollments(self.utterances, k, setting, seed) for k in ks}
        self.setting = setting
        self.seed = seed

    def score(self, model: SpeechLM, beam_size: int) -> tuple[float, dict]:
        per_k = {}
        for k, enrollments in self.cells.items():
            out = evaluate_cell(model, self.utterances, k, self.setting, self.seed,
                                beam_size=beam_size, enrollments=enrollments)
            per_k[k] = out.row.ua_spk
        return float(np.mean(list(per_k.values()))), per_k


def _lm_batch_loss(model: SpeechLM, train: Sequence[Utterance], cfg: TrainConfig,
                   episode: Callable[[Utterance, np.random.Generator], object | None]):
    instruction = model.vocab.tokenize(INSTRUCTION)
    labels = [u.label_text(model.vocab) for u in train]

    def batch_loss(rng):
        idx = rng.choice(len(train), size=min(cfg.batch_size, len(train)), replace=False)
        contexts = [build_context(model, train[i], episode(train[i], rng), instruction) for i in idx]
        return model.label_loss(contexts, [labels[i] for i in idx], cfg.label_smoothing, rng=rng)

    return batch_loss


def train_stage1(corpus: Corpus, model_cfg: ModelConfig, cfg: TrainConfig, classifier: Checkpoint,
                 workdir: str | Path | None = None, resume: bool = False,
                 metrics_path: str | Path | None = None) -> Checkpoint:
    """Fine-tune the speech LM on (instruction, target speech) -> emotion text, no enrollment."""
    model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "dropout_rate": cfg.dropout})
    model = SpeechLM(model_cfg)
    enc_state = {n[len("speech_encoder."):]: v for n, v in classifier.params.items()
                 if n.startswith("speech_encoder.")}
    model.speech_encoder.load_state_dict(enc_state)
    if model_cfg.speech_whitening:
        model.fit_speech_normalizer([u.frames for u in corpus.train])
    apply_freezing(model, cfg)
    valid = _ValidSet(model, corpus.valid, (0,), SelectionSetting.parse("TU+LU"), cfg.eval_seed)
    batch_loss = _lm_batch_loss(model, corpus.train, cfg, lambda u, rng: None)
    metrics = MetricsLog(metrics_path, append=resume)
    return _fit(model, "stage1", model_cfg, cfg, batch_loss, lambda: valid.score(model, cfg.beam_size),
                Path(workdir) if workdir else None, resume, metrics)


def meta_train(corpus: Corpus, cfg: TrainConfig, stage1: Checkpoint,
               workdir: str | Path | None = None, resume: bool = False,
               metrics_path: str | Path | None = None) -> Checkpoint:
    """MetaICL: each example is an episode with enrollment pairs from the target's speaker."""
    model = load_speech_lm(stage1)
    model_cfg = ModelConfig.from_dict({**model.cfg.to_dict(), "dropout_rate": cfg.dropout})
    model.cfg = model_cfg
    apply_freezing(model, cfg)
    pools = by_speaker(corpus.train)
    setting = SelectionSetting.parse(cfg.episode_setting)

    def episode(u: Utterance, rng):
        return sample_meta_episode(u, pools[u.speaker_id], rng, cfg.episode_ks, setting)

    valid = _ValidSet(model, corpus.valid, cfg.eval_ks, SelectionSetting.parse("TU+LU"), cfg.eval_seed)
    batch_loss = _lm_batch_loss(model, corpus.train, cfg, episode)
    metrics = MetricsLog(metrics_path, append=resume)
    return _fit(model, "metaicl", model_cfg, cfg, batch_loss, lambda: valid.score(model, cfg.beam_size),
                Path(workdir) if workdir else None, resume, metrics)
