"""Config loading and the gen-data -> classifier -> stage1 -> metaicl -> eval chain."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import tomli

from .corpus import Corpus, CorpusSpec, generate_corpus, load_corpus, write_corpus
from .evaluation import ExperimentConfig, rows_to_csv, run_experiment
from .model import Checkpoint, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, load_speech_lm, meta_train, train_classifier, train_stage1

log = logging.getLogger(__name__)

STAGE_FILES = {"classifier": "classifier.ckpt", "stage1": "stage1.ckpt", "metaicl": "metaicl.ckpt"}


@dataclass
class PipelineConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    classifier: TrainConfig = field(default_factory=lambda: TrainConfig(stage="classifier"))
    stage1: TrainConfig = field(default_factory=lambda: TrainConfig(stage="stage1"))
    metaicl: TrainConfig = field(default_factory=lambda: TrainConfig(stage="metaicl"))
    eval: ExperimentConfig = field(default_factory=ExperimentConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        train = {s: TrainConfig.from_dict({"stage": s, **d.get(s, {})}) for s in ("classifier", "stage1", "metaicl")}
        return cls(
            corpus=CorpusSpec.from_dict(d.get("corpus", {})),
            model=ModelConfig.from_dict(d.get("model", {})),
            eval=ExperimentConfig.from_dict(d.get("eval", {})),
            **train,
        )

    def to_dict(self) -> dict:
        return {
            "corpus": self.corpus.to_dict(),
            "model": self.model.to_dict(),
            "classifier": self.classifier.to_dict(),
            "stage1": self.stage1.to_dict(),
            "metaicl": self.metaicl.to_dict(),
            "eval": {**vars(self.eval), "ks": list(self.eval.ks), "settings": list(self.eval.settings)},
        }


def read_toml(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    with open(path, "rb") as fh:
        return tomli.load(fh)


def load_config(path: str | Path | None) -> PipelineConfig:
    return PipelineConfig() if path is None else PipelineConfig.from_dict(read_toml(path))


def load_corpus_spec(path: str | Path | None) -> CorpusSpec:
    """Accepts either a full pipeline config or a bare corpus table."""
    if path is None:
        return CorpusSpec()
    d = read_toml(path)
    return CorpusSpec.from_dict(d["corpus"] if "corpus" in d else d)


@dataclass
class PipelineResult:
    corpus: Corpus
    checkpoints: dict[str, Path]
    metrics_csv: Path
    timings: dict[str, float]


def run_pipeline(cfg: PipelineConfig, workdir: str | Path, stages=("classifier", "stage1", "metaicl")) -> PipelineResult:
    """Generate data, train each stage in turn and write the metrics CSV under ``workdir``."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    t = time.perf_counter()
    corpus = generate_corpus(cfg.corpus)
    write_corpus(corpus, workdir / "data")
    timings["gen-data"] = time.perf_counter() - t

    ckpts: dict[str, Path] = {}
    prev: Checkpoint | None = None
    for stage in stages:
        t = time.perf_counter()
        tcfg = getattr(cfg, stage)
        metrics = workdir / f"{stage}_metrics.csv"
        if stage == "classifier":
            prev = train_classifier(corpus, cfg.model, tcfg, metrics_path=metrics)
        elif stage == "stage1":
            prev = train_stage1(corpus, cfg.model, tcfg, load_checkpoint(ckpts["classifier"]), metrics_path=metrics)
        else:
            prev = meta_train(corpus, tcfg, load_checkpoint(ckpts["stage1"]), metrics_path=metrics)
        ckpts[stage] = workdir / STAGE_FILES[stage]
        save_checkpoint(ckpts[stage], prev)
        timings[stage] = time.perf_counter() - t
        log.info("%s done in %.0fs", stage, timings[stage])

    t = time.perf_counter()
    model = load_speech_lm(load_checkpoint(ckpts[stages[-1]]))
    rows = run_experiment(model, corpus.split(cfg.eval.split), cfg.eval, workdir / "predictions.jsonl")
    metrics_csv = workdir / "metrics.csv"
    metrics_csv.write_text(rows_to_csv(rows))
    timings["eval"] = time.perf_counter() - t
    return PipelineResult(corpus, ckpts, metrics_csv, timings)


def with_seed(cfg: TrainConfig | ExperimentConfig | CorpusSpec, seed: int | None):
    return cfg if seed is None else replace(cfg, seed=seed)


__all__ = [
    "PipelineConfig", "PipelineResult", "load_config", "load_corpus_spec", "load_corpus",
    "read_toml", "run_pipeline", "with_seed", "STAGE_FILES",
]
