"""Speaker-personalized speech emotion recognition by in-context learning on a synthetic corpus."""
from .corpus import Corpus, CorpusSpec, Emotion, Utterance, generate_corpus, load_corpus, write_corpus
from .evaluation import ExperimentConfig, MetricsRow, run_experiment, ua_spk
from .inference import beam_search, build_context, infer_icl
from .model import ModelConfig, SpeechLM, load_checkpoint, save_checkpoint
from .pipeline import PipelineConfig, load_config, run_pipeline
from .selection import EnrollmentSet, SelectionSetting, select_procedure
from .training import TrainConfig, meta_train, train_classifier, train_stage1

__version__ = "0.1.0"

__all__ = [
    "Corpus", "CorpusSpec", "Emotion", "Utterance", "generate_corpus", "load_corpus", "write_corpus",
    "ExperimentConfig", "MetricsRow", "run_experiment", "ua_spk",
    "beam_search", "build_context", "infer_icl",
    "ModelConfig", "SpeechLM", "load_checkpoint", "save_checkpoint",
    "PipelineConfig", "load_config", "run_pipeline",
    "EnrollmentSet", "SelectionSetting", "select_procedure",
    "TrainConfig", "meta_train", "train_classifier", "train_stage1",
]
