from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .context import CapacityError, PromptContext, SubSequence, assemble_context
from .layers import Module, Parameter
from .networks import (
    AttentivePool,
    EmotionClassifier,
    EmptyInputError,
    ModelConfig,
    QFormer,
    SpeechEncoder,
    SpeechLM,
    SpeechNormalizer,
    pad_batch,
)

__all__ = [
    "Checkpoint", "CheckpointError", "load_checkpoint", "save_checkpoint",
    "CapacityError", "PromptContext", "SubSequence", "assemble_context",
    "Module", "Parameter", "AttentivePool", "EmotionClassifier", "EmptyInputError",
    "ModelConfig", "QFormer", "SpeechEncoder", "SpeechLM", "SpeechNormalizer", "pad_batch",
]
