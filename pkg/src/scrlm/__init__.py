"""Decoder-only transformer with probabilistic layer realignment."""

__version__ = "0.1.0"

from .data import Vocab, build_vocab, synth_pattern_corpus, synth_shift_corpus
from .decoding import DecodingConfig, generate, sample_next
from .estimator import SCRLanguageModel
from .exceptions import (ConfigError, ConsistencyError, DataError, InputError, LengthError,
                         NumericError, SCRError, ShapeError)
from .model import (HiddenTrace, LanguageModel, ModelConfig, ModelParams, embed, feedforward,
                    forward, init_params, self_attention)
from .scr import (GateParams, RealignConfig, coherence_loss, contextual_reweight,
                  gate_activation, inference_refinement, realignment_active)
from .training import (LossBreakdown, TrainConfig, backward, combined_loss, cross_entropy,
                       finite_diff_check, sgd_step, train)

__all__ = [
    "ConfigError", "ConsistencyError", "DataError", "DecodingConfig", "GateParams",
    "HiddenTrace", "InputError", "LanguageModel", "LengthError", "LossBreakdown",
    "ModelConfig", "ModelParams", "NumericError", "RealignConfig", "SCRError",
    "SCRLanguageModel", "ShapeError", "TrainConfig", "Vocab", "backward", "build_vocab",
    "coherence_loss", "combined_loss", "contextual_reweight", "cross_entropy", "embed",
    "feedforward", "finite_diff_check", "forward", "gate_activation", "generate",
    "inference_refinement", "init_params", "realignment_active", "sample_next",
    "self_attention", "sgd_step", "synth_pattern_corpus", "synth_shift_corpus", "train",
]
