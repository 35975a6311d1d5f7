"""scikit-learn style estimator around the functional core."""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import metrics
from .checkpoint import load_params, save_params
from .data import Vocab, build_vocab
from .decoding import DecodingConfig, generate
from .exceptions import ConfigError, InputError
from .model import LanguageModel, ModelConfig, init_params
from .scr import RealignConfig
from .training import TrainConfig, train


def _as_texts(X) -> list[str]:
    if isinstance(X, str):
        return [X]
    texts = list(X)
    if not texts or not all(isinstance(t, str) for t in texts):
        raise InputError("X must be a string or a non-empty iterable of strings")
    return texts


class SCRLanguageModel(BaseEstimator):
    """Character-level decoder-only transformer with optional layer realignment.

    ``fit`` builds a vocabulary, initializes weights from ``random_state`` and
    runs two-phase SGD (``warmup_steps`` without realignment, then
    ``finetune_steps`` with it when ``scr="on"``).  Two instances that differ
    only in ``scr`` start from bit-identical weights.

    Parameters
    ----------
    scr : {"on", "off"}
        Whether realignment is used after warm-up and at inference.
    activation_threshold : int
        Realignment applies only to sequences at least this long.
    lambda_coh : float
        Weight of the coherence penalty.
    enabled_layers : iterable of int or None
        0-based layers with realignment; None means all.

    The remaining parameters map one-to-one onto
    :class:`~scrlm.model.ModelConfig` and :class:`~scrlm.training.TrainConfig`.

    Attributes
    ----------
    vocab_ : Vocab
    params_ : ModelParams
    history_ : list of LossBreakdown
    model_ : LanguageModel
    """

    def __init__(self, d_model=64, n_layers=2, n_heads=4, d_ff=256, max_seq_len=128,
                 positional_mode="learned", sigma2=0.02, scr="on", activation_threshold=0,
                 lambda_coh=0.1, enabled_layers=None, detach_target=True, gate_epsilon=0.0,
                 learning_rate=0.3, warmup_steps=100, finetune_steps=100, batch_size=8,
                 seq_len=32, clip_norm=1.0, random_state=0):
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.max_seq_len = max_seq_len
        self.positional_mode = positional_mode
        self.sigma2 = sigma2
        self.scr = scr
        self.activation_threshold = activation_threshold
        self.lambda_coh = lambda_coh
        self.enabled_layers = enabled_layers
        self.detach_target = detach_target
        self.gate_epsilon = gate_epsilon
        self.learning_rate = learning_rate
        self.warmup_steps = warmup_steps
        self.finetune_steps = finetune_steps
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.clip_norm = clip_norm
        self.random_state = random_state

    # -- configuration views
    def _model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, d_model=self.d_model, n_layers=self.n_layers,
                           n_heads=self.n_heads, d_ff=self.d_ff, max_seq_len=self.max_seq_len,
                           positional_mode=self.positional_mode)

    def realign_config(self) -> RealignConfig:
        layers = None if self.enabled_layers is None else frozenset(self.enabled_layers)
        return RealignConfig(activation_threshold=self.activation_threshold,
                             lambda_coh=self.lambda_coh, enabled_layers=layers,
                             detach_target=self.detach_target)

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, warmup_steps=self.warmup_steps,
                           finetune_steps=self.finetune_steps, batch_size=self.batch_size,
                           seq_len=self.seq_len, clip_norm=self.clip_norm, seed=self._seed())

    def _seed(self) -> int:
        if not isinstance(self.random_state, numbers.Integral) or self.random_state < 0:
            raise ConfigError("random_state must be a non-negative integer")
        return int(self.random_state)

    # -- estimator API
    def fit(self, X, y=None, vocab: Vocab | None = None):
        if self.scr not in ("on", "off"):
            raise ConfigError("scr must be 'on' or 'off'")
        text = "".join(_as_texts(X))
        self.vocab_ = vocab if vocab is not None else build_vocab(text)
        config = self._model_config(self.vocab_.size)
        init = init_params(config, self.sigma2, self._seed(), gate_epsilon=self.gate_epsilon)
        self.params_, self.history_ = train(init, self.vocab_.encode(text), self.train_config(),
                                            self.realign_config(), scr_mode=self.scr)
        self._set_model()
        return self

    def set_params(self, **params):
        super().set_params(**params)
        if hasattr(self, "params_"):
            self._set_model()  # keep the inference view in sync, e.g. after toggling scr
        return self

    def _set_model(self):
        self.model_ = LanguageModel(self.params_, self.scr, self.realign_config(), self.vocab_)

    def transform(self, X) -> np.ndarray:
        """Mean-pooled final-layer state of each text, shape (n_texts, d_model)."""
        check_is_fitted(self, "params_")
        return np.stack([self.trace(self.encode(t), keep_attention=False).final_hidden.mean(axis=0)
                         for t in _as_texts(X)])

    def predict(self, X) -> np.ndarray:
        """Greedy next character after each text."""
        check_is_fitted(self, "params_")
        out = [self.vocab_.symbols[int(np.argmax(self.model_.logits(self.encode(t))[-1]))]
               for t in _as_texts(X)]
        return np.array(out, dtype=object)

    def score(self, X, y=None) -> float:
        """Mean per-token log-likelihood in nats (higher is better)."""
        return -float(np.log(self.perplexity(X)))

    # -- extras
    def perplexity(self, X) -> float:
        check_is_fitted(self, "params_")
        return metrics.perplexity(self.model_, _as_texts(X))

    def encode(self, text: str) -> np.ndarray:
        check_is_fitted(self, "vocab_")
        return self.vocab_.encode(text)

    def trace(self, tokens, keep_attention: bool = True):
        check_is_fitted(self, "params_")
        return self.model_.trace(tokens, keep_attention=keep_attention)

    def generate(self, prompt: str, n_tokens: int, decoding: DecodingConfig | None = None) -> str:
        check_is_fitted(self, "params_")
        ids = generate(self.encode(prompt), n_tokens, self.params_, self.scr, decoding,
                       self.realign_config())
        return self.vocab_.decode(ids)

    def save(self, path):
        check_is_fitted(self, "params_")
        return save_params(path, self.params_, extra={"vocab": self.vocab_.to_json(),
                                                      "estimator": self.get_params()})

    @classmethod
    def load(cls, path) -> "SCRLanguageModel":
        params, extra = load_params(path)
        est = cls(**extra["estimator"])
        est.vocab_ = Vocab.from_json(extra["vocab"])
        est.params_ = params
        est.history_ = []
        est._set_model()
        return est
