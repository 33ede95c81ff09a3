"""scikit-learn compatible wrapper around the MalConv network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_binary_labels, check_byte_sequences, sample_keys
from .checkpoint import load_checkpoint, save_checkpoint
from .exceptions import InputError
from .explain import attribute_sections, sparse_cam
from .model import ModelConfig, forward, init_params
from .pe import parse_pe
from .training import TrainConfig, fit_tokens, predict_batched, validation_mask

_DTYPES = {"f32": np.float32, "f64": np.float64}


class MalConvClassifier(ClassifierMixin, BaseEstimator):
    """Gated-convolution classifier over raw file bytes.

    ``X`` is a list of ``bytes`` objects or file paths, or an integer token
    matrix of width ``max_len`` (256 marks padding). Defaults are the desk
    preset; ``embed_dim=8, filters=128, window=stride=500, fc_hidden=128,
    max_len=2_097_152`` gives the full-size network.

    Attributes
    ----------
    classes_ : ndarray of shape (2,)
        The second entry is treated as the malicious class.
    params_ : ModelParams
    config_ : ModelConfig
    history_ : list of EpochRecord
    """

    def __init__(self, embed_dim=4, filters=16, window=32, stride=32, dilation=1,
                 fc_hidden=16, max_len=16384, use_batchnorm=False, decov_lambda=0.1,
                 batch_size=8, epochs=10, learning_rate=0.01, momentum=0.9,
                 decay_factor=0.95, validation_fraction=0.1, shuffle=True,
                 random_state=0, precision="f32"):
        self.embed_dim = embed_dim
        self.filters = filters
        self.window = window
        self.stride = stride
        self.dilation = dilation
        self.fc_hidden = fc_hidden
        self.max_len = max_len
        self.use_batchnorm = use_batchnorm
        self.decov_lambda = decov_lambda
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.decay_factor = decay_factor
        self.validation_fraction = validation_fraction
        self.shuffle = shuffle
        self.random_state = random_state
        self.precision = precision

    def _model_config(self):
        return ModelConfig(
            embed_dim=self.embed_dim, filters=self.filters, window=self.window,
            stride=self.stride, dilation=self.dilation, fc_hidden=self.fc_hidden,
            max_len=self.max_len, use_batchnorm=self.use_batchnorm,
            decov_lambda=self.decov_lambda)

    def _seed(self):
        if self.random_state is None:
            return int(np.random.SeedSequence().generate_state(1)[0])
        return int(self.random_state)

    def fit(self, X, y):
        if self.precision not in _DTYPES:
            raise InputError(f"precision must be one of {sorted(_DTYPES)}")
        config = self._model_config()
        tokens, _ = check_byte_sequences(X, config.max_len)
        self.classes_, labels = check_binary_labels(y, len(tokens))
        seed = self._seed()
        train_config = TrainConfig(
            batch_size=self.batch_size, epochs=self.epochs,
            learning_rate=self.learning_rate, momentum=self.momentum,
            decay_factor=self.decay_factor, decov_lambda=self.decov_lambda,
            seed=seed, shuffle=self.shuffle,
            validation_fraction=self.validation_fraction)
        held_out = validation_mask(
            sample_keys(X, len(tokens)), seed, self.validation_fraction)
        if held_out.all():
            held_out[:] = False
        params = init_params(config, seed, _DTYPES[self.precision])
        self.params_, self.history_ = fit_tokens(
            params, config, tokens[~held_out], labels[~held_out], train_config,
            tokens[held_out], labels[held_out])
        self.config_ = config
        return self

    def _tokens(self, X):
        check_is_fitted(self, "params_")
        return check_byte_sequences(X, self.config_.max_len)

    def predict_proba(self, X):
        tokens, _ = self._tokens(X)
        p = predict_batched(self.params_, self.config_, tokens)
        return np.column_stack([1 - p, p])

    def decision_function(self, X):
        """Logit gap (malicious minus benign); positive means malicious."""
        tokens, _ = self._tokens(X)
        chunks = [forward(self.params_, self.config_, tokens[i:i + 64]).logits
                  for i in range(0, len(tokens), 64)]
        logits = np.concatenate(chunks).astype(np.float64)
        return logits[:, 1] - logits[:, 0]

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[(proba[:, 1] >= 0.5).astype(int)]

    def explain(self, data):
        """Sparse-CAM regions of one file (bytes or path), by |contribution|."""
        tokens, lengths = self._tokens([data])
        if not isinstance(data, (bytes, bytearray, memoryview)):
            with open(data, "rb") as fh:
                data = fh.read()
        trace = forward(self.params_, self.config_, tokens)
        regions, _ = sparse_cam(self.params_, self.config_, trace,
                                min(int(lengths[0]), self.config_.max_len))
        attribute_sections(regions, parse_pe(data))
        return sorted(regions, key=lambda r: (-abs(r.contribution), r.start_offset))

    def save(self, path):
        check_is_fitted(self, "params_")
        save_checkpoint(self.params_, self.config_, path)

    @classmethod
    def load(cls, path):
        """Rebuild a fitted estimator from a checkpoint (classes become [0, 1])."""
        params, config = load_checkpoint(path)
        est = cls(embed_dim=config.embed_dim, filters=config.filters, window=config.window,
                  stride=config.stride, dilation=config.dilation, fc_hidden=config.fc_hidden,
                  max_len=config.max_len, use_batchnorm=config.use_batchnorm,
                  decov_lambda=config.decov_lambda)
        est.params_, est.config_ = params, config
        est.classes_ = np.array([0, 1])
        est.history_ = []
        return est
