"""Mini-batch training with DeCov regularisation, plus triage ranking."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .corpus import read_samples
from .exceptions import InputError, NumericalError
from .metrics import balanced_accuracy
from .model import backward, forward, pad_or_truncate, predict_proba

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 10
    learning_rate: float = 0.01
    momentum: float = 0.9
    decay_factor: float = 0.95
    decov_lambda: float = 0.1
    seed: int = 0
    shuffle: bool = True
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if self.epochs < 0:
            raise InputError("epochs must be >= 0")
        if self.decov_lambda < 0:
            raise InputError("decov_lambda must be non-negative")
        if not 0 <= self.validation_fraction < 1:
            raise InputError("validation_fraction must lie in [0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_balanced_acc: float
    lr: float


@dataclass
class TrainResult:
    params: object
    config: object
    log: list = field(default_factory=list)
    skipped: int = 0
    validation_paths: list = field(default_factory=list)


def decov_loss(h):
    """DeCov penalty on a batch of activations ``h`` (N x H).

    ``C = cov(h)`` with 1/N normalisation and the loss is half the squared
    Frobenius norm of C minus its diagonal. Returns ``(loss, grad)``.
    """
    h = np.asarray(h)
    if h.ndim != 2 or h.shape[0] < 2:
        raise InputError("decov_loss needs an (N, H) batch with N >= 2")
    n = h.shape[0]
    centred = h - h.mean(axis=0)
    cov = centred.T @ centred / n
    off = cov - np.diag(np.diag(cov))
    loss = 0.5 * float((off * off).sum())
    # centring drops out of the adjoint because columns of `centred` sum to 0
    grad = (2.0 / n) * centred @ off
    return loss, grad


def loss_and_gradients(params, config, tokens, labels, decov_lambda=0.0, training=True):
    """Cross-entropy + ``decov_lambda`` * DeCov and its gradients.

    Returns ``(total_loss, grads, trace)``.
    """
    trace = forward(params, config, tokens, training=training)
    xent, grad_logits, _ = T.softmax_xent(trace.logits, labels)
    total = xent
    grad_pen = None
    if decov_lambda > 0:
        penalty, grad_h = decov_loss(trace.penultimate)
        total += decov_lambda * penalty
        grad_pen = (decov_lambda * grad_h).astype(trace.penultimate.dtype)
    grads = backward(params, config, trace, grad_logits.astype(trace.logits.dtype), grad_pen)
    return total, grads, trace


def validation_mask(keys, seed, fraction):
    """Deterministic hash split: True marks a held-out key."""
    mask = np.zeros(len(keys), dtype=bool)
    if fraction <= 0:
        return mask
    for i, key in enumerate(keys):
        digest = hashlib.sha256(f"{seed}:{key}".encode("utf-8")).digest()
        mask[i] = int.from_bytes(digest[:8], "little") / 2**64 < fraction
    return mask


def tokens_from_bytes(samples, max_len):
    out = np.empty((len(samples), max_len), dtype=np.int16)
    lengths = np.empty(len(samples), dtype=np.int64)
    for i, data in enumerate(samples):
        out[i], lengths[i] = pad_or_truncate(data, max_len)
    return out, lengths


def predict_batched(params, config, tokens, batch_size=64):
    if len(tokens) == 0:
        return np.empty(0)
    return np.concatenate([
        predict_proba(params, config, tokens[i:i + batch_size])
        for i in range(0, len(tokens), batch_size)
    ])


def _val_score(params, config, tokens, labels):
    if len(labels) == 0 or len(np.unique(labels)) < 2:
        return float("nan")
    return balanced_accuracy(predict_batched(params, config, tokens), labels)


def fit_tokens(params, config, tokens, labels, train_config,
               val_tokens=None, val_labels=None, on_epoch=None):
    """Train on an in-memory token matrix.

    Returns ``(params, log)``; ``params`` is a new object, the input is left
    untouched.
    """
    tc = train_config
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise InputError("no training samples")
    if len(np.unique(labels)) < 2:
        raise InputError("training data must contain both classes")
    needs_stats = config.use_batchnorm or tc.decov_lambda > 0
    if needs_stats and tc.batch_size < 2:
        raise InputError("batch_size must be >= 2 with batch-norm or DeCov")
    if val_tokens is None:
        val_tokens = tokens[:0]
        val_labels = labels[:0]

    params = params.copy()
    state = T.OptimizerState.for_params(
        params.weights, learning_rate=tc.learning_rate,
        momentum=tc.momentum, decay_factor=tc.decay_factor)
    rng = np.random.default_rng(tc.seed)
    log = []
    n = len(labels)
    for epoch in range(tc.epochs):
        T.lr_decay(state, epoch)
        order = rng.permutation(n) if tc.shuffle else np.arange(n)
        losses, sizes = [], []
        for b, start in enumerate(range(0, n, tc.batch_size)):
            idx = order[start:start + tc.batch_size]
            if needs_stats and len(idx) < 2:
                continue
            loss, grads, _ = loss_and_gradients(
                params, config, tokens[idx], labels[idx], tc.decov_lambda)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch + 1}, batch {b}")
            try:
                params.weights, state = T.sgd_nesterov_step(params.weights, grads, state)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch + 1}, batch {b}: {exc}") from None
            losses.append(loss)
            sizes.append(len(idx))
        mean_loss = float(np.average(losses, weights=sizes)) if losses else float("nan")
        record = EpochRecord(epoch + 1, mean_loss,
                             _val_score(params, config, val_tokens, val_labels),
                             state.learning_rate)
        logger.info("epoch %d loss %.5f val_bacc %.4f lr %.5g",
                    record.epoch, record.loss, record.val_balanced_acc, record.lr)
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return params, log


def train(params, config, manifest, train_config, workers=1):
    """Train from a manifest, holding out a hashed validation split.

    Unreadable files are skipped and counted, never relabelled.
    """
    if len(manifest) == 0:
        raise InputError("manifest is empty")
    items, skipped = read_samples(manifest, workers)
    if not items:
        raise InputError("no readable files in manifest")
    paths = [p for p, _, _ in items]
    labels = np.array([label for _, label, _ in items])
    tokens, _ = tokens_from_bytes([d for _, _, d in items], config.max_len)
    held_out = validation_mask(paths, train_config.seed, train_config.validation_fraction)
    config = replace(config, decov_lambda=train_config.decov_lambda)
    params, log = fit_tokens(
        params, config, tokens[~held_out], labels[~held_out], train_config,
        tokens[held_out], labels[held_out])
    val_paths = [p for p, h in zip(paths, held_out) if h]
    return TrainResult(params, config, log, skipped, val_paths)


@dataclass(frozen=True)
class TriageEntry:
    path: str
    score: float
    error: str | None = None


def triage_rank(params, config, manifest, workers=1, batch_size=64):
    """Order manifest files by descending malicious probability.

    Ties break by path; unreadable files come last with ``error`` set.
    """
    items, _ = read_samples(manifest, workers)
    readable = {p for p, _, _ in items}
    tokens, _ = tokens_from_bytes([d for _, _, d in items], config.max_len)
    scores = predict_batched(params, config, tokens, batch_size)
    ranked = sorted(
        (TriageEntry(p, float(s)) for (p, _, _), s in zip(items, scores)),
        key=lambda e: (-e.score, e.path),
    )
    failed = sorted(p for p in manifest.paths if p not in readable)
    return ranked + [TriageEntry(p, float("nan"), "unreadable") for p in failed]
