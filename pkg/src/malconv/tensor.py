"""Dense forward/backward kernels for the layers MalConv is built from.

Every op is a pure numpy function. Sequence ops accept an optional leading
batch axis, so ``(T, d)`` and ``(N, T, d)`` inputs both work; the time axis
is always ``-2`` and the channel axis ``-1``.

Precision follows the inputs: float32 arrays stay float32, float64 arrays
(used by the gradient checks) stay float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .exceptions import InputError, InternalError, NumericalError

PAD_TOKEN = 256
VOCAB_SIZE = 257


# --------------------------------------------------------------------------
# Embedding
# --------------------------------------------------------------------------


def _check_tokens(tokens, vocab):
    tokens = np.asarray(tokens)
    if not np.issubdtype(tokens.dtype, np.integer):
        raise InputError(f"tokens must be integers, got dtype {tokens.dtype}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise InputError(f"token out of range [0, {vocab - 1}]")
    return tokens


def embed_forward(tokens, table):
    """Look up one row of ``table`` per token.

    Parameters
    ----------
    tokens : array of int, shape (..., T)
        Byte values 0-255 plus the padding token 256.
    table : ndarray, shape (257, d)

    Returns
    -------
    ndarray, shape (..., T, d)
    """
    tokens = _check_tokens(tokens, table.shape[0])
    return table[tokens]


def embed_backward(tokens, grad_out, vocab=VOCAB_SIZE):
    """Accumulate ``grad_out`` rows into the table rows they were read from."""
    tokens = _check_tokens(tokens, vocab)
    grad_out = np.asarray(grad_out)
    if grad_out.shape[:-1] != tokens.shape:
        raise InputError(
            f"grad_out shape {grad_out.shape} does not match tokens {tokens.shape}"
        )
    flat_tokens = tokens.reshape(-1)
    flat_grad = grad_out.reshape(-1, grad_out.shape[-1])
    columns = [
        np.bincount(flat_tokens, weights=flat_grad[:, c], minlength=vocab)
        for c in range(flat_grad.shape[1])
    ]
    return np.stack(columns, axis=1).astype(grad_out.dtype, copy=False)


# --------------------------------------------------------------------------
# Strided / dilated 1D convolution
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_filters: int
    width: int
    stride: int
    dilation: int = 1

    def __post_init__(self):
        for name in ("in_channels", "out_filters", "width", "stride", "dilation"):
            if int(getattr(self, name)) < 1:
                raise InputError(f"ConvSpec.{name} must be >= 1")

    @property
    def effective_width(self):
        return (self.width - 1) * self.dilation + 1

    def output_length(self, length):
        if length < self.effective_width:
            raise InputError(
                f"input length {length} shorter than effective width "
                f"{self.effective_width}; pad first"
            )
        return (length - self.effective_width) // self.stride + 1

    @property
    def kernel_shape(self):
        return (self.out_filters, self.in_channels * self.width)


def _window_index(spec, length):
    n_out = spec.output_length(length)
    starts = np.arange(n_out) * spec.stride
    taps = np.arange(spec.width) * spec.dilation
    return starts[:, None] + taps[None, :]


def _im2col(x, spec):
    index = _window_index(spec, x.shape[-2])
    cols = x[..., index, :]  # (..., T', W, d)
    return cols.reshape(*cols.shape[:-2], spec.width * spec.in_channels)


def _check_conv_input(x, spec, kernel, bias):
    if x.ndim < 2 or x.shape[-1] != spec.in_channels:
        raise InputError(
            f"conv input must be (..., T, {spec.in_channels}), got {x.shape}"
        )
    if kernel.shape != spec.kernel_shape:
        raise InputError(f"kernel shape {kernel.shape} != {spec.kernel_shape}")
    if bias is not None and bias.shape != (spec.out_filters,):
        raise InputError(f"bias shape {bias.shape} != ({spec.out_filters},)")


def conv1d_forward(x, spec, kernel, bias):
    """out[j, f] = bias[f] + sum_{w,c} kernel[f, w*d + c] * x[j*S + w*dil, c]."""
    x = np.asarray(x)
    _check_conv_input(x, spec, kernel, bias)
    cols = _im2col(x, spec)
    return cols @ kernel.T + bias


def conv1d_backward(x, spec, kernel, grad_out):
    """Return ``(grad_input, grad_kernel, grad_bias)`` for :func:`conv1d_forward`."""
    x = np.asarray(x)
    _check_conv_input(x, spec, kernel, None)
    n_out = spec.output_length(x.shape[-2])
    expected = x.shape[:-2] + (n_out, spec.out_filters)
    if grad_out.shape != expected:
        raise InputError(f"grad_out shape {grad_out.shape} != {expected}")

    cols = _im2col(x, spec)
    k = cols.shape[-1]
    grad_kernel = grad_out.reshape(-1, spec.out_filters).T @ cols.reshape(-1, k)
    grad_bias = grad_out.reshape(-1, spec.out_filters).sum(axis=0)

    grad_cols = (grad_out @ kernel).reshape(
        *grad_out.shape[:-1], spec.width, spec.in_channels
    )
    index = _window_index(spec, x.shape[-2]).reshape(-1)
    batch_shape = x.shape[:-2]
    batch = int(np.prod(batch_shape, dtype=np.int64))
    grad_cols = grad_cols.reshape(batch, index.size, spec.in_channels)
    grad_input = np.zeros((batch,) + x.shape[-2:], dtype=grad_out.dtype)
    if spec.stride >= spec.effective_width:
        # windows are disjoint, every input position is written at most once
        grad_input[:, index, :] = grad_cols
    else:
        np.add.at(grad_input, (np.arange(batch)[:, None], index[None, :]), grad_cols)
    return grad_input.reshape(x.shape), grad_kernel, grad_bias


# --------------------------------------------------------------------------
# Gated linear unit
# --------------------------------------------------------------------------


def _same_shape(*arrays):
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise InputError(f"shape mismatch: {shape} vs {a.shape}")


def sigmoid(x):
    return expit(x)


def glu_forward(linear, gate):
    """Elementwise ``linear * sigmoid(gate)``."""
    _same_shape(linear, gate)
    return linear * sigmoid(gate)


def glu_backward(linear, gate, grad_out):
    _same_shape(linear, gate, grad_out)
    s = sigmoid(gate)
    grad_linear = grad_out * s
    grad_gate = grad_out * linear * s * (1 - s)
    return grad_linear, grad_gate


# --------------------------------------------------------------------------
# Global temporal max-pooling
# --------------------------------------------------------------------------


def global_max_pool(x):
    """Max over the time axis; ties resolve to the lowest time index.

    Returns
    -------
    values : ndarray, shape (..., F)
    argmax : ndarray of int, shape (..., F)
    """
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise InputError("global_max_pool needs at least one time step")
    argmax = np.argmax(x, axis=-2)  # first occurrence wins
    values = np.take_along_axis(x, argmax[..., None, :], axis=-2)[..., 0, :]
    return values, argmax


def global_max_pool_backward(argmax, grad_values, length):
    argmax = np.asarray(argmax)
    if argmax.shape != grad_values.shape:
        raise InputError(f"argmax {argmax.shape} vs grad {grad_values.shape}")
    if argmax.size and (argmax.min() < 0 or argmax.max() >= length):
        raise InternalError(f"argmax outside [0, {length})")
    shape = argmax.shape[:-1] + (length, argmax.shape[-1])
    grad = np.zeros(shape, dtype=grad_values.dtype)
    np.put_along_axis(grad, argmax[..., None, :], grad_values[..., None, :], axis=-2)
    return grad


# --------------------------------------------------------------------------
# Fully connected
# --------------------------------------------------------------------------


def fc_forward(x, weights, bias, relu=False):
    """Affine map with optional ReLU.

    Returns ``(out, pre_activation)``; the two are the same array when
    ``relu`` is false.
    """
    if x.shape[-1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise InputError(
            f"fc shapes incompatible: x {x.shape}, W {weights.shape}, b {bias.shape}"
        )
    pre = x @ weights + bias
    if not relu:
        return pre, pre
    return np.maximum(pre, 0), pre


def fc_backward(x, weights, grad_out, pre=None):
    """Adjoint of :func:`fc_forward`.

    Pass ``pre`` (the pre-activation) iff the forward used ReLU. The ReLU
    subgradient at exactly zero is zero.
    """
    if grad_out.shape != x.shape[:-1] + (weights.shape[1],):
        raise InputError(f"grad_out shape {grad_out.shape} mismatches fc output")
    if pre is not None:
        grad_out = grad_out * (pre > 0)
    grad_input = grad_out @ weights.T
    grad_weights = x.reshape(-1, x.shape[-1]).T @ grad_out.reshape(-1, weights.shape[1])
    grad_bias = grad_out.reshape(-1, weights.shape[1]).sum(axis=0)
    return grad_input, grad_weights, grad_bias


# --------------------------------------------------------------------------
# Softmax cross-entropy
# --------------------------------------------------------------------------


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean cross-entropy over a batch of 2-class logits.

    Returns ``(loss, grad_logits, probs)`` with ``grad = (probs - onehot) / N``.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InputError(f"logits {logits.shape} / labels {labels.shape} mismatch")
    if not np.isin(labels, (0, 1)).all():
        raise InputError("labels must be 0 or 1")
    labels = labels.astype(np.intp)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    probs = np.exp(log_probs)
    loss = -log_probs[np.arange(n), labels].mean()
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1
    grad = (probs - onehot) / n
    return float(loss), grad, probs


# --------------------------------------------------------------------------
# Batch normalisation
# --------------------------------------------------------------------------


@dataclass
class BatchNormStats:
    """Running mean/variance used in inference mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9

    @classmethod
    def zeros(cls, features, dtype=np.float32):
        return cls(np.zeros(features, dtype), np.ones(features, dtype))


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray


def batchnorm_forward(x, gamma, beta, eps=1e-5, running=None, training=True):
    """Per-feature standardisation over all leading axes, then ``gamma*x + beta``.

    In training mode batch statistics are used and ``running`` (if given) is
    updated in place; otherwise ``running`` supplies the statistics.
    """
    x = np.asarray(x)
    if x.shape[-1] != gamma.shape[0] or gamma.shape != beta.shape:
        raise InputError(f"batchnorm shapes: x {x.shape}, gamma {gamma.shape}")
    if eps <= 0:
        raise InputError("eps must be positive")
    flat = x.reshape(-1, x.shape[-1])
    if training:
        if flat.shape[0] < 2:
            raise InputError("batch-norm training mode needs at least 2 samples")
        mean = flat.mean(axis=0)
        var = flat.var(axis=0)
        if running is not None:
            m = running.momentum
            running.mean = (m * running.mean + (1 - m) * mean).astype(running.mean.dtype)
            running.var = (m * running.var + (1 - m) * var).astype(running.var.dtype)
    else:
        if running is None:
            raise InputError("inference-mode batch-norm needs running statistics")
        mean, var = running.mean, running.var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean) * inv_std
    out = gamma * x_hat + beta
    return out.astype(x.dtype, copy=False), BatchNormCache(x_hat, inv_std, gamma)


def batchnorm_backward(grad_out, cache):
    """Exact adjoint of training-mode :func:`batchnorm_forward`."""
    if grad_out.shape != cache.x_hat.shape:
        raise InputError(f"grad_out {grad_out.shape} != {cache.x_hat.shape}")
    f = grad_out.shape[-1]
    g = grad_out.reshape(-1, f)
    xh = cache.x_hat.reshape(-1, f)
    grad_beta = g.sum(axis=0)
    grad_gamma = (g * xh).sum(axis=0)
    gxh = g * cache.gamma
    grad_input = cache.inv_std * (gxh - gxh.mean(axis=0) - xh * (gxh * xh).mean(axis=0))
    return grad_input.reshape(grad_out.shape), grad_gamma, grad_beta


# --------------------------------------------------------------------------
# Optimiser
# --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    decay_factor: float = 0.95
    velocity: dict = field(default_factory=dict)
    initial_learning_rate: float | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InputError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise InputError("momentum must lie in [0, 1)")
        if not 0 < self.decay_factor <= 1:
            raise InputError("decay_factor must lie in (0, 1]")
        if self.initial_learning_rate is None:
            self.initial_learning_rate = self.learning_rate

    @classmethod
    def for_params(cls, params, **kwargs):
        state = cls(**kwargs)
        state.velocity = {k: np.zeros_like(v) for k, v in params.items()}
        return state


def sgd_nesterov_step(params, grads, state):
    """One Nesterov-momentum step.

    Per array: ``v <- mu*v + g`` then ``theta <- theta - lr*(g + mu*v)``.
    Returns a new parameter dict; ``state.velocity`` is replaced. Nothing is
    modified if any gradient is non-finite.
    """
    for name, g in grads.items():
        if name not in params:
            raise InputError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise InputError(f"gradient shape mismatch for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name!r}; step aborted")
    mu = state.momentum
    lr = state.learning_rate
    new_params = dict(params)
    new_velocity = dict(state.velocity)
    for name, g in grads.items():
        theta = params[name]
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(theta)
        v = mu * v + g
        new_params[name] = (theta - lr * (g + mu * v)).astype(theta.dtype, copy=False)
        new_velocity[name] = v.astype(theta.dtype, copy=False)
    state.velocity = new_velocity
    return new_params, state


def lr_decay(state, epoch):
    """Set ``lr = lr0 * decay_factor**epoch``."""
    state.learning_rate = state.initial_learning_rate * state.decay_factor**epoch
    return state
