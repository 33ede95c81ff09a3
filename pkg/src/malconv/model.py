"""MalConv: embedding -> gated strided conv -> global max-pool -> FC head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .exceptions import InputError, NumericalError
from .tensor import PAD_TOKEN, VOCAB_SIZE, BatchNormStats, ConvSpec


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 4
    filters: int = 16
    window: int = 32
    stride: int = 32
    dilation: int = 1
    fc_hidden: int = 16
    max_len: int = 16384
    use_batchnorm: bool = False
    decov_lambda: float = 0.1
    vocab: int = VOCAB_SIZE
    classes: int = 2

    def __post_init__(self):
        if self.vocab != VOCAB_SIZE:
            raise InputError(f"vocab must be {VOCAB_SIZE}")
        if self.classes != 2:
            raise InputError("only binary classification is supported")
        if self.decov_lambda < 0:
            raise InputError("decov_lambda must be non-negative")
        if self.fc_hidden < 1:
            raise InputError("fc_hidden must be >= 1")
        # validates widths and max_len >= effective width
        self.conv_spec.output_length(self.max_len)

    @property
    def conv_spec(self):
        return ConvSpec(self.embed_dim, self.filters, self.window, self.stride, self.dilation)

    @property
    def n_windows(self):
        return self.conv_spec.output_length(self.max_len)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise InputError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**values)


FULL_CONFIG = ModelConfig(
    embed_dim=8, filters=128, window=500, stride=500, dilation=1,
    fc_hidden=128, max_len=2_097_152,
)
DESK_CONFIG = ModelConfig()


def param_shapes(config):
    d, f, h = config.embed_dim, config.filters, config.fc_hidden
    k = d * config.window
    shapes = {
        "embedding": (config.vocab, d),
        "conv_linear_kernel": (f, k),
        "conv_linear_bias": (f,),
        "conv_gate_kernel": (f, k),
        "conv_gate_bias": (f,),
        "fc_weights": (f, h),
        "fc_bias": (h,),
        "out_weights": (h, config.classes),
        "out_bias": (config.classes,),
    }
    if config.use_batchnorm:
        for branch in ("linear", "gate"):
            shapes[f"bn_{branch}_gamma"] = (f,)
            shapes[f"bn_{branch}_beta"] = (f,)
    return shapes


def param_count(config):
    """Number of trainable scalars implied by ``config``."""
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


@dataclass
class ModelParams:
    """Trainable arrays plus the non-trainable batch-norm running statistics."""

    weights: dict
    running: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return self.weights["embedding"].dtype

    def copy(self):
        return ModelParams(
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.running.items()},
        )

    def astype(self, dtype):
        return ModelParams(
            {k: v.astype(dtype) for k, v in self.weights.items()},
            {k: v.astype(dtype) for k, v in self.running.items()},
        )

    def bn_stats(self, branch):
        return BatchNormStats(self.running[f"bn_{branch}_mean"], self.running[f"bn_{branch}_var"])

    def set_bn_stats(self, branch, stats):
        self.running[f"bn_{branch}_mean"] = stats.mean
        self.running[f"bn_{branch}_var"] = stats.var


def init_params(config, seed=0, dtype=np.float32):
    """Random initialisation (fan-in uniform for dense layers, N(0,1) embedding)."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(config)
    weights = {}
    for name, shape in shapes.items():
        if name == "embedding":
            w = rng.standard_normal(shape)
        elif name.endswith("_gamma"):
            w = np.ones(shape)
        elif name.endswith("_beta"):
            w = np.zeros(shape)
        else:
            fan_in = {
                "conv_linear": shapes["conv_linear_kernel"][1],
                "conv_gate": shapes["conv_gate_kernel"][1],
                "fc": config.filters,
                "out": config.fc_hidden,
            }[name.rsplit("_", 1)[0]]
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=shape)
        weights[name] = w.astype(dtype)
    params = ModelParams(weights)
    if config.use_batchnorm:
        for branch in ("linear", "gate"):
            params.set_bn_stats(branch, BatchNormStats.zeros(config.filters, dtype))
    return params


def zero_params(config, dtype=np.float32):
    params = init_params(config, 0, dtype)
    for v in params.weights.values():
        v[...] = 0
    return params


def check_params(params, config):
    expected = param_shapes(config)
    if set(params.weights) != set(expected):
        raise InputError(
            f"parameter names {sorted(params.weights)} do not match config {sorted(expected)}"
        )
    for name, shape in expected.items():
        if params.weights[name].shape != shape:
            raise InputError(f"{name} has shape {params.weights[name].shape}, expected {shape}")


# --------------------------------------------------------------------------
# Input preparation
# --------------------------------------------------------------------------


def pad_or_truncate(data, max_len):
    """Convert raw file bytes to exactly ``max_len`` tokens.

    Returns ``(tokens, original_length)``; positions past the end of the file
    hold :data:`PAD_TOKEN` and longer files are cut at ``max_len``.
    """
    raw = np.frombuffer(bytes(data), dtype=np.uint8)
    if raw.size == 0:
        raise InputError("empty file")
    tokens = np.full(max_len, PAD_TOKEN, dtype=np.int16)
    n = min(raw.size, max_len)
    tokens[:n] = raw[:n]
    return tokens, int(raw.size)


# --------------------------------------------------------------------------
# Forward / backward
# --------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    """Intermediate state of one (batched) forward pass.

    All arrays carry a leading batch axis of size N.
    """

    tokens: np.ndarray
    embedded: np.ndarray
    pre_activation_linear: np.ndarray
    pre_activation_gate: np.ndarray
    linear: np.ndarray
    gate: np.ndarray
    gated: np.ndarray
    pooled: np.ndarray
    argmax: np.ndarray
    fc_pre: np.ndarray
    penultimate: np.ndarray
    logits: np.ndarray
    bn_cache: dict = field(default_factory=dict)
    training: bool = False


def _finite(layer, array):
    if not np.all(np.isfinite(array)):
        raise NumericalError(f"non-finite values in layer {layer!r}")
    return array


def _as_batch(tokens, config):
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] != config.max_len:
        raise InputError(
            f"tokens must have shape (N, {config.max_len}), got {tokens.shape}"
        )
    return tokens


def forward(params, config, tokens, training=False):
    """Run the network on a batch of padded token sequences.

    Parameters
    ----------
    tokens : array of int, shape (N, max_len) or (max_len,)
    training : bool
        Only matters with batch-norm: batch statistics are used and the
        running statistics in ``params`` are updated.
    """
    tokens = _as_batch(tokens, config)
    w = params.weights
    spec = config.conv_spec

    embedded = T.embed_forward(tokens, w["embedding"])
    pre_lin = _finite("conv_linear", T.conv1d_forward(
        embedded, spec, w["conv_linear_kernel"], w["conv_linear_bias"]))
    pre_gate = _finite("conv_gate", T.conv1d_forward(
        embedded, spec, w["conv_gate_kernel"], w["conv_gate_bias"]))

    linear, gate, bn_cache = pre_lin, pre_gate, {}
    if config.use_batchnorm:
        outs = []
        for branch, x in (("linear", pre_lin), ("gate", pre_gate)):
            stats = params.bn_stats(branch)
            y, bn_cache[branch] = T.batchnorm_forward(
                x, w[f"bn_{branch}_gamma"], w[f"bn_{branch}_beta"],
                running=stats, training=training)
            if training:
                params.set_bn_stats(branch, stats)
            outs.append(_finite(f"bn_{branch}", y))
        linear, gate = outs

    gated = T.glu_forward(linear, gate)
    pooled, argmax = T.global_max_pool(gated)
    penultimate, fc_pre = T.fc_forward(pooled, w["fc_weights"], w["fc_bias"], relu=True)
    logits, _ = T.fc_forward(penultimate, w["out_weights"], w["out_bias"])
    _finite("logits", logits)
    return ForwardTrace(
        tokens=tokens, embedded=embedded,
        pre_activation_linear=pre_lin, pre_activation_gate=pre_gate,
        linear=linear, gate=gate, gated=gated, pooled=pooled, argmax=argmax,
        fc_pre=fc_pre, penultimate=penultimate, logits=logits,
        bn_cache=bn_cache, training=training,
    )


def backward(params, config, trace, grad_logits, grad_penultimate=None):
    """Chain the layer adjoints from ``d loss / d logits`` back to every weight.

    ``grad_penultimate`` adds an extra gradient on the post-ReLU penultimate
    activations (the DeCov term). Batch-norm gradients require a trace
    produced with ``training=True``.
    """
    w = params.weights
    spec = config.conv_spec
    grads = {}

    g_pen, grads["out_weights"], grads["out_bias"] = T.fc_backward(
        trace.penultimate, w["out_weights"], grad_logits)
    if grad_penultimate is not None:
        g_pen = g_pen + grad_penultimate
    g_pooled, grads["fc_weights"], grads["fc_bias"] = T.fc_backward(
        trace.pooled, w["fc_weights"], _finite("fc", g_pen), pre=trace.fc_pre)
    g_gated = T.global_max_pool_backward(
        trace.argmax, _finite("pool", g_pooled), trace.gated.shape[-2])
    g_lin, g_gate = T.glu_backward(trace.linear, trace.gate, g_gated)

    if config.use_batchnorm:
        if not trace.training:
            raise InputError("batch-norm backward needs a training-mode trace")
        g_lin, grads["bn_linear_gamma"], grads["bn_linear_beta"] = T.batchnorm_backward(
            g_lin, trace.bn_cache["linear"])
        g_gate, grads["bn_gate_gamma"], grads["bn_gate_beta"] = T.batchnorm_backward(
            g_gate, trace.bn_cache["gate"])

    g_emb_lin, grads["conv_linear_kernel"], grads["conv_linear_bias"] = T.conv1d_backward(
        trace.embedded, spec, w["conv_linear_kernel"], _finite("glu_linear", g_lin))
    g_emb_gate, grads["conv_gate_kernel"], grads["conv_gate_bias"] = T.conv1d_backward(
        trace.embedded, spec, w["conv_gate_kernel"], _finite("glu_gate", g_gate))
    grads["embedding"] = T.embed_backward(
        trace.tokens, _finite("conv", g_emb_lin + g_emb_gate), config.vocab)
    _finite("embedding", grads["embedding"])
    return grads


def predict_proba(params, config, tokens):
    """Probability of the malicious class (index 1) per sequence."""
    trace = forward(params, config, tokens)
    return T.softmax(trace.logits.astype(np.float64))[:, 1]
