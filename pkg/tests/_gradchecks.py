"""Per-layer central-difference checks, each returning a relative error.

Every check builds a random float64 instance from ``seed``, contracts the
layer output with a random cotangent ``R`` to get a scalar, and compares the
hand-written adjoint against finite differences of that scalar.
"""

import numpy as np

from malconv import tensor as T
from malconv.model import init_params
from malconv.training import decov_loss, loss_and_gradients

from _helpers import numeric_grad, rel_error

H = 1e-6


def check_embed(seed):
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, 257, 12)
    table = rng.standard_normal((257, 3))
    r = rng.standard_normal((12, 3))
    analytic = T.embed_backward(tokens, r)
    used = np.unique(tokens)
    index = [b * 3 + c for b in used for c in range(3)] + [int(np.setdiff1d(np.arange(257), used)[0]) * 3]
    numeric = numeric_grad(lambda: (T.embed_forward(tokens, table) * r).sum(), table, 1e-4, index)
    mask = np.zeros(table.size, bool)
    mask[index] = True
    return rel_error(analytic.ravel()[mask], numeric.ravel()[mask])


def check_conv(seed):
    rng = np.random.default_rng(seed)
    d, f = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    width, stride, dil = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 3))
    spec = T.ConvSpec(d, f, width, stride, dil)
    length = spec.effective_width + int(rng.integers(0, 12))
    x = rng.standard_normal((2, length, d))
    kernel = rng.standard_normal(spec.kernel_shape)
    bias = rng.standard_normal(f)
    r = rng.standard_normal((2, spec.output_length(length), f))

    def loss():
        return (T.conv1d_forward(x, spec, kernel, bias) * r).sum()

    gx, gk, gb = T.conv1d_backward(x, spec, kernel, r)
    return max(rel_error(gx, numeric_grad(loss, x, H)),
               rel_error(gk, numeric_grad(loss, kernel, H)),
               rel_error(gb, numeric_grad(loss, bias, H)))


def check_glu(seed):
    rng = np.random.default_rng(seed)
    lin, gate, r = (rng.standard_normal((5, 3)) for _ in range(3))

    def loss():
        return (T.glu_forward(lin, gate) * r).sum()

    gl, gg = T.glu_backward(lin, gate, r)
    return max(rel_error(gl, numeric_grad(loss, lin, H)),
               rel_error(gg, numeric_grad(loss, gate, H)))


def check_max_pool(seed):
    rng = np.random.default_rng(seed)
    # distinct values spaced well beyond h, so no ties move under perturbation
    x = rng.permutation(24).reshape(2, 4, 3).astype(np.float64) * 0.1
    r = rng.standard_normal((2, 3))
    _, argmax = T.global_max_pool(x)
    analytic = T.global_max_pool_backward(argmax, r, x.shape[1])
    numeric = numeric_grad(lambda: (T.global_max_pool(x)[0] * r).sum(), x, H)
    return rel_error(analytic, numeric)


def check_fc(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 5))
    w = rng.standard_normal((5, 3))
    b = rng.standard_normal(3)
    r = rng.standard_normal((4, 3))
    relu = bool(seed % 2)
    out, pre = T.fc_forward(x, w, b, relu)
    if relu and np.min(np.abs(pre)) < 1e-3:
        b = b + 0.01  # keep away from the kink
        out, pre = T.fc_forward(x, w, b, relu)

    def loss():
        return (T.fc_forward(x, w, b, relu)[0] * r).sum()

    gx, gw, gb = T.fc_backward(x, w, r, pre if relu else None)
    return max(rel_error(gx, numeric_grad(loss, x, H)),
               rel_error(gw, numeric_grad(loss, w, H)),
               rel_error(gb, numeric_grad(loss, b, H)))


def check_softmax_xent(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((6, 2)) * 2
    labels = rng.integers(0, 2, 6)
    _, grad, _ = T.softmax_xent(logits, labels)
    numeric = numeric_grad(lambda: T.softmax_xent(logits, labels)[0], logits, H)
    return rel_error(grad, numeric)


def check_batchnorm(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 5, 3)) * 2 + 1
    gamma = rng.standard_normal(3)
    beta = rng.standard_normal(3)
    r = rng.standard_normal(x.shape)

    def loss():
        return (T.batchnorm_forward(x, gamma, beta)[0] * r).sum()

    _, cache = T.batchnorm_forward(x, gamma, beta)
    gx, gg, gb = T.batchnorm_backward(r, cache)
    return max(rel_error(gx, numeric_grad(loss, x, H)),
               rel_error(gg, numeric_grad(loss, gamma, H)),
               rel_error(gb, numeric_grad(loss, beta, H)))


def check_decov(seed):
    rng = np.random.default_rng(seed)
    h = rng.standard_normal((6, 4))
    _, grad = decov_loss(h)
    return rel_error(grad, numeric_grad(lambda: decov_loss(h)[0], h, H))


LAYER_CHECKS = {
    "embed": check_embed,
    "conv1d": check_conv,
    "glu": check_glu,
    "max_pool": check_max_pool,
    "fc": check_fc,
    "softmax_xent": check_softmax_xent,
    "batchnorm": check_batchnorm,
    "decov": check_decov,
}


def check_full_model(config, seed, decov_lambda=0.1, n_probe=6, batch=3):
    """End-to-end check of ``loss_and_gradients`` on a random batch.

    ``n_probe`` entries per parameter array are probed (embedding rows are
    drawn from tokens that occur in the batch). Inputs whose max-pool winner
    changes under the perturbation are rare; the returned error is the worst
    over all probed arrays.
    """
    rng = np.random.default_rng(seed)
    params = init_params(config, seed, np.float64)
    tokens = rng.integers(0, 256, (batch, config.max_len))
    tokens[0, config.max_len // 2:] = T.PAD_TOKEN
    labels = np.arange(batch) % 2
    training = config.use_batchnorm

    def loss():
        probe = params.copy()  # forward in training mode mutates running stats
        return loss_and_gradients(probe, config, tokens, labels, decov_lambda, training)[0]

    _, grads, _ = loss_and_gradients(params.copy(), config, tokens, labels, decov_lambda, training)
    worst = 0.0
    for name, value in params.weights.items():
        if name == "embedding":
            rows = rng.choice(np.unique(tokens), n_probe)
            index = list(rows * config.embed_dim + rng.integers(0, config.embed_dim, n_probe))
        else:
            index = list(rng.choice(value.size, min(n_probe, value.size), replace=False))
        numeric = numeric_grad(loss, value, H, index).ravel()[index]
        worst = max(worst, rel_error(grads[name].ravel()[index], numeric))
    return worst

