"""Dense numeric kernels: GCN encoder with hand-derived backward passes,
prediction heads, losses, temperature softmax, Adam, and a central
finite-difference gradient checker.

All arrays are row-major float64.  Non-finite values are an error state;
training loops call :func:`ensure_finite` on every loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOG_CLAMP = 1e-12


def ensure_finite(x, what="value"):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite {what}")
    return x


def one_hot(labels, n_classes):
    out = np.zeros((len(labels), n_classes), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def glorot(n_in, n_out, rng):
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out))


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# softmax / losses


def softmax_temp(logits, tau=1.0):
    """Row softmax of logits/tau, max-subtracted for stability."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _clamped_log(p):
    return np.log(np.maximum(p, LOG_CLAMP))


def cross_entropy(probs, targets):
    """Mean over rows of -sum_c t_c log p_c, log argument clamped at 1e-12."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if p.shape != t.shape:
        raise ValueError("shape mismatch")
    return float(-(t * _clamped_log(p)).sum(axis=-1).mean())


def kl_div(p, q):
    """KL(p || q) = sum p log(p/q) for two probability rows (teacher first)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return float((p * (_clamped_log(p) - _clamped_log(q))).sum())


def kl_div_rows(p, q):
    """Per-row KL(p_i || q_i) for matching matrices."""
    return (p * (_clamped_log(p) - _clamped_log(q))).sum(axis=-1)


def entropy_rows(p):
    return -(p * _clamped_log(p)).sum(axis=-1)


def loss_vector(logits, tau=1.0):
    """Per-class cross-entropy loss vector l_c = -log softmax(z/tau)_c, rowwise."""
    return -_clamped_log(softmax_temp(logits, tau))


def softmax_cross_entropy(logits, targets, rows=None):
    """Fused softmax + CE, mean over ``rows`` (default all).

    Returns (loss, d_logits) with d_logits zero outside the selected rows.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if rows is None:
        rows = np.arange(logits.shape[0])
    rows = np.asarray(rows, dtype=np.int64)
    probs = softmax_temp(logits[rows], 1.0)
    loss = float(-(targets[rows] * _clamped_log(probs)).sum(axis=-1).mean())
    d = np.zeros_like(logits)
    d[rows] = (probs - targets[rows]) / len(rows)
    return loss, d


# ---------------------------------------------------------------------------
# GCN encoder and linear heads


@dataclass
class GcnEncoderParams:
    """Layer weights of the GCN encoder (1 or 2 propagation layers)."""

    weights: list

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def hidden_dim(self):
        return self.weights[-1].shape[1]

    def copy(self):
        return GcnEncoderParams([w.copy() for w in self.weights])


@dataclass
class HeadParams:
    """Linear prediction head: out = h @ weight + bias."""

    weight: np.ndarray
    bias: np.ndarray

    @property
    def out_dim(self):
        return self.weight.shape[1]

    def copy(self):
        return HeadParams(self.weight.copy(), self.bias.copy())


def init_encoder(dims, rng):
    """Glorot-uniform weights chaining ``dims`` (e.g. (d, F) or (d, F, F))."""
    if not 2 <= len(dims) <= 3:
        raise ValueError("encoder supports 1 or 2 layers")
    return GcnEncoderParams([glorot(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)])


def init_head(n_in, n_out, rng):
    return HeadParams(glorot(n_in, n_out, rng), np.zeros(n_out))


def gcn_forward(adj, x, enc):
    h = np.asarray(x, dtype=np.float64)
    for w in enc.weights:
        h = np.maximum(adj.dot(h) @ w, 0.0)
    return h


def gcn_forward_cached(adj, x, enc):
    """Forward pass retaining per-layer (propagated input, pre-activation)."""
    h = np.asarray(x, dtype=np.float64)
    cache = []
    for w in enc.weights:
        p = adj.dot(h)
        s = p @ w
        cache.append((p, s))
        h = np.maximum(s, 0.0)
    return h, cache


def gcn_backward(adj, cache, enc, d_out):
    """Weight gradients given d(loss)/d(embeddings); adjacency is symmetric."""
    grads = [None] * len(enc.weights)
    d_h = d_out
    for layer in range(len(enc.weights) - 1, -1, -1):
        p, s = cache[layer]
        d_s = d_h * (s > 0)
        grads[layer] = p.T @ d_s
        if layer > 0:
            d_h = adj.dot(d_s @ enc.weights[layer].T)
    return grads


def head_forward(h, head):
    return h @ head.weight + head.bias


def head_backward(h, head, d_logits):
    d_w = h.T @ d_logits
    d_b = d_logits.sum(axis=0)
    d_h = d_logits @ head.weight.T
    return d_w, d_b, d_h


def encoder_param_list(enc):
    return list(enc.weights)


def head_param_list(head):
    return [head.weight, head.bias]


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params, lr=0.01, weight_decay=0.0):
    return AdamState(
        lr=lr,
        weight_decay=weight_decay,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def adam_step(state, params, grads):
    """One in-place Adam update with bias correction; weight decay enters as
    an L2 gradient term (g += wd * p) before the moment updates."""
    state.step += 1
    t = state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError("gradient shape mismatch")
        if state.weight_decay:
            g = g + state.weight_decay * p
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(loss_fn, params, eps=1e-5, max_coords=200, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn()`` closes over ``params`` and returns (loss, grads) with grads
    aligned to ``params``.  Coordinates are checked exhaustively up to
    ``max_coords`` per parameter, then sampled.
    """
    _, grads = loss_fn()
    worst = 0.0
    for p, g in zip(params, grads):
        n = p.size
        if max_coords is not None and n > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        for i in coords:
            orig = p.flat[i]
            p.flat[i] = orig + eps
            lp = loss_fn()[0]
            p.flat[i] = orig - eps
            lm = loss_fn()[0]
            p.flat[i] = orig
            fd = (lp - lm) / (2.0 * eps)
            ga = g.flat[i]
            rel = abs(ga - fd) / max(1.0, abs(ga), abs(fd))
            worst = max(worst, rel)
    return worst
