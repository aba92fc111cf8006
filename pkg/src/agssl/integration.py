"""Knowledge integration: per-node simplex weights over the teacher pool,
the two learned weighting schemes and their training loop, and the
approximation-gap solvers behind the monotone-improvement theory.

Every weighting scheme emits an N x K matrix whose rows are on the
probability simplex; the integrated teacher row is the convex combination
p_t[i] = sum_k w[i, k] * probs[k, i].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn, rng as rngmod


def check_simplex_rows(w, tol=1e-10):
    w = np.asarray(w)
    if np.any(w < -tol):
        raise ValueError("negative weight")
    if np.any(np.abs(w.sum(axis=-1) - 1.0) > tol):
        raise ValueError("row does not sum to 1")
    return w


def _row_softmax(scores):
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# heuristic schemes


def weights_random(n, k, rng=None, seed=0):
    """Uniform [0,1] draws, row-softmaxed onto the simplex."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if rng is None:
        rng = rngmod.stream(seed, rngmod.INTEGRATOR)
    return _row_softmax(rng.random((n, k)))


def weights_average(n, k):
    """Exactly 1/K everywhere."""
    return np.full((n, k), 1.0 / k)


def weights_labeled_ce(bundle, labels, train_idx):
    """Softmax over minus the per-teacher cross-entropy to the node's label
    on labeled nodes; exactly uniform on unlabeled nodes."""
    if len(train_idx) == 0:
        raise ValueError("train set empty")
    n, k = bundle.n_nodes, bundle.n_teachers
    w = np.full((n, k), 1.0 / k)
    idx = np.asarray(train_idx, dtype=np.int64)
    # -CE(e_y, h~_k) = log h~[k, i, y_i]
    scores = np.log(np.maximum(bundle.probs[:, idx, labels[idx]], nn.LOG_CLAMP)).T
    w[idx] = _row_softmax(scores)
    return w


# ---------------------------------------------------------------------------
# learned schemes


@dataclass
class LfParams:
    """Latent-factor scheme: one factor per teacher plus a global direction.

    score(k, i) = direction . (factors[k] * student_logits[i])
    """

    factors: np.ndarray    # K x C
    direction: np.ndarray  # C

    def copy(self):
        return LfParams(self.factors.copy(), self.direction.copy())

    def param_list(self):
        return [self.factors, self.direction]


@dataclass
class TsParams:
    """Teacher-student matching scheme with a shared C x C projection.

    score(k, i) = (W z_i) . (W h_{k,i})  on raw logits.
    """

    projection: np.ndarray

    def copy(self):
        return TsParams(self.projection.copy())

    def param_list(self):
        return [self.projection]


def init_lf_params(n_teachers, n_classes, rng):
    # factors near one and a unit direction: distinct enough to break the
    # uniform-weight saddle (equal factors zero every gradient), close
    # enough that the initial weights are effectively uniform
    factors = 1.0 + 0.01 * rng.standard_normal((n_teachers, n_classes))
    return LfParams(factors=factors, direction=np.ones(n_classes))


def init_ts_params(n_classes, rng=None):
    return TsParams(projection=np.eye(n_classes))


def lf_scores(student_logits, params):
    # score[i, k] = sum_c direction_c * factors[k, c] * z[i, c]
    return student_logits @ (params.factors * params.direction[None, :]).T


def ts_scores(student_logits, teacher_logits, params):
    w = params.projection
    pz = student_logits @ w.T                      # N x C
    ph = np.einsum("knc,dc->knd", teacher_logits, w)  # K x N x C
    return np.einsum("nd,knd->nk", pz, ph)


def weights_lf(student_logits, params):
    return _row_softmax(lf_scores(student_logits, params))


def weights_ts(student_logits, teacher_logits, params):
    return _row_softmax(ts_scores(student_logits, teacher_logits, params))


def compute_weights(kind, bundle, student_logits=None, gamma=None, rng=None):
    """Uniform entry point used by the distillation loop."""
    n, k = bundle.n_nodes, bundle.n_teachers
    if kind == "average":
        return weights_average(n, k)
    if kind == "random":
        return weights_random(n, k, rng=rng)
    if kind == "lf":
        return weights_lf(student_logits, gamma)
    if kind == "ts":
        return weights_ts(student_logits, bundle.logits, gamma)
    raise ValueError(f"unknown integrator {kind!r}")


def integrate(bundle, weights):
    """Integrated teacher p_t[i] = sum_k weights[i,k] * probs[k,i] (N x C)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (bundle.n_nodes, bundle.n_teachers):
        raise ValueError("weight shape mismatch")
    return np.einsum("nk,knc->nc", w, bundle.probs)


# ---------------------------------------------------------------------------
# gamma training: cross-entropy of p_t to one-hot labels on the train split


def _lw_loss_and_dscores(scores, probs_knc, labels, train_idx):
    """Shared piece: L_W and its gradient wrt the pre-softmax scores."""
    idx = np.asarray(train_idx, dtype=np.int64)
    lam = _row_softmax(scores[idx])                      # R x K
    h = probs_knc[:, idx, :]                             # K x R x C
    p_t = np.einsum("rk,krc->rc", lam, h)
    py = np.maximum(p_t[np.arange(len(idx)), labels[idx]], nn.LOG_CLAMP)
    loss = float(-np.log(py).mean())
    d_pt_y = -1.0 / (py * len(idx))                      # R
    d_lam = d_pt_y[:, None] * h[:, np.arange(len(idx)), labels[idx]].T  # R x K
    inner = (d_lam * lam).sum(axis=1, keepdims=True)
    d_scores_rows = lam * (d_lam - inner)
    d_scores = np.zeros_like(scores)
    d_scores[idx] = d_scores_rows
    return loss, d_scores


def lw_loss(bundle, weights, labels, node_idx):
    """Cross-entropy of integrated rows against one-hot labels over node_idx."""
    idx = np.asarray(node_idx, dtype=np.int64)
    p_t = integrate(bundle, weights)[idx]
    py = np.maximum(p_t[np.arange(len(idx)), labels[idx]], nn.LOG_CLAMP)
    return float(-np.log(py).mean())


def gamma_loss_and_grads(gamma, bundle, student_logits, labels, train_idx):
    """L_W and analytic gradients wrt the integration parameters; the student
    logits are treated as constants."""
    if isinstance(gamma, LfParams):
        scores = lf_scores(student_logits, gamma)
        loss, d_scores = _lw_loss_and_dscores(scores, bundle.probs, labels, train_idx)
        # score[i,k] = sum_c dir_c factors[k,c] z[i,c]
        d_factors = (d_scores.T @ student_logits) * gamma.direction[None, :]
        d_direction = np.einsum("ik,kc,ic->c", d_scores, gamma.factors, student_logits)
        return loss, [d_factors, d_direction]
    if isinstance(gamma, TsParams):
        w = gamma.projection
        scores = ts_scores(student_logits, bundle.logits, gamma)
        loss, d_scores = _lw_loss_and_dscores(scores, bundle.probs, labels, train_idx)
        # score[i,k] = z_i^T W^T W h_{k,i}; dW = W (h z^T + z h^T) summed
        z = student_logits
        h = bundle.logits
        wz = z @ w.T
        wh = np.einsum("knc,dc->knd", h, w)
        d_w = np.einsum("ik,id,kic->dc", d_scores, wz, h)
        d_w += np.einsum("ik,kid,ic->dc", d_scores, wh, z)
        return loss, [d_w]
    raise TypeError("gamma must be LfParams or TsParams")


def train_gamma(gamma, bundle, student_logits, labels, train_idx, val_idx=None,
                epochs=500, lr=0.01):
    """Adam on the integration parameters only, minimizing L_W on the train
    split; returns the snapshot with the lowest validation MSE-to-one-hot
    (validation falls back to the train split when absent)."""
    if len(train_idx) == 0:
        raise ValueError("train set empty")
    if val_idx is None or len(val_idx) == 0:
        val_idx = train_idx
    params = gamma.param_list()
    state = nn.adam_init(params, lr=lr)
    onehot = nn.one_hot(labels, bundle.n_classes)
    best = (np.inf, gamma.copy())
    for _ in range(epochs):
        loss, grads = gamma_loss_and_grads(gamma, bundle, student_logits, labels, train_idx)
        nn.ensure_finite(loss, "gamma loss")
        nn.adam_step(state, params, grads)
        w = compute_weights("lf" if isinstance(gamma, LfParams) else "ts",
                            bundle, student_logits, gamma)
        p_t = integrate(bundle, w)
        val_mse = float((((p_t[val_idx] - onehot[val_idx]) ** 2).sum(axis=1) /
                         bundle.n_classes).mean())
        if val_mse < best[0]:
            best = (val_mse, gamma.copy())
    return best[1]


# ---------------------------------------------------------------------------
# approximation gap Delta(K)


def project_simplex(v):
    """Euclidean projection of rows of v onto the probability simplex
    (sort-based, deterministic)."""
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    n, k = v.shape
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    ind = np.arange(1, k + 1)
    cond = u - css / ind > 0
    rho = k - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(n), rho] / (rho + 1.0)
    return np.maximum(v - theta[:, None], 0.0)


def _pgd_delta(a, target, init, iters):
    """Best-iterate projected gradient on ||a @ lam - target||^2 over the
    simplex, batched: a is (n, C, K), target (n, C), init (n, K)."""
    smax = np.linalg.svd(a, compute_uv=False)[:, 0]
    step = 1.0 / (2.0 * smax * smax + 1e-30)
    lam = init.copy()
    resid = np.einsum("ick,ik->ic", a, lam) - target
    best_f = (resid ** 2).sum(axis=1)
    best_lam = lam.copy()
    for _ in range(iters):
        grad = 2.0 * np.einsum("ick,ic->ik", a, resid)
        lam = project_simplex(lam - step[:, None] * grad)
        resid = np.einsum("ick,ik->ic", a, lam) - target
        f = (resid ** 2).sum(axis=1)
        better = f < best_f
        best_f = np.where(better, f, best_f)
        best_lam[better] = lam[better]
    return np.sqrt(best_f), best_lam


def _lstsq_delta(a, target, ridge=1e-10):
    """Unconstrained least squares via ridge-stabilized normal equations."""
    k = a.shape[2]
    gram = np.einsum("ick,icl->ikl", a, a) + ridge * np.eye(k)[None, :, :]
    rhs = np.einsum("ick,ic->ik", a, target)
    lam = np.linalg.solve(gram, rhs[..., None])[..., 0]
    resid = np.einsum("ick,ik->ic", a, lam) - target
    return np.sqrt((resid ** 2).sum(axis=1)), lam


def delta_k(teacher_rows, target, constrained=True, iters=1000, init=None):
    """Minimum L2 distance between a weighting of the K teacher rows and the
    target row.

    Constrained mode minimizes over the simplex by projected gradient
    (step 1/L with L = 2 sigma_max^2, best iterate kept); unconstrained mode
    solves ordinary least squares with a 1e-10 ridge.  Returns (delta, lam).
    """
    rows = np.asarray(teacher_rows, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    k = rows.shape[0]
    a = rows.T[None, :, :]  # 1 x C x K
    if constrained:
        if init is None:
            init = np.full((1, k), 1.0 / k)
        else:
            init = np.atleast_2d(np.asarray(init, dtype=np.float64))
        d, lam = _pgd_delta(a, t[None, :], init, iters)
    else:
        d, lam = _lstsq_delta(a, t[None, :])
    return float(d[0]), lam[0]


def delta_k_curve(bundle, targets, k_max=None, constrained=True, iters=1000):
    """Per-node Delta using the first 1..k_max teachers.

    In constrained mode each prefix solve warm-starts from the previous
    optimum padded with a zero weight, which makes the curve monotone
    non-increasing by construction of the best-iterate solver.
    """
    probs = bundle.probs
    k_total, n, c = probs.shape
    if k_max is None:
        k_max = k_total
    if k_max > k_total:
        raise ValueError("k_max exceeds bundle size")
    targets = np.asarray(targets, dtype=np.float64)
    out = np.empty((n, k_max))
    prev_lam = None
    for k in range(1, k_max + 1):
        a = probs[:k].transpose(1, 2, 0)  # n x C x k
        if constrained:
            if prev_lam is None:
                init = np.ones((n, 1))
            else:
                init = np.concatenate([prev_lam, np.zeros((n, 1))], axis=1)
            d, lam = _pgd_delta(a, targets, init, iters)
            prev_lam = lam
        else:
            d, _ = _lstsq_delta(a, targets)
        out[:, k - 1] = d
    return out


def prop1_inequality_check(p_t, p_star, loss_vectors):
    """Both sides of the expectation-level Cauchy-Schwarz step:
    lhs = (mean (p_t - p*) . l)^2, rhs = (mean ||p_t - p*|| ||l||)^2."""
    d = np.atleast_2d(np.asarray(p_t, dtype=np.float64) - np.asarray(p_star, dtype=np.float64))
    l = np.atleast_2d(np.asarray(loss_vectors, dtype=np.float64))
    if d.shape != l.shape:
        raise ValueError("shape mismatch")
    lhs = float((d * l).sum(axis=1).mean() ** 2)
    rhs = float((np.linalg.norm(d, axis=1) * np.linalg.norm(l, axis=1)).mean() ** 2)
    return lhs, rhs
