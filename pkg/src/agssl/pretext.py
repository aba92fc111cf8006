"""Self-supervised pretext tasks.

Five tasks, each split into a one-time target-construction step
(deterministic given graph + seed) and a differentiable loss over node
embeddings:

* ``par``     - predict balanced graph-partition pseudo-labels (recursive
                spectral bisection via power-iteration Fiedler vectors).
* ``clu``     - predict k-means cluster pseudo-labels on node features
                (k-means++ init, Lloyd iterations, deterministic reseeding).
* ``dgi``     - contrast node embeddings against a corrupted-view global
                summary with an InfoNCE objective.
* ``pairdis`` - classify sampled node pairs into four shortest-path-length
                bins (1, 2, 3, >=4; unreachable counts as >=4).
* ``pairsim`` - predict link existence for masked edges vs sampled
                non-edges; masked edges are removed from the propagation
                graph used by this task's teacher.

Losses return ``(loss, d_embeddings, head_grads)`` so the caller can merge
embedding gradients with the downstream-task path and backpropagate through
the encoder once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import graphs, nn, rng as rngmod

TASK_KINDS = ("par", "clu", "dgi", "pairdis", "pairsim")

PAIRDIS_CLASSES = 4

# Appendix-style defaults, clamped to desk scale where noted
DEFAULT_N_CLUSTERS = 10
DEFAULT_N_PARTS = 400
DEFAULT_N_PAIRS = 400
DEFAULT_N_MASKED = 400
DEFAULT_DGI_ANCHORS = 2000
DEFAULT_DGI_NEGATIVES = 64


@dataclass(frozen=True)
class PretextTask:
    """One pretext task: kind, frozen targets, SSL-head output width.

    ``head_dim`` is None for dgi (its scorer is a raw dot product).
    ``masked_edges`` is set only for pairsim and lists the edges that must
    be removed from the teacher's propagation graph.
    """

    kind: str
    seed: int
    targets: tuple
    head_dim: int | None
    masked_edges: np.ndarray | None = None


def canonical_task_index(kind):
    return TASK_KINDS.index(kind)


# ---------------------------------------------------------------------------
# CLU: k-means pseudo-labels


def _kmeans_plus_plus(x, k, rng):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r))
            idx = min(idx, n - 1)
        centers[j] = x[idx]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def build_clu_targets(g, n_clusters=DEFAULT_N_CLUSTERS, seed=0, max_iter=100, tol=1e-6):
    """Cluster pseudo-labels from k-means on features (k-means++ init,
    Lloyd iterations, empty clusters reseeded to the farthest point)."""
    x = g.features
    k = min(n_clusters, g.n_nodes)
    rng = rngmod.stream(seed, rngmod.TASK_TARGETS, canonical_task_index("clu"))
    centers = _kmeans_plus_plus(x, k, rng)
    labels = np.zeros(g.n_nodes, dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        new_centers = centers.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new_centers[j] = x[members].mean(axis=0)
            else:
                # deterministic reseed: farthest point from its assigned centroid
                far = int(np.argmax(d2[np.arange(g.n_nodes), labels]))
                new_centers[j] = x[far]
        shift = np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max()
        centers = new_centers
        if shift < tol:
            break
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


# ---------------------------------------------------------------------------
# PAR: spectral-bisection pseudo-labels


def _fiedler_values(nodes, neighbor_lists, rng, iters=200):
    """Fiedler-vector entries of the induced subgraph via power iteration on
    (c*I - L) with the all-ones direction deflated."""
    n = len(nodes)
    local = {int(u): i for i, u in enumerate(nodes)}
    adj = [[local[v] for v in neighbor_lists(u) if int(v) in local] for u in nodes]
    deg = np.array([len(a) for a in adj], dtype=np.float64)
    c = 2.0 * max(1.0, deg.max()) + 1.0
    v = rng.standard_normal(n)
    for _ in range(iters):
        v = v - v.mean()
        norm = np.linalg.norm(v)
        if norm < 1e-300:
            v = rng.standard_normal(n)
            continue
        v /= norm
        w = (c - deg) * v
        for i, nbrs in enumerate(adj):
            if nbrs:
                w[i] += v[nbrs].sum()
        v = w
    v = v - v.mean()
    if v[0] > 0:
        v = -v
    return v


def _bisect(nodes, n_parts, neighbor_lists, rng, out_labels, next_label):
    if n_parts == 1 or len(nodes) == 1:
        out_labels[nodes] = next_label
        return next_label + 1
    p_left = (n_parts + 1) // 2
    vals = _fiedler_values(nodes, neighbor_lists, rng)
    order = np.argsort(vals, kind="stable")
    cut = int(round(len(nodes) * p_left / n_parts))
    cut = min(max(cut, 1), len(nodes) - 1)
    left = np.sort(nodes[order[:cut]])
    right = np.sort(nodes[order[cut:]])
    next_label = _bisect(left, p_left, neighbor_lists, rng, out_labels, next_label)
    return _bisect(right, n_parts - p_left, neighbor_lists, rng, out_labels, next_label)


def build_par_targets(g, n_parts=DEFAULT_N_PARTS, seed=0):
    """Balanced partition pseudo-labels via recursive spectral bisection.

    The requested part count is clamped to max(2, N // 5) at desk scale.
    Disconnected graphs are partitioned per component (parts allocated
    proportionally to component size) and the label spaces merged.
    """
    if n_parts < 2:
        raise ValueError("n_parts must be >= 2")
    n_parts = max(2, min(n_parts, g.n_nodes // 5 if g.n_nodes >= 10 else g.n_nodes))
    n_parts = min(n_parts, g.n_nodes)
    rng = rngmod.stream(seed, rngmod.TASK_TARGETS, canonical_task_index("par"))
    comps = graphs.connected_components(g)
    labels = np.zeros(g.n_nodes, dtype=np.int64)
    if len(comps) == 1:
        _bisect(comps[0], n_parts, g.neighbors, rng, labels, 0)
        return labels
    # proportional allocation, at least one part per component
    sizes = np.array([len(c) for c in comps], dtype=np.float64)
    alloc = np.maximum(1, np.floor(n_parts * sizes / sizes.sum()).astype(np.int64))
    alloc = np.minimum(alloc, sizes.astype(np.int64))
    order = np.argsort(-sizes, kind="stable")
    i = 0
    while alloc.sum() < n_parts and i < 10 * len(comps):
        c = order[i % len(comps)]
        if alloc[c] < sizes[c]:
            alloc[c] += 1
        i += 1
    while alloc.sum() > n_parts:
        c = order[np.argmax(alloc[order])]
        if alloc[c] > 1:
            alloc[c] -= 1
        else:
            break
    next_label = 0
    for comp, parts in zip(comps, alloc):
        next_label = _bisect(comp, int(parts), g.neighbors, rng, labels, next_label)
    return labels


# ---------------------------------------------------------------------------
# shared pseudo-label loss (PAR and CLU)


def clu_par_loss(embeds, head, targets):
    """Mean cross-entropy of head logits against pseudo-labels over all nodes.

    Returns (loss, d_embeds, (d_weight, d_bias)).
    """
    targets = np.asarray(targets, dtype=np.int64)
    logits = nn.head_forward(embeds, head)
    t = nn.one_hot(targets, head.out_dim)
    loss, d_logits = nn.softmax_cross_entropy(logits, t)
    d_w, d_b, d_h = nn.head_backward(embeds, head, d_logits)
    return loss, d_h, (d_w, d_b)


# ---------------------------------------------------------------------------
# DGI: contrast node embeddings against a corrupted-view summary


def build_dgi_targets(g, seed=0, n_anchors=DEFAULT_DGI_ANCHORS, n_negatives=DEFAULT_DGI_NEGATIVES):
    """Frozen corruption + sampling pattern: a feature-row permutation for the
    corrupted view, anchor nodes, and per-anchor negative node ids."""
    rng = rngmod.stream(seed, rngmod.TASK_TARGETS, canonical_task_index("dgi"))
    n = g.n_nodes
    perm = rng.permutation(n)
    n_anchors = min(n_anchors, n)
    anchors = np.sort(rng.choice(n, size=n_anchors, replace=False))
    n_neg = min(n_negatives, n - 1)
    negatives = np.empty((n_anchors, n_neg), dtype=np.int64)
    for r, a in enumerate(anchors):
        pool = np.concatenate([np.arange(a), np.arange(a + 1, n)])
        negatives[r] = rng.choice(pool, size=n_neg, replace=False)
    return perm, anchors, negatives


def dgi_loss_from_embeddings(h_clean, h_corrupt, targets):
    """InfoNCE against the corrupted-view mean summary.

    score(i) = h_i . s with s = mean(h_corrupt); each anchor is contrasted
    against its own sampled negatives.  Returns
    (loss, d_h_clean, d_h_corrupt).
    """
    perm, anchors, negatives = targets
    n = h_clean.shape[0]
    s = h_corrupt.mean(axis=0)
    scores = h_clean @ s
    cols = np.concatenate([anchors[:, None], negatives], axis=1)
    u = scores[cols]
    u_max = u.max(axis=1, keepdims=True)
    e = np.exp(u - u_max)
    p = e / e.sum(axis=1, keepdims=True)
    loss = float(-np.log(np.maximum(p[:, 0], nn.LOG_CLAMP)).mean())
    d_u = p.copy()
    d_u[:, 0] -= 1.0
    d_u /= len(anchors)
    d_scores = np.zeros(n)
    np.add.at(d_scores, cols, d_u)
    d_h_clean = d_scores[:, None] * s[None, :]
    d_s = h_clean.T @ d_scores
    d_h_corrupt = np.tile(d_s / n, (n, 1))
    return loss, d_h_clean, d_h_corrupt


def dgi_loss(g, adj, enc, seed=0, n_sample=DEFAULT_DGI_ANCHORS, n_negatives=DEFAULT_DGI_NEGATIVES):
    """Standalone DGI objective; returns (loss, encoder weight grads)."""
    targets = build_dgi_targets(g, seed=seed, n_anchors=n_sample, n_negatives=n_negatives)
    perm = targets[0]
    h, cache = nn.gcn_forward_cached(adj, g.features, enc)
    h_c, cache_c = nn.gcn_forward_cached(adj, g.features[perm], enc)
    loss, d_h, d_h_c = dgi_loss_from_embeddings(h, h_c, targets)
    grads = nn.gcn_backward(adj, cache, enc, d_h)
    grads_c = nn.gcn_backward(adj, cache_c, enc, d_h_c)
    return loss, [a + b for a, b in zip(grads, grads_c)]


# ---------------------------------------------------------------------------
# PAIRDIS: shortest-path-length bins


def shortest_path_class(g, u, v):
    """0/1/2/3 for distance 1/2/3/>=4 (unreachable counts as >=4)."""
    d = graphs.bfs_path_length(g, u, v, cap=3)
    return 3 if d is None else d - 1


def build_pairdis_targets(g, n_pairs=DEFAULT_N_PAIRS, seed=0):
    if g.n_nodes < 2:
        raise ValueError("need at least two nodes to sample pairs")
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = rngmod.stream(seed, rngmod.TASK_TARGETS, canonical_task_index("pairdis"))
    pairs = np.empty((n_pairs, 2), dtype=np.int64)
    for r in range(n_pairs):
        u = int(rng.integers(g.n_nodes))
        v = int(rng.integers(g.n_nodes - 1))
        if v >= u:
            v += 1
        pairs[r] = (u, v)
    classes = np.array([shortest_path_class(g, u, v) for u, v in pairs], dtype=np.int64)
    return pairs, classes


def _pair_features(embeds, pairs):
    diff = embeds[pairs[:, 0]] - embeds[pairs[:, 1]]
    return np.abs(diff), np.sign(diff)


def _pair_backward(embeds, pairs, d_feat, sign):
    d_h = np.zeros_like(embeds)
    d_diff = d_feat * sign
    np.add.at(d_h, pairs[:, 0], d_diff)
    np.add.at(d_h, pairs[:, 1], -d_diff)
    return d_h


def pairdis_loss(embeds, head, targets):
    """Mean CE of head(|h_i - h_j|) against the 4 path-length classes."""
    pairs, classes = targets
    feat, sign = _pair_features(embeds, pairs)
    logits = nn.head_forward(feat, head)
    t = nn.one_hot(classes, PAIRDIS_CLASSES)
    loss, d_logits = nn.softmax_cross_entropy(logits, t)
    d_w, d_b, d_feat = nn.head_backward(feat, head, d_logits)
    return loss, _pair_backward(embeds, pairs, d_feat, sign), (d_w, d_b)


# ---------------------------------------------------------------------------
# PAIRSIM: link prediction on masked edges


def build_pairsim_targets(g, m=DEFAULT_N_MASKED, seed=0):
    """Positive set M (m random edges, masked out of propagation) and
    negative set of m sampled non-edges."""
    rng = rngmod.stream(seed, rngmod.TASK_TARGETS, canonical_task_index("pairsim"))
    ea = graphs.edge_array(g)
    n = g.n_nodes
    if m > len(ea):
        m = len(ea)
    if m < 1:
        raise ValueError("graph has no edges to mask")
    n_possible = n * (n - 1) // 2
    if n_possible - len(ea) < m:
        raise ValueError("not enough non-edges to sample")
    pos = ea[np.sort(rng.choice(len(ea), size=m, replace=False))]
    neg = []
    seen = set()
    attempts = 0
    while len(neg) < m:
        attempts += 1
        if attempts > 100 * m:
            raise ValueError("rejection sampling failed: graph too dense")
        u = int(rng.integers(n))
        v = int(rng.integers(n))
        if u == v:
            continue
        if u > v:
            u, v = v, u
        if (u, v) in seen or g.has_edge(u, v):
            continue
        seen.add((u, v))
        neg.append((u, v))
    return pos, np.array(neg, dtype=np.int64)


def pairsim_loss(embeds, head, targets):
    """Binary CE of sigmoid(head(|h_i - h_j|)) on masked edges (label 1)
    and non-edges (label 0), normalized by 2m."""
    pos, neg = targets
    m = len(pos)
    pairs = np.concatenate([pos, neg], axis=0)
    y = np.concatenate([np.ones(m), np.zeros(len(neg))])
    feat, sign = _pair_features(embeds, pairs)
    logits = nn.head_forward(feat, head)[:, 0]
    p = nn.sigmoid(logits)
    loss = float(-(y * nn._clamped_log(p) + (1 - y) * nn._clamped_log(1 - p)).sum() / (2 * m))
    d_logits = ((p - y) / (2 * m))[:, None]
    d_w, d_b, d_feat = nn.head_backward(feat, head, d_logits)
    return loss, _pair_backward(embeds, pairs, d_feat, sign), (d_w, d_b)


# ---------------------------------------------------------------------------
# construction and dispatch


def make_task(kind, g, seed, **hyper):
    """Build a :class:`PretextTask` with frozen targets for ``kind``."""
    if kind == "clu":
        labels = build_clu_targets(g, hyper.get("n_clusters", DEFAULT_N_CLUSTERS), seed)
        return PretextTask(kind, seed, (labels,), int(labels.max()) + 1)
    if kind == "par":
        labels = build_par_targets(g, hyper.get("n_parts", DEFAULT_N_PARTS), seed)
        return PretextTask(kind, seed, (labels,), int(labels.max()) + 1)
    if kind == "dgi":
        targets = build_dgi_targets(
            g, seed,
            hyper.get("n_anchors", DEFAULT_DGI_ANCHORS),
            hyper.get("n_negatives", DEFAULT_DGI_NEGATIVES),
        )
        return PretextTask(kind, seed, targets, None)
    if kind == "pairdis":
        targets = build_pairdis_targets(g, hyper.get("n_pairs", DEFAULT_N_PAIRS), seed)
        return PretextTask(kind, seed, targets, PAIRDIS_CLASSES)
    if kind == "pairsim":
        pos, neg = build_pairsim_targets(g, hyper.get("n_masked", DEFAULT_N_MASKED), seed)
        return PretextTask(kind, seed, (pos, neg), 1, masked_edges=pos)
    raise ValueError(f"unknown task kind {kind!r}")


def ssl_head_dims(task, hidden_dim):
    """(in, out) dims of the SSL head, or None when the task has no head."""
    if task.head_dim is None:
        return None
    return hidden_dim, task.head_dim


def ssl_loss(task, embeds, head):
    """Dispatch to the task loss; returns (loss, d_embeds, head_grads)."""
    if task.kind in ("par", "clu"):
        return clu_par_loss(embeds, head, task.targets[0])
    if task.kind == "pairdis":
        return pairdis_loss(embeds, head, task.targets)
    if task.kind == "pairsim":
        return pairsim_loss(embeds, head, task.targets)
    raise ValueError(f"{task.kind} is not an embedding-level loss")


def targets_to_json(task):
    """Serializable form of the frozen targets, for caching."""
    payload = {"task": task.kind, "seed": task.seed}
    payload["targets"] = [np.asarray(t).tolist() for t in task.targets]
    return json.dumps(payload, sort_keys=True)


def targets_from_json(text):
    payload = json.loads(text)
    kind = payload["task"]
    arrays = tuple(np.asarray(t, dtype=np.int64) for t in payload["targets"])
    if kind in ("par", "clu"):
        head_dim = int(arrays[0].max()) + 1
    elif kind == "pairdis":
        head_dim = PAIRDIS_CLASSES
    elif kind == "pairsim":
        head_dim = 1
    else:
        head_dim = None
    masked = arrays[0] if kind == "pairsim" else None
    return PretextTask(kind, payload["seed"], arrays, head_dim, masked_edges=masked)
