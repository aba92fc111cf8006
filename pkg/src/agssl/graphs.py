"""Graph data model: immutable CSR storage, ingestion, synthetic generation,
and the structural queries the rest of the pipeline relies on.

A :class:`Graph` is an undirected, attributed graph with integer class
labels and disjoint train/val/test splits.  Adjacency is stored as CSR
row-pointer / column-index arrays with symmetric edges, no self-loops and
no duplicates; all invariants are enforced at construction time and the
backing arrays are frozen afterwards.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import rng as rngmod

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Graph:
    """Immutable attributed graph.

    Attributes
    ----------
    indptr, indices : CSR arrays of the symmetric adjacency (int64).
    features : N x d float64 matrix.
    labels : int64 class per node, each in [0, n_classes).
    n_classes : number of classes C.
    train_idx, val_idx, test_idx : disjoint node index arrays.
    """

    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def n_nodes(self):
        return len(self.indptr) - 1

    @property
    def n_features(self):
        return self.features.shape[1]

    @property
    def n_edges(self):
        """Number of undirected edges (each stored twice in CSR)."""
        return len(self.indices) // 2

    @property
    def degrees(self):
        return np.diff(self.indptr)

    def neighbors(self, i):
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def has_edge(self, u, v):
        row = self.neighbors(u)
        j = np.searchsorted(row, v)
        return j < len(row) and row[j] == v

    def split(self, name):
        return {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[name]

    def validate(self):
        """Check every structural invariant; raises ValueError on violation."""
        n = self.n_nodes
        if self.indptr[0] != 0 or self.indptr[-1] != len(self.indices):
            raise ValueError("CSR indptr malformed")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= n):
            raise ValueError("column index out of range")
        for i in range(n):
            row = self.neighbors(i)
            if len(row) > 1 and not np.all(np.diff(row) > 0):
                raise ValueError(f"row {i} not strictly increasing (duplicate edge?)")
            if np.any(row == i):
                raise ValueError(f"self-loop stored at node {i}")
            for j in row:
                if not self.has_edge(j, i):
                    raise ValueError(f"edge ({i},{j}) not symmetric")
        if self.features.shape[0] != n:
            raise ValueError("feature row count != n_nodes")
        if self.labels.shape != (n,):
            raise ValueError("label count != n_nodes")
        if np.any(self.labels < 0) or np.any(self.labels >= self.n_classes):
            raise ValueError("label out of range")
        seen = set()
        for name in SPLIT_NAMES:
            idx = self.split(name)
            if len(idx) and (idx.min() < 0 or idx.max() >= n):
                raise ValueError(f"{name} split index out of range")
            s = set(int(i) for i in idx)
            if seen & s:
                raise ValueError("splits not disjoint")
            seen |= s
        if len(self.train_idx) == 0:
            raise ValueError("train split empty")
        return self


def build_graph(n_nodes, edges, features, labels, n_classes, splits):
    """Build a :class:`Graph` from a raw (possibly directed / duplicated)
    edge array, symmetrizing, deduplicating and dropping self-loops.

    Returns the graph; the number of dropped self-loops is logged.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) and (edges.min() < 0 or edges.max() >= n_nodes):
        raise ValueError("edge endpoint out of range")
    loops = edges[:, 0] == edges[:, 1]
    n_loops = int(loops.sum())
    if n_loops:
        log.warning("dropped %d self-loop(s)", n_loops)
        edges = edges[~loops]
    both = np.concatenate([edges, edges[:, ::-1]], axis=0)
    keys = both[:, 0] * n_nodes + both[:, 1]
    keys = np.unique(keys)
    rows, cols = keys // n_nodes, keys % n_nodes
    indptr = np.zeros(n_nodes + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    indptr = np.cumsum(indptr)
    features = np.asarray(features, dtype=np.float64).reshape(n_nodes, -1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    g = Graph(
        indptr=_frozen(indptr),
        indices=_frozen(cols),
        features=_frozen(features),
        labels=_frozen(labels),
        n_classes=int(n_classes),
        train_idx=_frozen(np.asarray(splits["train"], dtype=np.int64)),
        val_idx=_frozen(np.asarray(splits["val"], dtype=np.int64)),
        test_idx=_frozen(np.asarray(splits["test"], dtype=np.int64)),
    )
    return g.validate()


def edge_array(g):
    """Undirected edge list (u < v), one row per edge, sorted."""
    rows = np.repeat(np.arange(g.n_nodes), g.degrees)
    cols = g.indices
    keep = rows < cols
    return np.stack([rows[keep], cols[keep]], axis=1)


def remove_edges(g, pairs):
    """Copy of ``g`` with the given undirected edges removed."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    drop = set()
    for u, v in pairs:
        drop.add((int(u), int(v)))
        drop.add((int(v), int(u)))
    ea = edge_array(g)
    keep = np.array([(int(u), int(v)) not in drop for u, v in ea], dtype=bool)
    return build_graph(
        g.n_nodes, ea[keep], g.features, g.labels, g.n_classes,
        {"train": g.train_idx, "val": g.val_idx, "test": g.test_idx},
    )


# ---------------------------------------------------------------------------
# normalized adjacency


@dataclass(frozen=True)
class NormalizedAdjacency:
    """Symmetrically normalized adjacency with self-loops added,
    entry (i,j) = 1/sqrt((deg(i)+1)(deg(j)+1)) for j in N(i) or j == i.
    """

    matrix: sp.csr_matrix

    @property
    def n_nodes(self):
        return self.matrix.shape[0]

    def dot(self, x):
        return self.matrix @ x


def normalized_adjacency(g):
    n = g.n_nodes
    deg = g.degrees.astype(np.float64)
    inv_sqrt = 1.0 / np.sqrt(deg + 1.0)
    rows = np.concatenate([np.repeat(np.arange(n), g.degrees), np.arange(n)])
    cols = np.concatenate([g.indices, np.arange(n)])
    vals = inv_sqrt[rows] * inv_sqrt[cols]
    m = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    m.sort_indices()
    return NormalizedAdjacency(matrix=m)


# ---------------------------------------------------------------------------
# structural queries


def bfs_path_length(g, source, target, cap):
    """Unweighted shortest-path length from source to target, or None if the
    distance exceeds ``cap`` (including unreachable).  BFS stops at depth cap.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    if source == target:
        return 0
    visited = np.zeros(g.n_nodes, dtype=bool)
    visited[source] = True
    frontier = [source]
    for depth in range(1, cap + 1):
        nxt = []
        for u in frontier:
            for v in g.neighbors(u):
                if v == target:
                    return depth
                if not visited[v]:
                    visited[v] = True
                    nxt.append(v)
        if not nxt:
            return None
        frontier = nxt
    return None


def connected_components(g):
    """List of node-index arrays, one per component, in order of smallest member."""
    seen = np.zeros(g.n_nodes, dtype=bool)
    comps = []
    for start in range(g.n_nodes):
        if seen[start]:
            continue
        seen[start] = True
        comp = [start]
        frontier = [start]
        while frontier:
            nxt = []
            for u in frontier:
                for v in g.neighbors(u):
                    if not seen[v]:
                        seen[v] = True
                        comp.append(v)
                        nxt.append(v)
            frontier = nxt
        comps.append(np.array(sorted(comp), dtype=np.int64))
    return comps


DEFAULT_DEGREE_BOUNDARIES = (1, 4, 7, 10)


def degree_buckets(g, boundaries=DEFAULT_DEGREE_BOUNDARIES):
    """Bucket index per node: bucket k covers degrees [b_k, b_{k+1}), the last
    bucket is open-ended, and degrees below the first boundary fall in bucket 0.
    """
    b = np.asarray(boundaries, dtype=np.int64)
    if len(b) == 0 or np.any(np.diff(b) <= 0):
        raise ValueError("boundaries must be non-empty and strictly increasing")
    idx = np.searchsorted(b, g.degrees, side="right") - 1
    return np.maximum(idx, 0)


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class SbmSpec:
    """Stochastic block model with per-class Gaussian features.

    blocks: sequence of (size, class_label); p_in/p_out: edge probabilities
    within / across blocks; means: C x d per-class feature means; sigma:
    shared feature std; rates: train/val/test fractions.
    """

    blocks: tuple
    p_in: float
    p_out: float
    means: np.ndarray
    sigma: float
    seed: int
    rates: tuple = (0.1, 0.1, 0.8)

    def validate(self):
        if not self.blocks or any(s < 1 for s, _ in self.blocks):
            raise ValueError("block sizes must be >= 1")
        if not (0.0 <= self.p_out <= self.p_in <= 1.0):
            raise ValueError("need 0 <= p_out <= p_in <= 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        means = np.asarray(self.means, dtype=np.float64)
        labels = [c for _, c in self.blocks]
        if min(labels) < 0 or max(labels) >= means.shape[0]:
            raise ValueError("block class label out of range of means")
        if len(self.rates) != 3 or abs(sum(self.rates) - 1.0) > 1e-9 or min(self.rates) < 0:
            raise ValueError("rates must be three non-negative fractions summing to 1")
        return self

    @property
    def n_nodes(self):
        return sum(s for s, _ in self.blocks)


def gen_sbm(spec):
    """Sample a graph from ``spec``; byte-identical for identical specs."""
    spec.validate()
    n = spec.n_nodes
    means = np.asarray(spec.means, dtype=np.float64)
    node_block = np.repeat(np.arange(len(spec.blocks)), [s for s, _ in spec.blocks])
    node_label = np.array([spec.blocks[b][1] for b in node_block], dtype=np.int64)

    r_edges = rngmod.stream(spec.seed, rngmod.SBM_EDGES)
    iu, ju = np.triu_indices(n, k=1)
    p = np.where(node_block[iu] == node_block[ju], spec.p_in, spec.p_out)
    keep = r_edges.random(len(iu)) < p
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    r_feat = rngmod.stream(spec.seed, rngmod.SBM_FEATURES)
    x = means[node_label] + spec.sigma * r_feat.standard_normal((n, means.shape[1]))

    r_split = rngmod.stream(spec.seed, rngmod.SBM_SPLITS)
    perm = r_split.permutation(n)
    n_tr = max(1, int(round(spec.rates[0] * n)))
    n_va = int(round(spec.rates[1] * n))
    splits = {
        "train": np.sort(perm[:n_tr]),
        "val": np.sort(perm[n_tr:n_tr + n_va]),
        "test": np.sort(perm[n_tr + n_va:]),
    }
    n_classes = int(node_label.max()) + 1
    return build_graph(n, edges, x, node_label, n_classes, splits)


def sbm_posterior(spec, features):
    """Exact class posterior P(y|x) of the Gaussian feature model, by Bayes'
    rule with class priors proportional to aggregate block sizes."""
    means = np.asarray(spec.means, dtype=np.float64)
    n_classes = means.shape[0]
    prior = np.zeros(n_classes)
    for size, c in spec.blocks:
        prior[c] += size
    prior /= prior.sum()
    x = np.asarray(features, dtype=np.float64)
    d2 = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    loglik = -d2 / (2.0 * spec.sigma ** 2) + np.log(prior)[None, :]
    loglik -= loglik.max(axis=1, keepdims=True)
    post = np.exp(loglik)
    post /= post.sum(axis=1, keepdims=True)
    return post


# ---------------------------------------------------------------------------
# dataset directory IO
#
# graph.edges   one "u v" pair per line, 0-indexed
# features.csv  N rows of d comma-separated floats, no header
# labels.csv    N rows, one integer each
# splits.json   {"train": [...], "val": [...], "test": [...]}


def atomic_write(path, data):
    """Write bytes/str to ``path`` via a temp file + rename."""
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(g, dir_path):
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    ea = edge_array(g)
    atomic_write(dir_path / "graph.edges", "".join(f"{u} {v}\n" for u, v in ea))
    feat_lines = [",".join("%.17g" % v for v in row) for row in g.features]
    atomic_write(dir_path / "features.csv", "".join(line + "\n" for line in feat_lines))
    atomic_write(dir_path / "labels.csv", "".join(f"{y}\n" for y in g.labels))
    splits = {name: [int(i) for i in g.split(name)] for name in SPLIT_NAMES}
    atomic_write(dir_path / "splits.json", json.dumps(splits, sort_keys=True, indent=1) + "\n")


def load_graph(dir_path, n_classes=None):
    """Load a dataset directory.  ``n_classes`` overrides the inferred
    (max label + 1) count and enables out-of-range label detection."""
    dir_path = Path(dir_path)
    for name in ("graph.edges", "features.csv", "labels.csv", "splits.json"):
        if not (dir_path / name).exists():
            raise FileNotFoundError(f"missing {name} in {dir_path}")
    features = np.loadtxt(dir_path / "features.csv", delimiter=",", dtype=np.float64, ndmin=2)
    n = features.shape[0]
    labels = np.loadtxt(dir_path / "labels.csv", dtype=np.int64, ndmin=1)
    if labels.shape[0] != n:
        raise ValueError("label count != feature row count")
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if len(labels) else 1
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError("label out of range")
    text = (dir_path / "graph.edges").read_text()
    pairs = []
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"graph.edges line {ln}: expected two integers")
        pairs.append((int(parts[0]), int(parts[1])))
    edges = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    splits = json.loads((dir_path / "splits.json").read_text())
    return build_graph(n, edges, features, labels, n_classes, splits)
