"""Metrics, per-degree breakdowns, and the teacher-count sweep."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import distill, graphs, rng as rngmod, teachers

log = logging.getLogger(__name__)

SWEEP_TASK_ORDER = ("par", "clu", "dgi", "pairdis", "pairsim")


def accuracy(logits, labels, node_idx):
    """Argmax accuracy over the node set; ties resolve to the lowest class."""
    idx = np.asarray(node_idx, dtype=np.int64)
    if len(idx) == 0:
        raise ValueError("node set empty")
    pred = np.asarray(logits)[idx].argmax(axis=1)
    return float((pred == np.asarray(labels)[idx]).mean())


def per_degree_accuracy(logits, labels, g, boundaries=graphs.DEFAULT_DEGREE_BOUNDARIES):
    """Accuracy per degree bucket; empty buckets are NaN."""
    buckets = graphs.degree_buckets(g, boundaries)
    n_buckets = len(boundaries)
    out = np.full(n_buckets, np.nan)
    for b in range(n_buckets):
        members = np.flatnonzero(buckets == b)
        if len(members):
            out[b] = accuracy(logits, labels, members)
    return out


def per_degree_mean_weights(weights, g, boundaries=graphs.DEFAULT_DEGREE_BOUNDARIES):
    """Mean integration-weight row per degree bucket (buckets x K); empty
    buckets are NaN rows.  Means of simplex rows stay on the simplex."""
    w = np.asarray(weights, dtype=np.float64)
    buckets = graphs.degree_buckets(g, boundaries)
    n_buckets = len(boundaries)
    out = np.full((n_buckets, w.shape[1]), np.nan)
    for b in range(n_buckets):
        members = buckets == b
        if members.any():
            out[b] = w[members].mean(axis=0)
    return out


def degree_weights_csv(mean_weights, boundaries, tasks):
    """CSV rows "bucket_lo,bucket_hi,task,weight"; the last bucket's upper
    edge and NaN cells are written as empty fields."""
    lines = ["bucket_lo,bucket_hi,task,weight"]
    b = list(boundaries)
    for i in range(len(b)):
        hi = str(b[i + 1]) if i + 1 < len(b) else ""
        for k, task in enumerate(tasks):
            v = mean_weights[i, k]
            lines.append(f"{b[i]},{hi},{task},{'' if not np.isfinite(v) else repr(float(v))}")
    return "\n".join(lines) + "\n"


def _sweep_threads():
    try:
        return max(1, int(os.environ.get("AGSSL_THREADS", "1")))
    except ValueError:
        return 1


def teacher_count_sweep(g, cfg, integrators=distill.INTEGRATORS, seeds=(0, 1, 2, 3, 4),
                        task_order=SWEEP_TASK_ORDER, done=(), threads=None,
                        on_row=None):
    """Accuracy per (K, integrator, seed) for prefix bundles of the task pool.

    Teachers are trained once per seed and reused across prefixes.  ``done``
    lists (k, integrator, seed) keys to skip (resume support); ``on_row`` is
    called after each completed row.  Returns rows as dicts.
    """
    done = set(done)
    rows = []
    threads = _sweep_threads() if threads is None else threads
    for seed in seeds:
        run_seed = rngmod.derive_seed(cfg.seed, rngmod.RUN, seed)
        needed = [(k, integ) for k in range(1, len(task_order) + 1)
                  for integ in integrators if (k, integ, seed) not in done]
        if not needed:
            continue
        pool = teachers.train_teacher_pool(
            g, list(task_order), strategy=cfg.strategy, alpha=cfg.alpha,
            epochs=cfg.epochs, seed=run_seed, hidden_dim=cfg.hidden_dim,
            n_layers=cfg.n_layers, lr=cfg.lr, weight_decay=cfg.weight_decay,
            threads=threads)
        full = teachers.freeze_and_export(pool, g, cfg.tau)

        def run_cell(cell):
            k, integ = cell
            ccfg = replace(cfg, integrator=integ, seed=run_seed,
                           tasks=tuple(task_order[:k]))
            model, report = distill.train_student(g, full.prefix(k), ccfg)
            logits = distill.student_logits(model, g)
            return {"K": k, "integrator": integ, "seed": seed,
                    "test_accuracy": accuracy(logits, g.labels, g.test_idx)}

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                cell_rows = list(ex.map(run_cell, needed))
        else:
            cell_rows = [run_cell(c) for c in needed]
        for row in cell_rows:
            rows.append(row)
            log.info("sweep K=%d %s seed=%d test=%.4f",
                     row["K"], row["integrator"], row["seed"], row["test_accuracy"])
            if on_row is not None:
                on_row(row)
    return rows


def sweep_csv(rows):
    lines = ["K,integrator,seed,test_accuracy"]
    for r in rows:
        lines.append(f"{r['K']},{r['integrator']},{r['seed']},{r['test_accuracy']!r}")
    return "\n".join(lines) + "\n"


def parse_sweep_csv(text):
    rows = []
    lines = [ln for ln in text.splitlines() if ln.strip()]
    for ln in lines[1:]:
        k, integ, seed, acc = ln.split(",")
        rows.append({"K": int(k), "integrator": integ, "seed": int(seed),
                     "test_accuracy": float(acc)})
    return rows
