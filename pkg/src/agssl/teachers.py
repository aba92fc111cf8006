"""Teacher training and export.

One teacher per pretext task, trained under either strategy:

* joint: downstream cross-entropy on the train split plus alpha times the
  task's self-supervised loss, one Adam step per epoch on all parameters.
* pretrain-finetune: the encoder (and SSL head) first minimize the SSL loss
  alone, then encoder + task head are fine-tuned on the downstream loss.

The snapshot with the highest validation accuracy is retained.  Frozen
teachers export a :class:`TeacherBundle` of temperature-softened
probability tables (and the raw logits, which the teacher-student
integrator needs).

Each teacher owns its propagation operator: for pairsim the masked edges
are removed from the adjacency before normalization, for every other task
it is the full graph.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import graphs, nn, pretext, rng as rngmod

log = logging.getLogger(__name__)

# role offsets inside a teacher's init stream
_ROLE_ENCODER, _ROLE_TASK_HEAD, _ROLE_SSL_HEAD = 0, 1, 2


@dataclass
class TeacherModel:
    task: pretext.PretextTask
    strategy: str
    encoder: nn.GcnEncoderParams
    task_head: nn.HeadParams
    ssl_head: nn.HeadParams | None
    adjacency: graphs.NormalizedAdjacency
    trained: bool = False
    val_accuracy: float = 0.0
    seed: int = 0


@dataclass
class TeacherBundle:
    """K frozen teachers' softened probabilities (K x N x C) plus raw logits."""

    probs: np.ndarray
    logits: np.ndarray
    tau: float
    tasks: tuple
    seeds: tuple
    strategy: str
    val_accuracies: tuple = ()

    @property
    def n_teachers(self):
        return self.probs.shape[0]

    @property
    def n_nodes(self):
        return self.probs.shape[1]

    @property
    def n_classes(self):
        return self.probs.shape[2]

    def prefix(self, k):
        """Sub-bundle of the first k teachers (shared storage)."""
        return TeacherBundle(
            self.probs[:k], self.logits[:k], self.tau,
            self.tasks[:k], self.seeds[:k], self.strategy, self.val_accuracies[:k],
        )


def task_adjacency(g, task):
    if task.kind == "pairsim":
        return graphs.normalized_adjacency(graphs.remove_edges(g, task.masked_edges))
    return graphs.normalized_adjacency(g)


def _init_model(g, task, strategy, seed, hidden_dim, n_layers):
    dims = (g.n_features,) + (hidden_dim,) * n_layers
    enc = nn.init_encoder(dims, rngmod.stream(seed, rngmod.TEACHER_INIT, _ROLE_ENCODER))
    task_head = nn.init_head(hidden_dim, g.n_classes,
                             rngmod.stream(seed, rngmod.TEACHER_INIT, _ROLE_TASK_HEAD))
    ssl_head = None
    head_dims = pretext.ssl_head_dims(task, hidden_dim)
    if head_dims is not None:
        ssl_head = nn.init_head(*head_dims,
                                rngmod.stream(seed, rngmod.TEACHER_INIT, _ROLE_SSL_HEAD))
    return TeacherModel(task=task, strategy=strategy, encoder=enc, task_head=task_head,
                        ssl_head=ssl_head, adjacency=task_adjacency(g, task), seed=seed)


def _ssl_path(model, g, h, cache):
    """SSL loss and its gradient contributions.

    Returns (loss, d_h, head_grads_or_None, extra_weight_grads_or_None);
    dgi contributes encoder-weight gradients directly through the
    corrupted-view forward pass.
    """
    task = model.task
    if task.kind == "dgi":
        perm = task.targets[0]
        h_c, cache_c = nn.gcn_forward_cached(model.adjacency, g.features[perm], model.encoder)
        loss, d_h, d_h_c = pretext.dgi_loss_from_embeddings(h, h_c, task.targets)
        extra = nn.gcn_backward(model.adjacency, cache_c, model.encoder, d_h_c)
        return loss, d_h, None, extra
    loss, d_h, head_grads = pretext.ssl_loss(task, h, model.ssl_head)
    return loss, d_h, head_grads, None


def _eval_accuracy(model, g, node_idx):
    h = nn.gcn_forward(model.adjacency, g.features, model.encoder)
    logits = nn.head_forward(h, model.task_head)
    pred = logits[node_idx].argmax(axis=1)
    return float((pred == g.labels[node_idx]).mean())


def _snapshot(model):
    return (model.encoder.copy(), model.task_head.copy(),
            model.ssl_head.copy() if model.ssl_head is not None else None)


def _restore(model, snap):
    model.encoder, model.task_head, model.ssl_head = snap


def train_teacher_jt(g, task, alpha, epochs=500, seed=0, hidden_dim=32, n_layers=1,
                     lr=0.01, weight_decay=5e-4):
    """Joint training: CE on the train split + alpha * SSL loss, keeping the
    best-validation-accuracy snapshot."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    model = _init_model(g, task, "jt", seed, hidden_dim, n_layers)
    params = nn.encoder_param_list(model.encoder) + nn.head_param_list(model.task_head)
    if model.ssl_head is not None:
        params += nn.head_param_list(model.ssl_head)
    state = nn.adam_init(params, lr=lr, weight_decay=weight_decay)
    onehot = nn.one_hot(g.labels, g.n_classes)

    best = (-1.0, None)
    for epoch in range(epochs):
        h, cache = nn.gcn_forward_cached(model.adjacency, g.features, model.encoder)
        z = nn.head_forward(h, model.task_head)
        ce, d_z = nn.softmax_cross_entropy(z, onehot, rows=g.train_idx)
        d_w_task, d_b_task, d_h = nn.head_backward(h, model.task_head, d_z)
        loss = ce
        extra = None
        ssl_head_grads = None
        if alpha != 0.0:
            ssl, d_h_ssl, ssl_head_grads, extra = _ssl_path(model, g, h, cache)
            loss = ce + alpha * ssl
            d_h = d_h + alpha * d_h_ssl
            if ssl_head_grads is not None:
                ssl_head_grads = tuple(alpha * gg for gg in ssl_head_grads)
        nn.ensure_finite(loss, f"teacher loss ({task.kind}, epoch {epoch})")
        enc_grads = nn.gcn_backward(model.adjacency, cache, model.encoder, d_h)
        if extra is not None:
            enc_grads = [a + alpha * b for a, b in zip(enc_grads, extra)]
        grads = enc_grads + [d_w_task, d_b_task]
        if model.ssl_head is not None:
            if ssl_head_grads is None:
                ssl_head_grads = (np.zeros_like(model.ssl_head.weight),
                                  np.zeros_like(model.ssl_head.bias))
            grads += list(ssl_head_grads)
        nn.adam_step(state, params, grads)

        val_acc = _eval_accuracy(model, g, g.val_idx) if len(g.val_idx) else 0.0
        if val_acc >= best[0]:
            best = (val_acc, _snapshot(model))

    if best[1] is not None:
        _restore(model, best[1])
        model.val_accuracy = best[0]
        model.trained = True
    return model


def train_teacher_pf(g, task, pretrain_epochs=300, finetune_epochs=500, seed=0,
                     hidden_dim=32, n_layers=1, lr=0.01, weight_decay=5e-4):
    """Two-stage pretrain-then-finetune teacher; the best-validation snapshot
    is taken over the fine-tuning stage."""
    model = _init_model(g, task, "pf", seed, hidden_dim, n_layers)

    # stage 1: SSL objective only, on (encoder, ssl head)
    params = nn.encoder_param_list(model.encoder)
    if model.ssl_head is not None:
        params += nn.head_param_list(model.ssl_head)
    state = nn.adam_init(params, lr=lr, weight_decay=weight_decay)
    for epoch in range(pretrain_epochs):
        h, cache = nn.gcn_forward_cached(model.adjacency, g.features, model.encoder)
        ssl, d_h, ssl_head_grads, extra = _ssl_path(model, g, h, cache)
        nn.ensure_finite(ssl, f"pretrain loss ({task.kind}, epoch {epoch})")
        enc_grads = nn.gcn_backward(model.adjacency, cache, model.encoder, d_h)
        if extra is not None:
            enc_grads = [a + b for a, b in zip(enc_grads, extra)]
        grads = enc_grads + (list(ssl_head_grads) if ssl_head_grads is not None else [])
        nn.adam_step(state, params, grads)

    # stage 2: downstream fine-tuning on (encoder, task head)
    params = nn.encoder_param_list(model.encoder) + nn.head_param_list(model.task_head)
    state = nn.adam_init(params, lr=lr, weight_decay=weight_decay)
    onehot = nn.one_hot(g.labels, g.n_classes)
    best = (-1.0, None)
    for epoch in range(finetune_epochs):
        h, cache = nn.gcn_forward_cached(model.adjacency, g.features, model.encoder)
        z = nn.head_forward(h, model.task_head)
        ce, d_z = nn.softmax_cross_entropy(z, onehot, rows=g.train_idx)
        nn.ensure_finite(ce, f"finetune loss ({task.kind}, epoch {epoch})")
        d_w_task, d_b_task, d_h = nn.head_backward(h, model.task_head, d_z)
        enc_grads = nn.gcn_backward(model.adjacency, cache, model.encoder, d_h)
        nn.adam_step(state, params, enc_grads + [d_w_task, d_b_task])
        val_acc = _eval_accuracy(model, g, g.val_idx) if len(g.val_idx) else 0.0
        if val_acc >= best[0]:
            best = (val_acc, _snapshot(model))

    if best[1] is not None:
        _restore(model, best[1])
        model.val_accuracy = best[0]
        model.trained = True
    return model


def teacher_logits(model, g):
    h = nn.gcn_forward(model.adjacency, g.features, model.encoder)
    return nn.head_forward(h, model.task_head)


def freeze_and_export(models, g, tau):
    """Assemble the frozen bundle: h~ = softmax(logits / tau) per teacher."""
    if not models:
        raise ValueError("need at least one teacher")
    for m in models:
        if not m.trained:
            raise ValueError(f"teacher {m.task.kind} is not trained")
    logits = np.stack([teacher_logits(m, g) for m in models], axis=0)
    probs = np.stack([nn.softmax_temp(lg, tau) for lg in logits], axis=0)
    return TeacherBundle(
        probs=probs,
        logits=logits,
        tau=float(tau),
        tasks=tuple(m.task.kind for m in models),
        seeds=tuple(m.seed for m in models),
        strategy=models[0].strategy,
        val_accuracies=tuple(m.val_accuracy for m in models),
    )


def train_teacher_pool(g, kinds, strategy="jt", alpha=1.0, epochs=500,
                       pretrain_epochs=300, finetune_epochs=500, seed=0,
                       hidden_dim=32, n_layers=1, lr=0.01, weight_decay=5e-4,
                       threads=1, task_hyper=None):
    """Train one teacher per task kind.

    Per-task seeds derive from (master seed, canonical kind index), so the
    result is independent of list order and of the worker count.
    """
    if len(set(kinds)) != len(kinds):
        raise ValueError("duplicate task")
    for kind in kinds:
        if kind not in pretext.TASK_KINDS:
            raise ValueError(f"unknown task kind {kind!r}")
    task_hyper = task_hyper or {}

    def build_and_train(kind):
        task_seed = rngmod.derive_seed(seed, rngmod.TASK_TARGETS,
                                       pretext.canonical_task_index(kind))
        task = pretext.make_task(kind, g, task_seed, **task_hyper.get(kind, {}))
        if strategy == "jt":
            model = train_teacher_jt(g, task, alpha, epochs, task_seed,
                                     hidden_dim, n_layers, lr, weight_decay)
        elif strategy == "pf":
            model = train_teacher_pf(g, task, pretrain_epochs, finetune_epochs,
                                     task_seed, hidden_dim, n_layers, lr, weight_decay)
        else:
            raise ValueError(f"unknown strategy {strategy!r}")
        log.info("teacher %s: val accuracy %.4f", kind, model.val_accuracy)
        return model

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(build_and_train, kinds))
    return [build_and_train(kind) for kind in kinds]


# ---------------------------------------------------------------------------
# bundle IO: flat .npy arrays plus a JSON manifest


def save_bundle(bundle, dir_path):
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    for name, arr in (("probs", bundle.probs), ("logits", bundle.logits)):
        with open(dir_path / f"{name}.npy", "wb") as f:
            np.save(f, np.ascontiguousarray(arr))
    manifest = {
        "k": bundle.n_teachers,
        "n_nodes": bundle.n_nodes,
        "n_classes": bundle.n_classes,
        "tau": bundle.tau,
        "tasks": list(bundle.tasks),
        "seeds": [int(s) for s in bundle.seeds],
        "strategy": bundle.strategy,
        "val_accuracies": [float(a) for a in bundle.val_accuracies],
    }
    graphs.atomic_write(dir_path / "manifest.json",
                        json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def load_bundle(dir_path):
    dir_path = Path(dir_path)
    manifest = json.loads((dir_path / "manifest.json").read_text())
    probs = np.load(dir_path / "probs.npy")
    logits = np.load(dir_path / "logits.npy")
    return TeacherBundle(
        probs=probs, logits=logits, tau=manifest["tau"],
        tasks=tuple(manifest["tasks"]), seeds=tuple(manifest["seeds"]),
        strategy=manifest["strategy"],
        val_accuracies=tuple(manifest.get("val_accuracies", ())),
    )
