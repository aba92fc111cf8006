"""Student training: distill the integrated teacher into a GCN student.

Each epoch: student forward pass; integration weights from the configured
scheme (learned weights read the student's current logits as constants);
integrated teacher p_t; loss = train-split cross-entropy plus the
temperature-scaled KL distillation term over all nodes; one Adam step on
the student; then, for the learned schemes, one Adam step on the
integration parameters minimizing the cross-entropy of p_t to the one-hot
labels.  The best-validation-accuracy snapshot is returned.

The distillation KL takes its expectation under the integrated teacher,
which yields the per-node logit gradient beta * (tau/N) * (z~ - p_t).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import graphs, integration, nn, rng as rngmod, teachers

INTEGRATORS = ("random", "average", "weighted", "lf", "ts")

# student init stream roles
_ROLE_ENCODER, _ROLE_HEAD = 0, 1


@dataclass(frozen=True)
class DistillConfig:
    integrator: str = "lf"
    strategy: str = "jt"
    alpha: float = 1.0
    beta: float = 10.0
    tau: float = 2.0
    epochs: int = 500
    seed: int = 0
    tasks: tuple = ("par", "clu", "dgi", "pairdis", "pairsim")
    hidden_dim: int = 32
    n_layers: int = 1
    lr: float = 0.01
    weight_decay: float = 5e-4
    gamma_lr: float = 0.01
    weight_log_interval: int = 10

    def validate(self):
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if self.strategy not in ("jt", "pf"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not self.tasks or len(set(self.tasks)) != len(self.tasks):
            raise ValueError("task list must be non-empty with unique kinds")
        return self


@dataclass
class StudentModel:
    encoder: nn.GcnEncoderParams
    head: nn.HeadParams
    gamma: object  # LfParams | TsParams | None
    config: DistillConfig


@dataclass
class RunReport:
    """Per-epoch metrics plus periodic per-node weight snapshots."""

    config: dict
    rows: list = field(default_factory=list)         # dicts keyed by metric
    weight_snapshots: list = field(default_factory=list)  # (epoch, N x K array)
    tasks: tuple = ()

    def metric(self, epoch, name):
        return self.rows[epoch - 1][name]

    def final(self, name):
        return self.rows[-1][name]

    def curves_csv(self):
        lines = ["epoch,split,metric,value"]
        split_metrics = {
            "task_loss": "train", "kd_loss": "all", "lw": "train",
            "train_accuracy": "train", "val_accuracy": "val", "test_accuracy": "test",
            "mse_train": "train", "mse_test": "test",
        }
        for row in self.rows:
            for name, split in split_metrics.items():
                v = row.get(name)
                lines.append(f"{row['epoch']},{split},{name},"
                             + ("" if v is None or not np.isfinite(v) else repr(float(v))))
        return "\n".join(lines) + "\n"

    def weights_csv(self):
        lines = ["epoch,node,task,weight"]
        for epoch, w in self.weight_snapshots:
            for i in range(w.shape[0]):
                for k in range(w.shape[1]):
                    task = self.tasks[k] if k < len(self.tasks) else str(k)
                    lines.append(f"{epoch},{i},{task},{w[i, k]!r}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# losses and diagnostics


def kd_loss(student_logits, p_t, tau, beta):
    """Distillation term beta * (tau^2/N) * sum_i KL(p_t_i || softmax(z_i/tau)).

    Returns (loss, d_logits); p_t is a constant for this gradient.
    """
    n = student_logits.shape[0]
    if beta == 0.0:
        return 0.0, np.zeros_like(student_logits)
    z_soft = nn.softmax_temp(student_logits, tau)
    loss = float(beta * tau * tau / n * nn.kl_div_rows(p_t, z_soft).sum())
    d = beta * tau / n * (z_soft - p_t)
    return loss, d


def rewriting_identity_check(z_soft, p_t):
    """Totals of the KL form and the entropy-plus-cross-entropy form of the
    distillation objective; equal up to roundoff."""
    z_soft = np.atleast_2d(z_soft)
    p_t = np.atleast_2d(p_t)
    n = p_t.shape[0]
    kl_total = float(nn.kl_div_rows(p_t, z_soft).sum() / n)
    ce = -(p_t * nn._clamped_log(z_soft)).sum(axis=1)
    ent = nn.entropy_rows(p_t)
    return kl_total, float((ce - ent).sum() / n)


def mse_to_onehot(p_t, labels, node_idx):
    """Mean over nodes of ||p_t_i - e_{y_i}||^2 / C."""
    idx = np.asarray(node_idx, dtype=np.int64)
    if len(idx) == 0:
        raise ValueError("node set empty")
    c = p_t.shape[1]
    e = nn.one_hot(labels[idx], c)
    return float((((p_t[idx] - e) ** 2).sum(axis=1) / c).mean())


def _accuracy(logits, labels, idx):
    if len(idx) == 0:
        return float("nan")
    return float((logits[idx].argmax(axis=1) == labels[idx]).mean())


# ---------------------------------------------------------------------------
# training loops


def _init_student(g, cfg):
    dims = (g.n_features,) + (cfg.hidden_dim,) * cfg.n_layers
    enc = nn.init_encoder(dims, rngmod.stream(cfg.seed, rngmod.STUDENT_INIT, _ROLE_ENCODER))
    head = nn.init_head(cfg.hidden_dim, g.n_classes,
                        rngmod.stream(cfg.seed, rngmod.STUDENT_INIT, _ROLE_HEAD))
    return enc, head


def _init_gamma(cfg, bundle):
    if cfg.integrator == "lf":
        return integration.init_lf_params(bundle.n_teachers, bundle.n_classes,
                                          rngmod.stream(cfg.seed, rngmod.GAMMA_INIT))
    if cfg.integrator == "ts":
        return integration.init_ts_params(bundle.n_classes)
    return None


def train_plain_gcn(g, hidden_dim=32, n_layers=1, lr=0.01, weight_decay=5e-4,
                    epochs=500, seed=0):
    """Vanilla GCN training (no distillation): the reference trajectory that
    a beta=0 student must reproduce exactly.  Returns (encoder, head, report
    rows)."""
    cfg = DistillConfig(seed=seed, hidden_dim=hidden_dim, n_layers=n_layers,
                        lr=lr, weight_decay=weight_decay, epochs=epochs)
    enc, head = _init_student(g, cfg)
    adj = graphs.normalized_adjacency(g)
    params = nn.encoder_param_list(enc) + nn.head_param_list(head)
    state = nn.adam_init(params, lr=lr, weight_decay=weight_decay)
    onehot = nn.one_hot(g.labels, g.n_classes)
    rows = []
    best = (-1.0, None)
    for epoch in range(1, epochs + 1):
        h, cache = nn.gcn_forward_cached(adj, g.features, enc)
        z = nn.head_forward(h, head)
        ce, d_z = nn.softmax_cross_entropy(z, onehot, rows=g.train_idx)
        nn.ensure_finite(ce, f"loss at epoch {epoch}")
        d_w, d_b, d_h = nn.head_backward(h, head, d_z)
        grads = nn.gcn_backward(adj, cache, enc, d_h) + [d_w, d_b]
        nn.adam_step(state, params, grads)
        z_eval = nn.head_forward(nn.gcn_forward(adj, g.features, enc), head)
        accs = {name: _accuracy(z_eval, g.labels, g.split(name)) for name in graphs.SPLIT_NAMES}
        rows.append({"epoch": epoch, "task_loss": ce,
                     "train_accuracy": accs["train"], "val_accuracy": accs["val"],
                     "test_accuracy": accs["test"]})
        if accs["val"] >= best[0]:
            best = (accs["val"], (enc.copy(), head.copy()))
    if best[1] is not None:
        enc, head = best[1]
    return enc, head, rows


def train_student(g, bundle, cfg):
    """AGSSL student loop; see the module docstring for the epoch schedule.

    Returns (StudentModel, RunReport); the model carries the snapshot with
    the best validation accuracy.
    """
    cfg.validate()
    if bundle.n_nodes != g.n_nodes or bundle.n_classes != g.n_classes:
        raise ValueError("bundle does not match graph")
    enc, head = _init_student(g, cfg)
    gamma = _init_gamma(cfg, bundle)
    adj = graphs.normalized_adjacency(g)
    params = nn.encoder_param_list(enc) + nn.head_param_list(head)
    state = nn.adam_init(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    gamma_state = nn.adam_init(gamma.param_list(), lr=cfg.gamma_lr) if gamma is not None else None
    onehot = nn.one_hot(g.labels, g.n_classes)
    # heuristic schemes are fixed for the whole run: weighted from the frozen
    # bundle, random from a single draw of the integrator stream
    fixed_w = None
    if cfg.integrator == "weighted":
        fixed_w = integration.weights_labeled_ce(bundle, g.labels, g.train_idx)
    elif cfg.integrator == "random":
        fixed_w = integration.weights_random(g.n_nodes, bundle.n_teachers,
                                             rngmod.stream(cfg.seed, rngmod.INTEGRATOR))
    elif cfg.integrator == "average":
        fixed_w = integration.weights_average(g.n_nodes, bundle.n_teachers)

    report = RunReport(config={}, tasks=bundle.tasks)
    best = (-1.0, None)
    for epoch in range(1, cfg.epochs + 1):
        h, cache = nn.gcn_forward_cached(adj, g.features, enc)
        z = nn.head_forward(h, head)
        ce, d_z = nn.softmax_cross_entropy(z, onehot, rows=g.train_idx)

        w = fixed_w if fixed_w is not None else integration.compute_weights(
            cfg.integrator, bundle, z, gamma)
        p_t = integration.integrate(bundle, w)

        if cfg.beta != 0.0:
            kd, d_z_kd = kd_loss(z, p_t, cfg.tau, cfg.beta)
            d_z = d_z + d_z_kd
        else:
            kd = 0.0
        nn.ensure_finite(ce + kd, f"student loss at epoch {epoch}")
        d_w, d_b, d_h = nn.head_backward(h, head, d_z)
        grads = nn.gcn_backward(adj, cache, enc, d_h) + [d_w, d_b]
        nn.adam_step(state, params, grads)

        # evaluation forward with the updated parameters
        z_eval = nn.head_forward(nn.gcn_forward(adj, g.features, enc), head)
        if gamma is not None:
            # one gamma step on L_W, reading the fresh logits as constants
            _, g_grads = integration.gamma_loss_and_grads(gamma, bundle, z_eval,
                                                          g.labels, g.train_idx)
            nn.adam_step(gamma_state, gamma.param_list(), g_grads)
            w = integration.compute_weights(cfg.integrator, bundle, z_eval, gamma)
            p_t = integration.integrate(bundle, w)

        lw = integration.lw_loss(bundle, w, g.labels, g.train_idx)
        accs = {name: _accuracy(z_eval, g.labels, g.split(name)) for name in graphs.SPLIT_NAMES}
        report.rows.append({
            "epoch": epoch, "task_loss": ce, "kd_loss": kd, "lw": lw,
            "train_accuracy": accs["train"], "val_accuracy": accs["val"],
            "test_accuracy": accs["test"],
            "mse_train": mse_to_onehot(p_t, g.labels, g.train_idx),
            "mse_test": mse_to_onehot(p_t, g.labels, g.test_idx) if len(g.test_idx) else float("nan"),
        })
        if epoch == 1 or epoch % cfg.weight_log_interval == 0 or epoch == cfg.epochs:
            report.weight_snapshots.append((epoch, w.copy()))
        if accs["val"] >= best[0]:
            best = (accs["val"], (enc.copy(), head.copy(),
                                  gamma.copy() if gamma is not None else None))

    if best[1] is not None:
        enc, head, gamma = best[1]
    model = StudentModel(encoder=enc, head=head, gamma=gamma, config=cfg)
    report.config = manifest_dict(cfg, bundle)
    return model, report


def train_student_pf(g, bundle, cfg):
    """Student loop for bundles produced by pretrain-finetune teachers; the
    student-side objective is identical, only the provenance differs."""
    if bundle.strategy != "pf":
        raise ValueError("bundle was not built with the pf strategy")
    cfg = replace(cfg, strategy="pf")
    return train_student(g, bundle, cfg)


def student_logits(model, g):
    adj = graphs.normalized_adjacency(g)
    return nn.head_forward(nn.gcn_forward(adj, g.features, model.encoder), model.head)


# ---------------------------------------------------------------------------
# run artifacts


def manifest_dict(cfg, bundle=None, extra=None):
    d = {
        "integrator": cfg.integrator, "strategy": cfg.strategy,
        "alpha": cfg.alpha, "beta": cfg.beta, "tau": cfg.tau,
        "epochs": cfg.epochs, "seed": cfg.seed, "tasks": list(cfg.tasks),
        "hidden_dim": cfg.hidden_dim, "n_layers": cfg.n_layers,
        "lr": cfg.lr, "weight_decay": cfg.weight_decay, "gamma_lr": cfg.gamma_lr,
    }
    if bundle is not None:
        d["bundle"] = {"tasks": list(bundle.tasks), "tau": bundle.tau,
                       "strategy": bundle.strategy, "k": bundle.n_teachers}
    if extra:
        d.update(extra)
    return d


def content_hash(paths):
    """sha256 over the bytes of the given files, in sorted order."""
    h = hashlib.sha256()
    for p in sorted(Path(p) for p in paths):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def write_run(run_dir, reports, manifest):
    """curves.csv / weights.csv / manifest.json; multi-seed runs append their
    blocks in seed order (the manifest lists the seeds)."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    curves = reports[0].curves_csv()
    weights = reports[0].weights_csv()
    for rep in reports[1:]:
        curves += "".join(line + "\n" for line in rep.curves_csv().splitlines()[1:])
        weights += "".join(line + "\n" for line in rep.weights_csv().splitlines()[1:])
    graphs.atomic_write(run_dir / "curves.csv", curves)
    graphs.atomic_write(run_dir / "weights.csv", weights)
    graphs.atomic_write(run_dir / "manifest.json",
                        json.dumps(manifest, sort_keys=True, indent=1) + "\n")
