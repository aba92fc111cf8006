"""Command-line pipeline: gen, train-teachers, distill, sweep, delta, eval.

Flags may also come from a flat key=value config file (--config); explicit
flags win.  Every command is deterministic given --seed: identical
invocations produce byte-identical output files.  Exit codes: 0 success,
2 usage/validation error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import distill, graphs, integration, nn, pretext, reporting, rng as rngmod, teachers

log = logging.getLogger("agssl")


class UsageError(ValueError):
    pass


def _threads():
    try:
        return max(1, int(os.environ.get("AGSSL_THREADS", "1")))
    except ValueError:
        return 1


def _read_config(path):
    values = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"config line {ln}: expected key=value")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config(parser, args, argv):
    """Re-parse with config-file values as defaults; CLI flags override."""
    if not getattr(args, "config", None):
        return args
    values = _read_config(args.config)
    known = {a.dest for a in parser._actions}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    parser.set_defaults(**values)
    return parser.parse_args(argv)


def _parse_blocks(text):
    blocks = []
    label = 0
    for part in text.split(","):
        size, _, count = part.partition("x")
        count = int(count) if count else 1
        for _ in range(count):
            blocks.append((int(size), label))
            label += 1
    return tuple(blocks)


def _parse_rates(text):
    rates = tuple(float(x) for x in text.split(","))
    if len(rates) != 3:
        raise UsageError("rates must be three comma-separated fractions")
    return rates


def _load_data(path):
    g = graphs.load_graph(path)
    log.info("loaded %s: %d nodes, %d edges, %d classes",
             path, g.n_nodes, g.n_edges, g.n_classes)
    return g


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args):
    blocks = _parse_blocks(args.blocks)
    n_classes = max(c for _, c in blocks) + 1
    means_rng = rngmod.stream(args.seed, rngmod.SBM_MEANS)
    means = args.sep * means_rng.standard_normal((n_classes, args.dim))
    spec = graphs.SbmSpec(blocks=blocks, p_in=args.p_in, p_out=args.p_out,
                          means=means, sigma=args.sigma, seed=args.seed,
                          rates=_parse_rates(args.rates))
    try:
        spec.validate()
    except ValueError as e:
        raise UsageError(str(e))
    g = graphs.gen_sbm(spec)
    graphs.save_dataset(g, args.out)
    if args.write_posterior:
        post = graphs.sbm_posterior(spec, g.features)
        lines = [",".join("%.17g" % v for v in row) for row in post]
        graphs.atomic_write(Path(args.out) / "posterior.csv",
                            "".join(line + "\n" for line in lines))
    print(f"wrote dataset to {args.out}: {g.n_nodes} nodes, {g.n_edges} edges")
    return 0


def cmd_train_teachers(args):
    g = _load_data(args.data)
    kinds = [k.strip() for k in args.tasks.split(",") if k.strip()]
    if len(set(kinds)) != len(kinds):
        raise UsageError("duplicate task")
    for k in kinds:
        if k not in pretext.TASK_KINDS:
            raise UsageError(f"unknown task kind {k!r}")
    pool = teachers.train_teacher_pool(
        g, kinds, strategy=args.strategy, alpha=args.alpha, epochs=args.epochs,
        pretrain_epochs=args.pretrain_epochs, finetune_epochs=args.finetune_epochs,
        seed=args.seed, hidden_dim=args.hidden, lr=args.lr,
        weight_decay=args.weight_decay, threads=_threads())
    bundle = teachers.freeze_and_export(pool, g, args.tau)
    teachers.save_bundle(bundle, args.out)
    for m in pool:
        print(f"teacher {m.task.kind}: val accuracy {m.val_accuracy:.4f}")
    print(f"wrote bundle ({bundle.n_teachers} teachers) to {args.out}")
    return 0


def _distill_config(args, bundle):
    return distill.DistillConfig(
        integrator=args.integrator, strategy=bundle.strategy, alpha=args.alpha,
        beta=args.beta, tau=args.tau, epochs=args.epochs, seed=args.seed,
        tasks=bundle.tasks, hidden_dim=args.hidden, lr=args.lr,
        weight_decay=args.weight_decay, gamma_lr=args.gamma_lr)


def cmd_distill(args):
    g = _load_data(args.data)
    bundle = teachers.load_bundle(args.bundle)
    if bundle.n_nodes != g.n_nodes or bundle.n_classes != g.n_classes:
        raise UsageError("bundle does not match dataset")
    base = _distill_config(args, bundle)
    try:
        base.validate()
    except ValueError as e:
        raise UsageError(str(e))
    reports, accs, seeds = [], [], []
    for i in range(args.seeds):
        run_seed = rngmod.derive_seed(args.seed, rngmod.RUN, i)
        cfg = replace(base, seed=run_seed)
        trainer = distill.train_student_pf if bundle.strategy == "pf" else distill.train_student
        model, report = trainer(g, bundle, cfg)
        logits = distill.student_logits(model, g)
        accs.append(reporting.accuracy(logits, g.labels, g.test_idx))
        reports.append(report)
        seeds.append(run_seed)
    inputs = [Path(args.bundle) / "probs.npy", Path(args.bundle) / "manifest.json"]
    inputs += [Path(args.data) / n for n in
               ("graph.edges", "features.csv", "labels.csv", "splits.json")]
    manifest = distill.manifest_dict(base, bundle, extra={
        "master_seed": args.seed, "run_seeds": seeds,
        "test_accuracy_per_seed": accs,
        "test_accuracy_mean": float(np.mean(accs)),
        "test_accuracy_std": float(np.std(accs)),
        "input_hash": distill.content_hash(inputs),
    })
    distill.write_run(args.out, reports, manifest)
    print(f"test accuracy {np.mean(accs):.4f} +/- {np.std(accs):.4f} over {args.seeds} seed(s)")
    return 0


def cmd_sweep(args):
    g = _load_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sweep_path = out / "sweep.csv"
    cfg = distill.DistillConfig(
        integrator="lf", strategy=args.strategy, alpha=args.alpha, beta=args.beta,
        tau=args.tau, epochs=args.epochs, seed=args.seed, hidden_dim=args.hidden,
        lr=args.lr, weight_decay=args.weight_decay, gamma_lr=args.gamma_lr)
    if args.mode == "teacher-count":
        rows = reporting.parse_sweep_csv(sweep_path.read_text()) if sweep_path.exists() else []
        done = {(r["K"], r["integrator"], r["seed"]) for r in rows}

        def flush(_row):
            graphs.atomic_write(sweep_path, reporting.sweep_csv(rows))

        new_rows = reporting.teacher_count_sweep(
            g, cfg, integrators=args.integrators.split(","),
            seeds=list(range(args.seeds)), done=done,
            on_row=lambda r: (rows.append(r), flush(r)))
        graphs.atomic_write(sweep_path, reporting.sweep_csv(rows))
        print(f"wrote {len(rows)} rows to {sweep_path} ({len(new_rows)} new)")
        return 0
    return _grid_sweep(args, g, cfg, sweep_path)


def _grid_sweep(args, g, cfg, sweep_path):
    if not args.grid:
        raise UsageError("grid mode needs --grid FILE")
    grid = {}
    for key, value in _read_config(args.grid).items():
        if key not in ("alpha", "beta", "tau", "hidden"):
            raise UsageError(f"grid key must be alpha/beta/tau/hidden, got {key!r}")
        grid[key] = [float(v) for v in value.split(",")]
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise UsageError("empty grid")
    keys = sorted(grid)
    cells = [{}]
    for key in keys:
        cells = [dict(c, **{key: v}) for c in cells for v in grid[key]]

    header = "alpha,beta,tau,hidden,seed,val_accuracy,test_accuracy"
    rows = []
    if sweep_path.exists():
        for ln in sweep_path.read_text().splitlines()[1:]:
            if ln.strip():
                a, b, t, h, s, va, ta = ln.split(",")
                rows.append({"alpha": float(a), "beta": float(b), "tau": float(t),
                             "hidden": int(h), "seed": int(s),
                             "val_accuracy": float(va), "test_accuracy": float(ta)})
    done = {(r["alpha"], r["beta"], r["tau"], r["hidden"], r["seed"]) for r in rows}

    def write():
        lines = [header]
        for r in rows:
            lines.append(f"{r['alpha']!r},{r['beta']!r},{r['tau']!r},{r['hidden']},"
                         f"{r['seed']},{r['val_accuracy']!r},{r['test_accuracy']!r}")
        graphs.atomic_write(sweep_path, "\n".join(lines) + "\n")

    kinds = [k.strip() for k in args.tasks.split(",") if k.strip()]
    for cell in cells:
        alpha = cell.get("alpha", cfg.alpha)
        beta = cell.get("beta", cfg.beta)
        tau = cell.get("tau", cfg.tau)
        hidden = int(cell.get("hidden", cfg.hidden_dim))
        for seed in range(args.seeds):
            key = (alpha, beta, tau, hidden, seed)
            if key in done:
                continue
            run_seed = rngmod.derive_seed(cfg.seed, rngmod.RUN, seed)
            pool = teachers.train_teacher_pool(
                g, kinds, strategy=cfg.strategy, alpha=alpha, epochs=cfg.epochs,
                seed=run_seed, hidden_dim=hidden, lr=cfg.lr,
                weight_decay=cfg.weight_decay, threads=_threads())
            bundle = teachers.freeze_and_export(pool, g, tau)
            ccfg = replace(cfg, integrator=args.integrators.split(",")[0],
                           alpha=alpha, beta=beta, tau=tau, hidden_dim=hidden,
                           seed=run_seed, tasks=tuple(kinds))
            model, report = distill.train_student(g, bundle, ccfg)
            logits = distill.student_logits(model, g)
            rows.append({"alpha": alpha, "beta": beta, "tau": tau, "hidden": hidden,
                         "seed": seed,
                         "val_accuracy": reporting.accuracy(logits, g.labels, g.val_idx),
                         "test_accuracy": reporting.accuracy(logits, g.labels, g.test_idx)})
            done.add(key)
            write()
    write()
    if rows:
        best = max(rows, key=lambda r: r["val_accuracy"])
        print(f"best by val accuracy: alpha={best['alpha']} beta={best['beta']} "
              f"tau={best['tau']} hidden={best['hidden']} "
              f"(val {best['val_accuracy']:.4f}, test {best['test_accuracy']:.4f})")
    return 0


def cmd_delta(args):
    g = _load_data(args.data)
    bundle = teachers.load_bundle(args.bundle)
    if args.target == "onehot":
        targets = nn.one_hot(g.labels, bundle.n_classes)
    else:
        if not args.target_file:
            raise UsageError("--target posterior needs --target-file")
        targets = np.loadtxt(args.target_file, delimiter=",", ndmin=2)
        if targets.shape != (bundle.n_nodes, bundle.n_classes):
            raise UsageError("target file shape mismatch")
    k = bundle.n_teachers
    header = "node,mode," + ",".join(f"delta_{i}" for i in range(1, k + 1))
    lines = [header]
    for mode, constrained in (("constrained", True), ("unconstrained", False)):
        curve = integration.delta_k_curve(bundle, targets, constrained=constrained)
        for i in range(bundle.n_nodes):
            vals = ",".join(repr(float(v)) for v in curve[i])
            lines.append(f"{i},{mode},{vals}")
    graphs.atomic_write(args.out, "\n".join(lines) + "\n")
    print(f"wrote per-node delta curves for K=1..{k} to {args.out}")
    return 0


def cmd_eval(args):
    g = _load_data(args.data)
    bundle = teachers.load_bundle(args.bundle)
    boundaries = tuple(int(b) for b in args.boundaries.split(","))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["task,split,accuracy"]
    for k, task in enumerate(bundle.tasks):
        for split in graphs.SPLIT_NAMES:
            idx = g.split(split)
            acc = reporting.accuracy(bundle.logits[k], g.labels, idx) if len(idx) else ""
            lines.append(f"{task},{split},{acc!r}" if acc != "" else f"{task},{split},")
        print(f"teacher {task}: test accuracy "
              f"{reporting.accuracy(bundle.logits[k], g.labels, g.test_idx):.4f}")
    graphs.atomic_write(out / "teacher_accuracy.csv", "\n".join(lines) + "\n")
    if args.weights:
        text = Path(args.weights).read_text().splitlines()
        last_epoch = int(text[-1].split(",")[0])
        w = np.full((g.n_nodes, bundle.n_teachers), np.nan)
        task_col = {t: i for i, t in enumerate(bundle.tasks)}
        for ln in text[1:]:
            epoch, node, task, weight = ln.split(",")
            if int(epoch) == last_epoch:
                w[int(node), task_col[task]] = float(weight)
        mean_w = reporting.per_degree_mean_weights(w, g, boundaries)
        graphs.atomic_write(out / "degree_weights.csv",
                            reporting.degree_weights_csv(mean_w, boundaries, bundle.tasks))
        print(f"wrote degree-bucketed weights (epoch {last_epoch}) to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser():
    p = argparse.ArgumentParser(prog="agssl",
                                description="multi-teacher distillation pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(q):
        q.add_argument("--config", help="flat key=value file; flags override")
        q.add_argument("--seed", type=int, default=0)

    q = sub.add_parser("gen", help="generate a synthetic block-model dataset")
    add_common(q)
    q.add_argument("--out", required=True)
    q.add_argument("--blocks", default="100x2", help="e.g. 50x2 = two blocks of 50")
    q.add_argument("--p-in", type=float, default=0.2)
    q.add_argument("--p-out", type=float, default=0.02)
    q.add_argument("--dim", type=int, default=16)
    q.add_argument("--sigma", type=float, default=1.0)
    q.add_argument("--sep", type=float, default=1.0, help="class-mean scale")
    q.add_argument("--rates", default="0.1,0.1,0.8")
    q.add_argument("--write-posterior", action="store_true")
    q.set_defaults(fn=cmd_gen)

    q = sub.add_parser("train-teachers", help="train one teacher per task and export the bundle")
    add_common(q)
    q.add_argument("--data", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--tasks", default=",".join(pretext.TASK_KINDS))
    q.add_argument("--strategy", choices=("jt", "pf"), default="jt")
    q.add_argument("--alpha", type=float, default=1.0)
    q.add_argument("--epochs", type=int, default=500)
    q.add_argument("--pretrain-epochs", type=int, default=300)
    q.add_argument("--finetune-epochs", type=int, default=500)
    q.add_argument("--hidden", type=int, default=32)
    q.add_argument("--tau", type=float, default=2.0)
    q.add_argument("--lr", type=float, default=0.01)
    q.add_argument("--weight-decay", type=float, default=5e-4)
    q.set_defaults(fn=cmd_train_teachers)

    q = sub.add_parser("distill", help="train the student against a teacher bundle")
    add_common(q)
    q.add_argument("--data", required=True)
    q.add_argument("--bundle", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--integrator", choices=distill.INTEGRATORS, default="lf")
    q.add_argument("--alpha", type=float, default=1.0)
    q.add_argument("--beta", type=float, default=10.0)
    q.add_argument("--tau", type=float, default=2.0)
    q.add_argument("--epochs", type=int, default=500)
    q.add_argument("--seeds", type=int, default=1)
    q.add_argument("--hidden", type=int, default=32)
    q.add_argument("--lr", type=float, default=0.01)
    q.add_argument("--weight-decay", type=float, default=5e-4)
    q.add_argument("--gamma-lr", type=float, default=0.01)
    q.set_defaults(fn=cmd_distill)

    q = sub.add_parser("sweep", help="teacher-count or hyperparameter grid sweep")
    add_common(q)
    q.add_argument("--data", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--mode", choices=("teacher-count", "grid"), default="teacher-count")
    q.add_argument("--grid", help="key=comma-list file for alpha/beta/tau/hidden")
    q.add_argument("--tasks", default=",".join(pretext.TASK_KINDS))
    q.add_argument("--integrators", default=",".join(distill.INTEGRATORS))
    q.add_argument("--strategy", choices=("jt", "pf"), default="jt")
    q.add_argument("--alpha", type=float, default=1.0)
    q.add_argument("--beta", type=float, default=10.0)
    q.add_argument("--tau", type=float, default=2.0)
    q.add_argument("--epochs", type=int, default=300)
    q.add_argument("--seeds", type=int, default=5)
    q.add_argument("--hidden", type=int, default=32)
    q.add_argument("--lr", type=float, default=0.01)
    q.add_argument("--weight-decay", type=float, default=5e-4)
    q.add_argument("--gamma-lr", type=float, default=0.01)
    q.set_defaults(fn=cmd_sweep)

    q = sub.add_parser("delta", help="per-node approximation-gap curves")
    add_common(q)
    q.add_argument("--data", required=True)
    q.add_argument("--bundle", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--target", choices=("onehot", "posterior"), default="onehot")
    q.add_argument("--target-file")
    q.set_defaults(fn=cmd_delta)

    q = sub.add_parser("eval", help="teacher metrics and degree breakdowns")
    add_common(q)
    q.add_argument("--data", required=True)
    q.add_argument("--bundle", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--weights", help="weights.csv from a distill run")
    q.add_argument("--boundaries", default="1,4,7,10")
    q.set_defaults(fn=cmd_eval)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_config(parser, args, argv)
        return args.fn(args)
    except (UsageError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, FloatingPointError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
