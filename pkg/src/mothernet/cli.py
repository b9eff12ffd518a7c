"""``mothernet`` command line: every workflow behind one entry point.

Exit codes: 0 success, 1 domain error (bad data, bad file, divergence...),
2 usage error.  Every run that writes output also writes a JSON manifest of
the resolved arguments, configuration, input file hashes and package
version next to it.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from . import __version__
from .errors import MotherNetError

log = logging.getLogger("mothernet")

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


# --------------------------------------------------------------------------
# helpers


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def manifest_path(out):
    if os.path.isdir(out):
        return os.path.join(out, "manifest.json")
    return out + ".manifest.json"


def write_manifest(out, args, inputs=(), config=None, extra=None):
    """Resolved run description; re-running ``argv`` on identical inputs reproduces the outputs."""
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "version": __version__,
        "command": args.command,
        "argv": list(args.argv),
        "args": resolved,
        "inputs": {p: _sha256(p) for p in inputs if p and os.path.isfile(p)},
        "config": config or {},
    }
    if extra:
        manifest.update(extra)
    with open(manifest_path(out), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return manifest


def _read_toml(path):
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _dataclass_from(cls, table, where):
    allowed = {f.name for f in fields(cls)}
    unknown = set(table) - allowed
    if unknown:
        raise UsageError(f"unknown keys in [{where}]: {', '.join(sorted(unknown))}")
    return cls(**table)


def _split_list(text):
    return [s.strip() for s in text.split(",") if s.strip()] if text else []


def _load_train(path, target, categorical):
    from .data import load_csv

    return load_csv(path, target_column=target, categorical_columns=_split_list(categorical))


def _load_apply(path, train, target, categorical):
    """Read a test file coded like ``train``; the target column is optional."""
    from .data import load_csv

    with open(path, newline="") as fh:
        header = [h.strip() for h in next(csv.reader(fh), [])]
    tgt = target if target in header else None
    ds = load_csv(path, target_column=tgt, categorical_columns=_split_list(categorical),
                  classes=train.class_names if tgt else None, vocab=train.vocab)
    expected = train.feature_names
    if ds.feature_names != expected:
        raise MotherNetError(f"{path}: feature columns {list(ds.feature_names)} differ from training {list(expected)}")
    return ds


def write_probs(path, probs, class_names):
    """One ``p_<label>`` column per class then ``predicted`` (argmax, first index on ties)."""
    probs = np.asarray(probs, dtype=np.float64)
    pred = np.argmax(probs, axis=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"p_{c}" for c in class_names] + ["predicted"])
        for row, k in zip(probs, pred):
            w.writerow([repr(float(v)) for v in row] + [class_names[k]])


def read_probs(path):
    """Returns ``(probs, class_names)`` from a file written by :func:`write_probs`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise MotherNetError(f"{path}: empty probabilities file")
        cols = [j for j, h in enumerate(header) if h.startswith("p_")]
        if not cols:
            raise MotherNetError(f"{path}: no p_<label> columns")
        rows = []
        for lineno, rec in enumerate(reader, start=1):
            try:
                rows.append([float(rec[j]) for j in cols])
            except (ValueError, IndexError):
                raise MotherNetError(f"{path}: row {lineno}: bad probability values") from None
    return np.array(rows, dtype=np.float64).reshape(len(rows), len(cols)), tuple(header[j][2:] for j in cols)


def _class_names(ds):
    return ds.class_names or tuple(str(k) for k in range(ds.n_classes))


def _load_model(path):
    from .encoder import load_checkpoint

    model, _ = load_checkpoint(path)
    return model


# --------------------------------------------------------------------------
# subcommands


def cmd_prior_sample(args):
    from .data import save_dataset
    from .prior import PriorConfig, sample_valid_task

    table = _read_toml(args.config).get("prior", {}) if args.config else {}
    prior = _dataclass_from(PriorConfig, table, "prior")
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for i in range(args.n_tasks):
        task = sample_valid_task(prior, rng)
        save_dataset(os.path.join(args.out, f"task_{i:04d}_train.mnds"), task.train)
        save_dataset(os.path.join(args.out, f"task_{i:04d}_test.mnds"), task.test)
    write_manifest(args.out, args, [args.config], {"prior": asdict(prior)})
    print(f"wrote {args.n_tasks} tasks to {args.out}")


def resolve_train_config(args):
    from .encoder import PRESETS, ChildConfig, EncoderConfig, ModelConfig
    from .prior import PriorConfig
    from .train import TrainConfig

    doc = _read_toml(args.config) if args.config else {}
    unknown = set(doc) - {"preset", "train", "prior", "encoder", "child"}
    if unknown:
        raise UsageError(f"unknown sections in {args.config}: {', '.join(sorted(unknown))}")
    preset = args.preset or doc.get("preset", "desk")
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    base = PRESETS[preset]
    enc = _dataclass_from(EncoderConfig, {**asdict(base.encoder), **doc.get("encoder", {})}, "encoder")
    child = _dataclass_from(ChildConfig, {**asdict(base.child), **doc.get("child", {})}, "child")
    tr = dict(doc.get("train", {}))
    if args.steps is not None:
        tr["total_steps"] = args.steps
    if args.lr is not None:
        tr["base_lr"] = args.lr
    if args.seed is not None:
        tr["seed"] = args.seed
    if "batch_schedule" in tr:
        tr["batch_schedule"] = tuple(tuple(p) for p in tr["batch_schedule"])
    cfg = _dataclass_from(TrainConfig, tr, "train")
    prior = _dataclass_from(PriorConfig, doc.get("prior", {}), "prior")
    return cfg, prior, ModelConfig(enc, child), preset


def cmd_meta_train(args):
    from .plotting import plot_training_curve
    from .train import train

    cfg, prior, model_config, preset = resolve_train_config(args)
    os.makedirs(args.out, exist_ok=True)
    write_manifest(args.out, args, [args.config], {
        "preset": preset, "train": asdict(cfg), "prior": asdict(prior), "model": model_config.to_dict()})
    _, records = train(cfg, prior, model_config, out_dir=args.out)
    plot_training_curve(records, os.path.join(args.out, "loss.svg"))
    tail = records[-100:]
    print(json.dumps({"steps": len(records), "recent_loss": float(np.mean([r["loss"] for r in tail]))}))


def _classifier(model, train, args):
    from .inference import MotherNetClassifier

    return MotherNetClassifier(model, n_members=args.ensemble if args.ensemble > 0 else None, seed=args.seed)


def cmd_icl(args):
    model = _load_model(args.checkpoint)
    train = _load_train(args.train, args.target, args.categorical)
    test = _load_apply(args.test, train, args.target, args.categorical)
    clf = _classifier(model, train, args).fit(train)
    probs = clf.predict_proba(test.X)
    write_probs(args.out, probs, _class_names(train))
    extra = {"members": [asdict(m.cfg) for m in clf.members_]}
    if test.y is not None and len(np.unique(test.y)) > 1:
        from .evaluation import roc_auc_ovr

        extra["test_auc"] = roc_auc_ovr(probs, test.y)
        print(f"test ROC AUC {extra['test_auc']:.4f}")
    write_manifest(args.out, args, [args.checkpoint, args.train, args.test], extra=extra)


def cmd_export_child(args):
    from .childnet import child_to_json, save_child
    from .inference import icl_fit

    model = _load_model(args.checkpoint)
    train = _load_train(args.train, args.target, args.categorical)
    net = icl_fit(model, train)
    save_child(args.out, net)
    if args.json:
        with open(args.json, "w") as fh:
            fh.write(child_to_json(net))
    write_manifest(args.out, args, [args.checkpoint, args.train],
                   extra={"class_names": list(_class_names(train)), "feature_names": list(train.feature_names)})


def _child_class_names(child_path, n_classes):
    """Label names recorded when the child was exported, else ``0..c-1``."""
    mp = child_path + ".manifest.json"
    if os.path.isfile(mp):
        with open(mp) as fh:
            names = json.load(fh).get("class_names")
        if names and len(names) == n_classes:
            return tuple(names)
    return tuple(str(k) for k in range(n_classes))


def cmd_predict(args):
    from .childnet import load_child
    from .data import load_csv

    net = load_child(args.child)
    with open(args.test, newline="") as fh:
        header = [h.strip() for h in next(csv.reader(fh), [])]
    ds = load_csv(args.test, target_column=args.target if args.target in header else None,
                  categorical_columns=_split_list(args.categorical))
    if ds.n_features != net.n_features:
        raise MotherNetError(f"child expects {net.n_features} features, {args.test} has {ds.n_features}")
    probs = net.predict_proba(ds.X)
    write_probs(args.out, probs, _child_class_names(args.child, net.n_classes))
    write_manifest(args.out, args, [args.child, args.test])


def cmd_distill(args):
    from .childnet import save_child
    from .distill import DistillConfig, distill

    train = _load_train(args.train, args.target, args.categorical)
    probs, names = read_probs(args.teacher_probs)
    if names != _class_names(train):
        raise MotherNetError(f"teacher classes {list(names)} differ from training classes {list(_class_names(train))}")
    cfg = DistillConfig(hidden=args.hidden, layers=args.layers, epochs=args.epochs, lr=args.lr, seed=args.seed)
    student = distill(probs, train, cfg)
    save_child(args.out, student)
    write_manifest(args.out, args, [args.train, args.teacher_probs], {"distill": asdict(cfg)},
                   extra={"class_names": list(names), "feature_names": list(train.feature_names)})


class PrecomputedProbs:
    """External algorithm plugged in as ``{dir}/{dataset}_split{k}.csv`` probability files."""

    def __init__(self, directory):
        self.directory = directory
        self.context = None

    def set_context(self, dataset, split):
        self.context = (dataset, split)

    def fit(self, train):
        return self

    def predict_proba(self, X):
        dataset, split = self.context
        probs, _ = read_probs(os.path.join(self.directory, f"{dataset}_split{split}.csv"))
        if probs.shape[0] != len(X):
            raise MotherNetError(f"{dataset} split {split}: {probs.shape[0]} rows of probabilities for {len(X)} rows")
        return probs


def build_suite(doc, base_dir):
    """``(algorithms, datasets)`` from a parsed suite TOML document."""
    from .childnet import FinetuneParams
    from .data import load_csv, load_dataset
    from .distill import DistillConfig
    from .evaluation import BASELINE_FACTORIES, DistilledStudent, RandomSearch, toy_suite
    from .inference import FineTunedMotherNet, MotherNetClassifier

    def rel(p):
        return p if os.path.isabs(p) else os.path.join(base_dir, p)

    datasets = {}
    for entry in doc.get("datasets", []):
        kind = entry.get("kind", "csv")
        if kind == "toy":
            datasets.update(toy_suite(entry.get("n", 20), entry.get("seed", 0)))
        elif kind == "csv":
            datasets[entry["name"]] = load_csv(rel(entry["path"]), target_column=entry["target"],
                                               categorical_columns=entry.get("categorical", []))
        elif kind == "mnds":
            datasets[entry["name"]] = load_dataset(rel(entry["path"]))
        else:
            raise UsageError(f"unknown dataset kind {kind!r}")
    if not datasets:
        raise UsageError("suite defines no datasets")

    models = {}

    def model_for(path):
        if path not in models:
            models[path] = _load_model(rel(path))
        return models[path]

    algorithms = {}
    for entry in doc.get("algorithms", []):
        name, kind = entry["name"], entry["kind"]
        if kind == "mothernet":
            model = model_for(entry["checkpoint"])
            k = entry.get("ensemble", 8)
            algorithms[name] = lambda s, m=model, k=k: MotherNetClassifier(m, n_members=k if k > 0 else None, seed=s)
        elif kind == "mothernet-finetune":
            model = model_for(entry["checkpoint"])
            hp = FinetuneParams(**entry.get("params", {}))
            algorithms[name] = lambda s, m=model, hp=hp: FineTunedMotherNet(m, hp)
        elif kind == "distill":
            model = model_for(entry["checkpoint"])
            k = entry.get("ensemble", 8)
            cfg = entry.get("params", {})
            algorithms[name] = lambda s, m=model, k=k, cfg=cfg: DistilledStudent(
                MotherNetClassifier(m, n_members=k if k > 0 else None, seed=s), DistillConfig(**{**cfg, "seed": s}))
        elif kind in BASELINE_FACTORIES:
            n_iter = entry.get("search", 0)
            params = entry.get("params")
            if n_iter:
                algorithms[name] = lambda s, kind=kind, n=n_iter: RandomSearch(kind, n, s)
            else:
                algorithms[name] = lambda s, kind=kind, p=params: BASELINE_FACTORIES[kind](p, s)
        elif kind == "probs":
            algorithms[name] = lambda s, d=rel(entry["dir"]): PrecomputedProbs(d)
        else:
            raise UsageError(f"unknown algorithm kind {kind!r}")
    if not algorithms:
        raise UsageError("suite defines no algorithms")
    return algorithms, datasets


def cmd_eval(args):
    from .evaluation import benchmark
    from .plotting import plot_auc_vs_time

    doc = _read_toml(args.suite)
    algorithms, datasets = build_suite(doc, os.path.dirname(os.path.abspath(args.suite)))
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    result = benchmark(algorithms, datasets, seed=seed, n_splits=doc.get("n_splits", 5))
    os.makedirs(args.out, exist_ok=True)
    cols = ["dataset", "split", "algorithm", "auc", "fit_s", "predict_s"]
    result.records[cols].to_csv(os.path.join(args.out, "results.csv"), index=False)
    errors = result.records[result.records["error"] != ""]
    if len(errors):
        errors.to_csv(os.path.join(args.out, "errors.csv"), index=False)
    result.per_dataset.to_csv(os.path.join(args.out, "per_dataset.csv"), index=False)
    result.summary.to_csv(os.path.join(args.out, "summary.csv"))
    plot_auc_vs_time(result.summary, os.path.join(args.out, "auc_vs_time.svg"))
    write_manifest(args.out, args, [args.suite], doc, extra={"seed": seed})
    print(result.to_text())


def cmd_plot_boundary(args):
    from .childnet import load_child
    from .plotting import plot_boundary

    train = _load_train(args.train, args.target, args.categorical)
    if train.n_features != 2:
        raise MotherNetError(f"decision boundaries need exactly 2 features, {args.train} has {train.n_features}")
    if args.child:
        clf = load_child(args.child)
        inputs = [args.child, args.train]
    elif args.checkpoint:
        clf = _classifier(_load_model(args.checkpoint), train, args).fit(train)
        inputs = [args.checkpoint, args.train]
    else:
        raise UsageError("plot-boundary needs --checkpoint or --child")
    xx, yy, p0 = plot_boundary(clf, train, args.out, resolution=args.resolution, title=args.title)
    grid_csv = os.path.splitext(args.out)[0] + "_grid.csv"
    np.savetxt(grid_csv, np.column_stack([xx.ravel(), yy.ravel(), p0.ravel()]), delimiter=",",
               header="x0,x1,p_class0", comments="", fmt="%.9g")
    write_manifest(args.out, args, inputs)


def cmd_gradcheck(args):
    from .train import gradcheck

    if not args.tiny:
        raise UsageError("only the --tiny configuration is supported")
    report = gradcheck(seed=args.seed or 0)
    print(json.dumps({k: report[k] for k in ("seed", "loss", "max_rel_error", "n_params", "relu_margin")}))
    return 0 if report["max_rel_error"] < 1e-4 else 1


def cmd_bench(args):
    from .bench import bench
    from .prior import gen_blobs

    model = _load_model(args.checkpoint)
    if args.train:
        train = _load_train(args.train, args.target, args.categorical)
    else:
        train = gen_blobs(args.train_rows, np.random.default_rng(args.seed), n_features=args.features)
    report = bench(model, train, n_rows=args.rows, repeats=args.repeats, batch_rows=args.batch_rows, seed=args.seed)
    text = json.dumps(report.to_dict(), indent=2)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
        write_manifest(args.out, args, [args.checkpoint, args.train])


# --------------------------------------------------------------------------
# parser


def _data_flags(p, test=False):
    p.add_argument("--train", required=True, help="training CSV")
    if test:
        p.add_argument("--test", required=True, help="CSV to predict; its target column is optional")
    p.add_argument("--target", default="target", help="label column name (default: target)")
    p.add_argument("--categorical", default="", help="comma-separated categorical column names")


def build_parser():
    p = _Parser(prog="mothernet", description="Hypernetwork in-context learning for small tabular data.")
    p.add_argument("--version", action="version", version=f"mothernet {__version__}")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: $MN_THREADS or all cores)")
    p.add_argument("--deterministic", action="store_true", help="force order-deterministic torch kernels")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    prior = sub.add_parser("prior", help="synthetic task prior")
    prior_sub = prior.add_subparsers(dest="prior_command", metavar="ACTION", parser_class=_Parser)
    s = prior_sub.add_parser("sample", help="write sampled tasks as MNDS1 files")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--n-tasks", type=int, default=10)
    s.add_argument("--config", help="TOML file with a [prior] table")
    s.set_defaults(func=cmd_prior_sample)

    s = sub.add_parser("meta-train", help="meta-train the hypernetwork")
    s.add_argument("--config", help="TOML with preset / [train] / [prior] / [encoder] / [child]")
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--preset", help="model preset (desk, tiny, paper)")
    s.add_argument("--steps", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_meta_train)

    s = sub.add_parser("icl", help="fit by one forward pass and predict a test CSV")
    s.add_argument("--checkpoint", required=True)
    _data_flags(s, test=True)
    s.add_argument("--ensemble", type=int, default=8, help="members; 0 = identity member only")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="probabilities CSV")
    s.set_defaults(func=cmd_icl)

    s = sub.add_parser("export-child", help="write the identity-member child network")
    s.add_argument("--checkpoint", required=True)
    _data_flags(s)
    s.add_argument("--out", required=True, help="MNCH1 file")
    s.add_argument("--json", help="also write a JSON debug dump")
    s.set_defaults(func=cmd_export_child)

    s = sub.add_parser("predict", help="predict with an exported child or student network")
    s.add_argument("--child", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--target", default="target")
    s.add_argument("--categorical", default="")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("distill", help="train a dense student on teacher probabilities")
    s.add_argument("--teacher-probs", required=True, help="CSV with p_<label> columns, one row per training row")
    _data_flags(s)
    s.add_argument("--hidden", type=int, default=128)
    s.add_argument("--layers", type=int, default=2)
    s.add_argument("--epochs", type=int, default=300)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="MNCH1 file")
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("eval", help="run a benchmark suite")
    s.add_argument("--suite", required=True, help="suite TOML")
    s.add_argument("--out", required=True, help="results directory")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("plot-boundary", help="SVG of a 2-feature decision boundary")
    s.add_argument("--checkpoint")
    s.add_argument("--child")
    _data_flags(s)
    s.add_argument("--ensemble", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--resolution", type=int, default=200)
    s.add_argument("--title")
    s.add_argument("--out", required=True, help="SVG file")
    s.set_defaults(func=cmd_plot_boundary)

    s = sub.add_parser("gradcheck", help="finite-difference check of the meta-training gradient")
    s.add_argument("--tiny", action="store_true", help="tiny float64 configuration")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", help="child-path vs encoder-per-batch prediction throughput")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--train", help="training CSV (default: synthetic Gaussian blobs)")
    s.add_argument("--target", default="target")
    s.add_argument("--categorical", default="")
    s.add_argument("--train-rows", type=int, default=512)
    s.add_argument("--features", type=int, default=5)
    s.add_argument("--rows", type=int, default=10000)
    s.add_argument("--repeats", type=int, default=9)
    s.add_argument("--batch-rows", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="also write the JSON report here")
    s.set_defaults(func=cmd_bench)
    return p


def _configure(args):
    import torch

    threads = args.threads
    if threads is None and os.environ.get("MN_THREADS"):
        try:
            threads = int(os.environ["MN_THREADS"])
        except ValueError:
            raise UsageError(f"MN_THREADS must be an integer, got {os.environ['MN_THREADS']!r}") from None
    if threads is None:
        # benchmarks default to one thread so the ratio is interpretable
        threads = 1 if args.command == "bench" else (os.cpu_count() or 1)
    if threads < 1:
        raise UsageError("--threads must be positive")
    torch.set_num_threads(threads)
    args.threads = threads
    if args.deterministic:
        torch.use_deterministic_algorithms(True)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def run(argv=None):
    """Parse ``argv`` and dispatch; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if not argv:
            raise UsageError(parser.format_help())
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            raise UsageError(parser.format_help())
        args.argv = argv
        _configure(args)
        code = args.func(args)
        return 0 if code is None else code
    except UsageError as exc:
        sys.stderr.write(str(exc).rstrip("\n") + "\n")
        return 2
    except (MotherNetError, OSError, ValueError) as exc:
        sys.stderr.write(f"mothernet: error: {exc}\n")
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
