"""Command-line entry point: ``cclh <subcommand> ...``.

Exit codes: 0 success, 2 configuration/usage error, 3 data or artifact error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .cascade import CCLHModel, TrainConfig, train
from .errors import CclhError, DataError, InvalidConfig, TriggerNeverFired
from .metrics import evaluate, split_dataset
from .preprocess import Preprocessor, WindowConfig
from .simgen import ScenarioConfig, generate_dataset
from .telemetry import load_dataset

log = logging.getLogger("cclh")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


class ConfigError(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get("CCLH_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"CCLH_SEED must be an integer, got {raw!r}")


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _add_split_args(p):
    p.add_argument("--split", choices=["random", "unseen_component"], default=None)
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--split-seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cclh", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON file of option defaults; explicit flags win")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("scenario", help="scenario.json")
    g.add_argument("out_dir")

    s = sub.add_parser("split", help="write train/test case lists")
    s.add_argument("data_dir")
    s.add_argument("out_dir")
    _add_split_args(s)

    pp = sub.add_parser("preprocess", help="fit templates, schema and norm stats; dump tensors")
    pp.add_argument("data_dir")
    pp.add_argument("out_dir")
    pp.add_argument("--tau", type=float, default=None)
    _add_split_args(pp)

    t = sub.add_parser("train", help="train a model on the training split")
    t.add_argument("data_dir")
    t.add_argument("model_dir")
    t.add_argument("--theta", type=float, default=None)
    t.add_argument("--theta-sweep", default=None, help="comma-separated theta values")
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--patience", type=int, default=None)
    t.add_argument("--min-delta", type=float, default=None)
    t.add_argument("--hidden", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--no-teacher-forcing", action="store_true", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--tau", type=float, default=None)
    _add_split_args(t)

    d = sub.add_parser("diagnose", help="diagnose cases with a trained model")
    d.add_argument("model_dir")
    d.add_argument("data_dir")
    d.add_argument("out_dir")
    d.add_argument("--cases", default=None, help="comma-separated case ids (default: all)")
    d.add_argument("--jobs", type=int, default=None)

    e = sub.add_parser("evaluate", help="evaluate a model on the test split")
    e.add_argument("model_dir")
    e.add_argument("data_dir")
    e.add_argument("out_dir")
    e.add_argument("--jobs", type=int, default=None)
    _add_split_args(e)
    return parser


DEFAULTS = {
    "split": "random", "ratio": 0.6, "split_seed": None, "tau": 30.0, "theta": 0.6, "theta_sweep": None,
    "lr": 1e-3, "epochs": 100, "patience": 10, "min_delta": 1e-4, "hidden": 256, "batch_size": 32,
    "no_teacher_forcing": False, "seed": None, "cases": None, "jobs": 1,
}


def resolve(args) -> argparse.Namespace:
    """Merge flags over the ``--config`` file over built-in defaults."""
    file_opts = {}
    if args.config:
        path = _existing(args.config, "config file")
        try:
            file_opts = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})")
        if not isinstance(file_opts, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        file_opts = {k.replace("-", "_"): v for k, v in file_opts.items()}
    merged = dict(vars(args))
    for key, default in DEFAULTS.items():
        if merged.get(key) is None:
            merged[key] = file_opts.get(key, default)
    seed = default_seed()
    if merged["seed"] is None:
        merged["seed"] = seed
    if merged["split_seed"] is None:
        merged["split_seed"] = merged["seed"]
    if not 0 < merged["ratio"] < 1:
        raise ConfigError("--ratio must lie in (0, 1)")
    return argparse.Namespace(**merged)


def _load_split(args, cases, model_dir=None):
    """Test/train split; a split recorded next to the model takes precedence."""
    recorded = Path(model_dir) / "split.json" if model_dir else None
    explicit = getattr(args, "_split_explicit", False)
    if recorded is not None and recorded.exists() and not explicit:
        doc = json.loads(recorded.read_text())
        by_id = {c.case_id: c for c in cases}
        missing = [i for i in doc["train"] + doc["test"] if i not in by_id]
        if missing:
            raise DataError(f"split.json names {len(missing)} case(s) absent from the dataset")
        return ([by_id[i] for i in doc["train"]], [by_id[i] for i in doc["test"]],
                doc["mode"], doc["ratio"], doc["seed"])
    train_cases, test_cases = split_dataset(cases, args.split, args.ratio, args.split_seed)
    return train_cases, test_cases, args.split, args.ratio, args.split_seed


def _split_doc(train_cases, test_cases, mode, ratio, seed):
    return {"mode": mode, "ratio": ratio, "seed": seed,
            "train": [c.case_id for c in train_cases], "test": [c.case_id for c in test_cases],
            "distinct_train_culprits": len({c.culprit for c in train_cases}),
            "distinct_test_culprits": len({c.culprit for c in test_cases})}


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args):
    scenario = _existing(args.scenario, "scenario file")
    try:
        cfg = ScenarioConfig.from_json(scenario)
    except (json.JSONDecodeError, InvalidConfig) as exc:
        raise ConfigError(f"{scenario}: {exc}")
    t0 = time.perf_counter()
    cases = generate_dataset(cfg, args.out_dir)
    print(f"wrote {len(cases)} cases to {args.out_dir} in {time.perf_counter() - t0:.1f}s")


def cmd_split(args):
    _, cases = load_dataset(_existing(args.data_dir, "data directory"))
    train_cases, test_cases = split_dataset(cases, args.split, args.ratio, args.split_seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = _split_doc(train_cases, test_cases, args.split, args.ratio, args.split_seed)
    (out / "split.json").write_text(json.dumps(doc, indent=1))
    print(f"train {len(train_cases)} / test {len(test_cases)} ({args.split})")


def cmd_preprocess(args):
    _, cases = load_dataset(_existing(args.data_dir, "data directory"))
    train_cases, _ = split_dataset(cases, args.split, args.ratio, args.split_seed)
    pre = Preprocessor.fit(train_cases, WindowConfig(args.tau))
    out = Path(args.out_dir)
    pre.save(out)
    arrays = {}
    for case, triple in zip(cases, pre.transform(cases)):
        for m in triple:
            arrays[f"{case.case_id}/{m.modality}"] = m.data.astype(np.float32)
    np.savez_compressed(out / "tensors.npz", **arrays)
    print(f"schema dims {pre.schema.dims}; {len(cases)} cases serialized")


def _train_one(args, train_cases, model_dir: Path, theta, split_doc, test_cases):
    cfg = TrainConfig(theta=theta, lr=args.lr, max_epochs=args.epochs, patience=args.patience,
                      min_delta=args.min_delta, teacher_forcing=not args.no_teacher_forcing,
                      seed=args.seed, batch_size=args.batch_size, hidden=args.hidden)
    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", TriggerNeverFired)
        model, trainlog = train(train_cases, cfg, WindowConfig(args.tau))
    for w in caught:
        if issubclass(w.category, TriggerNeverFired):
            print(f"warning: trigger never fired (theta={theta})", file=sys.stderr)
    model.meta["offline_seconds"] = time.perf_counter() - t0
    model.meta["seconds_per_epoch"] = float(np.mean([r["seconds"] for r in trainlog.rows]))
    model.save(model_dir)
    trainlog.write_csv(model_dir / "training_log.csv")
    (model_dir / "split.json").write_text(json.dumps(split_doc, indent=1))
    print(f"theta={theta}: {trainlog.stopped_epoch} epochs, trigger epoch {trainlog.trigger_epoch}, "
          f"{model.meta['offline_seconds']:.1f}s -> {model_dir}")
    return model


def cmd_train(args):
    _, cases = load_dataset(_existing(args.data_dir, "data directory"))
    train_cases, test_cases, mode, ratio, seed = _load_split(args, cases)
    split_doc = _split_doc(train_cases, test_cases, mode, ratio, seed)
    root = Path(args.model_dir)
    if args.theta_sweep:
        try:
            thetas = [float(x) for x in str(args.theta_sweep).split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"bad --theta-sweep value {args.theta_sweep!r}")
        summary = []
        for theta in thetas:
            sub = root / f"theta_{theta:g}"
            model = _train_one(args, train_cases, sub, theta, split_doc, test_cases)
            report = _evaluate_model(model, test_cases, args.jobs,
                                     {"split": mode, "theta": theta,
                                      "trigger_epoch": model.meta.get("trigger_epoch")})
            report.write(sub)
            summary.append({"theta": theta, "trigger_epoch": model.meta.get("trigger_epoch"),
                            "hr": report.hr, "avg3": report.avg3, "f1": report.f1})
        root.mkdir(parents=True, exist_ok=True)
        (root / "sweep.json").write_text(json.dumps(summary, indent=2))
    else:
        _train_one(args, train_cases, root, args.theta, split_doc, test_cases)


def _diagnose_all(model: CCLHModel, cases, jobs):
    prepared = model.prepare(cases)
    if jobs <= 1:
        return model.diagnose_prepared(prepared)
    with ThreadPoolExecutor(jobs) as pool:
        return [r for part in pool.map(lambda p: model.diagnose_prepared([p]), prepared) for r in part]


def _evaluate_model(model, test_cases, jobs, meta):
    results = _diagnose_all(model, test_cases, jobs)
    meta = dict(meta)
    meta["mean_inference_ms"] = float(np.mean([r.elapsed_ms for r in results]))
    return evaluate([r.ranking for r in results], [c.culprit for c in test_cases],
                    [r.failure_type for r in results], [c.failure_type for c in test_cases],
                    labels=model.failure_types, meta=meta)


def cmd_diagnose(args):
    model = CCLHModel.load(_existing(args.model_dir, "model directory"))
    _, cases = load_dataset(_existing(args.data_dir, "data directory"))
    if args.cases:
        wanted = [c.strip() for c in args.cases.split(",") if c.strip()]
        by_id = {c.case_id: c for c in cases}
        unknown = [w for w in wanted if w not in by_id]
        if unknown:
            raise ConfigError(f"unknown case id(s): {unknown}")
        cases = [by_id[w] for w in wanted]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for res in _diagnose_all(model, cases, args.jobs):
        (out / f"{res.case_id}.json").write_text(json.dumps(res.to_dict(), indent=1))
    print(f"diagnosed {len(cases)} case(s) -> {out}")


def cmd_evaluate(args):
    model_dir = _existing(args.model_dir, "model directory")
    model = CCLHModel.load(model_dir)
    _, cases = load_dataset(_existing(args.data_dir, "data directory"))
    train_cases, test_cases, mode, ratio, seed = _load_split(args, cases, model_dir)
    if any(not c.labeled for c in test_cases):
        raise DataError("evaluation needs labeled test cases")
    meta = {"split": mode, "ratio": ratio, "split_seed": seed, "n_train": len(train_cases),
            "distinct_train_culprits": len({c.culprit for c in train_cases}),
            "distinct_test_culprits": len({c.culprit for c in test_cases}),
            "theta": model.meta.get("theta"), "trigger_epoch": model.meta.get("trigger_epoch")}
    report = _evaluate_model(model, test_cases, args.jobs, meta)
    report.write(args.out_dir)
    print(report.to_markdown())


COMMANDS = {"generate": cmd_generate, "split": cmd_split, "preprocess": cmd_preprocess,
            "train": cmd_train, "diagnose": cmd_diagnose, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    explicit_split = getattr(args, "split", None) is not None
    try:
        args = resolve(args)
        args._split_explicit = explicit_split
        COMMANDS[args.command](args)
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, CclhError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
