"""Command line interface: ``dcn {train,eval,gridsearch,verify,gendata}``.

Exit codes: 0 success, 1 runtime or data failure, 2 usage error.
Settings resolve as command-line flag, then config file, then built-in default.
"""

from __future__ import annotations

import argparse
import configparser
import datetime as _dt
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from .data import (
    CriteoPreprocessor,
    DataError,
    Dataset,
    DatasetSchema,
    SyntheticSpec,
    apply_schema_csv,
    contiguous_days,
    generate_synthetic,
    read_criteo,
    read_csv_table,
    read_synthetic,
    split_random,
    split_temporal,
    tabular_datasets,
    write_synthetic,
)
from .model import SchemaError
from .poly import PolynomialParseError, TractabilityError, verify_projection, verify_cross_polynomial
from .training import (
    DatasetHandles,
    GridSpec,
    TrainConfig,
    TrainingDivergedError,
    evaluate,
    grid_search,
    train,
    write_grid_results,
    write_metrics,
    write_timings,
)

log = logging.getLogger("dcn")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- settings


@dataclass
class DataOptions:
    data_format: str = "synthetic"
    data: str | None = None
    label_col: int = -1
    train_days: int = 6
    n_days: int = 7
    train_fraction: float = 0.9
    min_count: int = 10
    split_seed: int = 0


_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}
_DATA_KEYS = {f.name: f for f in fields(DataOptions)}


def _coerce(value: str, default):
    if isinstance(default, bool):
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, list):
        return [int(v) for v in str(value).replace(" ", "").split(",") if v != ""]
    return value


def _int_list(text: str) -> list[int]:
    text = text.strip()
    return [int(v) for v in text.split(",") if v.strip() != ""] if text else []


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip() != ""]


def read_config(path: str | None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    if path:
        if not Path(path).is_file():
            raise UsageError(f"config file not found: {path}")
        cp.read(path)
    return cp


def resolve_settings(args: argparse.Namespace) -> tuple[TrainConfig, DataOptions]:
    cp = read_config(args.config)
    tc = TrainConfig()
    do = DataOptions()
    values: dict[str, dict] = {"train": {}, "data": {}}
    for section in ("model", "train", "data"):
        if not cp.has_section(section):
            continue
        for key, raw in cp.items(section):
            if key in _TRAIN_KEYS:
                values["train"][key] = _coerce(raw, getattr(tc, key))
            elif key in _DATA_KEYS:
                values["data"][key] = _coerce(raw, getattr(do, key) if getattr(do, key) is not None else "")
            else:
                raise UsageError(f"unknown config key [{section}] {key}")
    for key in _TRAIN_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values["train"][key] = v
    for key in _DATA_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values["data"][key] = v
    try:
        return TrainConfig(**{**asdict(tc), **values["train"]}), DataOptions(**{**asdict(do), **values["data"]})
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e


# ---------------------------------------------------------------- data loading


@dataclass
class LoadedData:
    handles: DatasetHandles
    fingerprints: dict
    preprocessor: CriteoPreprocessor | None = None
    bayes_logloss: float | None = None


def _require_path(opts: DataOptions) -> Path:
    if not opts.data:
        raise UsageError("--data is required")
    p = Path(opts.data)
    if not p.is_file():
        raise DataError(f"dataset not found: {p}")
    return p


def load_data(opts: DataOptions) -> LoadedData:
    path = _require_path(opts)
    if opts.data_format == "synthetic":
        sd = read_synthetic(path)
        handles = DatasetHandles(sd.train, sd.val, sd.schema(), sd.test)
        bayes = sd.bayes_logloss
        pre = None
    elif opts.data_format == "criteo":
        records = read_criteo(path)
        splits = split_temporal(contiguous_days(len(records), opts.n_days), opts.train_days, opts.split_seed)
        train_recs = [records[i] for i in splits.train]
        pre = CriteoPreprocessor.fit(train_recs, opts.min_count)
        handles = DatasetHandles(
            pre.transform(train_recs),
            pre.transform([records[i] for i in splits.val]),
            pre.schema(),
            pre.transform([records[i] for i in splits.test]),
        )
        bayes = None
    elif opts.data_format == "csv":
        feats, labels = read_csv_table(path, opts.label_col)
        splits = split_random(len(labels), opts.train_fraction, opts.split_seed)
        schema, tr, va, te = tabular_datasets(feats, labels, splits, source="csv")
        handles = DatasetHandles(tr, va, schema, te)
        bayes = None
        pre = None
    else:
        raise UsageError(f"unknown data format {opts.data_format!r}")
    fps = {"file_sha256": _file_hash(path)}
    fps.update({k: getattr(handles, k).fingerprint() for k in ("train", "val", "test")})
    return LoadedData(handles, fps, pre, bayes)


def _file_hash(path: Path) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_eval_split(opts: DataOptions, schema: DatasetSchema, split: str, vocab_dir: Path | None) -> Dataset:
    """Rebuild one split of a dataset using the preprocessing stored with a checkpoint."""
    path = _require_path(opts)
    if opts.data_format == "synthetic":
        sd = read_synthetic(path)
        if sd.spec.dim != schema.dense_count:
            raise SchemaError(f"dataset has {sd.spec.dim} features, checkpoint expects {schema.dense_count}")
        return getattr(sd, split) if split != "all" else _concat([sd.train, sd.val, sd.test])
    if opts.data_format == "criteo":
        if vocab_dir is None or not vocab_dir.is_dir():
            raise DataError(f"vocabulary directory not found next to checkpoint: {vocab_dir}")
        pre = CriteoPreprocessor.load(vocab_dir)
        records = read_criteo(path)
        if split == "all":
            return pre.transform(records)
        splits = split_temporal(contiguous_days(len(records), opts.n_days), opts.train_days, opts.split_seed)
        return pre.transform([records[i] for i in getattr(splits, split)])
    if opts.data_format == "csv":
        feats, labels = read_csv_table(path, opts.label_col)
        if feats.shape[1] != schema.dense_count:
            raise SchemaError(f"dataset has {feats.shape[1]} features, checkpoint expects {schema.dense_count}")
        if split != "all":
            idx = getattr(split_random(len(labels), opts.train_fraction, opts.split_seed), split)
            feats, labels = feats[idx], labels[idx]
        return apply_schema_csv(schema, feats, labels)
    raise UsageError(f"unknown data format {opts.data_format!r}")


def _concat(parts: list[Dataset]) -> Dataset:
    return Dataset(np.concatenate([p.dense for p in parts]), np.concatenate([p.cat for p in parts]),
                   np.concatenate([p.labels for p in parts]))


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    config, opts = resolve_settings(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    loaded = load_data(opts)
    result = train(config, loaded.handles, log_every=1)
    finished = _now()

    schema = loaded.handles.schema
    manifest = {
        "config": asdict(config),
        "data": asdict(opts),
        "dataset_fingerprints": loaded.fingerprints,
        "code_version": __version__,
        "seed": config.seed,
        "started": started,
        "finished": finished,
    }
    extra = {"schema": schema.to_dict(), "data": asdict(opts), "train": asdict(config),
             "best_val_loss": result.summary["best_val_loss"], "manifest": "manifest.json"}
    if loaded.preprocessor is not None:
        loaded.preprocessor.save(out / "vocab")
    save_checkpoint(result.params, out / "checkpoint.dcn", extra)
    write_metrics(out / "metrics.jsonl", result)
    write_timings(out / "timing.jsonl", result)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    best = result.summary["best_val_loss"]
    print(f"best validation logloss: {best!r}" if best is not None else "no training steps run")
    if loaded.bayes_logloss is not None:
        print(f"bayes logloss: {loaded.bayes_logloss!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise DataError(f"checkpoint not found: {ckpt}")
    params, extra = load_checkpoint(ckpt)
    schema = DatasetSchema.from_dict(extra["schema"]) if "schema" in extra else None
    if schema is None:
        raise SchemaError("checkpoint carries no dataset schema")
    stored = DataOptions(**extra.get("data", {}))
    opts = DataOptions(**{**asdict(stored), **{k: v for k, v in
                                               (("data", args.data), ("data_format", args.data_format),
                                                ("label_col", args.label_col)) if v is not None}})
    ds = load_eval_split(opts, schema, args.split, ckpt.parent / "vocab")
    if ds.dense.shape[1] != params.config.dense_count or ds.cat.shape[1] != len(params.config.fields):
        raise SchemaError("dataset layout does not match the checkpoint")
    metrics = evaluate(params, ds)
    print(f"logloss: {metrics['logloss']!r}")
    if params.config.n_classes > 2:
        print(f"accuracy: {metrics['accuracy']!r}")
    if args.json:
        print(json.dumps({"split": args.split, "rows": len(ds), **metrics}, sort_keys=True))
    return EXIT_OK


def read_grid(path: str | None, cp: configparser.ConfigParser | None = None) -> GridSpec:
    cp = cp or configparser.ConfigParser()
    if path:
        if not Path(path).is_file():
            raise UsageError(f"grid file not found: {path}")
        cp.read(path)
    if not cp.has_section("grid"):
        raise UsageError("grid file needs a [grid] section")
    g = cp["grid"]
    kwargs = {}
    for key in ("hidden_layers", "hidden_sizes", "cross_layers"):
        if key in g:
            kwargs[key] = _int_list(g[key])
    if "learning_rates" in g:
        kwargs["learning_rates"] = _float_list(g["learning_rates"])
    try:
        return GridSpec(**kwargs)
    except ValueError as e:
        raise UsageError(str(e)) from e


def cmd_gridsearch(args) -> int:
    config, opts = resolve_settings(args)
    grid = read_grid(args.grid or args.config)
    loaded = load_data(opts)
    rows = grid_search(grid, config, loaded.handles)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_grid_results(out / "grid_results.tsv", rows)
    for r in rows:
        print(f"{r['index']:4d} layers={r['hidden_layers']} size={r['hidden_size']} cross={r['cross_layers']} "
              f"lr={r['learning_rate']} val={r['best_val_loss']} params={r['param_count']}")
    return EXIT_OK if all(r["error"] is None for r in rows) else EXIT_FAIL


def _range(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return out


def _corrupted_formula(alpha, weights, l=None):
    from .poly import coefficient_formula

    # negative control: drops the highest layer's weight from every product
    w = np.atleast_2d(np.asarray(weights, dtype=float)).copy()
    w[-1] = 1.0
    return coefficient_formula(alpha, w, l)


def cmd_verify(args) -> int:
    seed = args.seed if args.seed is not None else 0
    try:
        ds = _range(args.d)
        ls = _range(args.l)
        pdims = _range(args.projection_dims)
    except ValueError as e:
        raise UsageError(f"bad range: {e}") from e
    coef_fn = _corrupted_formula if args.corrupt_formula else None
    reports = []
    ok = True
    for d in ds:
        for l in ls:
            kw = {"coefficient_fn": coef_fn} if coef_fn else {}
            rep = verify_cross_polynomial(d, l, args.trials, seed, **kw)
            reports.append(rep.summary())
            print(rep.to_text())
            ok &= rep.passed
    proj = []
    for d in pdims:
        pr = verify_projection(d, 10, seed)
        proj.append({**asdict(pr), "passed": pr.passed})
        print(f"projection d={d}: max|fast-explicit|={pr.max_abs_diff:.3e} ops fast={pr.fast_ops} "
              f"explicit={pr.explicit_ops} {'PASS' if pr.passed else 'FAIL'}")
        ok &= pr.passed
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify_report.json").write_text(
            json.dumps({"polynomial": reports, "projection": proj, "passed": ok}, indent=2, sort_keys=True) + "\n"
        )
    print("VERIFY PASS" if ok else f"VERIFY FAIL (reproduce with --seed {seed})")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_gendata(args) -> int:
    spec = SyntheticSpec(args.dim, args.poly, args.n_train, args.n_val, args.n_test,
                         args.seed if args.seed is not None else 0)
    try:
        spec.polynomial()
    except (PolynomialParseError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    data = generate_synthetic(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_synthetic(data, out)
    print(f"wrote {out}: degree {data.degree}, bayes logloss {data.bayes_logloss!r}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_common(p: argparse.ArgumentParser, out_default: str | None = "runs/latest"):
    p.add_argument("--config", help="INI config file with [model], [data], [train] sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", default=out_default)


def _add_data(p: argparse.ArgumentParser):
    p.add_argument("--data", help="dataset file")
    p.add_argument("--data-format", dest="data_format", choices=["synthetic", "criteo", "csv"])
    p.add_argument("--label-col", dest="label_col", type=int, help="label column for CSV data (default: last)")
    p.add_argument("--train-days", dest="train_days", type=int)
    p.add_argument("--n-days", dest="n_days", type=int)
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    p.add_argument("--min-count", dest="min_count", type=int)
    p.add_argument("--split-seed", dest="split_seed", type=int)


def _add_train(p: argparse.ArgumentParser):
    p.add_argument("--cross-layers", dest="cross_layers", type=int)
    p.add_argument("--deep-sizes", dest="deep_sizes", type=_int_list, help="comma-separated, empty disables")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--patience", dest="early_stop_patience", type=int)
    p.add_argument("--clip-norm", dest="clip_norm", type=float)
    p.add_argument("--lam", type=float, help="L2 penalty on weights")
    p.add_argument("--batch-norm", dest="batch_norm", action="store_const", const=True)
    p.add_argument("--dnn-concat-x0", dest="dnn_concat_x0", action="store_const", const=True,
                   help="with 0 cross layers, feed [x0, h] to the logits instead of h")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcn", description="cross network + deep tower models: train, evaluate, verify")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    _add_data(p)
    _add_train(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--data-format", dest="data_format", choices=["synthetic", "criteo", "csv"])
    p.add_argument("--label-col", dest="label_col", type=int)
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="val")
    p.add_argument("--json", action="store_true", help="also print a JSON record")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gridsearch", help="grid search over depth, width, cross layers and learning rate")
    _add_common(p)
    _add_data(p)
    _add_train(p)
    p.add_argument("--grid", help="INI file with a [grid] section (defaults to --config)")
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("verify", help="check the cross network's polynomial structure")
    _add_common(p, out_default=None)
    p.add_argument("--d", default="1-4", help="input dimensions, e.g. '1-4' or '2,3'")
    p.add_argument("--l", default="0-4", help="depths, e.g. '0-4'")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--projection-dims", dest="projection_dims", default="1,2,4,8,16,32,64")
    p.add_argument("--corrupt-formula", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gendata", help="generate a synthetic dataset with a polynomial logit")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--poly", required=True, help="logit polynomial in x1..x{dim}, e.g. '2*x1*x2 + x3'")
    p.add_argument("--n-train", dest="n_train", type=int, default=10000)
    p.add_argument("--n-val", dest="n_val", type=int, default=2000)
    p.add_argument("--n-test", dest="n_test", type=int, default=2000)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gendata)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SchemaError, CheckpointError, TrainingDivergedError, TractabilityError,
            PolynomialParseError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
