"""Datasets, Criteo/CSV ingestion, splits, and the synthetic polynomial generator."""

from __future__ import annotations

import csv
import gzip
import hashlib
import io
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .embedding import FieldSpec, embed_dim_rule, read_vocab, write_vocab
from .poly import SparsePolynomial
from .tensor import DTYPE, derive_rng, make_rng

log = logging.getLogger(__name__)

CRITEO_INT_COUNT = 13
CRITEO_CAT_COUNT = 26
CRITEO_COLUMNS = 1 + CRITEO_INT_COUNT + CRITEO_CAT_COUNT
MISSING_TOKEN = "<MISSING>"
DEFAULT_MIN_COUNT = 10


class DataError(ValueError):
    pass


class ParseError(DataError):
    pass


@dataclass
class Dataset:
    """Column-stacked examples: ``dense (N, n_dense)``, ``cat (N, n_fields)``, ``labels (N,)``."""

    dense: np.ndarray
    cat: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.dense = np.asarray(self.dense, dtype=DTYPE)
        n = self.dense.shape[0]
        self.cat = np.asarray(self.cat, dtype=np.int64).reshape(n, -1)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (n,):
            raise DataError(f"need one label per row: {self.labels.shape} vs {n} rows")
        if not np.all(np.isfinite(self.dense)):
            raise DataError("dense features contain NaN or Inf")

    def __len__(self):
        return self.dense.shape[0]

    def take(self, idx) -> "Dataset":
        return Dataset(self.dense[idx], self.cat[idx], self.labels[idx])

    def batches(self, batch_size: int) -> Iterator["Dataset"]:
        for start in range(0, len(self), batch_size):
            yield self.take(slice(start, start + batch_size))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.dense, self.cat, self.labels):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


Batch = Dataset


@dataclass
class DatasetSchema:
    """Everything needed to turn raw rows into model input, fit on training data only."""

    dense_count: int
    fields: list[FieldSpec]
    n_classes: int = 2
    normalization: str = "none"  # "log", "standard" or "none"
    dense_mean: list[float] | None = None
    dense_std: list[float] | None = None
    label_values: list | None = None
    source: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fields"] = [asdict(f) for f in self.fields]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        d = dict(d)
        d["fields"] = [FieldSpec(**f) for f in d["fields"]]
        return cls(**d)


# ---------------------------------------------------------------- Criteo


@dataclass
class CriteoRecord:
    label: int
    ints: list[int | None]
    cats: list[str]


def parse_criteo_line(line: str, lineno: int = 0) -> CriteoRecord:
    """Parse ``label \\t 13 integers \\t 26 categorical tokens``; empty fields are missing."""
    cols = line.rstrip("\r\n").split("\t")
    if len(cols) != CRITEO_COLUMNS:
        raise ParseError(f"line {lineno}: expected {CRITEO_COLUMNS} tab-separated columns, got {len(cols)}")
    try:
        label = int(cols[0])
        ints = [int(c) if c != "" else None for c in cols[1:1 + CRITEO_INT_COUNT]]
    except ValueError as e:
        raise ParseError(f"line {lineno}: {e}") from e
    if label not in (0, 1):
        raise ParseError(f"line {lineno}: label must be 0 or 1, got {label}")
    cats = [c if c != "" else MISSING_TOKEN for c in cols[1 + CRITEO_INT_COUNT:]]
    return CriteoRecord(label, ints, cats)


def format_criteo_line(rec: CriteoRecord) -> str:
    ints = ["" if v is None else str(v) for v in rec.ints]
    cats = ["" if c == MISSING_TOKEN else c for c in rec.cats]
    return "\t".join([str(rec.label)] + ints + cats)


def read_criteo(path: str | Path) -> list[CriteoRecord]:
    with open(path, encoding="utf-8") as f:
        return [parse_criteo_line(line, i + 1) for i, line in enumerate(f) if line.strip("\r\n")]


def log_transform(v) -> float:
    """``sign(v) * log(1 + |v|)``; ``None`` (missing) maps to 0."""
    if v is None:
        return 0.0
    v = float(v)
    return math.copysign(math.log1p(abs(v)), v) if v else 0.0


@dataclass
class Vocabulary:
    tokens: list[str]

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @property
    def oov_id(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        """Number of embedding columns, OOV slot included."""
        return len(self.tokens) + 1

    def lookup(self, token: str) -> int:
        return self.index.get(token, self.oov_id)

    def as_dict(self) -> dict[str, int]:
        return dict(self.index) | {"<OOV>": self.oov_id}


def build_vocab(tokens: Iterable[str], min_count: int = DEFAULT_MIN_COUNT) -> Vocabulary:
    """Keep tokens seen at least ``min_count`` times, most frequent first, ties by token."""
    counts = Counter(tokens)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def build_criteo_vocabs(records: Sequence[CriteoRecord], min_count: int = DEFAULT_MIN_COUNT) -> list[Vocabulary]:
    return [build_vocab((r.cats[f] for r in records), min_count) for f in range(CRITEO_CAT_COUNT)]


class CriteoPreprocessor:
    """Log-transformed integers plus missing indicators, and vocab ids for the 26 fields."""

    def __init__(self, vocabs: list[Vocabulary], embed_dims: list[int] | None = None):
        self.vocabs = vocabs
        self.embed_dims = embed_dims or [embed_dim_rule(v.size) for v in vocabs]

    @classmethod
    def fit(cls, train: Sequence[CriteoRecord], min_count: int = DEFAULT_MIN_COUNT) -> "CriteoPreprocessor":
        return cls(build_criteo_vocabs(train, min_count))

    def schema(self) -> DatasetSchema:
        fields = [FieldSpec(i, v.size, e) for i, (v, e) in enumerate(zip(self.vocabs, self.embed_dims))]
        return DatasetSchema(2 * CRITEO_INT_COUNT, fields, 2, "log", source="criteo")

    def transform(self, records: Sequence[CriteoRecord]) -> Dataset:
        n = len(records)
        dense = np.zeros((n, 2 * CRITEO_INT_COUNT))
        cat = np.zeros((n, CRITEO_CAT_COUNT), dtype=np.int64)
        labels = np.zeros(n, dtype=np.int64)
        for r_i, rec in enumerate(records):
            labels[r_i] = rec.label
            for j, v in enumerate(rec.ints):
                dense[r_i, j] = log_transform(v)
                dense[r_i, CRITEO_INT_COUNT + j] = 1.0 if v is None else 0.0
            for f, tok in enumerate(rec.cats):
                cat[r_i, f] = self.vocabs[f].lookup(tok)
        return Dataset(dense, cat, labels)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, v in enumerate(self.vocabs):
            write_vocab(directory / f"field_{i:02d}.txt", v.tokens)
        (directory / "embed_dims.json").write_text(json.dumps(self.embed_dims))

    @classmethod
    def load(cls, directory: str | Path) -> "CriteoPreprocessor":
        directory = Path(directory)
        vocabs = []
        for i in range(CRITEO_CAT_COUNT):
            mapping = read_vocab(directory / f"field_{i:02d}.txt")
            vocabs.append(Vocabulary([t for t, _ in sorted(mapping.items(), key=lambda kv: kv[1])][:-1]))
        dims = json.loads((directory / "embed_dims.json").read_text())
        return cls(vocabs, dims)


def synthetic_criteo_lines(n: int, seed: int = 0, missing_rate: float = 0.1) -> list[str]:
    """Criteo-format lines with a planted signal, for fixtures and smoke runs.

    The click logit depends on categorical fields 0 and 1 (including their
    interaction) and on integer feature 0; the other columns are noise.
    """
    rng = make_rng(seed)
    lines = []
    vocab_sizes = [8, 6] + [20] * (CRITEO_CAT_COUNT - 2)
    effect0 = np.linspace(-1.5, 1.5, vocab_sizes[0])
    effect1 = np.linspace(1.0, -1.0, vocab_sizes[1])
    for _ in range(n):
        ints: list[int | None] = []
        for j in range(CRITEO_INT_COUNT):
            if rng.random() < missing_rate:
                ints.append(None)
            else:
                v = int(rng.geometric(0.05)) - 1
                ints.append(-v if (j == 12 and rng.random() < 0.1) else v)
        ids = [int(rng.integers(s)) for s in vocab_sizes]
        cats = []
        for f, i in enumerate(ids):
            cats.append(MISSING_TOKEN if rng.random() < missing_rate else f"{f:02d}{i:06x}")
        z = effect0[ids[0]] + effect1[ids[1]] + 1.5 * effect0[ids[0]] * effect1[ids[1]]
        z += 0.4 * (log_transform(ints[0]) - 2.5)
        label = int(rng.random() < 1.0 / (1.0 + math.exp(-z)))
        lines.append(format_criteo_line(CriteoRecord(label, ints, cats)))
    return lines


# ---------------------------------------------------------------- splits


@dataclass
class Splits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def _halve(holdout: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = holdout[rng.permutation(len(holdout))]
    half = len(perm) // 2
    return np.sort(perm[:half]), np.sort(perm[half:])


def split_temporal(days: Sequence[int] | np.ndarray, train_days: int = 6, seed: int = 0) -> Splits:
    """Rows from the first ``train_days`` distinct days train; the next day is halved into val/test."""
    days = np.asarray(days)
    uniq = np.unique(days)
    if len(uniq) <= train_days:
        raise DataError(f"need more than {train_days} days, got {len(uniq)}")
    train = np.flatnonzero(np.isin(days, uniq[:train_days]))
    holdout = np.flatnonzero(days == uniq[train_days])
    val, test = _halve(holdout, make_rng(seed))
    return _checked(Splits(train, val, test))


def split_random(n: int, train_fraction: float = 0.9, seed: int = 0) -> Splits:
    """Random ``train_fraction`` train split; the holdout is halved into val/test."""
    rng = make_rng(seed)
    perm = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    val, test = _halve(perm[n_train:], rng)
    return _checked(Splits(np.sort(perm[:n_train]), val, test))


def contiguous_days(n: int, n_days: int = 7) -> np.ndarray:
    """Day index for ``n`` time-ordered rows cut into ``n_days`` equal contiguous chunks."""
    return (np.arange(n) * n_days) // max(n, 1)


def _checked(s: Splits) -> Splits:
    for name in ("train", "val", "test"):
        if len(getattr(s, name)) == 0:
            raise DataError(f"{name} split is empty")
    return s


# ---------------------------------------------------------------- CSV (covertype, Higgs)


def read_csv_table(path: str | Path, label_col: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Numeric CSV, optionally gzipped; a non-numeric first row is a header. Returns (features, raw labels)."""
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rt", newline="", encoding="utf-8") as f:
        rows = [r for r in csv.reader(f) if r]
    if not rows:
        raise DataError(f"{path}: empty file")
    try:
        [float(v) for v in rows[0]]
    except ValueError:
        rows = rows[1:]
    try:
        table = np.array([[float(v) for v in r] for r in rows], dtype=DTYPE)
    except ValueError as e:
        raise DataError(f"{path}: non-numeric value ({e})") from e
    if table.ndim != 2 or table.shape[0] == 0:
        raise DataError(f"{path}: no rows")
    label_col = label_col % table.shape[1]
    labels = table[:, label_col]
    feats = np.delete(table, label_col, axis=1)
    return feats, labels


class StandardScaler:
    """Per-feature z-scoring; constant columns keep scale 1."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = np.asarray(mean, dtype=DTYPE)
        self.std = np.asarray(std, dtype=DTYPE)

    @classmethod
    def fit(cls, X: np.ndarray) -> "StandardScaler":
        std = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std


def tabular_datasets(feats: np.ndarray, raw_labels: np.ndarray, splits: Splits,
                     source: str = "csv") -> tuple[DatasetSchema, Dataset, Dataset, Dataset]:
    """Dense-only datasets; labels become ``0..K-1`` in sorted order of the raw values."""
    label_values = np.unique(raw_labels[splits.train])
    lookup = {v: i for i, v in enumerate(label_values.tolist())}
    scaler = StandardScaler.fit(feats[splits.train])

    def build(idx):
        try:
            y = np.array([lookup[v] for v in raw_labels[idx].tolist()], dtype=np.int64)
        except KeyError as e:
            raise DataError(f"label {e} does not occur in the training split") from e
        X = scaler.transform(feats[idx])
        return Dataset(X, np.zeros((len(idx), 0), dtype=np.int64), y)

    schema = DatasetSchema(
        feats.shape[1], [], max(2, len(label_values)), "standard",
        scaler.mean.tolist(), scaler.std.tolist(), label_values.tolist(), source,
    )
    return schema, build(splits.train), build(splits.val), build(splits.test)


def apply_schema_csv(schema: DatasetSchema, feats: np.ndarray, raw_labels: np.ndarray) -> Dataset:
    if feats.shape[1] != schema.dense_count:
        raise DataError(f"dataset has {feats.shape[1]} features, schema expects {schema.dense_count}")
    lookup = {v: i for i, v in enumerate(schema.label_values or [])}
    try:
        y = np.array([lookup[v] for v in raw_labels.tolist()], dtype=np.int64)
    except KeyError as e:
        raise DataError(f"label {e} is not in the schema") from e
    X = StandardScaler(schema.dense_mean, schema.dense_std).transform(feats)
    return Dataset(X, np.zeros((len(y), 0), dtype=np.int64), y)


# ---------------------------------------------------------------- synthetic data


def binary_entropy_of_logit(z) -> np.ndarray:
    """Entropy (nats) of Bernoulli(sigmoid(z)), stable for large |z|."""
    z = np.abs(np.asarray(z, dtype=DTYPE))
    p = 1.0 / (1.0 + np.exp(-z))
    # H = log(1 + e^-z) + z * (1 - p)
    return np.log1p(np.exp(-z)) + z * (1.0 - p)


def bayes_logloss(poly: SparsePolynomial, qmc_log2_points: int = 20, seed: int = 0) -> float:
    """Expected logloss of the true conditional probability for ``x ~ U[-1, 1]^d``.

    Integrates only over the variables the polynomial uses: Gauss-Legendre
    tensor quadrature for up to three of them, scrambled Sobol points beyond.
    """
    active = poly.variables()
    k = len(active)
    if k == 0:
        return float(binary_entropy_of_logit(poly.coefficient((0,) * poly.nvars)))
    if k <= 3:
        n = {1: 400, 2: 120, 3: 48}[k]
        nodes, weights = np.polynomial.legendre.leggauss(n)
        grids = np.meshgrid(*([nodes] * k), indexing="ij")
        wgrid = np.ones_like(grids[0])
        for g in np.meshgrid(*([weights] * k), indexing="ij"):
            wgrid = wgrid * g
        X = np.zeros((wgrid.size, poly.nvars))
        for col, g in zip(active, grids):
            X[:, col] = g.ravel()
        H = binary_entropy_of_logit(poly.evaluate(X))
        return float(np.sum(H * wgrid.ravel()) / 2.0**k)
    from scipy.stats import qmc

    sampler = qmc.Sobol(d=k, scramble=True, seed=seed)
    U = sampler.random_base2(qmc_log2_points) * 2.0 - 1.0
    X = np.zeros((U.shape[0], poly.nvars))
    X[:, active] = U
    return float(np.mean(binary_entropy_of_logit(poly.evaluate(X))))


@dataclass
class SyntheticSpec:
    dim: int
    poly: str
    n_train: int = 10000
    n_val: int = 2000
    n_test: int = 2000
    seed: int = 0

    def polynomial(self) -> SparsePolynomial:
        return SparsePolynomial.parse(self.poly, self.dim)


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    train: Dataset
    val: Dataset
    test: Dataset
    bayes_logloss: float
    degree: int
    empirical_bayes: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "format": "dcn-synthetic",
            "version": 1,
            "spec": asdict(self.spec),
            "polynomial": self.spec.polynomial().to_text(),
            "degree": self.degree,
            "bayes_logloss": self.bayes_logloss,
            "empirical_bayes_logloss": self.empirical_bayes,
        }

    def schema(self) -> DatasetSchema:
        return DatasetSchema(self.spec.dim, [], 2, "none", source="synthetic")


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Draw ``x ~ U[-1, 1]^dim`` and ``y ~ Bernoulli(sigmoid(poly(x)))`` for each split."""
    if spec.dim < 1:
        raise DataError("synthetic dimension must be >= 1")
    poly = spec.polynomial()
    if poly.degree < 1:
        log.warning("synthetic logit polynomial %r is constant", spec.poly)
    splits = {}
    emp = {}
    for k, (name, n) in enumerate((("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test))):
        rng = derive_rng(spec.seed, k)
        X = rng.uniform(-1.0, 1.0, size=(n, spec.dim))
        z = poly.evaluate(X) if n else np.zeros(0)
        p = 1.0 / (1.0 + np.exp(-z))
        y = (rng.random(n) < p).astype(np.int64)
        splits[name] = Dataset(X, np.zeros((n, 0), dtype=np.int64), y)
        emp[name] = float(np.mean(binary_entropy_of_logit(z))) if n else float("nan")
    return SyntheticData(spec, splits["train"], splits["val"], splits["test"],
                         bayes_logloss(poly, seed=spec.seed), max(poly.degree, 0), emp)


def write_synthetic(data: SyntheticData, path: str | Path) -> None:
    """Header line ``# {json}``, then CSV rows ``split,label,x1..xd``."""
    buf = io.StringIO()
    buf.write("# " + json.dumps(data.header(), sort_keys=True) + "\n")
    for name in ("train", "val", "test"):
        ds = getattr(data, name)
        for x, y in zip(ds.dense, ds.labels):
            buf.write(",".join([name, str(int(y))] + [repr(float(v)) for v in x]) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_synthetic(path: str | Path) -> SyntheticData:
    with open(path, encoding="utf-8") as f:
        first = f.readline()
        if not first.startswith("# "):
            raise DataError(f"{path}: missing synthetic dataset header")
        try:
            header = json.loads(first[2:])
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: bad header ({e})") from e
        if header.get("format") != "dcn-synthetic":
            raise DataError(f"{path}: not a synthetic dataset file")
        spec = SyntheticSpec(**header["spec"])
        rows: dict[str, list] = {"train": [], "val": [], "test": []}
        for lineno, line in enumerate(f, start=2):
            parts = line.rstrip("\n").split(",")
            if len(parts) != spec.dim + 2 or parts[0] not in rows:
                raise DataError(f"{path}:{lineno}: malformed row")
            rows[parts[0]].append(parts[1:])

    def build(rs):
        arr = np.array(rs, dtype=DTYPE).reshape(len(rs), spec.dim + 1)
        return Dataset(arr[:, 1:], np.zeros((len(rs), 0), dtype=np.int64), arr[:, 0].astype(np.int64))

    return SyntheticData(spec, build(rows["train"]), build(rows["val"]), build(rows["test"]),
                         header["bayes_logloss"], header["degree"], header.get("empirical_bayes_logloss", {}))
