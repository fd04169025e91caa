"""Flow-record loading, synthesis, preprocessing and splitting."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .numcore import SeededRng

KINDS = ("numeric", "categorical", "label", "source_id", "ignore")
SPLITS = ("train", "val", "test")


@dataclass
class Schema:
    columns: list[tuple[str, str]]
    class_names: list[str]

    def __post_init__(self):
        self.columns = [(str(n), str(k)) for n, k in self.columns]
        bad = [k for _, k in self.columns if k not in KINDS]
        if bad:
            raise DataError(f"unknown column kinds {bad}; expected one of {KINDS}")
        kinds = [k for _, k in self.columns]
        if kinds.count("label") != 1:
            raise DataError(f"schema needs exactly one label column, found {kinds.count('label')}")
        if kinds.count("source_id") > 1:
            raise DataError("schema allows at most one source_id column")
        if not self.class_names or len(set(self.class_names)) != len(self.class_names):
            raise DataError("class_names must be nonempty and unique")

    def names(self, kind: str) -> list[str]:
        return [n for n, k in self.columns if k == kind]

    @property
    def label(self) -> str:
        return self.names("label")[0]

    @property
    def source_id(self) -> str | None:
        s = self.names("source_id")
        return s[0] if s else None

    def to_dict(self) -> dict:
        return {"columns": [{"name": n, "kind": k} for n, k in self.columns], "class_names": list(self.class_names)}

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        return cls([(c["name"], c["kind"]) for c in d["columns"]], list(d["class_names"]))

    @classmethod
    def load(cls, path) -> "Schema":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


@dataclass
class Table:
    """Typed raw columns: numerics as float64, everything else as str arrays."""

    columns: dict[str, np.ndarray]
    schema: Schema
    dropped_rows: int = 0

    @property
    def n_rows(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0

    def labels(self) -> np.ndarray:
        lookup = {name: i for i, name in enumerate(self.schema.class_names)}
        return np.array([lookup[v] for v in self.columns[self.schema.label]], dtype=np.int64)

    def sources(self) -> np.ndarray | None:
        sid = self.schema.source_id
        return None if sid is None else self.columns[sid]

    def take(self, rows) -> "Table":
        rows = np.asarray(rows)
        return Table({k: v[rows] for k, v in self.columns.items()}, self.schema, 0)

    def write_csv(self, path) -> None:
        names = [n for n, _ in self.schema.columns]
        kinds = dict(self.schema.columns)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            for i in range(self.n_rows):
                w.writerow(
                    [repr(float(self.columns[n][i])) if kinds[n] == "numeric" else self.columns[n][i] for n in names]
                )


# ---------------------------------------------------------------- loading


def load_csv(path, schema: Schema) -> Table:
    """Read a headed CSV into a typed ``Table``.

    Rows whose numeric fields do not parse as finite floats, or whose label
    is not one of ``schema.class_names``, are dropped and summarised in a
    single warning. Columns present in the file but not in the schema are
    ignored.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path} is empty")
        header = [h.strip() for h in header]
        pos = {h: i for i, h in enumerate(header)}
        missing = [n for n, _ in schema.columns if n not in pos]
        if missing:
            raise DataError(f"{path} lacks schema columns {missing}")
        wanted = [(n, k, pos[n]) for n, k in schema.columns if k != "ignore"]
        classes = set(schema.class_names)
        cols: dict[str, list] = {n: [] for n, _, _ in wanted}
        bad_numeric = bad_label = 0
        for row in reader:
            if not row:
                continue
            vals = {}
            ok = True
            for n, k, i in wanted:
                tok = row[i].strip() if i < len(row) else ""
                if k == "numeric":
                    try:
                        v = float(tok)
                    except ValueError:
                        v = math.nan
                    if not math.isfinite(v):
                        bad_numeric += 1
                        ok = False
                        break
                    vals[n] = v
                else:
                    if k == "label" and tok not in classes:
                        bad_label += 1
                        ok = False
                        break
                    vals[n] = tok
            if ok:
                for n in cols:
                    cols[n].append(vals[n])
    n_ok = len(next(iter(cols.values()))) if cols else 0
    dropped = bad_numeric + bad_label
    if n_ok == 0:
        raise DataError(f"{path} has no usable rows ({dropped} dropped)")
    if dropped:
        warnings.warn(
            f"{path}: dropped {dropped} rows ({bad_numeric} unparseable numerics, {bad_label} unknown labels)"
        )
    kinds = dict(schema.columns)
    arrays = {
        n: np.asarray(v, dtype=np.float64) if kinds[n] == "numeric" else np.asarray(v, dtype=str)
        for n, v in cols.items()
    }
    return Table(arrays, schema, dropped)


# ---------------------------------------------------------------- preprocessing


@dataclass
class PreprocessMap:
    numeric: list[tuple[str, float, float]]
    categorical: list[tuple[str, list[str]]]
    dropped: list[str] = field(default_factory=list)
    unseen_policy: str = "zero"

    @property
    def p(self) -> int:
        return len(self.numeric) + sum(len(v) for _, v in self.categorical)

    @property
    def feature_names(self) -> list[str]:
        return [n for n, _, _ in self.numeric] + [f"{n}={c}" for n, vocab in self.categorical for c in vocab]

    @property
    def feature_sources(self) -> list[str]:
        return [n for n, _, _ in self.numeric] + [n for n, vocab in self.categorical for _ in vocab]

    def to_dict(self) -> dict:
        return {
            "numeric": [{"name": n, "mean": m, "std": s} for n, m, s in self.numeric],
            "categorical": [{"name": n, "vocabulary": list(v)} for n, v in self.categorical],
            "dropped_zero_variance": list(self.dropped),
            "unseen_category_policy": self.unseen_policy,
            "p": self.p,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessMap":
        pm = cls(
            [(e["name"], float(e["mean"]), float(e["std"])) for e in d["numeric"]],
            [(e["name"], list(e["vocabulary"])) for e in d["categorical"]],
            list(d.get("dropped_zero_variance", [])),
            d.get("unseen_category_policy", "zero"),
        )
        if pm.p != d["p"]:
            raise DataError(f"preprocess map declares p={d['p']} but describes {pm.p} columns")
        return pm

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "PreprocessMap":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def fit_preprocess(train: Table, schema: Schema | None = None) -> PreprocessMap:
    """Fit standardization and one-hot vocabularies on training rows only.

    Uses the population standard deviation. Constant numeric columns are
    dropped and listed in the map.
    """
    schema = schema or train.schema
    numeric, dropped = [], []
    for name in schema.names("numeric"):
        col = train.columns[name]
        mean = float(col.mean())
        std = float(col.std())
        if not std > 0 or not math.isfinite(std):
            dropped.append(name)
            continue
        numeric.append((name, mean, std))
    if dropped:
        warnings.warn(f"dropping zero-variance numeric columns {dropped}")
    categorical = [(name, sorted(set(train.columns[name].tolist()))) for name in schema.names("categorical")]
    return PreprocessMap(numeric, categorical, dropped)


def apply_preprocess(table: Table, pmap: PreprocessMap) -> np.ndarray:
    """n x p matrix: standardized numerics, then one-hot blocks.

    Categories outside the fitted vocabulary get an all-zero block.
    """
    n = table.n_rows
    out = np.zeros((n, pmap.p), dtype=np.float64)
    j = 0
    for name, mean, std in pmap.numeric:
        out[:, j] = (table.columns[name] - mean) / std
        j += 1
    for name, vocab in pmap.categorical:
        lookup = {c: i for i, c in enumerate(vocab)}
        idx = np.array([lookup.get(v, -1) for v in table.columns[name]], dtype=np.int64)
        hit = idx >= 0
        out[np.flatnonzero(hit), j + idx[hit]] = 1.0
        j += len(vocab)
    return out


# ---------------------------------------------------------------- splitting


def _alloc(n: int, ratios) -> list[int]:
    """Row counts per split: round each ratio, remainder to the last split."""
    counts = [int(round(n * r)) for r in ratios[:-1]]
    if sum(counts) > n:
        counts[-1] -= sum(counts) - n
    return counts + [n - sum(counts)]


def split(y, source_ids=None, ratios=(0.70, 0.15, 0.15), rng: SeededRng | None = None) -> np.ndarray:
    """Per-row split tags ('train' / 'val' / 'test').

    With ``source_ids``, whole sources are assigned to one split each
    (greedy on remaining row deficit); otherwise classes are split
    independently so per-class proportions follow ``ratios``.
    """
    y = np.asarray(y)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = rng or SeededRng(0)
    tags = np.empty(len(y), dtype="<U5")
    if source_ids is not None:
        source_ids = np.asarray(source_ids)
        uniq, inverse, sizes = np.unique(source_ids, return_inverse=True, return_counts=True)
        order = rng.permutation(len(uniq))
        target = np.asarray(ratios) * len(y)
        filled = np.zeros(3)
        assign = np.empty(len(uniq), dtype=np.int64)
        for s in order:
            k = int(np.argmax(target - filled))
            assign[s] = k
            filled[k] += sizes[s]
        tags[:] = np.asarray(SPLITS)[assign[inverse]]
        return tags
    for c in np.unique(y):
        rows = np.flatnonzero(y == c)
        if len(rows) < 3:
            warnings.warn(f"class {c} has only {len(rows)} rows; all assigned to train")
            tags[rows] = "train"
            continue
        rows = rows[rng.permutation(len(rows))]
        start = 0
        for name, cnt in zip(SPLITS, _alloc(len(rows), ratios)):
            tags[rows[start : start + cnt]] = name
            start += cnt
    return tags


# ---------------------------------------------------------------- dataset


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    split: np.ndarray
    class_names: list[str]
    feature_names: list[str]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)

    def part(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        m = self.split == name
        return self.X[m], self.y[m]


def prepare(table: Table, ratios=(0.70, 0.15, 0.15), rng: SeededRng | None = None, dtype=np.float32):
    """Split, fit the preprocessing map on train rows, transform everything."""
    y = table.labels()
    tags = split(y, table.sources(), ratios, rng)
    pmap = fit_preprocess(table.take(np.flatnonzero(tags == "train")))
    X = apply_preprocess(table, pmap).astype(dtype)
    return Dataset(X, y, tags, list(table.schema.class_names), pmap.feature_names), pmap


# ---------------------------------------------------------------- synthesis


def heavy_tail_counts(n_classes: int, n_rows: int, ratio: float = 60.0) -> list[int]:
    """Geometrically decaying class sizes with max/min close to ``ratio``."""
    r = ratio ** (-1.0 / max(n_classes - 1, 1))
    w = r ** np.arange(n_classes)
    raw = w / w.sum() * n_rows
    counts = np.floor(raw).astype(int)
    rem = n_rows - counts.sum()
    counts[np.argsort(-(raw - counts), kind="stable")[:rem]] += 1
    return counts.tolist()


def _class_codes(n_classes: int, n_inf: int, rng: SeededRng) -> np.ndarray:
    if n_inf < 1:
        raise ValueError("need at least one informative feature")
    if 2**n_inf < n_classes:
        raise ValueError(f"{n_inf} informative features cannot separate {n_classes} classes")
    d_min = max(1, n_inf // 4)
    while True:
        codes: list[np.ndarray] = []
        for _ in range(200 * n_classes):
            c = rng.choice(np.array([-1.0, 1.0]), size=n_inf)
            if all(np.sum(c != o) >= d_min for o in codes):
                codes.append(c)
                if len(codes) == n_classes:
                    break
        if len(codes) == n_classes:
            break
        d_min -= 1
    out = np.stack(codes)
    if n_classes > 1:
        # every informative column must separate at least two classes
        for j in np.flatnonzero(out.min(axis=0) == out.max(axis=0)):
            out[int(rng.integers(0, n_classes)), j] *= -1
    return out


def synthesize(
    class_counts,
    n_numeric: int = 40,
    n_informative: int = 20,
    categorical_dims=(3, 6),
    separability: float = 1.0,
    rng: SeededRng | None = None,
    n_sources: int = 0,
) -> Table:
    """Gaussian class clusters plus class-correlated categorical columns.

    The first ``n_informative`` numeric columns carry class signal (class
    means at +-3*separability along a per-class sign code); the remaining
    numerics are pure noise. Each column then gets a random affine map so
    raw units differ. A categorical column takes the class's own value
    with probability ``separability / 2`` and a uniform value otherwise.
    """
    if not 0 < separability <= 1:
        raise ValueError("separability must lie in (0, 1]")
    counts = [int(c) for c in class_counts]
    if any(c < 1 for c in counts):
        raise ValueError("every class needs at least one row")
    if not 0 < n_informative <= n_numeric:
        raise ValueError("need 0 < n_informative <= n_numeric")
    rng = rng or SeededRng(0)
    C = len(counts)
    n = sum(counts)
    y = np.repeat(np.arange(C), counts)
    codes = _class_codes(C, n_informative, rng)
    delta = 3.0 * separability
    Z = rng.normal(0.0, 1.0, (n, n_numeric))
    Z[:, :n_informative] += delta * codes[y]
    scale = np.exp(rng.uniform(np.log(0.5), np.log(2000.0), n_numeric))
    offset = rng.uniform(-100.0, 100.0, n_numeric)
    raw = Z * scale + offset
    order = rng.permutation(n)
    y, raw = y[order], raw[order]

    columns: dict[str, np.ndarray] = {}
    spec: list[tuple[str, str]] = []
    for j in range(n_numeric):
        name = f"num_{j:02d}"
        columns[name] = raw[:, j]
        spec.append((name, "numeric"))
    for j, v in enumerate(categorical_dims):
        own = (y + j) % v
        rand = rng.integers(0, v, n)
        pick = rng.random(n) < separability / 2
        name = f"cat_{j}"
        columns[name] = np.array([f"v{k}" for k in np.where(pick, own, rand)], dtype=str)
        spec.append((name, "categorical"))
    if n_sources:
        name = "source"
        columns[name] = np.array([f"s{k:03d}" for k in rng.integers(0, n_sources, n)], dtype=str)
        spec.append((name, "source_id"))
    class_names = [f"class_{c}" for c in range(C)]
    columns["label"] = np.asarray(class_names, dtype=str)[y]
    spec.append(("label", "label"))
    return Table(columns, Schema(spec, class_names))


# ---------------------------------------------------------------- profiling


def class_frequencies(y, class_names) -> list[tuple[str, int, float]]:
    counts = np.bincount(np.asarray(y), minlength=len(class_names))
    total = counts.sum()
    return [(name, int(c), float(c / total)) for name, c in zip(class_names, counts)]


def top_variance_correlation(table: Table, top_v: int = 10) -> tuple[list[str], np.ndarray]:
    """Pearson correlation among the ``top_v`` highest-variance numeric columns."""
    names = table.schema.names("numeric")
    if len(names) < 2:
        raise DataError("correlation profile needs at least two numeric columns")
    var = np.array([table.columns[n].var() for n in names])
    keep = [i for i in np.argsort(-var, kind="stable") if var[i] > 0][:top_v]
    chosen = [names[i] for i in keep]
    M = np.stack([table.columns[n] for n in chosen], axis=1)
    return chosen, np.corrcoef(M, rowvar=False)


def profile(table: Table, top_v: int = 10) -> dict:
    y = table.labels()
    names, corr = top_variance_correlation(table, top_v)
    return {"class_freq": class_frequencies(y, table.schema.class_names), "corr_names": names, "corr": corr}


def write_profile(prof: dict, out_dir) -> list[str]:
    import os

    p1 = os.path.join(out_dir, "class_freq.csv")
    with open(p1, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "count", "fraction"])
        for name, cnt, frac in prof["class_freq"]:
            w.writerow([name, cnt, repr(frac)])
    p2 = os.path.join(out_dir, "corr_topvar.csv")
    with open(p2, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["", *prof["corr_names"]])
        for name, row in zip(prof["corr_names"], prof["corr"]):
            w.writerow([name, *[repr(float(v)) for v in row]])
    return [p1, p2]
