"""Tabular dataset model: labelled feature matrices, normalization, splits.

A dataset is an N x k feature matrix plus task label columns (integer class
ids) and domain label columns (integer instance ids for categorical domains,
real covariate values for continuous ones). Continuous domains are discretized
into bins before they are used as classification targets.

On-disk format: CSV with feature columns first, then ``task:<name>`` columns,
then ``domain:<name>`` columns, and a ``<stem>.meta.json`` sidecar declaring
the specs, optional normalization stats, and the format version.
"""

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .util import FORMAT_VERSION, derive_seed, dump_json, fmt_float, load_json

STD_FLOOR = 1e-12


class DataError(ValueError):
    """Base class for dataset contract violations."""


class SchemaError(DataError):
    """Column roles or spec declarations are inconsistent with the file."""


class ValidationError(DataError):
    """Cell values violate the declared specs."""


@dataclass(frozen=True)
class TaskSpec:
    name: str
    n_classes: int
    class_weights: tuple | None = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise SchemaError(f"task {self.name!r}: n_classes must be >= 2")
        if self.class_weights is not None:
            w = tuple(float(x) for x in self.class_weights)
            if len(w) != self.n_classes or any(x <= 0 for x in w):
                raise SchemaError(
                    f"task {self.name!r}: class_weights must be {self.n_classes} positive values"
                )
            object.__setattr__(self, "class_weights", w)


@dataclass(frozen=True)
class DomainSpec:
    name: str
    kind: str  # "categorical" | "continuous"
    n_instances: int | None = None
    n_bins: int | None = None
    strategy: str = "quantile"  # binning strategy for continuous domains

    def __post_init__(self):
        if self.kind == "categorical":
            if self.n_instances is None or self.n_instances < 2:
                raise SchemaError(f"domain {self.name!r}: need n_instances >= 2")
        elif self.kind == "continuous":
            if self.n_bins is None or self.n_bins < 2:
                raise SchemaError(f"domain {self.name!r}: need n_bins >= 2")
            if self.strategy not in ("quantile", "uniform"):
                raise SchemaError(f"domain {self.name!r}: unknown strategy {self.strategy!r}")
        else:
            raise SchemaError(f"domain {self.name!r}: unknown kind {self.kind!r}")

    @property
    def n_levels(self) -> int:
        """Number of classes a domain head for this domain predicts."""
        return self.n_instances if self.kind == "categorical" else self.n_bins


@dataclass(frozen=True)
class NormStats:
    means: np.ndarray
    stds: np.ndarray  # floored, safe to divide by

    def to_dict(self):
        return {"means": [fmt_float(x) for x in self.means],
                "stds": [fmt_float(x) for x in self.stds]}

    @classmethod
    def from_dict(cls, d):
        return cls(means=np.array([float(x) for x in d["means"]], dtype=np.float64),
                   stds=np.array([float(x) for x in d["stds"]], dtype=np.float64))


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray          # (N, k) float64
    feature_names: tuple
    task_labels: np.ndarray       # (N, T) int64
    domain_labels: np.ndarray     # (N, D) float64; categorical columns hold integer ids
    task_specs: tuple
    domain_specs: tuple
    norm_stats: NormStats | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "task_specs", tuple(self.task_specs))
        object.__setattr__(self, "domain_specs", tuple(self.domain_specs))
        n = feats.shape[0]
        tl = np.asarray(self.task_labels, dtype=np.int64).reshape(n, -1)
        dl = np.asarray(self.domain_labels, dtype=np.float64).reshape(n, -1)
        object.__setattr__(self, "task_labels", tl)
        object.__setattr__(self, "domain_labels", dl)
        if feats.ndim != 2 or feats.shape[1] != len(self.feature_names):
            raise SchemaError("feature matrix width does not match feature_names")
        if tl.shape != (n, len(self.task_specs)):
            raise SchemaError("task_labels shape does not match task_specs")
        if dl.shape != (n, len(self.domain_specs)):
            raise SchemaError("domain_labels shape does not match domain_specs")
        if not np.all(np.isfinite(feats)):
            bad = np.where(~np.isfinite(feats).all(axis=1))[0]
            raise ValidationError(
                f"{bad.size} rows contain non-finite feature values (first rows: {bad[:5].tolist()})"
            )
        if not np.all(np.isfinite(dl)):
            raise ValidationError("domain labels contain non-finite values")
        for j, spec in enumerate(self.task_specs):
            col = tl[:, j]
            bad = np.where((col < 0) | (col >= spec.n_classes))[0]
            if bad.size:
                raise ValidationError(
                    f"task {spec.name!r}: label {col[bad[0]]} out of range "
                    f"[0, {spec.n_classes}) at row {bad[0]}"
                )
        for j, spec in enumerate(self.domain_specs):
            if spec.kind != "categorical":
                continue
            col = dl[:, j]
            if not np.all(col == np.round(col)):
                raise ValidationError(f"domain {spec.name!r}: categorical labels must be integers")
            bad = np.where((col < 0) | (col >= spec.n_instances))[0]
            if bad.size:
                raise ValidationError(
                    f"domain {spec.name!r}: instance {int(col[bad[0]])} out of range "
                    f"[0, {spec.n_instances}) at row {bad[0]}"
                )

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_tasks(self) -> int:
        return len(self.task_specs)

    @property
    def n_domains(self) -> int:
        return len(self.domain_specs)

    def task_index(self, name: str) -> int:
        for i, s in enumerate(self.task_specs):
            if s.name == name:
                return i
        raise KeyError(name)

    def domain_index(self, name: str) -> int:
        for i, s in enumerate(self.domain_specs):
            if s.name == name:
                return i
        raise KeyError(name)

    def select(self, idx) -> "Dataset":
        """Row subset as a new Dataset (specs and stats carried over)."""
        idx = np.asarray(idx)
        return replace(
            self,
            features=self.features[idx],
            task_labels=self.task_labels[idx],
            domain_labels=self.domain_labels[idx],
        )

    def domain_level_labels(self) -> np.ndarray:
        """Domain labels as (N, D) int class ids, continuous columns binned.

        Bins for continuous domains are fitted on this dataset's own values;
        for train/eval consistency fit on the training view and reuse the
        returned edges via :func:`apply_bin_edges`.
        """
        out = np.empty_like(self.domain_labels, dtype=np.int64)
        for j, spec in enumerate(self.domain_specs):
            if spec.kind == "categorical":
                out[:, j] = self.domain_labels[:, j].astype(np.int64)
            else:
                out[:, j] = discretize_domain(self.domain_labels[:, j], spec)
        return out


# ---------------------------------------------------------------------------
# CSV + sidecar I/O
# ---------------------------------------------------------------------------

def _meta_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".meta.json")


def _spec_to_meta(spec):
    if isinstance(spec, TaskSpec):
        return {"name": spec.name, "n_classes": spec.n_classes,
                "class_weights": list(spec.class_weights) if spec.class_weights else None}
    d = {"name": spec.name, "kind": spec.kind}
    if spec.kind == "categorical":
        d["n_instances"] = spec.n_instances
    else:
        d["n_bins"] = spec.n_bins
        d["strategy"] = spec.strategy
    return d


def _task_from_meta(d) -> TaskSpec:
    w = d.get("class_weights")
    return TaskSpec(d["name"], int(d["n_classes"]), tuple(w) if w else None)


def _domain_from_meta(d) -> DomainSpec:
    if d["kind"] == "categorical":
        return DomainSpec(d["name"], "categorical", n_instances=int(d["n_instances"]))
    return DomainSpec(d["name"], "continuous", n_bins=int(d["n_bins"]),
                      strategy=d.get("strategy", "quantile"))


def save_dataset(dataset: Dataset, csv_path) -> Path:
    """Write the CSV plus metadata sidecar; byte-deterministic."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    header = list(dataset.feature_names)
    header += [f"task:{s.name}" for s in dataset.task_specs]
    header += [f"domain:{s.name}" for s in dataset.domain_specs]
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(dataset.n_samples):
            row = [fmt_float(v) for v in dataset.features[i]]
            row += [str(int(v)) for v in dataset.task_labels[i]]
            for j, spec in enumerate(dataset.domain_specs):
                v = dataset.domain_labels[i, j]
                row.append(str(int(v)) if spec.kind == "categorical" else fmt_float(v))
            writer.writerow(row)
    meta = {
        "format_version": FORMAT_VERSION,
        "feature_names": list(dataset.feature_names),
        "tasks": [_spec_to_meta(s) for s in dataset.task_specs],
        "domains": [_spec_to_meta(s) for s in dataset.domain_specs],
        "normalization": dataset.norm_stats.to_dict() if dataset.norm_stats else None,
        "provenance": dataset.provenance,
    }
    dump_json(_meta_path(csv_path), meta)
    return csv_path


def load_dataset(csv_path, schema: dict | None = None, on_bad_rows: str = "error") -> Dataset:
    """Load a dataset CSV.

    ``schema`` maps column roles when no sidecar exists:
    ``{"features": [...], "tasks": [TaskSpec...], "domains": [DomainSpec...]}``.
    With a sidecar present it may be omitted. Rows with non-finite feature
    values fail the load (``on_bad_rows="error"``, the default, reports row
    indices and a count) or are dropped with a count in ``provenance``
    (``on_bad_rows="drop"``).
    """
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise FileNotFoundError(csv_path)
    if on_bad_rows not in ("error", "drop"):
        raise ValueError("on_bad_rows must be 'error' or 'drop'")

    meta = None
    if schema is None:
        mp = _meta_path(csv_path)
        if not mp.exists():
            raise SchemaError(f"no schema given and no sidecar found at {mp}")
        meta = load_json(mp)
        if str(meta.get("format_version")) != FORMAT_VERSION:
            raise SchemaError(
                f"unsupported dataset format version {meta.get('format_version')!r}"
            )
        task_specs = [_task_from_meta(d) for d in meta["tasks"]]
        domain_specs = [_domain_from_meta(d) for d in meta["domains"]]
        feature_names = list(meta["feature_names"])
    else:
        task_specs = list(schema["tasks"])
        domain_specs = list(schema["domains"])
        feature_names = list(schema["features"])

    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError("empty file")
        rows = list(reader)

    col_index = {name: i for i, name in enumerate(header)}
    for name in feature_names:
        if name not in col_index:
            raise SchemaError(f"missing feature column {name!r}")
    for s in task_specs:
        if f"task:{s.name}" not in col_index:
            raise SchemaError(f"missing column 'task:{s.name}'")
    for s in domain_specs:
        if f"domain:{s.name}" not in col_index:
            raise SchemaError(f"missing column 'domain:{s.name}'")

    n = len(rows)
    k = len(feature_names)
    features = np.empty((n, k), dtype=np.float64)
    fidx = [col_index[name] for name in feature_names]
    for i, row in enumerate(rows):
        for j, c in enumerate(fidx):
            try:
                features[i, j] = float(row[c])
            except ValueError:
                features[i, j] = np.nan

    bad = np.where(~np.isfinite(features).all(axis=1))[0]
    dropped = 0
    keep = np.arange(n)
    if bad.size:
        if on_bad_rows == "error":
            raise ValidationError(
                f"{bad.size} rows contain non-finite feature values "
                f"(first rows: {bad[:5].tolist()})"
            )
        keep = np.setdiff1d(keep, bad)
        dropped = int(bad.size)

    def int_column(col, what, upper):
        out = np.empty(len(keep), dtype=np.int64)
        for i, r in enumerate(keep):
            raw = rows[r][col]
            try:
                v = int(float(raw))
            except ValueError:
                raise ValidationError(f"{what}: bad label {raw!r} at row {r}")
            if not (0 <= v < upper):
                raise ValidationError(f"{what}: label {v} out of range [0, {upper}) at row {r}")
            out[i] = v
        return out

    task_labels = np.column_stack(
        [int_column(col_index[f"task:{s.name}"], f"task {s.name!r}", s.n_classes)
         for s in task_specs]
    ) if task_specs else np.empty((len(keep), 0), dtype=np.int64)

    dom_cols = []
    for s in domain_specs:
        c = col_index[f"domain:{s.name}"]
        if s.kind == "categorical":
            dom_cols.append(int_column(c, f"domain {s.name!r}", s.n_instances).astype(np.float64))
        else:
            vals = np.array([float(rows[r][c]) for r in keep], dtype=np.float64)
            if not np.all(np.isfinite(vals)):
                raise ValidationError(f"domain {s.name!r}: non-finite covariate values")
            dom_cols.append(vals)
    domain_labels = (np.column_stack(dom_cols) if dom_cols
                     else np.empty((len(keep), 0), dtype=np.float64))

    stats = None
    provenance = {}
    if meta is not None:
        if meta.get("normalization"):
            stats = NormStats.from_dict(meta["normalization"])
        provenance = dict(meta.get("provenance") or {})
    if dropped:
        provenance["dropped_rows"] = dropped

    return Dataset(
        features=features[keep],
        feature_names=feature_names,
        task_labels=task_labels,
        domain_labels=domain_labels,
        task_specs=task_specs,
        domain_specs=domain_specs,
        norm_stats=stats,
        provenance=provenance,
    )


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def fit_norm_stats(features: np.ndarray) -> NormStats:
    """Per-feature mean and population (1/N) std with a floor for constants."""
    feats = np.asarray(features, dtype=np.float64)
    means = feats.mean(axis=0)
    stds = feats.std(axis=0)  # population convention
    stds = np.maximum(stds, STD_FLOOR)
    return NormStats(means=means, stds=stds)


def normalize(dataset: Dataset, stats: NormStats | None = None):
    """Zero-mean unit-std features; fits stats on this dataset when absent.

    Returns ``(dataset, stats)``; the stats are recorded on the dataset so
    they travel with checkpoints and sidecars.
    """
    if stats is None:
        stats = fit_norm_stats(dataset.features)
    scaled = (dataset.features - stats.means) / stats.stds
    return replace(dataset, features=scaled, norm_stats=stats), stats


def denormalize(features: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(features) * stats.stds + stats.means


# ---------------------------------------------------------------------------
# Continuous-domain discretisation
# ---------------------------------------------------------------------------

def quantile_bin_edges(values: np.ndarray, n_bins: int) -> np.ndarray:
    """Interior cut values; bin b holds sorted ranks [N*b/n, N*(b+1)/n)."""
    s = np.sort(np.asarray(values, dtype=np.float64))
    n = s.size
    cuts = [(n * b) // n_bins for b in range(1, n_bins)]
    return s[np.array(cuts, dtype=np.int64) - 1]


def uniform_bin_edges(values: np.ndarray, n_bins: int) -> np.ndarray:
    lo = float(np.min(values))
    hi = float(np.max(values))
    return lo + (hi - lo) * np.arange(1, n_bins) / n_bins


def apply_bin_edges(values: np.ndarray, edges: np.ndarray, strategy: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if strategy == "quantile":
        # edges are the last member of each bin: count edges strictly below v
        return np.searchsorted(edges, values, side="left").astype(np.int64)
    return np.searchsorted(edges, values, side="right").astype(np.int64)


def discretize_domain(values: np.ndarray, spec: DomainSpec, return_edges: bool = False):
    """Bin a continuous domain column into ``spec.n_bins`` integer ids."""
    if spec.kind != "continuous":
        raise SchemaError(f"domain {spec.name!r} is not continuous")
    values = np.asarray(values, dtype=np.float64)
    distinct = np.unique(values).size
    if distinct < spec.n_bins:
        raise ValidationError(
            f"domain {spec.name!r}: {distinct} distinct values < {spec.n_bins} bins; "
            "lower n_bins"
        )
    if spec.strategy == "quantile":
        edges = quantile_bin_edges(values, spec.n_bins)
    else:
        edges = uniform_bin_edges(values, spec.n_bins)
    ids = apply_bin_edges(values, edges, spec.strategy)
    ids = np.clip(ids, 0, spec.n_bins - 1)
    return (ids, edges) if return_edges else ids


# ---------------------------------------------------------------------------
# Cross-validation folds and batch sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    fold_of: np.ndarray       # (N,) fold id per sample
    n_folds: int
    val_fraction: float       # train-side carve-out for early stopping
    seed: int

    def __post_init__(self):
        fo = np.asarray(self.fold_of, dtype=np.int64)
        object.__setattr__(self, "fold_of", fo)
        counts = np.bincount(fo, minlength=self.n_folds)
        if fo.min(initial=0) < 0 or fo.max(initial=0) >= self.n_folds:
            raise DataError("fold ids out of range")
        if np.any(counts == 0):
            raise DataError("every fold must be non-empty")
        if not (0.0 < self.val_fraction < 1.0):
            raise DataError("val_fraction must lie in (0, 1)")

    def eval_indices(self, fold: int) -> np.ndarray:
        return np.where(self.fold_of == fold)[0]

    def train_indices(self, fold: int) -> np.ndarray:
        return np.where(self.fold_of != fold)[0]

    def fit_val_indices(self, fold: int):
        """Deterministic subdivision of the training side into fit/val parts."""
        train = self.train_indices(fold)
        rng = np.random.default_rng(derive_fold_seed(self.seed, fold))
        perm = rng.permutation(train.size)
        n_val = max(1, int(round(train.size * self.val_fraction)))
        val = np.sort(train[perm[:n_val]])
        fit = np.sort(train[perm[n_val:]])
        return fit, val

    def to_dict(self):
        return {"fold_of": self.fold_of.tolist(), "n_folds": self.n_folds,
                "val_fraction": self.val_fraction, "seed": self.seed}


def derive_fold_seed(seed: int, fold: int) -> int:
    return derive_seed(seed, "fold-split", fold)


def make_folds(dataset: Dataset, k: int, seed: int, val_fraction: float = 0.15) -> SplitPlan:
    """Stratified k-fold assignment, stratifying on the first task's labels."""
    n = dataset.n_samples
    if k < 2:
        raise DataError("k must be >= 2")
    if k > n:
        raise DataError(f"k={k} exceeds N={n}")
    rng = np.random.default_rng(derive_fold_seed(seed, -1))
    fold_of = np.empty(n, dtype=np.int64)
    if dataset.n_tasks:
        strata = dataset.task_labels[:, 0]
    else:
        strata = np.zeros(n, dtype=np.int64)
    cursor = 0
    for cls in np.unique(strata):
        idx = np.where(strata == cls)[0]
        idx = idx[rng.permutation(idx.size)]
        for pos, sample in enumerate(idx):
            fold_of[sample] = (cursor + pos) % k
        cursor += idx.size
    return SplitPlan(fold_of=fold_of, n_folds=k, val_fraction=val_fraction, seed=seed)


def weighted_batches(dataset: Dataset, balance_task: TaskSpec, batch_size: int,
                     seed: int, indices: np.ndarray | None = None):
    """Infinite stream of index batches with uniform expected class frequency.

    Samples with replacement; per-sample probability is inverse class count
    times the task's class_weights when present. ``indices`` restricts the
    pool (e.g. to a training split).
    """
    t = None
    for i, s in enumerate(dataset.task_specs):
        if s.name == balance_task.name:
            t = i
            break
    if t is None:
        raise DataError(f"unknown balance task {balance_task.name!r}")
    pool = np.arange(dataset.n_samples) if indices is None else np.asarray(indices)
    labels = dataset.task_labels[pool, t]
    counts = np.bincount(labels, minlength=balance_task.n_classes)
    if np.any(counts[: balance_task.n_classes] == 0):
        empty = int(np.where(counts == 0)[0][0])
        raise DataError(f"task {balance_task.name!r}: class {empty} has no samples")
    weights = 1.0 / counts[labels]
    if balance_task.class_weights is not None:
        weights = weights * np.asarray(balance_task.class_weights)[labels]
    probs = weights / weights.sum()
    rng = np.random.default_rng(seed)
    while True:
        yield rng.choice(pool, size=batch_size, replace=True, p=probs)
