"""Distribution-shift metrics and the model selection score.

``wasserstein2_1d`` is the exact optimal-transport distance between two 1-D
empirical samples (closed form through quantile-function pairing); ``jsd`` is
the Jensen-Shannon divergence of shared-range histograms in log base 2, so 0
means identical histograms and 1 disjoint supports.

Feature variation measures the worst-case dissimilarity of a scalar feature
between instances of a domain, conditioned on each task label; model
variation takes the supremum of that over unit directions of a representation
(coordinate axes plus seeded random directions). The selection score combines
mean task accuracy, model variation relative to the raw data, and relative
reconstruction error into a single criterion bounded above by 1.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .data import STD_FLOOR


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Dissimilarity functions between 1-D samples
# ---------------------------------------------------------------------------

def wasserstein2_1d(p, q) -> float:
    """Exact 1-D Wasserstein-2 distance between empirical samples.

    Equal sizes reduce to pairing sorted samples; unequal sizes integrate the
    squared quantile-function difference over the union of both quantile
    grids (exact for piecewise-constant empirical quantile functions).
    """
    ps = np.sort(np.asarray(p, dtype=np.float64))
    qs = np.sort(np.asarray(q, dtype=np.float64))
    n, m = ps.size, qs.size
    if n == 0 or m == 0:
        raise MetricError("empty sample set")
    if n == m:
        return float(np.sqrt(np.mean((ps - qs) ** 2)))
    # common denominator n*m keeps the grid arithmetic in exact integers
    grid = np.union1d(np.arange(1, n + 1, dtype=np.int64) * m,
                      np.arange(1, m + 1, dtype=np.int64) * n)
    ip = (grid + m - 1) // m - 1
    iq = (grid + n - 1) // n - 1
    weights = np.diff(np.concatenate(([0], grid))) / float(n * m)
    return float(np.sqrt(np.sum(weights * (ps[ip] - qs[iq]) ** 2)))


def jsd_from_masses(p_mass, q_mass, eps: float = 1e-12) -> float:
    """Jensen-Shannon divergence (log base 2) of two probability vectors,
    epsilon-smoothed so disjoint supports stay finite."""
    if eps <= 0:
        raise MetricError("smoothing epsilon must be > 0")
    p = np.asarray(p_mass, dtype=np.float64) + eps
    q = np.asarray(q_mass, dtype=np.float64) + eps
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)
    kl_p = np.sum(p * np.log2(p / m))
    kl_q = np.sum(q * np.log2(q / m))
    return float(np.clip(0.5 * kl_p + 0.5 * kl_q, 0.0, 1.0))


def jsd(p, q, bins: int = 50, eps: float = 1e-12) -> float:
    """JSD of histograms built on the shared min-max range of both samples."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.size == 0 or q.size == 0:
        raise MetricError("empty sample set")
    if bins < 2:
        raise MetricError("bin count must be >= 2")
    lo = min(p.min(), q.min())
    hi = max(p.max(), q.max())
    if lo == hi:
        return 0.0
    hp, _ = np.histogram(p, bins=bins, range=(lo, hi))
    hq, _ = np.histogram(q, bins=bins, range=(lo, hi))
    return jsd_from_masses(hp / p.size, hq / q.size, eps=eps)


@dataclass(frozen=True)
class Dissimilarity:
    """Callable dissimilarity between 1-D samples; histogram settings apply
    to the jsd kind only."""
    kind: str = "wasserstein2"
    bins: int = 50
    eps: float = 1e-12

    def __post_init__(self):
        if self.kind not in ("wasserstein2", "jsd"):
            raise MetricError(f"unknown dissimilarity kind {self.kind!r}")
        if self.bins < 2 or self.eps <= 0:
            raise MetricError("need bins >= 2 and eps > 0")

    def __call__(self, p, q) -> float:
        if self.kind == "wasserstein2":
            return wasserstein2_1d(p, q)
        return jsd(p, q, bins=self.bins, eps=self.eps)

    def describe(self) -> str:
        if self.kind == "wasserstein2":
            return "wasserstein2"
        return f"jsd(bins={self.bins},eps={self.eps:g})"


W2 = Dissimilarity("wasserstein2")
JSD = Dissimilarity("jsd")


# ---------------------------------------------------------------------------
# Feature and model variation
# ---------------------------------------------------------------------------

def _conditional_pairs(task_labels, domain_labels, min_cell: int):
    """Index pairs per (task, domain): for every task label, all unordered
    pairs of domain instances whose conditional cells both have at least
    ``min_cell`` samples."""
    task_labels = np.asarray(task_labels, dtype=np.int64)
    domain_labels = np.asarray(domain_labels, dtype=np.int64)
    n = task_labels.shape[0]
    if domain_labels.shape[0] != n:
        raise MetricError("label row counts differ")
    n_tasks = task_labels.shape[1]
    n_domains = domain_labels.shape[1]
    out = {}
    for delta in range(n_domains):
        instances = np.unique(domain_labels[:, delta])
        if instances.size < 2:
            raise MetricError(f"domain column {delta} has fewer than 2 instances")
        for tau in range(n_tasks):
            pairs = []
            for y in np.unique(task_labels[:, tau]):
                sel = task_labels[:, tau] == y
                cells = []
                for e in instances:
                    idx = np.where(sel & (domain_labels[:, delta] == e))[0]
                    if idx.size >= min_cell:
                        cells.append(idx)
                for a in range(len(cells)):
                    for b in range(a + 1, len(cells)):
                        pairs.append((cells[a], cells[b]))
            out[(tau, delta)] = pairs
    return out


def _normalize_column(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    std = v.std()
    return (v - v.mean()) / max(std, STD_FLOOR)


def _variation_from_pairs(values, pairs_by_cell, rho) -> tuple:
    """Max dissimilarity per (task, domain) on a pre-normalized column."""
    entries = {}
    for key, pairs in pairs_by_cell.items():
        best = None
        for idx_a, idx_b in pairs:
            d = rho(values[idx_a], values[idx_b])
            if best is None or d > best:
                best = d
        if best is not None:
            entries[key] = best
    if not entries:
        raise MetricError("no conditional cell pair has enough samples; lower min_cell")
    return entries, max(entries.values())


@dataclass
class FeatureVariation:
    entries: dict           # (task index, domain index) -> variation
    v: float                # max over entries

    def get(self, tau: int, delta: int) -> float:
        return self.entries[(tau, delta)]


def feature_variation(values, task_labels, domain_labels, rho: Dissimilarity = W2,
                      min_cell: int = 10) -> FeatureVariation:
    """Worst-case dissimilarity of a scalar feature between domain instances,
    conditioned on each task label. The feature is normalized to zero mean
    and unit std first, so the result is invariant to positive affine maps."""
    v = _normalize_column(values)
    pairs = _conditional_pairs(task_labels, domain_labels, min_cell)
    entries, vmax = _variation_from_pairs(v, pairs, rho)
    return FeatureVariation(entries=entries, v=vmax)


@dataclass
class VariationReport:
    v_sup: float
    direction: np.ndarray       # maximizing unit direction
    axis_variation: list        # V per coordinate axis
    entries: dict               # (task, domain) -> variation along the argmax direction
    n_directions: int           # sampled directions (excludes the axes)
    rho: str
    seed: int

    def as_dict(self):
        return {"v_sup": self.v_sup, "direction": self.direction.tolist(),
                "axis_variation": self.axis_variation,
                "entries": {f"{t},{d}": v for (t, d), v in self.entries.items()},
                "n_directions": self.n_directions, "rho": self.rho, "seed": self.seed}


def sampled_directions(m: int, n_directions: int, seed: int) -> np.ndarray:
    """Coordinate axes followed by seeded uniform directions on the sphere.
    The random rows for a smaller count are a prefix of a larger count's."""
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((n_directions, m))
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return np.concatenate([np.eye(m), raw / norms], axis=0)


def model_variation(z, task_labels, domain_labels, rho: Dissimilarity = W2,
                    n_directions: int = 512, seed: int = 0,
                    min_cell: int = 10) -> VariationReport:
    """Approximate the supremum of feature variation over unit directions of
    a representation by evaluating the coordinate axes plus ``n_directions``
    sampled directions. Deterministic for a fixed seed, and monotone
    non-decreasing in ``n_directions`` for nested samples."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] < 1:
        raise MetricError("representation must be (N, m) with m >= 1")
    m = z.shape[1]
    if n_directions < m:
        raise MetricError(f"n_directions={n_directions} must be >= latent dim {m}")
    pairs = _conditional_pairs(task_labels, domain_labels, min_cell)
    dirs = sampled_directions(m, n_directions, seed)
    best = None
    values = []
    for u in dirs:
        proj = _normalize_column(z @ u)
        entries, v = _variation_from_pairs(proj, pairs, rho)
        values.append(v)
        if best is None or v > best[0]:
            best = (v, u, entries)
    axis_variation = values[:m]
    v_sup, direction, entries = best
    return VariationReport(v_sup=float(v_sup), direction=direction.copy(),
                           axis_variation=axis_variation, entries=entries,
                           n_directions=n_directions, rho=rho.describe(), seed=seed)


def data_variation(features, task_labels, domain_labels, rho: Dissimilarity = W2,
                   n_directions: int = 512, seed: int = 0,
                   min_cell: int = 10) -> VariationReport:
    """Model variation of the identity embedding, i.e. the raw data."""
    return model_variation(features, task_labels, domain_labels, rho=rho,
                           n_directions=n_directions, seed=seed, min_cell=min_cell)


# ---------------------------------------------------------------------------
# Selection score
# ---------------------------------------------------------------------------

@dataclass
class ScoreReport:
    acc_term: float      # mean task accuracy
    var_term: float      # model variation relative to the raw data's
    rec_term: float      # sqrt(MSE / mean squared sample norm)
    score: float
    per_task_acc: list = field(default_factory=list)

    @classmethod
    def from_terms(cls, acc_term: float, var_term: float, rec_term: float,
                   per_task_acc=None) -> "ScoreReport":
        if not (0.0 <= acc_term <= 1.0):
            raise MetricError("accuracy term must lie in [0, 1]")
        if var_term < 0 or rec_term < 0:
            raise MetricError("variation and reconstruction terms must be >= 0")
        score = acc_term - var_term - rec_term
        return cls(acc_term=float(acc_term), var_term=float(var_term),
                   rec_term=float(rec_term), score=float(score),
                   per_task_acc=list(per_task_acc or []))

    def as_dict(self):
        return {"acc_term": self.acc_term, "var_term": self.var_term,
                "rec_term": self.rec_term, "score": self.score,
                "per_task_acc": self.per_task_acc}


def selection_score(model, x, task_labels, domain_labels, raw_v_sup: float,
                    rho: Dissimilarity = W2, n_directions: int = 512, seed: int = 0,
                    min_cell: int = 10, task_accuracy_override=None) -> ScoreReport:
    """Score a model on one split: mean task accuracy minus relative model
    variation minus relative reconstruction error.

    ``raw_v_sup`` must be the identity-embedding variation of the same split
    with the same dissimilarity settings. Head-less models need
    ``task_accuracy_override`` (e.g. from a probe classifier).
    """
    from .model import relative_reconstruction_error

    if raw_v_sup <= 0.0:
        raise MetricError("raw-data variation is 0; degenerate dataset")
    x = np.asarray(x, dtype=np.float64)
    z = model.encode(x)
    xhat = model.decoder.output(z)
    if task_accuracy_override is not None:
        per_task = [float(a) for a in np.atleast_1d(task_accuracy_override)]
    elif model.task_heads:
        from .nn import accuracy
        per_task = [accuracy(head.output(z), np.asarray(task_labels)[:, j])
                    for j, head in enumerate(model.task_heads)]
    else:
        raise MetricError("model has no task heads; pass task_accuracy_override")
    report = model_variation(z, task_labels, domain_labels, rho=rho,
                             n_directions=n_directions, seed=seed, min_cell=min_cell)
    acc = float(np.mean(per_task))
    var_term = report.v_sup / raw_v_sup
    rec_term = relative_reconstruction_error(x, xhat)
    return ScoreReport.from_terms(acc, var_term, rec_term, per_task_acc=per_task)


# ---------------------------------------------------------------------------
# Reliability assessment
# ---------------------------------------------------------------------------

def reliability_assessment(representations: dict, task_labels, domain_labels,
                           domain_names, source_mask, scopes: dict | None = None,
                           rho: Dissimilarity = JSD, n_directions: int = 512,
                           seed: int = 0, min_cell: int = 10) -> list:
    """Per-domain variation of each representation on source-only and
    source-plus-target splits.

    ``representations`` maps a name to an (N, d) matrix over the same rows as
    the labels. Default scopes are ``source`` (mask) and ``source+target``
    (all rows); pass ``scopes`` mapping name -> row mask to add e.g.
    per-instance splits. Returns rows of
    ``{representation, domain, scope, v_sup}``.
    """
    source_mask = np.asarray(source_mask, dtype=bool)
    if not source_mask.any():
        raise MetricError("source split is empty")
    task_labels = np.asarray(task_labels)
    domain_labels = np.asarray(domain_labels)
    if scopes is None:
        scopes = {"source": source_mask,
                  "source+target": np.ones_like(source_mask)}
    rows = []
    for rep_name, z in representations.items():
        z = np.asarray(z, dtype=np.float64)
        for scope_name, mask in scopes.items():
            mask = np.asarray(mask, dtype=bool)
            for delta, dom_name in enumerate(domain_names):
                report = model_variation(
                    z[mask], task_labels[mask], domain_labels[mask][:, [delta]],
                    rho=rho, n_directions=n_directions, seed=seed, min_cell=min_cell)
                rows.append({
                    "representation": rep_name,
                    "domain": dom_name,
                    "scope": scope_name,
                    "v_sup": report.v_sup,
                    "rho": report.rho,
                    "n_directions": report.n_directions,
                })
    return rows
