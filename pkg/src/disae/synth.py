"""Synthetic tabular benchmarks with controlled task structure and domain shifts.

Feature matrices come from a blob-based classification generator (informative
features clustered around class-specific hypercube vertices, redundant
features as linear mixes of them, the rest plain noise). Domain shifts are
injected afterwards by a shift plan:

* categorical domains assign every sample to one affine *instance* which
  applies ``x' = a * x + b`` on a feature subset; instances carry a distance
  rank ordered by the parameter norm ``||(a - 1, b)||``;
* continuous domains store a per-sample covariate ``c`` and add a response
  (translation or a smooth ``tanh`` warp) whose strength follows ``c``.

Task labels are a function of the pre-shift features only, so shifts never
change labels. The standard recipes wire these pieces into four named
datasets used throughout the experiments.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .data import DataError, Dataset, DomainSpec, TaskSpec
from .util import derive_seed

DEFAULT_MANY_AFFINES_SIZE = 50_000
FULL_MANY_AFFINES_SIZE = 500_000


class GenerationError(DataError):
    pass


@dataclass(frozen=True)
class TaskRecipe:
    name: str
    class_fractions: tuple  # per-class sample fractions, sums to 1

    def __post_init__(self):
        fr = tuple(float(x) for x in self.class_fractions)
        if len(fr) < 2 or any(f <= 0 for f in fr):
            raise GenerationError(f"task {self.name!r}: fractions must be >= 2 positive values")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise GenerationError(f"task {self.name!r}: fractions must sum to 1")
        object.__setattr__(self, "class_fractions", fr)

    @property
    def n_classes(self) -> int:
        return len(self.class_fractions)


@dataclass(frozen=True)
class GeneratorConfig:
    n_samples: int
    n_features: int
    n_informative: int
    n_redundant: int
    class_sep: float
    tasks: tuple  # TaskRecipe per task
    seed: int
    # per-informative-feature multipliers on the class separation
    informative_scale: tuple | None = None
    # informative features the redundant mixes draw from (default: all)
    redundant_sources: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if self.n_informative < 1:
            raise GenerationError("n_informative must be >= 1")
        if self.n_informative + self.n_redundant > self.n_features:
            raise GenerationError("n_informative + n_redundant exceeds n_features")
        if not self.tasks:
            raise GenerationError("at least one task required")
        if self.n_samples < 1:
            raise GenerationError("n_samples must be positive")
        if self.informative_scale is not None:
            sc = tuple(float(s) for s in self.informative_scale)
            if len(sc) != self.n_informative:
                raise GenerationError("informative_scale length must equal n_informative")
            object.__setattr__(self, "informative_scale", sc)
        if self.redundant_sources is not None:
            srcs = tuple(int(i) for i in self.redundant_sources)
            if not srcs or any(i < 0 or i >= self.n_informative for i in srcs):
                raise GenerationError("redundant_sources must index informative features")
            object.__setattr__(self, "redundant_sources", srcs)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)


@dataclass(frozen=True)
class AffineInstance:
    instance_id: int
    feature_idx: tuple
    scale: np.ndarray
    offset: np.ndarray
    distance_rank: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.feature_idx)
        object.__setattr__(self, "feature_idx", idx)
        a = np.asarray(self.scale, dtype=np.float64)
        b = np.asarray(self.offset, dtype=np.float64)
        object.__setattr__(self, "scale", a)
        object.__setattr__(self, "offset", b)
        if a.shape != (len(idx),) or b.shape != (len(idx),):
            raise GenerationError("scale/offset length must match feature subset")
        if np.any(a == 0):
            raise GenerationError("scale entries must be nonzero")

    @property
    def parameter_norm(self) -> float:
        return float(np.sqrt(np.sum((self.scale - 1.0) ** 2) + np.sum(self.offset**2)))

    def apply(self, block: np.ndarray) -> np.ndarray:
        return block * self.scale + self.offset


@dataclass(frozen=True)
class CategoricalShift:
    name: str
    instances: tuple  # AffineInstance, ordered by distance_rank
    ratios: tuple     # relative sample counts per instance

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if len(self.ratios) != len(self.instances):
            raise GenerationError(
                f"domain {self.name!r}: {len(self.ratios)} ratios for "
                f"{len(self.instances)} instances"
            )
        if any(r <= 0 for r in self.ratios):
            raise GenerationError(f"domain {self.name!r}: ratios must be positive")


@dataclass(frozen=True)
class ContinuousShift:
    name: str
    feature_idx: tuple
    kind: str                 # "translate" | "warp"
    response: np.ndarray      # per-feature response magnitude
    corr_with_prev: float | None = None  # correlate covariate with previous continuous domain
    n_bins: int = 5

    def __post_init__(self):
        idx = tuple(int(i) for i in self.feature_idx)
        object.__setattr__(self, "feature_idx", idx)
        r = np.asarray(self.response, dtype=np.float64)
        object.__setattr__(self, "response", r)
        if self.kind not in ("translate", "warp"):
            raise GenerationError(f"domain {self.name!r}: unknown kind {self.kind!r}")
        if r.shape != (len(idx),):
            raise GenerationError(f"domain {self.name!r}: response length mismatch")


@dataclass(frozen=True)
class ShiftPlan:
    domains: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))


# ---------------------------------------------------------------------------
# Base generators
# ---------------------------------------------------------------------------

def _exact_counts(n: int, fractions) -> np.ndarray:
    """Largest-remainder apportionment of n samples to the given fractions."""
    fr = np.asarray(fractions, dtype=np.float64)
    raw = fr * n
    counts = np.floor(raw).astype(np.int64)
    short = n - int(counts.sum())
    if short:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    if np.any(counts == 0):
        raise GenerationError(f"class ratio impossible for n={n}: zero count in {counts.tolist()}")
    return counts


def _class_vertices(rng: np.random.Generator, n_classes: int, n_inf: int) -> np.ndarray:
    """Distinct hypercube vertices per class; antipodal pair for 2 classes."""
    if n_classes == 2:
        v = rng.integers(0, 2, size=n_inf) * 2 - 1
        return np.stack([v, -v]).astype(np.float64)
    if n_classes > 2**n_inf:
        raise GenerationError("more classes than hypercube vertices")
    seen = set()
    rows = []
    while len(rows) < n_classes:
        v = tuple(int(x) for x in rng.integers(0, 2, size=n_inf) * 2 - 1)
        if v not in seen:
            seen.add(v)
            rows.append(v)
    return np.asarray(rows, dtype=np.float64)


def _assemble_features(rng, cfg: GeneratorConfig, informative: np.ndarray) -> np.ndarray:
    """[informative | redundant mixes | noise] feature block."""
    n = cfg.n_samples
    n_red = cfg.n_redundant
    n_noise = cfg.n_features - cfg.n_informative - n_red
    parts = [informative]
    if n_red:
        sources = (list(cfg.redundant_sources) if cfg.redundant_sources is not None
                   else list(range(cfg.n_informative)))
        mix = rng.normal(size=(len(sources), n_red)) / math.sqrt(len(sources))
        parts.append(informative[:, sources] @ mix)
    if n_noise:
        parts.append(rng.normal(size=(n, n_noise)))
    return np.concatenate(parts, axis=1)


def _provenance(cfg: GeneratorConfig, kind: str) -> dict:
    return {
        "generator": kind,
        "n_samples": cfg.n_samples,
        "n_features": cfg.n_features,
        "n_informative": cfg.n_informative,
        "n_redundant": cfg.n_redundant,
        "class_sep": cfg.class_sep,
        "tasks": [{"name": t.name, "class_fractions": list(t.class_fractions)}
                  for t in cfg.tasks],
        "seed": cfg.seed,
    }


def make_classification(cfg: GeneratorConfig) -> Dataset:
    """Single-task blob dataset: one Gaussian blob per class at a scaled
    hypercube vertex, plus redundant mixes and noise features."""
    if cfg.n_tasks != 1:
        raise GenerationError("make_classification generates exactly one task")
    task = cfg.tasks[0]
    rng = np.random.default_rng(cfg.seed)
    counts = _exact_counts(cfg.n_samples, task.class_fractions)
    labels = np.repeat(np.arange(task.n_classes), counts)
    labels = labels[rng.permutation(cfg.n_samples)]
    vertices = _class_vertices(rng, task.n_classes, cfg.n_informative)
    centers = vertices * cfg.class_sep
    if cfg.informative_scale is not None:
        centers = centers * np.asarray(cfg.informative_scale)
    informative = centers[labels] + rng.normal(size=(cfg.n_samples, cfg.n_informative))
    features = _assemble_features(rng, cfg, informative)
    return Dataset(
        features=features,
        feature_names=[f"f{i}" for i in range(cfg.n_features)],
        task_labels=labels.reshape(-1, 1),
        domain_labels=np.empty((cfg.n_samples, 0)),
        task_specs=[TaskSpec(task.name, task.n_classes)],
        domain_specs=[],
        provenance=_provenance(cfg, "classification"),
    )


def make_multilabel(cfg: GeneratorConfig) -> Dataset:
    """Multi-task dataset: isotropic informative features, one orthogonal
    linear decision function per task thresholded to the declared class
    fractions."""
    if cfg.n_tasks < 2:
        raise GenerationError("make_multilabel requires n_tasks >= 2")
    if cfg.n_tasks > cfg.n_informative:
        raise GenerationError("need n_informative >= n_tasks for orthogonal decision functions")
    rng = np.random.default_rng(cfg.seed)
    informative = rng.normal(size=(cfg.n_samples, cfg.n_informative))
    basis, _ = np.linalg.qr(rng.normal(size=(cfg.n_informative, cfg.n_tasks)))
    scores = informative @ basis
    label_cols = []
    for j, task in enumerate(cfg.tasks):
        counts = _exact_counts(cfg.n_samples, task.class_fractions)
        order = np.argsort(scores[:, j], kind="stable")
        col = np.empty(cfg.n_samples, dtype=np.int64)
        start = 0
        for cls, cnt in enumerate(counts):
            col[order[start:start + cnt]] = cls
            start += cnt
        label_cols.append(col)
    features = _assemble_features(rng, cfg, informative)
    return Dataset(
        features=features,
        feature_names=[f"f{i}" for i in range(cfg.n_features)],
        task_labels=np.column_stack(label_cols),
        domain_labels=np.empty((cfg.n_samples, 0)),
        task_specs=[TaskSpec(t.name, t.n_classes) for t in cfg.tasks],
        domain_specs=[],
        provenance=_provenance(cfg, "multilabel"),
    )


# ---------------------------------------------------------------------------
# Shift application
# ---------------------------------------------------------------------------

def _rank_uniform(z: np.ndarray) -> np.ndarray:
    """Map values to exact uniform marginals through their ranks."""
    ranks = np.empty(z.size, dtype=np.float64)
    ranks[np.argsort(z, kind="stable")] = np.arange(z.size)
    return (ranks + 0.5) / z.size


def apply_shift_plan(dataset: Dataset, plan: ShiftPlan, seed: int) -> Dataset:
    """Inject the plan's domains; returns a new dataset with shifted features
    and one appended domain label column per plan domain. Task labels are
    untouched."""
    n = dataset.n_samples
    features = dataset.features.copy()
    new_labels = []
    new_specs = []
    instance_records = []
    rng = np.random.default_rng(derive_seed(seed, "shift-plan"))
    prev_normal = None

    for dom in plan.domains:
        if isinstance(dom, CategoricalShift):
            fractions = np.asarray(dom.ratios) / sum(dom.ratios)
            counts = _exact_counts(n, fractions)
            assign = np.repeat(np.arange(len(dom.instances)), counts)
            assign = assign[rng.permutation(n)]
            for i, inst in enumerate(dom.instances):
                rows = np.where(assign == i)[0]
                idx = list(inst.feature_idx)
                features[np.ix_(rows, idx)] = inst.apply(features[np.ix_(rows, idx)])
                instance_records.append({
                    "domain": dom.name,
                    "instance_id": inst.instance_id,
                    "distance_rank": inst.distance_rank,
                    "feature_idx": list(inst.feature_idx),
                    "scale": inst.scale.tolist(),
                    "offset": inst.offset.tolist(),
                    "parameter_norm": inst.parameter_norm,
                })
            new_labels.append(assign.astype(np.float64))
            new_specs.append(DomainSpec(dom.name, "categorical", n_instances=len(dom.instances)))
        elif isinstance(dom, ContinuousShift):
            z = rng.normal(size=n)
            if dom.corr_with_prev is not None:
                if prev_normal is None:
                    raise GenerationError(
                        f"domain {dom.name!r}: corr_with_prev without a previous continuous domain"
                    )
                rho = float(dom.corr_with_prev)
                z = rho * prev_normal + math.sqrt(1.0 - rho**2) * z
            prev_normal = z
            c = _rank_uniform(z)
            idx = list(dom.feature_idx)
            strength = (c - 0.5)[:, None] * dom.response[None, :]
            if dom.kind == "translate":
                features[:, idx] += strength
            else:  # warp: smooth monotone deformation
                features[:, idx] += strength * np.tanh(features[:, idx])
            new_labels.append(c)
            new_specs.append(DomainSpec(dom.name, "continuous", n_bins=dom.n_bins))
        else:
            raise GenerationError(f"unknown shift domain type {type(dom).__name__}")

    domain_labels = np.column_stack([dataset.domain_labels] + [c.reshape(-1, 1) for c in new_labels]) \
        if new_labels else dataset.domain_labels
    provenance = dict(dataset.provenance)
    if instance_records:
        provenance["affine_instances"] = provenance.get("affine_instances", []) + instance_records
    return Dataset(
        features=features,
        feature_names=dataset.feature_names,
        task_labels=dataset.task_labels,
        domain_labels=domain_labels,
        task_specs=dataset.task_specs,
        domain_specs=list(dataset.domain_specs) + new_specs,
        norm_stats=dataset.norm_stats,
        provenance=provenance,
    )


# ---------------------------------------------------------------------------
# Shift-direction construction for the standard recipes
# ---------------------------------------------------------------------------

def _bounded_direction(rng, n_feats: int, max_mag: float, scale_weight: float = 0.2,
                       base: np.ndarray | None = None, jitter: float = 0.0) -> np.ndarray:
    """Unit vector over (scale-delta, offset) coordinates whose scale part
    keeps every multiplier positive up to magnitude ``max_mag``."""
    raw = np.concatenate([
        rng.normal(size=n_feats) * scale_weight,
        rng.normal(size=n_feats),
    ])
    if base is not None:
        raw = base + jitter * raw
    u = raw / np.linalg.norm(raw)
    cap = 0.75 / max_mag
    for _ in range(100):
        peak = np.max(np.abs(u[:n_feats]))
        if peak <= cap:
            break
        u[:n_feats] *= 0.8
        u /= np.linalg.norm(u)
    return u


def _instances_from_directions(feature_idx, directions, magnitudes) -> list:
    """Affine instances at the given magnitudes along unit directions;
    distance rank equals the position in the (sorted) magnitude list."""
    s = len(feature_idx)
    out = []
    for rank, (u, mag) in enumerate(zip(directions, magnitudes)):
        vec = u * mag
        out.append(AffineInstance(
            instance_id=rank,
            feature_idx=feature_idx,
            scale=1.0 + vec[:s],
            offset=vec[s:],
            distance_rank=rank,
        ))
    return out


# ---------------------------------------------------------------------------
# Standard datasets
# ---------------------------------------------------------------------------

# Base feature layout shared by the standard recipes (k = 20):
# informative f0-f4, redundant mixes f5-f17, noise f18-f19.
_BASE_K = 20
_BASE_INF = 5
_BASE_RED = 13
# Subset shifted by instances 0-3 of the "instrument" domain; every feature
# here has its class information duplicated elsewhere, so an encoder can
# drop the subset without losing task accuracy. These instances share one
# pure-translation direction (offset-profile family) at growing magnitude.
_INSTRUMENT_SUBSET = (2, 6, 9, 18)
# Instance 4 shifts a different subset (including informative f0/f1 whose
# information is *not* fully recoverable when dropped jointly with f2) and
# carries scale as well as offset components.
_ALTERNATE_SUBSET = (0, 1, 7, 19)
_INSTRUMENT_MAGNITUDES = (0.0, 2.0, 3.5, 5.0)
_ALTERNATE_MAGNITUDE = 6.5
_INSTRUMENT_RATIOS = (5, 5, 1, 1, 1)

_MANY_AFFINES_SUBSET = (1, 2, 6, 9, 11, 14, 18, 19)
_MANY_AFFINES_COUNT = 70
_MANY_AFFINES_STEP = 0.12
_MANY_AFFINES_JITTER = 0.45


def _offset_direction(rng, n_feats: int) -> np.ndarray:
    """Unit direction with zero scale part: a pure per-feature offset profile."""
    raw = np.concatenate([np.zeros(n_feats), rng.normal(size=n_feats)])
    return raw / np.linalg.norm(raw)


def _instrument_domain(seed: int) -> CategoricalShift:
    rng = np.random.default_rng(derive_seed(seed, "instrument-domain"))
    base_dir = _offset_direction(rng, len(_INSTRUMENT_SUBSET))
    main = _instances_from_directions(
        _INSTRUMENT_SUBSET,
        [base_dir] * len(_INSTRUMENT_MAGNITUDES),
        _INSTRUMENT_MAGNITUDES,
    )
    alt_dir = _bounded_direction(rng, len(_ALTERNATE_SUBSET), _ALTERNATE_MAGNITUDE)
    alt_vec = alt_dir * _ALTERNATE_MAGNITUDE
    s = len(_ALTERNATE_SUBSET)
    alt = AffineInstance(
        instance_id=len(main),
        feature_idx=_ALTERNATE_SUBSET,
        scale=1.0 + alt_vec[:s],
        offset=alt_vec[s:],
        distance_rank=len(main),
    )
    return CategoricalShift("instrument", main + [alt], _INSTRUMENT_RATIOS)


def _continuous_domains(seed: int) -> list:
    rng = np.random.default_rng(derive_seed(seed, "continuous-domains"))
    drift_resp = rng.normal(size=2)
    drift_resp = 0.9 * drift_resp / np.linalg.norm(drift_resp)
    cycle_resp = rng.uniform(0.6, 1.2, size=2)
    return [
        ContinuousShift("drift", (3, 8), "translate", drift_resp),
        ContinuousShift("cycle", (10, 11), "warp", cycle_resp, corr_with_prev=0.5),
    ]


def _many_affines_domain(seed: int) -> CategoricalShift:
    rng = np.random.default_rng(derive_seed(seed, "many-affines-domain"))
    n_feats = len(_MANY_AFFINES_SUBSET)
    magnitudes = [_MANY_AFFINES_STEP * j for j in range(_MANY_AFFINES_COUNT)]
    max_mag = magnitudes[-1]
    base = _bounded_direction(rng, n_feats, max_mag)
    directions = [base]
    for _ in range(1, _MANY_AFFINES_COUNT):
        directions.append(_bounded_direction(rng, n_feats, max_mag,
                                             base=base, jitter=_MANY_AFFINES_JITTER))
    instances = _instances_from_directions(_MANY_AFFINES_SUBSET, directions, magnitudes)
    return CategoricalShift("instrument", instances, (1,) * _MANY_AFFINES_COUNT)


def _base_config(name: str, n_samples: int, seed: int) -> GeneratorConfig:
    if name == "C":
        tasks = (
            TaskRecipe("task1", (2 / 7, 5 / 7)),
            TaskRecipe("task2", (0.5, 0.5)),
            TaskRecipe("task3", (2 / 7, 5 / 7)),
        )
    else:
        tasks = (TaskRecipe("task1", (0.5, 0.5)),)
    return GeneratorConfig(
        n_samples=n_samples,
        n_features=_BASE_K,
        n_informative=_BASE_INF,
        n_redundant=_BASE_RED,
        class_sep=1.0,
        tasks=tasks,
        seed=derive_seed(seed, f"base-{name}"),
    )


def standard_names() -> tuple:
    return ("A", "B", "C", "many-affines")


def _canonical_name(name: str) -> str:
    key = name.strip().lower().replace("_", "-").replace(" ", "-")
    if key in ("a", "b", "c"):
        return key.upper()
    if key in ("many-affines", "manyaffines"):
        return "many-affines"
    raise GenerationError(f"unknown standard dataset {name!r}; expected one of {standard_names()}")


def generate_standard(name: str, seed: int, scale=None) -> Dataset:
    """Build one of the standard benchmark datasets.

    ``scale`` overrides the sample count; for ``many-affines`` the default is
    the desk-scale 50000 and ``scale="full"`` selects the full 500000.
    """
    canonical = _canonical_name(name)
    if canonical == "many-affines":
        if scale == "full":
            n = FULL_MANY_AFFINES_SIZE
        else:
            n = int(scale) if scale is not None else DEFAULT_MANY_AFFINES_SIZE
        cfg = _base_config("MA", n, seed)
        base = make_classification(cfg)
        plan = ShiftPlan([_many_affines_domain(seed)])
    else:
        default_n = 26_000 if canonical == "C" else 13_000
        n = int(scale) if scale is not None else default_n
        cfg = _base_config(canonical, n, seed)
        base = make_classification(cfg) if canonical != "C" else make_multilabel(cfg)
        domains = [_instrument_domain(seed)]
        if canonical in ("B", "C"):
            domains += _continuous_domains(seed)
        plan = ShiftPlan(domains)
    shifted = apply_shift_plan(base, plan, seed)
    provenance = dict(shifted.provenance)
    provenance["standard_name"] = canonical
    provenance["master_seed"] = int(seed)
    return Dataset(
        features=shifted.features,
        feature_names=shifted.feature_names,
        task_labels=shifted.task_labels,
        domain_labels=shifted.domain_labels,
        task_specs=shifted.task_specs,
        domain_specs=shifted.domain_specs,
        provenance=provenance,
    )
