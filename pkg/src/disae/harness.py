"""Experiment orchestration: cross-validated training with repeats and
selection-score model picking, hyperparameter sweeps, the source-diversity
robustness study, and the downstream probe classifier.

Protocol per experiment: restrict the dataset to the declared source
instances, normalize with statistics fitted on that source split, train
``repeats`` models per fold, keep the repeat with the best selection score on
the fold's held-out part, and report fold-level and fold-mean terms. Failed
runs (non-finite losses or scores below the floor) are excluded; a fold with
no surviving repeat fails the experiment.

Accuracy terms for head-less models come from the built-in softmax probe
trained on the frozen representation; that substitution is recorded in every
run manifest.
"""

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset, DomainSpec, SplitPlan, load_dataset, make_folds, normalize
from .metrics import (
    JSD,
    W2,
    Dissimilarity,
    MetricError,
    ScoreReport,
    data_variation,
    model_variation,
    reliability_assessment,
    selection_score,
)
from .model import DisAEConfig, TrainingDiverged, train_fold
from .nn import AdamState, DenseNet, NonFiniteGradient, accuracy, softmax_cross_entropy
from .synth import GenerationError, generate_standard, standard_names
from .util import derive_seed, write_csv, write_manifest


class ExperimentError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Probe classifier (replacement for an external downstream classifier)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    hidden: tuple = (32,)
    epochs: int = 60
    lr: float = 1e-2
    batch_size: int = 256
    l2: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


def train_probe(features, labels, n_classes: int, seed: int,
                config: ProbeConfig = ProbeConfig()) -> DenseNet:
    """Softmax classifier on a frozen representation; deterministic."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    classes = np.unique(y)
    if classes.size < 2:
        raise ExperimentError("probe training split contains a single class")
    rng = np.random.default_rng(derive_seed(seed, "probe"))
    net = DenseNet.create((x.shape[1], *config.hidden, n_classes), rng)
    params = dict(net.param_blocks())
    opt = AdamState(lr=config.lr, l2=config.l2)
    n = x.shape[0]
    n_batches = max(1, -(-n // config.batch_size))
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            if idx.size == 0:
                continue
            acts = net.forward(x[idx])
            _, dlogits = softmax_cross_entropy(acts[-1], y[idx])
            grads, _ = net.backward(acts, dlogits)
            flat = {}
            for i, (dw, db) in enumerate(grads):
                flat[f"w{i}"] = dw
                flat[f"b{i}"] = db
            opt.step(params, flat)
    return net


def downstream_probe(representation, labels, train_mask, groups: dict,
                     n_classes: int, seed: int,
                     config: ProbeConfig = ProbeConfig()) -> list:
    """Train the probe on ``train_mask`` rows and report per-group overall
    and per-class accuracies. Returns rows of
    ``{scope, class, accuracy, n_samples}``."""
    x = np.asarray(representation, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    train_mask = np.asarray(train_mask, dtype=bool)
    net = train_probe(x[train_mask], y[train_mask], n_classes, seed, config)
    rows = []
    for scope, mask in groups.items():
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            continue
        logits = net.output(x[mask])
        pred = np.argmax(logits, axis=1)
        truth = y[mask]
        rows.append({"scope": scope, "class": "all",
                     "accuracy": float(np.mean(pred == truth)),
                     "n_samples": int(mask.sum())})
        for cls in np.unique(truth):
            sel = truth == cls
            rows.append({"scope": scope, "class": int(cls),
                         "accuracy": float(np.mean(pred[sel] == cls)),
                         "n_samples": int(sel.sum())})
    return rows


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricConfig:
    score_rho: Dissimilarity = W2
    reliability_rho: Dissimilarity = JSD
    n_directions: int = 512
    min_cell: int = 10
    probe: ProbeConfig = ProbeConfig()


@dataclass(frozen=True)
class SweepGrid:
    recon_weights: tuple = (1.0,)
    task_weights: tuple = (1.0,)
    adversary_weights: tuple = (1.0,)
    l2s: tuple = (1e-5,)
    lrs: tuple = (1e-3,)

    def __post_init__(self):
        for name in ("recon_weights", "task_weights", "adversary_weights", "l2s", "lrs"):
            vals = tuple(float(v) for v in getattr(self, name))
            if not vals:
                raise ExperimentError(f"sweep grid list {name} is empty")
            object.__setattr__(self, name, vals)

    def combos(self):
        return itertools.product(self.recon_weights, self.task_weights,
                                 self.adversary_weights, self.l2s, self.lrs)


@dataclass(frozen=True)
class ExperimentPlan:
    dataset: str
    models: dict
    source_instances: tuple
    target_instances: tuple
    folds: int = 5
    repeats: int = 3
    master_seed: int = 0
    val_fraction: float = 0.15
    shift_domain: int = 0
    dataset_scale: object = None
    metric: MetricConfig = MetricConfig()
    score_floor: float = -10.0

    def __post_init__(self):
        src = tuple(int(i) for i in self.source_instances)
        tgt = tuple(int(i) for i in self.target_instances)
        if set(src) & set(tgt):
            raise ExperimentError("source and target instance sets must be disjoint")
        if self.repeats < 1:
            raise ExperimentError("repeats must be >= 1")
        object.__setattr__(self, "source_instances", src)
        object.__setattr__(self, "target_instances", tgt)
        object.__setattr__(self, "models", dict(self.models))


# ---------------------------------------------------------------------------
# Dataset preparation
# ---------------------------------------------------------------------------

def resolve_dataset(name_or_path, seed: int, scale=None) -> Dataset:
    """Known standard names generate in memory; anything else loads a CSV."""
    text = str(name_or_path)
    try:
        return generate_standard(text, seed, scale=scale)
    except GenerationError:
        pass
    path = Path(text)
    if not path.exists():
        raise FileNotFoundError(
            f"{text!r} is neither a standard dataset {standard_names()} nor an existing file")
    return load_dataset(path)


def source_view(dataset: Dataset, shift_domain: int, source_instances):
    """Row-restricted, relabeled training view plus the source row mask.

    The shift domain's instance ids are compacted to 0..n_source-1 so that
    domain-head classes match the instances actually present in training.
    """
    col = dataset.domain_labels[:, shift_domain].astype(np.int64)
    source_instances = tuple(int(i) for i in source_instances)
    mask = np.isin(col, source_instances)
    if not mask.any():
        raise ExperimentError("no rows match the source instances")
    remap = {inst: j for j, inst in enumerate(source_instances)}
    labels = dataset.domain_labels[mask].copy()
    labels[:, shift_domain] = [remap[v] for v in col[mask]]
    specs = list(dataset.domain_specs)
    specs[shift_domain] = DomainSpec(specs[shift_domain].name, "categorical",
                                     n_instances=len(source_instances))
    view = Dataset(
        features=dataset.features[mask],
        feature_names=dataset.feature_names,
        task_labels=dataset.task_labels[mask],
        domain_labels=labels,
        task_specs=dataset.task_specs,
        domain_specs=specs,
        norm_stats=dataset.norm_stats,
        provenance=dict(dataset.provenance),
    )
    return view, mask


@dataclass
class Prepared:
    dataset: Dataset          # full dataset, normalized with source-fitted stats
    view: Dataset             # source rows, relabeled shift domain
    source_mask: np.ndarray
    plan_folds: SplitPlan
    raw_v_sup: dict           # fold -> identity-embedding variation on the fold's eval split
    metric_labels: np.ndarray  # (N, D) int labels for metrics (continuous binned on full data)


def prepare(dataset: Dataset, plan: ExperimentPlan) -> Prepared:
    stats_mask = np.isin(dataset.domain_labels[:, plan.shift_domain].astype(np.int64),
                         plan.source_instances)
    if not stats_mask.any():
        raise ExperimentError("no rows match the source instances")
    from .data import fit_norm_stats
    stats = fit_norm_stats(dataset.features[stats_mask])
    full, _ = normalize(dataset, stats)
    view, mask = source_view(full, plan.shift_domain, plan.source_instances)
    folds = make_folds(view, plan.folds, derive_seed(plan.master_seed, "folds"),
                       val_fraction=plan.val_fraction)
    metric_labels = full.domain_level_labels()
    raw_v_sup = {}
    for fold in range(plan.folds):
        idx = folds.eval_indices(fold)
        report = data_variation(
            view.features[idx], view.task_labels[idx],
            view.domain_level_labels()[idx],
            rho=plan.metric.score_rho, n_directions=plan.metric.n_directions,
            seed=derive_seed(plan.master_seed, "rawvar", fold),
            min_cell=plan.metric.min_cell)
        if report.v_sup <= 0:
            raise MetricError("raw-data variation is 0 on a fold; degenerate dataset")
        raw_v_sup[fold] = report.v_sup
    return Prepared(dataset=full, view=view, source_mask=mask, plan_folds=folds,
                    raw_v_sup=raw_v_sup, metric_labels=metric_labels)


# ---------------------------------------------------------------------------
# Training jobs
# ---------------------------------------------------------------------------

@dataclass
class RepeatOutcome:
    model_name: str
    repeat: int
    fold: int
    status: str               # "ok" | "failed"
    score: ScoreReport | None
    model: object             # DisAEModel when ok
    detail: str = ""
    best_epoch: int = -1


def _run_repeat(payload) -> RepeatOutcome:
    (model_name, repeat, fold, view, plan_folds, config,
     raw_v_sup, metric, master_seed, score_floor) = payload
    try:
        result = train_fold(view, plan_folds, fold, config)
    except TrainingDiverged as err:
        return RepeatOutcome(model_name, repeat, fold, "failed", None, None, detail=str(err))
    model = result.model
    eval_idx = plan_folds.eval_indices(fold)
    x_eval = view.features[eval_idx]
    t_eval = view.task_labels[eval_idx]
    d_eval = view.domain_level_labels()[eval_idx]
    override = None
    if not model.task_heads and view.n_tasks:
        # head-less baseline: accuracy term from the built-in probe
        fit_idx, val_idx = plan_folds.fit_val_indices(fold)
        train_idx = np.concatenate([fit_idx, val_idx])
        z_train = model.encode(view.features[train_idx])
        z_eval = model.encode(x_eval)
        override = []
        for j, spec in enumerate(view.task_specs):
            probe = train_probe(z_train, view.task_labels[train_idx, j], spec.n_classes,
                                derive_seed(master_seed, "scoreprobe", model_name, repeat, fold, j),
                                metric.probe)
            override.append(accuracy(probe.output(z_eval), t_eval[:, j]))
    try:
        score = selection_score(
            model, x_eval, t_eval, d_eval, raw_v_sup,
            rho=metric.score_rho, n_directions=metric.n_directions,
            seed=derive_seed(master_seed, "scorevar", fold),
            min_cell=metric.min_cell, task_accuracy_override=override)
    except (MetricError, NonFiniteGradient) as err:
        return RepeatOutcome(model_name, repeat, fold, "failed", None, None, detail=str(err))
    if not np.isfinite(score.score) or score.score < score_floor:
        return RepeatOutcome(model_name, repeat, fold, "failed", score, None,
                             detail=f"score {score.score:.3f} below floor {score_floor}")
    return RepeatOutcome(model_name, repeat, fold, "ok", score, model,
                         best_epoch=result.history["best_epoch"])


def _run_all(payloads, workers: int) -> list:
    if workers <= 1:
        return [_run_repeat(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_repeat, payloads))


def _train_and_select(prepared: Prepared, plan: ExperimentPlan, models: dict,
                      workers: int = 1):
    """All (model, repeat, fold) cells; returns (winners, outcomes) where
    winners[model][fold] is the best surviving repeat by selection score."""
    payloads = []
    for model_name, config in models.items():
        for repeat in range(plan.repeats):
            seeded = replace(config, seed=derive_seed(plan.master_seed, "train",
                                                      model_name, repeat))
            for fold in range(plan.folds):
                payloads.append((model_name, repeat, fold, prepared.view,
                                 prepared.plan_folds, seeded, prepared.raw_v_sup[fold],
                                 plan.metric, plan.master_seed, plan.score_floor))
    outcomes = _run_all(payloads, workers)
    outcomes.sort(key=lambda o: (o.model_name, o.fold, o.repeat))
    winners = {name: {} for name in models}
    for name in models:
        for fold in range(plan.folds):
            cell = [o for o in outcomes if o.model_name == name and o.fold == fold
                    and o.status == "ok"]
            if not cell:
                failures = [o.detail for o in outcomes
                            if o.model_name == name and o.fold == fold]
                raise ExperimentError(
                    f"model {name!r} fold {fold}: all {plan.repeats} repeats failed: {failures}")
            winners[name][fold] = max(cell, key=lambda o: (o.score.score, -o.repeat))
    return winners, outcomes


# ---------------------------------------------------------------------------
# run_experiment
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    plan: ExperimentPlan
    winners: dict
    outcomes: list
    score_rows: list
    variation_rows: list
    probe_rows: list
    out_dir: Path | None


def _score_rows(plan: ExperimentPlan, task_names, winners, outcomes) -> list:
    rows = []
    for name in winners:
        terms = []
        for fold in range(plan.folds):
            w = winners[name][fold]
            row = {"model": name, "fold": fold, "repeat": w.repeat, "status": "ok",
                   "acc_term": w.score.acc_term, "var_term": w.score.var_term,
                   "rec_term": w.score.rec_term, "score": w.score.score}
            for j, t in enumerate(task_names):
                row[f"acc_{t}"] = (w.score.per_task_acc[j]
                                   if j < len(w.score.per_task_acc) else "")
            rows.append(row)
            terms.append((w.score.acc_term, w.score.var_term, w.score.rec_term,
                          w.score.per_task_acc))
        accs = [t[0] for t in terms]
        variations = [t[1] for t in terms]
        recs = [t[2] for t in terms]
        mean_row = {"model": name, "fold": "mean", "repeat": "",
                    "status": f"{len(terms)}/{plan.folds} folds",
                    "acc_term": float(np.mean(accs)),
                    "var_term": float(np.mean(variations)),
                    "rec_term": float(np.mean(recs)),
                    "score": float(np.mean(accs) - np.mean(variations) - np.mean(recs))}
        for j, t in enumerate(task_names):
            vals = [t_[3][j] for t_ in terms if j < len(t_[3])]
            mean_row[f"acc_{t}"] = float(np.mean(vals)) if vals else ""
        rows.append(mean_row)
    n_failed = sum(1 for o in outcomes if o.status == "failed")
    if n_failed:
        rows.append({"model": "(failed runs)", "fold": "", "repeat": n_failed,
                     "status": "excluded", "acc_term": "", "var_term": "",
                     "rec_term": "", "score": "",
                     **{f"acc_{t}": "" for t in task_names}})
    return rows


def _best_overall(winners: dict, name: str):
    return max(winners[name].values(), key=lambda o: o.score.score)


def _variation_scopes(dataset: Dataset, plan: ExperimentPlan, source_mask):
    col = dataset.domain_labels[:, plan.shift_domain].astype(np.int64)
    scopes = {"source": source_mask.copy()}
    for inst in plan.target_instances:
        scopes[f"source+inst{inst}"] = source_mask | (col == inst)
    scopes["source+target"] = source_mask | np.isin(col, plan.target_instances)
    return scopes


def _variation_rows(prepared: Prepared, plan: ExperimentPlan, reps: dict) -> list:
    """Per-domain variation of each representation per scope, for both the
    score and reliability dissimilarities. Per-instance scopes cover the
    shift domain only; other domains use source and source+target."""
    dataset = prepared.dataset
    domain_names = [s.name for s in dataset.domain_specs]
    scopes = _variation_scopes(dataset, plan, prepared.source_mask)
    rows = []
    for rho in (plan.metric.score_rho, plan.metric.reliability_rho):
        for rep_name, z in reps.items():
            for scope_name, mask in scopes.items():
                per_instance = scope_name.startswith("source+inst")
                for delta, dom_name in enumerate(domain_names):
                    if per_instance and delta != plan.shift_domain:
                        continue
                    report = model_variation(
                        z[mask], dataset.task_labels[mask],
                        prepared.metric_labels[mask][:, [delta]],
                        rho=rho, n_directions=plan.metric.n_directions,
                        seed=derive_seed(plan.master_seed, "reliability", scope_name, delta),
                        min_cell=plan.metric.min_cell)
                    rows.append({"representation": rep_name, "domain": dom_name,
                                 "scope": scope_name, "rho": report.rho,
                                 "v_sup": report.v_sup,
                                 "n_directions": report.n_directions})
    return rows


def _probe_rows(prepared: Prepared, plan: ExperimentPlan, reps: dict) -> list:
    dataset = prepared.dataset
    col = dataset.domain_labels[:, plan.shift_domain].astype(np.int64)
    rng = np.random.default_rng(derive_seed(plan.master_seed, "probe-split"))
    src_idx = np.where(prepared.source_mask)[0]
    perm = rng.permutation(src_idx.size)
    n_eval = max(1, int(round(src_idx.size * 0.2)))
    eval_src = np.zeros(dataset.n_samples, dtype=bool)
    eval_src[src_idx[perm[:n_eval]]] = True
    train_mask = prepared.source_mask & ~eval_src
    groups = {"source": eval_src}
    for inst in plan.target_instances:
        groups[f"inst{inst}"] = col == inst
    rows = []
    for rep_name, z in reps.items():
        for j, spec in enumerate(dataset.task_specs):
            probe_rows = downstream_probe(
                z, dataset.task_labels[:, j], train_mask, groups, spec.n_classes,
                derive_seed(plan.master_seed, "probe", rep_name, j), plan.metric.probe)
            for r in probe_rows:
                rows.append({"representation": rep_name, "task": spec.name, **r})
    return rows


def run_experiment(plan: ExperimentPlan, out_dir=None, workers: int = 1) -> ExperimentResult:
    """Full cross-validated comparison of the plan's models; emits
    scores.csv, variation.csv, probe.csv, and a run manifest when ``out_dir``
    is given."""
    dataset = resolve_dataset(plan.dataset, plan.master_seed, plan.dataset_scale)
    prepared = prepare(dataset, plan)
    winners, outcomes = _train_and_select(prepared, plan, plan.models, workers)

    task_names = [s.name for s in dataset.task_specs]
    score_rows = _score_rows(plan, task_names, winners, outcomes)

    reps = {"raw": prepared.dataset.features}
    for name in plan.models:
        best = _best_overall(winners, name)
        reps[name] = best.model.encode(prepared.dataset.features)
    variation_rows = _variation_rows(prepared, plan, reps)
    probe_rows = _probe_rows(prepared, plan, reps)

    result = ExperimentResult(plan=plan, winners=winners, outcomes=outcomes,
                              score_rows=score_rows, variation_rows=variation_rows,
                              probe_rows=probe_rows,
                              out_dir=Path(out_dir) if out_dir else None)
    if out_dir:
        out_dir = Path(out_dir)
        fields = ["model", "fold", "repeat", "status", "acc_term", "var_term",
                  "rec_term", "score"] + [f"acc_{t}" for t in task_names]
        write_csv(out_dir / "scores.csv", fields, score_rows)
        write_csv(out_dir / "variation.csv",
                  ["representation", "domain", "scope", "rho", "v_sup", "n_directions"],
                  variation_rows)
        write_csv(out_dir / "probe.csv",
                  ["representation", "task", "scope", "class", "accuracy", "n_samples"],
                  probe_rows)
        write_manifest(out_dir, "run_experiment", _plan_manifest(plan),
                       {"master_seed": plan.master_seed})
    return result


def _plan_manifest(plan: ExperimentPlan) -> dict:
    from dataclasses import asdict
    d = {
        "dataset": str(plan.dataset),
        "models": {name: asdict(cfg) for name, cfg in plan.models.items()},
        "source_instances": list(plan.source_instances),
        "target_instances": list(plan.target_instances),
        "folds": plan.folds,
        "repeats": plan.repeats,
        "master_seed": plan.master_seed,
        "val_fraction": plan.val_fraction,
        "shift_domain": plan.shift_domain,
        "dataset_scale": plan.dataset_scale,
        "score_floor": plan.score_floor,
        "metric": {
            "score_rho": plan.metric.score_rho.describe(),
            "reliability_rho": plan.metric.reliability_rho.describe(),
            "n_directions": plan.metric.n_directions,
            "min_cell": plan.metric.min_cell,
            "probe": asdict(plan.metric.probe),
        },
    }
    return d


# ---------------------------------------------------------------------------
# Hyperparameter sweep
# ---------------------------------------------------------------------------

def sweep(plan: ExperimentPlan, grid: SweepGrid, base: DisAEConfig,
          out_dir=None, workers: int = 1) -> list:
    """Evaluate the full Cartesian product of the grid; rank configurations
    by fold-mean selection score. Returns the ranked rows."""
    dataset = resolve_dataset(plan.dataset, plan.master_seed, plan.dataset_scale)
    prepared = prepare(dataset, plan)
    models = {}
    combo_params = {}
    for combo in grid.combos():
        rw, tw, aw, l2, lr = combo
        label = f"rw={rw:g},tw={tw:g},aw={aw:g},l2={l2:g},lr={lr:g}"
        models[label] = replace(base, recon_weight=rw, task_weight=tw,
                                adversary_weight=aw, l2=l2, lr=lr)
        combo_params[label] = combo
    winners, outcomes = _train_and_select(prepared, plan, models, workers)
    rows = []
    for label in models:
        cells = [winners[label][f].score for f in range(plan.folds)]
        rows.append({
            "config": label,
            "recon_weight": combo_params[label][0],
            "task_weight": combo_params[label][1],
            "adversary_weight": combo_params[label][2],
            "l2": combo_params[label][3],
            "lr": combo_params[label][4],
            "mean_score": float(np.mean([s.score for s in cells])),
            "mean_acc": float(np.mean([s.acc_term for s in cells])),
            "mean_var": float(np.mean([s.var_term for s in cells])),
            "mean_rec": float(np.mean([s.rec_term for s in cells])),
        })
    rows.sort(key=lambda r: -r["mean_score"])
    for rank, row in enumerate(rows):
        row["rank"] = rank + 1
    if out_dir:
        out_dir = Path(out_dir)
        write_csv(out_dir / "sweep.csv",
                  ["rank", "config", "recon_weight", "task_weight", "adversary_weight",
                   "l2", "lr", "mean_score", "mean_acc", "mean_var", "mean_rec"],
                  rows)
        write_manifest(out_dir, "sweep", _plan_manifest(plan),
                       {"master_seed": plan.master_seed})
    return rows


# ---------------------------------------------------------------------------
# Robustness study on the many-instance dataset
# ---------------------------------------------------------------------------

def _robustness_cell(payload):
    (model_name, config, count, dataset, shift_domain, metric,
     master_seed, repeats, score_floor) = payload
    ranks = _instance_rank_order(dataset, shift_domain)
    source = ranks[:count]
    targets = ranks[count:]
    plan = ExperimentPlan(
        dataset="(in-memory)", models={model_name: config},
        source_instances=tuple(source), target_instances=tuple(targets),
        folds=5, repeats=repeats, master_seed=derive_seed(master_seed, "robust", model_name, count),
        shift_domain=shift_domain, metric=metric, score_floor=score_floor)
    prepared = prepare(dataset, plan)
    fold = 0
    payloads = []
    for repeat in range(repeats):
        seeded = replace(config, seed=derive_seed(plan.master_seed, "train", model_name, repeat))
        payloads.append((model_name, repeat, fold, prepared.view, prepared.plan_folds,
                         seeded, prepared.raw_v_sup[fold], metric, plan.master_seed,
                         score_floor))
    outcomes = [_run_repeat(p) for p in payloads]
    ok = [o for o in outcomes if o.status == "ok"]
    if not ok:
        return [{"model": model_name, "source_count": count, "target_rank": r,
                 "scope": f"inst{r}", "v_sup": "", "accuracy": "", "n_samples": 0,
                 "status": "failed"} for r in [-1] + list(targets)]
    best = max(ok, key=lambda o: (o.score.score, -o.repeat))
    model = best.model

    col = prepared.dataset.domain_labels[:, shift_domain].astype(np.int64)
    z = model.encode(prepared.dataset.features)
    src_mask = prepared.source_mask
    tasks = prepared.dataset.task_labels

    # probe trained on the training side of fold 0 (source rows)
    view_rows = np.where(src_mask)[0]
    train_rows = view_rows[prepared.plan_folds.train_indices(fold)]
    eval_rows = view_rows[prepared.plan_folds.eval_indices(fold)]
    spec = prepared.dataset.task_specs[0]
    probe = train_probe(z[train_rows], tasks[train_rows, 0], spec.n_classes,
                        derive_seed(plan.master_seed, "robustprobe", model_name, count),
                        metric.probe)

    rows = []
    # source point: accuracy on held-out source rows; spread between the
    # lower- and upper-rank halves of the source instances
    src_acc = accuracy(probe.output(z[eval_rows]), tasks[eval_rows, 0])
    split_rank = source[len(source) // 2] if len(source) > 1 else source[0]
    half = (col[src_mask] >= split_rank).astype(np.int64)
    if len(source) > 1 and np.unique(half).size == 2:
        rep = model_variation(z[src_mask], tasks[src_mask], half.reshape(-1, 1),
                              rho=metric.reliability_rho,
                              n_directions=metric.n_directions,
                              seed=derive_seed(plan.master_seed, "robustvar", count, -1),
                              min_cell=metric.min_cell)
        src_v = rep.v_sup
    else:
        src_v = 0.0
    rows.append({"model": model_name, "source_count": count, "target_rank": -1,
                 "scope": "source", "v_sup": src_v, "accuracy": src_acc,
                 "n_samples": int(eval_rows.size), "status": "ok"})

    for rank in targets:
        inst_mask = col == rank
        mask = src_mask | inst_mask
        binary = inst_mask[mask].astype(np.int64).reshape(-1, 1)
        try:
            rep = model_variation(z[mask], tasks[mask], binary,
                                  rho=metric.reliability_rho,
                                  n_directions=metric.n_directions,
                                  seed=derive_seed(plan.master_seed, "robustvar", count, rank),
                                  min_cell=metric.min_cell)
            acc = accuracy(probe.output(z[inst_mask]), tasks[inst_mask, 0])
            rows.append({"model": model_name, "source_count": count, "target_rank": int(rank),
                         "scope": f"inst{rank}", "v_sup": rep.v_sup, "accuracy": acc,
                         "n_samples": int(inst_mask.sum()), "status": "ok"})
        except MetricError as err:
            rows.append({"model": model_name, "source_count": count, "target_rank": int(rank),
                         "scope": f"inst{rank}", "v_sup": "", "accuracy": "",
                         "n_samples": int(inst_mask.sum()), "status": f"failed: {err}"})
    return rows


def _instance_rank_order(dataset: Dataset, shift_domain: int) -> list:
    """Instance ids ordered by distance rank (recorded in provenance when
    available, otherwise the id order)."""
    records = [r for r in dataset.provenance.get("affine_instances", [])
               if r["domain"] == dataset.domain_specs[shift_domain].name]
    if records:
        return [r["instance_id"] for r in sorted(records, key=lambda r: r["distance_rank"])]
    ids = np.unique(dataset.domain_labels[:, shift_domain].astype(np.int64))
    return ids.tolist()


def robustness_study(dataset: Dataset, source_counts, models: dict,
                     master_seed: int = 0, shift_domain: int = 0,
                     metric: MetricConfig = MetricConfig(), repeats: int = 2,
                     score_floor: float = -10.0, out_dir=None,
                     workers: int = 1) -> list:
    """Train each model on the ``c`` lowest-rank instances for each source
    count ``c`` and evaluate probe accuracy and source-vs-target variation on
    every held-out instance, ordered by distance rank (the robustness grid)."""
    n_instances = np.unique(dataset.domain_labels[:, shift_domain].astype(np.int64)).size
    for c in source_counts:
        if c > n_instances:
            raise ExperimentError(f"source count {c} exceeds {n_instances} instances")
        if c < 2:
            raise ExperimentError("source counts must be >= 2")
    payloads = [(name, config, int(c), dataset, shift_domain, metric, master_seed,
                 repeats, score_floor)
                for name, config in models.items() for c in source_counts]
    if workers <= 1:
        cell_rows = [_robustness_cell(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cell_rows = list(pool.map(_robustness_cell, payloads))
    rows = [r for cell in cell_rows for r in cell]
    rows.sort(key=lambda r: (r["model"], r["source_count"], r["target_rank"]))
    if out_dir:
        out_dir = Path(out_dir)
        write_csv(out_dir / "robustness.csv",
                  ["model", "source_count", "target_rank", "scope", "v_sup",
                   "accuracy", "n_samples", "status"], rows)
        write_manifest(out_dir, "robustness_study",
                       {"source_counts": [int(c) for c in source_counts],
                        "models": list(models), "repeats": repeats},
                       {"master_seed": master_seed})
    return rows
