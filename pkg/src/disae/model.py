"""Disentangled autoencoder: encoder/decoder plus task heads and
adversarial (gradient-reversed) domain heads on the latent space.

The training objective is

    total = recon_weight * MSE(decode(encode(x)), x)
          + task_weight  * sum_j CE(task_head_j(encode(x)), t_j)
          +                sum_j CE(domain_head_j(R(encode(x))), d_j)

where R is the gradient-reversal pseudo-layer. A single optimizer step
updates every parameter group at once; the reversal realizes the adversarial
minus sign on the encoder, so the encoder descends the reconstruction and
task losses while ascending the domain losses. The vanilla autoencoder
baseline is the same configuration with the heads removed.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset, SplitPlan, TaskSpec, weighted_batches
from .nn import (
    AdamState,
    DenseNet,
    GradReversal,
    NonFiniteGradient,
    PlateauSchedule,
    accuracy,
    mse,
    softmax_cross_entropy,
)
from .util import derive_seed

CHECKPOINT_MAGIC = b"DAECKPT\x00"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_finite=None):
        super().__init__(message)
        self.last_finite = last_finite or {}


class CheckpointError(RuntimeError):
    pass


class ChecksumError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


@dataclass(frozen=True)
class DisAEConfig:
    encoder_widths: tuple = (20, 32, 16, 8)   # input ... latent
    task_head_hidden: tuple = None            # defaults to one hidden layer of latent width
    domain_head_hidden: tuple = None
    recon_weight: float = 1.0                 # reconstruction term weight
    task_weight: float = 1.0                  # per-task cross-entropy weight
    adversary_weight: float = 1.0             # gradient-reversal strength on domain heads
    adversary_warmup: int = 0                 # epochs ramping the reversal strength from 0
    l2: float = 1e-5
    lr: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 150
    patience: int = 10
    lr_factor: float = 0.5
    min_lr: float = 1e-5
    seed: int = 0
    balance_task: str | None = None
    heads_enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        latent = self.encoder_widths[-1]
        th = self.task_head_hidden if self.task_head_hidden is not None else (latent,)
        dh = self.domain_head_hidden if self.domain_head_hidden is not None else (latent,)
        object.__setattr__(self, "task_head_hidden", tuple(int(w) for w in th))
        object.__setattr__(self, "domain_head_hidden", tuple(int(w) for w in dh))
        if len(self.encoder_widths) < 2:
            raise ValueError("encoder needs at least input and latent widths")
        for name in ("recon_weight", "task_weight", "adversary_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def latent_dim(self) -> int:
        return self.encoder_widths[-1]

    @property
    def decoder_widths(self) -> tuple:
        return tuple(reversed(self.encoder_widths))


def make_vanilla_ae(config: DisAEConfig) -> DisAEConfig:
    """Same widths and depths, zero task and domain heads."""
    return replace(config, heads_enabled=False)


@dataclass
class LossBreakdown:
    reconstruction: float
    per_task: list
    per_domain: list
    total: float

    @classmethod
    def combine(cls, reconstruction, per_task, per_domain) -> "LossBreakdown":
        total = float(reconstruction) + float(sum(per_task)) + float(sum(per_domain))
        return cls(float(reconstruction), [float(x) for x in per_task],
                   [float(x) for x in per_domain], total)

    def as_dict(self):
        return {"reconstruction": self.reconstruction, "per_task": self.per_task,
                "per_domain": self.per_domain, "total": self.total}


@dataclass
class DisAEModel:
    config: DisAEConfig
    encoder: DenseNet
    decoder: DenseNet
    task_heads: list
    domain_heads: list
    reversal: GradReversal
    task_specs: tuple = ()
    domain_names: tuple = ()
    domain_levels: tuple = ()
    norm_stats: object = None

    @classmethod
    def create(cls, config: DisAEConfig, task_specs, domain_names, domain_levels,
               norm_stats=None) -> "DisAEModel":
        """Build all parameter groups from one seeded stream (encoder, decoder,
        task heads, domain heads, in that order)."""
        rng = np.random.default_rng(derive_seed(config.seed, "init"))
        latent = config.latent_dim
        encoder = DenseNet.create(config.encoder_widths, rng)
        decoder = DenseNet.create(config.decoder_widths, rng)
        task_heads, domain_heads = [], []
        if config.heads_enabled:
            for spec in task_specs:
                widths = (latent, *config.task_head_hidden, spec.n_classes)
                task_heads.append(DenseNet.create(widths, rng))
            for levels in domain_levels:
                widths = (latent, *config.domain_head_hidden, int(levels))
                domain_heads.append(DenseNet.create(widths, rng))
        return cls(
            config=config,
            encoder=encoder,
            decoder=decoder,
            task_heads=task_heads,
            domain_heads=domain_heads,
            reversal=GradReversal(config.adversary_weight),
            task_specs=tuple(task_specs) if config.heads_enabled else (),
            domain_names=tuple(domain_names) if config.heads_enabled else (),
            domain_levels=tuple(int(x) for x in domain_levels) if config.heads_enabled else (),
            norm_stats=norm_stats,
        )

    # -- parameter bookkeeping ------------------------------------------------

    def net_groups(self):
        yield "encoder", self.encoder
        yield "decoder", self.decoder
        for i, net in enumerate(self.task_heads):
            yield f"task{i}", net
        for i, net in enumerate(self.domain_heads):
            yield f"domain{i}", net

    def param_dict(self) -> dict:
        return {f"{group}/{name}": arr
                for group, net in self.net_groups()
                for name, arr in net.param_blocks()}

    def snapshot(self) -> dict:
        return {k: v.copy() for k, v in self.param_dict().items()}

    def restore(self, snapshot: dict) -> None:
        for key, value in snapshot.items():
            group, name = key.split("/", 1)
            for g, net in self.net_groups():
                if g == group:
                    net.set_param(name, value)
                    break

    # -- inference ------------------------------------------------------------

    def encode(self, x: np.ndarray) -> np.ndarray:
        return self.encoder.output(np.asarray(x, dtype=np.float64))

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return self.decoder.output(self.encode(x))

    def task_logits(self, z: np.ndarray) -> list:
        return [head.output(z) for head in self.task_heads]

    def domain_logits(self, z: np.ndarray) -> list:
        return [head.output(self.reversal.forward(z)) for head in self.domain_heads]


def compute_loss(model: DisAEModel, x: np.ndarray, task_labels: np.ndarray | None = None,
                 domain_labels: np.ndarray | None = None) -> LossBreakdown:
    """Evaluate the full objective on a batch (no gradients)."""
    cfg = model.config
    x = np.asarray(x, dtype=np.float64)
    z = model.encode(x)
    rec, _ = mse(model.decoder.output(z), x)
    per_task = []
    if model.task_heads:
        if task_labels is None or np.asarray(task_labels).shape[1] < len(model.task_heads):
            raise ValueError("missing task label column")
        for j, head in enumerate(model.task_heads):
            ce, _ = softmax_cross_entropy(head.output(z), np.asarray(task_labels)[:, j])
            per_task.append(cfg.task_weight * ce)
    per_domain = []
    if model.domain_heads:
        if domain_labels is None or np.asarray(domain_labels).shape[1] < len(model.domain_heads):
            raise ValueError("missing domain label column")
        for j, head in enumerate(model.domain_heads):
            ce, _ = softmax_cross_entropy(head.output(z), np.asarray(domain_labels)[:, j])
            per_domain.append(ce)
    return LossBreakdown.combine(cfg.recon_weight * rec, per_task, per_domain)


def relative_reconstruction_error(x: np.ndarray, xhat: np.ndarray) -> float:
    """sqrt of reconstruction MSE over the mean squared sample norm."""
    x = np.asarray(x, dtype=np.float64)
    denom = float(np.mean(np.sum(x**2, axis=1)))
    if denom == 0.0:
        return 0.0
    num = float(np.mean(np.sum((x - xhat) ** 2, axis=1)))
    return math.sqrt(num / denom)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _gradient_step(model, optimizer, params, xb, tb, db):
    """One combined forward/backward/update on a batch; returns the loss
    breakdown and the encoder's applied gradient blocks."""
    cfg = model.config
    enc_acts = model.encoder.forward(xb)
    z = enc_acts[-1]
    dec_acts = model.decoder.forward(z)
    rec_raw, drec = mse(dec_acts[-1], xb)
    dec_grads, dz = model.decoder.backward(dec_acts, cfg.recon_weight * drec)
    grads = {f"decoder/{n}": g for (n, _), g in
             zip(model.decoder.param_blocks(), _flatten(dec_grads))}

    per_task = []
    for j, head in enumerate(model.task_heads):
        acts = head.forward(z)
        ce, dlogits = softmax_cross_entropy(acts[-1], tb[:, j])
        head_grads, dz_j = head.backward(acts, cfg.task_weight * dlogits)
        per_task.append(cfg.task_weight * ce)
        dz = dz + dz_j
        grads.update({f"task{j}/{n}": g for (n, _), g in
                      zip(head.param_blocks(), _flatten(head_grads))})

    per_domain = []
    for j, head in enumerate(model.domain_heads):
        acts = head.forward(model.reversal.forward(z))
        ce, dlogits = softmax_cross_entropy(acts[-1], db[:, j])
        head_grads, dz_j = head.backward(acts, dlogits)
        per_domain.append(ce)
        dz = dz + model.reversal.backward(dz_j)
        grads.update({f"domain{j}/{n}": g for (n, _), g in
                      zip(head.param_blocks(), _flatten(head_grads))})

    enc_grads, _ = model.encoder.backward(enc_acts, dz)
    grads.update({f"encoder/{n}": g for (n, _), g in
                  zip(model.encoder.param_blocks(), _flatten(enc_grads))})

    breakdown = LossBreakdown.combine(cfg.recon_weight * rec_raw, per_task, per_domain)
    optimizer.step(params, grads)
    return breakdown, grads


def _flatten(layer_grads):
    for dw, db_ in layer_grads:
        yield dw
        yield db_


def encoder_gradients(model: DisAEModel, xb, tb, db) -> dict:
    """Applied encoder gradient blocks for a batch, without updating anything.

    Equals d(recon + task terms)/d theta minus adversary_weight times
    d(domain terms)/d theta.
    """
    cfg = model.config
    enc_acts = model.encoder.forward(xb)
    z = enc_acts[-1]
    dec_acts = model.decoder.forward(z)
    _, drec = mse(dec_acts[-1], xb)
    _, dz = model.decoder.backward(dec_acts, cfg.recon_weight * drec)
    for j, head in enumerate(model.task_heads):
        acts = head.forward(z)
        _, dlogits = softmax_cross_entropy(acts[-1], tb[:, j])
        _, dz_j = head.backward(acts, cfg.task_weight * dlogits)
        dz = dz + dz_j
    for j, head in enumerate(model.domain_heads):
        acts = head.forward(z)
        _, dlogits = softmax_cross_entropy(acts[-1], db[:, j])
        _, dz_j = head.backward(acts, dlogits)
        dz = dz + model.reversal.backward(dz_j)
    enc_grads, _ = model.encoder.backward(enc_acts, dz)
    return {name: g for (name, _), g in zip(model.encoder.param_blocks(), _flatten(enc_grads))}


def validation_proxy(model: DisAEModel, x, task_labels) -> float:
    """Cheap per-epoch selection proxy: mean task-head accuracy minus the
    relative reconstruction error (accuracy term 0 for head-less models)."""
    z = model.encode(x)
    xhat = model.decoder.output(z)
    acc = 0.0
    if model.task_heads:
        accs = [accuracy(head.output(z), np.asarray(task_labels)[:, j])
                for j, head in enumerate(model.task_heads)]
        acc = float(np.mean(accs))
    return acc - relative_reconstruction_error(x, xhat)


@dataclass
class FoldResult:
    fold: int
    model: DisAEModel
    history: dict


def train_fold(dataset: Dataset, plan: SplitPlan, fold: int, config: DisAEConfig) -> FoldResult:
    """Train one model on the fold's fit split, scheduling and best-epoch
    selection on its validation carve-out. The dataset must be normalized;
    continuous domains are binned here (fit on this dataset's own values)."""
    fit_idx, val_idx = plan.fit_val_indices(fold)
    x = dataset.features
    t = dataset.task_labels
    d = dataset.domain_level_labels() if dataset.n_domains else np.empty((dataset.n_samples, 0), dtype=np.int64)
    levels = [s.n_levels for s in dataset.domain_specs]
    model = DisAEModel.create(config, dataset.task_specs, [s.name for s in dataset.domain_specs],
                              levels, norm_stats=dataset.norm_stats)
    params = model.param_dict()
    schedule = PlateauSchedule(lr=config.lr, patience=config.patience,
                               factor=config.lr_factor, min_lr=config.min_lr)
    optimizer = AdamState(lr=config.lr, l2=config.l2)
    rng = np.random.default_rng(derive_seed(config.seed, "batches", fold))

    sampler = None
    if config.balance_task is not None:
        spec = next((s for s in dataset.task_specs if s.name == config.balance_task), None)
        if spec is None:
            raise ValueError(f"balance_task {config.balance_task!r} not in dataset")
        sampler = weighted_batches(dataset, spec, config.batch_size,
                                   derive_seed(config.seed, "sampler", fold), indices=fit_idx)

    n_batches = max(1, math.ceil(fit_idx.size / config.batch_size))
    history = {"train_total": [], "train_reconstruction": [], "train_task": [],
               "train_domain": [], "val_total": [], "val_proxy": [], "lr": []}
    best_proxy = -np.inf
    best_snapshot = model.snapshot()
    best_epoch = -1
    last_finite = None

    for epoch in range(config.max_epochs):
        if config.adversary_warmup > 0:
            ramp = min(1.0, (epoch + 1) / config.adversary_warmup)
            model.reversal = GradReversal(config.adversary_weight * ramp)
        if sampler is None:
            order = fit_idx[rng.permutation(fit_idx.size)]
            batches = [order[i * config.batch_size:(i + 1) * config.batch_size]
                       for i in range(n_batches)]
        else:
            batches = [next(sampler) for _ in range(n_batches)]
        epoch_terms = []
        for idx in batches:
            if idx.size == 0:
                continue
            try:
                breakdown, _ = _gradient_step(model, optimizer, params,
                                              x[idx], t[idx], d[idx])
            except NonFiniteGradient as err:
                raise TrainingDiverged(
                    f"epoch {epoch}: {err}; last finite losses {last_finite}",
                    last_finite) from err
            if not np.isfinite(breakdown.total):
                raise TrainingDiverged(
                    f"epoch {epoch}: non-finite loss {breakdown.as_dict()}; "
                    f"last finite losses {last_finite}", last_finite)
            last_finite = breakdown.as_dict()
            epoch_terms.append(breakdown)

        val_breakdown = compute_loss(model, x[val_idx], t[val_idx], d[val_idx])
        proxy = validation_proxy(model, x[val_idx], t[val_idx])
        history["train_total"].append(float(np.mean([b.total for b in epoch_terms])))
        history["train_reconstruction"].append(float(np.mean([b.reconstruction for b in epoch_terms])))
        history["train_task"].append(float(np.mean([sum(b.per_task) for b in epoch_terms])))
        history["train_domain"].append(float(np.mean([sum(b.per_domain) for b in epoch_terms])))
        history["val_total"].append(val_breakdown.total)
        history["val_proxy"].append(proxy)
        history["lr"].append(optimizer.lr)
        if proxy > best_proxy:
            best_proxy = proxy
            best_snapshot = model.snapshot()
            best_epoch = epoch
        optimizer.lr = schedule.update(val_breakdown.total)

    model.restore(best_snapshot)
    model.reversal = GradReversal(config.adversary_weight)
    history["best_epoch"] = best_epoch
    history["best_proxy"] = best_proxy
    history["fold"] = fold
    return FoldResult(fold=fold, model=model, history=history)


def train(dataset: Dataset, plan: SplitPlan, config: DisAEConfig) -> list:
    """Train one model per fold; see train_fold for the inner protocol."""
    return [train_fold(dataset, plan, fold, config) for fold in range(plan.n_folds)]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _net_meta(net: DenseNet) -> dict:
    return {"widths": list(net.widths), "activations": list(net.activations)}


def _net_from_meta(meta, blocks, prefix) -> DenseNet:
    widths = tuple(meta["widths"])
    activations = tuple(meta["activations"])
    n_layers = len(widths) - 1
    weights = [blocks[f"{prefix}/w{i}"].reshape(widths[i], widths[i + 1])
               for i in range(n_layers)]
    biases = [blocks[f"{prefix}/b{i}"].reshape(widths[i + 1]) for i in range(n_layers)]
    return DenseNet(widths=widths, activations=activations, weights=weights, biases=biases)


def save_checkpoint(model: DisAEModel, path, history: dict | None = None) -> Path:
    """Versioned binary container: magic, version, checksum, JSON header,
    then parameter blocks as little-endian float64 in declared order."""
    header = {
        "config": asdict(model.config),
        "task_specs": [{"name": s.name, "n_classes": s.n_classes} for s in model.task_specs],
        "domain_names": list(model.domain_names),
        "domain_levels": list(model.domain_levels),
        "nets": {group: _net_meta(net) for group, net in model.net_groups()},
        "norm_stats": model.norm_stats.to_dict() if model.norm_stats is not None else None,
        "history": history or {},
        "blocks": [],
    }
    datas = []
    for group, net in model.net_groups():
        for name, arr in net.param_blocks():
            header["blocks"].append({"name": f"{group}/{name}", "shape": list(arr.shape)})
            datas.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = len(header_bytes).to_bytes(8, "little") + header_bytes + b"".join(datas)
    digest = hashlib.sha256(payload).digest()
    out = CHECKPOINT_MAGIC + CHECKPOINT_VERSION.to_bytes(4, "little") + digest + payload
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(out)
    return path


def load_checkpoint(path) -> tuple:
    """Returns (model, history); bit-exact parameter round trip."""
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 + 32 or not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    version = int.from_bytes(raw[off:off + 4], "little")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    off += 4
    digest = raw[off:off + 32]
    payload = raw[off + 32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch (truncated or corrupt)")
    hlen = int.from_bytes(payload[:8], "little")
    header = json.loads(payload[8:8 + hlen].decode("utf-8"))
    data = payload[8 + hlen:]
    blocks = {}
    cursor = 0
    for entry in header["blocks"]:
        size = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = size * 8
        arr = np.frombuffer(data[cursor:cursor + nbytes], dtype="<f8").copy()
        blocks[entry["name"]] = arr
        cursor += nbytes
    cfg_raw = dict(header["config"])
    for key in ("encoder_widths", "task_head_hidden", "domain_head_hidden"):
        cfg_raw[key] = tuple(cfg_raw[key])
    config = DisAEConfig(**cfg_raw)
    task_specs = tuple(TaskSpec(d["name"], d["n_classes"]) for d in header["task_specs"])
    nets = header["nets"]
    encoder = _net_from_meta(nets["encoder"], blocks, "encoder")
    decoder = _net_from_meta(nets["decoder"], blocks, "decoder")
    task_heads = [_net_from_meta(nets[f"task{i}"], blocks, f"task{i}")
                  for i in range(len(task_specs))]
    domain_levels = tuple(header["domain_levels"])
    domain_heads = [_net_from_meta(nets[f"domain{i}"], blocks, f"domain{i}")
                    for i in range(len(domain_levels))]
    stats = None
    if header["norm_stats"] is not None:
        from .data import NormStats
        stats = NormStats.from_dict(header["norm_stats"])
    model = DisAEModel(
        config=config,
        encoder=encoder,
        decoder=decoder,
        task_heads=task_heads,
        domain_heads=domain_heads,
        reversal=GradReversal(config.adversary_weight),
        task_specs=task_specs,
        domain_names=tuple(header["domain_names"]),
        domain_levels=domain_levels,
        norm_stats=stats,
    )
    return model, header["history"]
