"""Two-stage training: flow-matching pretraining, then joint fine-tuning of
the flow and a classifier head through the unrolled inference solve.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import seeding
from .datasets import LabeledDataset
from .ndmath import (
    AdamState,
    ConfigurationError,
    ContractError,
    NonFiniteError,
    ParamNet,
    adam_step,
    backward,
    forward_classifier,
    forward_velocity,
)
from .odeint import Direction, IntegrationBlowup, SolverKind, TimeGrid, extract_features, integrate
from .paths import PathBatch, PathSpec, sample_batch

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Raised on NaN/blowup; ``last_good`` holds the last finite parameter snapshot."""

    def __init__(self, message: str, epoch: int, last_good: dict[str, torch.Tensor] | None):
        super().__init__(message)
        self.epoch = epoch
        self.last_good = last_good


class LossKind(str, enum.Enum):
    CROSS_ENTROPY = "cross_entropy"
    LABEL_SMOOTHING = "label_smoothing"


@dataclass
class PretrainConfig:
    path: PathSpec = field(default_factory=PathSpec)
    epochs: int = 500
    batch_size: int = 256
    learning_rate: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 50

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size < 1 or self.checkpoint_every < 1 or self.epochs < 0:
            raise ConfigurationError("epochs >= 0, batch_size >= 1 and checkpoint_every >= 1 required")


@dataclass
class FinetuneConfig:
    grid: TimeGrid = field(default_factory=TimeGrid)
    solver: SolverKind = SolverKind.EULER
    path: PathSpec = field(default_factory=PathSpec)
    beta: float = 1.0
    loss_kind: LossKind = LossKind.CROSS_ENTROPY
    smoothing: float = 0.1
    freeze_backbone: bool = False
    epochs: int = 100
    batch_size: int = 256
    base_lr: float = 1.25e-4
    warmup_epochs: int = 5
    warmup_lr: float = 1.25e-7
    min_lr: float = 1e-6
    scale_lr: bool = False
    num_processes: int = 1
    seed: int = 0

    def __post_init__(self):
        self.solver = SolverKind(self.solver)
        self.loss_kind = LossKind(self.loss_kind)
        if self.beta < 0:
            raise ConfigurationError("beta must be non-negative")
        if self.loss_kind is LossKind.LABEL_SMOOTHING and not 0 < self.smoothing < 1:
            raise ConfigurationError("label smoothing alpha must lie in (0, 1)")
        if self.grid.direction is not Direction.INFER:
            raise ConfigurationError("fine-tuning extracts features in the infer direction")
        if self.base_lr <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("base_lr > 0, epochs >= 0 and batch_size >= 1 required")

    def learning_rates(self) -> tuple[float, float, float]:
        """(base, warmup, min) after the optional batch-size scaling rule."""
        if not self.scale_lr:
            return self.base_lr, self.warmup_lr, self.min_lr
        return tuple(scaled_lr(v, self.batch_size, self.num_processes) for v in (self.base_lr, self.warmup_lr, self.min_lr))


@dataclass
class EpochRecord:
    epoch: int
    fm_loss: float
    ce_loss: float
    total_loss: float
    accuracy: float
    lr: float
    seconds: float
    mi_proxy: float | None = None


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].accuracy if self.records else float("nan")

    def to_csv(self, path) -> None:
        """Per-epoch metrics; wall-clock time is left out so reruns hash equal."""
        cols = [c for c in EpochRecord.__dataclass_fields__ if c != "seconds"]
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.records:
                row = asdict(r)
                w.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c]) for c in cols])


@dataclass
class PretrainResult:
    net: ParamNet
    adam: AdamState
    losses: list[float]
    snapshots: list[tuple[int, dict[str, torch.Tensor]]]


@dataclass
class FinetuneResult:
    net: ParamNet
    report: TrainReport
    adam: AdamState


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    predictions: torch.Tensor


def scaled_lr(base: float, batch_size: int, num_processes: int = 1) -> float:
    return base * num_processes * batch_size / 512


def lr_at(step: int, total_steps: int, warmup_steps: int, base: float, warmup: float, minimum: float) -> float:
    """Linear warm-up from ``warmup`` to ``base`` then cosine decay to ``minimum``."""
    if warmup_steps > 0 and step < warmup_steps:
        return warmup + (base - warmup) * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return minimum + 0.5 * (base - minimum) * (1 + math.cos(math.pi * progress))


def snapshot(net: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in net.state_dict().items()}


def fm_loss(net, batch: PathBatch) -> torch.Tensor:
    """Half the mean squared residual between predicted and target velocity."""
    if len(batch) == 0:
        raise ContractError("fm_loss needs at least one sample")
    v = forward_velocity(net, batch.x_t, batch.t)
    return 0.5 * ((v - batch.v_target) ** 2).sum(-1).mean()


def classification_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    loss_kind: LossKind | str = LossKind.CROSS_ENTROPY,
    smoothing: float = 0.1,
) -> torch.Tensor:
    """Mean NLL; label smoothing mixes the one-hot target with ``smoothing`` uniform mass."""
    c = logits.shape[1]
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= c):
        raise ContractError(f"labels must lie in [0, {c})")
    logp = torch.log_softmax(logits, dim=1)
    nll = -logp.gather(1, labels[:, None]).squeeze(1)
    if LossKind(loss_kind) is LossKind.CROSS_ENTROPY:
        return nll.mean()
    return ((1 - smoothing) * nll - smoothing * logp.mean(1)).mean()


def _param_dict(params: list[torch.nn.Parameter], net: ParamNet) -> dict[str, torch.nn.Parameter]:
    ids = {id(p) for p in params}
    return {k: p for k, p in net.named_parameters() if id(p) in ids}


def pretrain(
    net: ParamNet,
    data: torch.Tensor,
    cfg: PretrainConfig,
    start_epoch: int = 0,
    adam: AdamState | None = None,
    on_checkpoint: Callable[[int, ParamNet, AdamState, list[float]], None] | None = None,
    keep_snapshots: bool = True,
) -> PretrainResult:
    """Adam on the flow-matching loss over epochs ``start_epoch+1 .. cfg.epochs``.

    Each epoch's shuffling and path draws come from a generator keyed by
    (seed, epoch), so resuming from a checkpoint reproduces an uninterrupted run.
    ``on_checkpoint(epoch, net, adam, losses)`` fires every ``checkpoint_every``
    epochs and at the last one; ``losses`` covers this call's epochs so far.
    """
    if data.ndim != 2 or data.shape[0] == 0:
        raise ContractError("pretrain needs a non-empty [n, d] dataset")
    params = _param_dict(net.backbone_parameters(), net)
    adam = adam or AdamState(learning_rate=cfg.learning_rate)
    losses: list[float] = []
    snaps: list[tuple[int, dict]] = []
    last_good = snapshot(net)
    n = data.shape[0]
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        g = seeding.generator(cfg.seed, "pretrain", epoch)
        perm = torch.randperm(n, generator=g)
        total, count = 0.0, 0
        try:
            for start in range(0, n, cfg.batch_size):
                batch = sample_batch(cfg.path, data[perm[start : start + cfg.batch_size]], g)
                loss = fm_loss(net, batch)
                adam_step(params, backward(loss, params), adam)
                total += loss.item() * len(batch)
                count += len(batch)
        except (NonFiniteError, IntegrationBlowup) as exc:
            net.load_state_dict(last_good)
            raise TrainingAborted(f"pretraining aborted in epoch {epoch}: {exc}", epoch, last_good) from exc
        losses.append(total / count)
        last_good = snapshot(net)
        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
            if keep_snapshots:
                snaps.append((epoch, last_good))
            if on_checkpoint is not None:
                on_checkpoint(epoch, net, adam, losses)
    return PretrainResult(net, adam, losses, snaps)


def evaluate(
    net: ParamNet,
    data: LabeledDataset,
    grid: TimeGrid,
    solver: SolverKind = SolverKind.EULER,
    batch_size: int = 4096,
) -> EvalResult:
    """Arg-max accuracy and confusion matrix (rows: true class) on cutoff features."""
    if not net.has_head:
        raise ConfigurationError("evaluate needs a classifier head")
    if data.labels is None:
        raise ContractError("evaluate needs labels")
    preds = []
    with torch.no_grad():
        for start in range(0, data.n, batch_size):
            feats = extract_features(net, data.points[start : start + batch_size], grid, solver)
            preds.append(forward_classifier(net, feats).argmax(1))
    pred = torch.cat(preds)
    c = net.spec.classes
    conf = np.zeros((c, c), dtype=np.int64)
    np.add.at(conf, (data.labels.numpy(), pred.numpy()), 1)
    return EvalResult(float((pred == data.labels).double().mean()), conf, pred)


def finetune(
    net: ParamNet,
    train: LabeledDataset,
    cfg: FinetuneConfig,
    val: LabeledDataset | None = None,
    on_epoch: Callable[[EpochRecord, ParamNet], float | None] | None = None,
) -> FinetuneResult:
    """Minimise CE(head(F(x))) + beta * L_FM(x) over flow and head.

    F integrates x from t=0 to the grid cutoff with gradients kept through
    every solver step. With ``freeze_backbone`` only the head is updated and
    the fixed features are computed once. The per-epoch accuracy is
    ``evaluate`` on ``val`` (or ``train`` when no validation set is given).
    ``on_epoch`` may return an MI-proxy value to store in the record.
    """
    if not net.has_head:
        raise ConfigurationError("finetune needs a network with a classifier head")
    if train.labels is None or train.n == 0:
        raise ContractError("finetune needs a non-empty labelled dataset")
    frozen = cfg.freeze_backbone
    trainable = net.head_parameters() if frozen else net.backbone_parameters() + net.head_parameters()
    params = _param_dict(trainable, net)
    if frozen:
        for p in net.backbone_parameters():
            p.requires_grad_(False)
    base, warm, low = cfg.learning_rates()
    adam = AdamState(learning_rate=base)
    steps_per_epoch = math.ceil(train.n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    warmup_steps = steps_per_epoch * cfg.warmup_epochs
    eval_set = val if val is not None else train
    report = TrainReport()
    fixed_feats = None
    if frozen:
        fixed_feats = extract_features(net, train.points, cfg.grid, cfg.solver)
    last_good = snapshot(net)
    step_idx = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            g = seeding.generator(cfg.seed, "finetune", epoch)
            perm = torch.randperm(train.n, generator=g)
            sums = np.zeros(3)
            lr = base
            try:
                for start in range(0, train.n, cfg.batch_size):
                    idx = perm[start : start + cfg.batch_size]
                    xb, yb = train.points[idx], train.labels[idx]
                    if frozen:
                        feats = fixed_feats[idx]
                    else:
                        feats = extract_features(net, xb, cfg.grid, cfg.solver, differentiable=True)
                    ce = classification_loss(forward_classifier(net, feats), yb, cfg.loss_kind, cfg.smoothing)
                    if frozen or cfg.beta == 0:
                        fm = torch.zeros((), dtype=ce.dtype)
                    else:
                        fm = fm_loss(net, sample_batch(cfg.path, xb, g))
                    loss = ce + cfg.beta * fm
                    lr = lr_at(step_idx, total_steps, warmup_steps, base, warm, low)
                    adam_step(params, backward(loss, params), adam, lr=lr)
                    step_idx += 1
                    sums += np.array([fm.item(), ce.item(), loss.item()]) * len(idx)
            except (NonFiniteError, IntegrationBlowup) as exc:
                net.load_state_dict(last_good)
                raise TrainingAborted(f"fine-tuning aborted in epoch {epoch}: {exc}", epoch, last_good) from exc
            last_good = snapshot(net)
            acc = evaluate(net, eval_set, cfg.grid, cfg.solver).accuracy
            fm_m, ce_m, tot_m = (sums / train.n).tolist()
            rec = EpochRecord(epoch, fm_m, ce_m, tot_m, acc, lr, time.perf_counter() - t0)
            if on_epoch is not None:
                rec.mi_proxy = on_epoch(rec, net)
            report.records.append(rec)
            log.debug("finetune epoch %d ce=%.4f fm=%.4f acc=%.4f", epoch, ce_m, fm_m, acc)
    finally:
        if frozen:
            for p in net.backbone_parameters():
                p.requires_grad_(True)
    return FinetuneResult(net, report, adam)


def attach_head(net: ParamNet, classes: int, head_hidden: tuple[int, ...] | None = None, seed: int = 0) -> ParamNet:
    """Copy of ``net`` with a freshly initialised classifier head."""
    spec = replace(net.spec, classes=classes, **({} if head_hidden is None else {"head_hidden": tuple(head_hidden)}))
    out = ParamNet(spec, seed=0)
    out.velocity_layers.load_state_dict(net.velocity_layers.state_dict())
    out.reset_head(seed)
    return out


def generate(net, n: int, t_span: int = 100, solver: SolverKind = SolverKind.RK4, seed: int = 0) -> torch.Tensor:
    """Integrate Gaussian draws from t=1 back to t=0."""
    g = seeding.generator(seed, "eval", n)
    x1 = torch.randn(n, net.data_dim, generator=g, dtype=torch.float64)
    return integrate(solver, net, x1, TimeGrid(t_span, Direction.GENERATE), record=False).final

