"""Run configuration: nested JSON validated up front, unknown keys rejected."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .likelihood import DivergenceMode
from .ndmath import NetSpec
from .odeint import Direction, SolverKind, TimeGrid
from .paths import PathKind, PathSpec
from .training import FinetuneConfig, LossKind, PretrainConfig


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataSection(_Strict):
    source: Literal["swiss", "gaussians", "csv"] = "swiss"
    csv: Optional[str] = None
    label_column: Optional[str] = "label"
    n: int = Field(2560, ge=1)
    noise: float = Field(0.05, ge=0)
    bins: int = Field(6, ge=1)
    means: list[list[float]] = [[-2.0, 0.0], [2.0, 0.0]]
    scale: float = Field(0.25, gt=0)
    normalize: bool = True
    val_fraction: float = Field(0.2, ge=0, lt=1)

    @model_validator(mode="after")
    def _csv_needs_path(self):
        if self.source == "csv" and not self.csv:
            raise ValueError("data.source 'csv' needs data.csv")
        return self


class NetSection(_Strict):
    hidden: list[int] = [128, 128, 128]
    activation: Literal["tanh", "relu", "silu"] = "tanh"
    time_embed_dim: int = Field(16, ge=0)
    head_hidden: list[int] = [64]


class PathSection(_Strict):
    kind: PathKind = PathKind.ICFM


class PretrainSection(_Strict):
    epochs: int = Field(500, ge=0)
    batch_size: int = Field(256, ge=1)
    learning_rate: float = Field(2e-3, gt=0)
    checkpoint_every: int = Field(50, ge=1)


class FinetuneSection(_Strict):
    t_span: int = Field(20, ge=1)
    cutoff_index: Optional[int] = None
    solver: SolverKind = SolverKind.EULER
    beta: float = Field(1.0, ge=0)
    loss_kind: LossKind = LossKind.CROSS_ENTROPY
    smoothing: float = Field(0.1, gt=0, lt=1)
    freeze_backbone: bool = False
    epochs: int = Field(100, ge=0)
    batch_size: int = Field(256, ge=1)
    base_lr: float = Field(1.25e-4, gt=0)
    warmup_epochs: int = Field(5, ge=0)
    warmup_lr: float = Field(1.25e-7, ge=0)
    min_lr: float = Field(1e-6, ge=0)
    scale_lr: bool = False

    @model_validator(mode="after")
    def _cutoff_in_range(self):
        if self.cutoff_index is not None and not 0 <= self.cutoff_index <= self.t_span:
            raise ValueError(f"cutoff_index must lie in [0, {self.t_span}]")
        return self


class DivergenceSection(_Strict):
    kind: Literal["exact", "hutchinson"] = "exact"
    probe_count: int = Field(1, ge=1)
    probe_law: Literal["rademacher", "gaussian"] = "rademacher"


class LikelihoodSection(_Strict):
    t_span: int = Field(100, ge=1)
    solver: SolverKind = SolverKind.RK4
    divergence: DivergenceSection = DivergenceSection()


class RunConfig(_Strict):
    experiment_id: str = "run"
    output_dir: str = "runs"
    seed: int = 0
    data: DataSection = DataSection()
    net: NetSection = NetSection()
    path: PathSection = PathSection()
    pretrain: PretrainSection = PretrainSection()
    finetune: FinetuneSection = FinetuneSection()
    likelihood: LikelihoodSection = LikelihoodSection()

    @field_validator("experiment_id")
    @classmethod
    def _safe_id(cls, v: str) -> str:
        if not v or "/" in v or v.startswith("."):
            raise ValueError("experiment_id must be a plain name")
        return v

    # -- conversions to module-level configs --------------------------------

    def fingerprint_dict(self) -> dict:
        """Everything that affects results; output location excluded."""
        return self.model_dump(mode="json", exclude={"output_dir", "experiment_id"})

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.experiment_id

    def net_spec(self, data_dim: int, classes: int | None = None) -> NetSpec:
        return NetSpec(
            data_dim=data_dim,
            hidden=tuple(self.net.hidden),
            activation=self.net.activation,
            time_embed_dim=self.net.time_embed_dim,
            classes=classes,
            head_hidden=tuple(self.net.head_hidden),
        )

    def path_spec(self) -> PathSpec:
        return PathSpec(self.path.kind)

    def pretrain_config(self) -> PretrainConfig:
        p = self.pretrain
        return PretrainConfig(self.path_spec(), p.epochs, p.batch_size, p.learning_rate, self.seed, p.checkpoint_every)

    def finetune_grid(self) -> TimeGrid:
        f = self.finetune
        return TimeGrid(f.t_span, Direction.INFER, f.cutoff_index)

    def finetune_config(self) -> FinetuneConfig:
        f = self.finetune
        return FinetuneConfig(
            grid=self.finetune_grid(),
            solver=f.solver,
            path=self.path_spec(),
            beta=f.beta,
            loss_kind=f.loss_kind,
            smoothing=f.smoothing,
            freeze_backbone=f.freeze_backbone,
            epochs=f.epochs,
            batch_size=f.batch_size,
            base_lr=f.base_lr,
            warmup_epochs=f.warmup_epochs,
            warmup_lr=f.warmup_lr,
            min_lr=f.min_lr,
            scale_lr=f.scale_lr,
            seed=self.seed,
        )

    def divergence_mode(self) -> DivergenceMode:
        d = self.likelihood.divergence
        return DivergenceMode(d.kind, d.probe_count, d.probe_law)


def _set_dotted(tree: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        nxt = node.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot override {dotted}: {k} is not a section")
        node = nxt
    node[keys[-1]] = value


def parse_override(item: str) -> tuple[str, object]:
    """``key.sub=value``; the value is parsed as JSON, falling back to a string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def build_config(raw: dict | None = None, overrides: list[str] | None = None) -> RunConfig:
    tree = json.loads(json.dumps(raw or {}))
    for item in overrides or []:
        key, value = parse_override(item)
        _set_dotted(tree, key, value)
    try:
        return RunConfig.model_validate(tree)
    except Exception as exc:  # pydantic.ValidationError, reported uniformly
        raise ConfigError(str(exc)) from None


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return build_config(raw, overrides)
