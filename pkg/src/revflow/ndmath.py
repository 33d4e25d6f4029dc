"""Tensor substrate: float64 torch tensors, the velocity/classifier network,
gradient extraction and a hand-rolled Adam.

Everything in the package computes in float64. Importing this module does not
change torch's global default dtype; tensors are created with ``DTYPE``
explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch
from torch import nn

DTYPE = torch.float64


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Map times of shape [b] to [b, dim] sin/cos features.

    Angular frequencies are geometric in [1, 16] so the embedding stays
    resolvable on coarse (t_span=20) grids; odd ``dim`` pads a zero column.
    """
    half = dim // 2
    if half == 0:
        return torch.zeros(t.shape[0], dim, dtype=DTYPE)
    freqs = torch.exp(math.log(16.0) * torch.arange(half, dtype=DTYPE) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(t.shape[0], 1, dtype=DTYPE)], dim=1)
    return emb


_ACTIVATIONS = {"tanh": torch.tanh, "relu": torch.relu, "silu": nn.functional.silu, "identity": lambda x: x}


class Dense(nn.Module):
    """Affine layer followed by a named activation."""

    def __init__(self, fan_in: int, fan_out: int, activation: str = "identity"):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}")
        self.weight = nn.Parameter(torch.zeros(fan_out, fan_in, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(fan_out, dtype=DTYPE))
        self.activation = activation

    def reset(self, generator: torch.Generator, zero: bool = False) -> None:
        with torch.no_grad():
            if zero:
                self.weight.zero_()
                self.bias.zero_()
                return
            bound = 1.0 / math.sqrt(self.weight.shape[1])
            self.weight.copy_((torch.rand(self.weight.shape, generator=generator, dtype=DTYPE) * 2 - 1) * bound)
            self.bias.copy_((torch.rand(self.bias.shape, generator=generator, dtype=DTYPE) * 2 - 1) * bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return _ACTIVATIONS[self.activation](x @ self.weight.T + self.bias)


def _stack(sizes: Sequence[int], activation: str) -> nn.ModuleList:
    layers = nn.ModuleList()
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        layers.append(Dense(a, b, "identity" if last else activation))
    return layers


@dataclass(frozen=True)
class NetSpec:
    """Architecture record; enough to rebuild a ParamNet from a checkpoint."""

    data_dim: int = 2
    hidden: tuple[int, ...] = (128, 128, 128)
    activation: str = "tanh"
    time_embed_dim: int = 16
    classes: int | None = None
    head_hidden: tuple[int, ...] = (64,)
    head_activation: str = "tanh"

    def to_dict(self) -> dict:
        return {
            "data_dim": self.data_dim,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "time_embed_dim": self.time_embed_dim,
            "classes": self.classes,
            "head_hidden": list(self.head_hidden),
            "head_activation": self.head_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", ()))
        d["head_hidden"] = tuple(d.get("head_hidden", ()))
        return cls(**d)


class ParamNet(nn.Module):
    """Velocity field v(x, t) on R^d plus an optional classifier head.

    The velocity branch sees ``concat(x, sinusoidal(t))``. Its final layer is
    zero-initialised, so a freshly built net is the identity flow.
    """

    def __init__(self, spec: NetSpec, seed: int = 0):
        super().__init__()
        if spec.data_dim < 1:
            raise ConfigurationError("data_dim must be positive")
        self.spec = spec
        sizes = [spec.data_dim + spec.time_embed_dim, *spec.hidden, spec.data_dim]
        self.velocity_layers = _stack(sizes, spec.activation)
        self.head_layers = None
        if spec.classes is not None:
            if spec.classes < 2:
                raise ConfigurationError("classifier head needs at least 2 classes")
            self.head_layers = _stack([spec.data_dim, *spec.head_hidden, spec.classes], spec.head_activation)
        self.reset_parameters(seed)

    @property
    def data_dim(self) -> int:
        return self.spec.data_dim

    @property
    def has_head(self) -> bool:
        return self.head_layers is not None

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        for i, layer in enumerate(self.velocity_layers):
            layer.reset(g, zero=i == len(self.velocity_layers) - 1)
        self.reset_head(seed + 1)

    def reset_head(self, seed: int) -> None:
        if self.head_layers is None:
            return
        g = torch.Generator().manual_seed(seed)
        for layer in self.head_layers:
            layer.reset(g)

    def backbone_parameters(self) -> list[nn.Parameter]:
        return list(self.velocity_layers.parameters())

    def head_parameters(self) -> list[nn.Parameter]:
        return [] if self.head_layers is None else list(self.head_layers.parameters())

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        return forward_velocity(self, x, t)


def forward_velocity(net: ParamNet, x: torch.Tensor, t) -> torch.Tensor:
    """Evaluate v_theta(x, t) for ``x`` of shape [b, d].

    ``t`` is a scalar or a length-b tensor.
    """
    if x.ndim != 2 or x.shape[1] != net.data_dim:
        raise DimensionError(f"expected input [batch, {net.data_dim}], got {list(x.shape)}")
    tt = torch.as_tensor(t, dtype=DTYPE)
    if bool((tt < -1e-9).any()) or bool((tt > 1 + 1e-9).any()):
        raise ContractError("time must lie in [0, 1]")
    if tt.ndim == 0:
        tt = tt.expand(x.shape[0])
    h = torch.cat([x, sinusoidal_embedding(tt, net.spec.time_embed_dim)], dim=1)
    for layer in net.velocity_layers:
        h = layer(h)
    return check_finite(h, "velocity output")


def forward_classifier(net: ParamNet, z: torch.Tensor) -> torch.Tensor:
    if net.head_layers is None:
        raise ConfigurationError("network has no classifier head")
    if z.ndim != 2 or z.shape[1] != net.data_dim:
        raise DimensionError(f"expected features [batch, {net.data_dim}], got {list(z.shape)}")
    h = z
    for layer in net.head_layers:
        h = layer(h)
    return check_finite(h, "classifier logits")


def backward(loss: torch.Tensor, params: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar ``loss`` w.r.t. ``params``; unreachable ones get zeros."""
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    check_finite(loss, "loss")
    names = list(params)
    grads = torch.autograd.grad(loss.reshape(()), [params[n] for n in names], allow_unused=True)
    out = {}
    for name, g in zip(names, grads):
        out[name] = torch.zeros_like(params[name]) if g is None else g.detach()
    return out


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, torch.Tensor] = field(default_factory=dict)
    second_moment: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamState,
    lr: float | None = None,
) -> AdamState:
    """Bias-corrected Adam update, applied in place to ``params``.

    Raises NonFiniteError naming the first parameter with a non-finite gradient;
    nothing is modified in that case.
    """
    for name, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient shape {list(g.shape)} != parameter shape for {name!r}")
    lr = state.learning_rate if lr is None else lr
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step_count
    c2 = 1 - b2**state.step_count
    with torch.no_grad():
        for name, g in grads.items():
            p = params[name]
            m = state.first_moment.get(name)
            if m is None:
                m = state.first_moment[name] = torch.zeros_like(p)
                state.second_moment[name] = torch.zeros_like(p)
            v = state.second_moment[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.epsilon))
    return state


def named_params(net: nn.Module, which: Iterable[str] | None = None) -> dict[str, nn.Parameter]:
    ps = dict(net.named_parameters())
    if which is None:
        return ps
    return {k: ps[k] for k in which}
