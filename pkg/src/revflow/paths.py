"""Interpolation paths between data (t=0) and Gaussian noise (t=1).

GVP uses the trigonometric schedule alpha_t = cos(pi t / 2), sigma_t = sin(pi t / 2)
and regresses onto the analytic time derivative of that interpolant. ICFM and
OTCFM share the straight-line interpolant with constant velocity x1 - x0; they
differ only in how x0 and x1 are paired inside a minibatch.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import torch

from . import coupling
from .ndmath import DTYPE, ContractError


class PathKind(str, enum.Enum):
    GVP = "GVP"
    ICFM = "ICFM"
    OTCFM = "OTCFM"


class CouplingMode(str, enum.Enum):
    INDEPENDENT = "independent"
    OPTIMAL_TRANSPORT = "optimal_transport"


@dataclass(frozen=True)
class PathSpec:
    kind: PathKind = PathKind.ICFM

    def __post_init__(self):
        object.__setattr__(self, "kind", PathKind(self.kind))

    @property
    def coupling_mode(self) -> CouplingMode:
        if self.kind is PathKind.OTCFM:
            return CouplingMode.OPTIMAL_TRANSPORT
        return CouplingMode.INDEPENDENT


@dataclass
class PathBatch:
    """Training triples (x_t, t, v_target), one row per sample."""

    x_t: torch.Tensor
    t: torch.Tensor
    v_target: torch.Tensor
    x0: torch.Tensor | None = None
    x1: torch.Tensor | None = None

    def __len__(self) -> int:
        return self.x_t.shape[0]


def _check_t(t) -> torch.Tensor:
    tt = torch.as_tensor(t, dtype=DTYPE)
    if bool((tt < 0).any()) or bool((tt > 1).any()):
        raise ContractError(f"t must lie in [0, 1], got {t}")
    return tt


def gvp_coefficients(t) -> tuple[torch.Tensor, torch.Tensor]:
    """(alpha_t, sigma_t) for the GVP schedule."""
    tt = _check_t(t)
    # cos(pi/2) rounds to 6e-17; pin it so the t=1 endpoint is exact
    alpha = torch.where(tt == 1, torch.zeros_like(tt), torch.cos(0.5 * math.pi * tt))
    return alpha, torch.sin(0.5 * math.pi * tt)


def _bcast(t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return t.reshape(t.shape + (1,) * (x.ndim - t.ndim)) if t.ndim else t


def interpolate(spec: PathSpec, x0: torch.Tensor, x1: torch.Tensor, t) -> torch.Tensor:
    tt = _check_t(t)
    if spec.kind is PathKind.GVP:
        a, s = gvp_coefficients(tt)
        return _bcast(a, x0) * x0 + _bcast(s, x1) * x1
    tb = _bcast(tt, x0)
    return (1 - tb) * x0 + tb * x1


def target_velocity(spec: PathSpec, x0: torch.Tensor, x1: torch.Tensor, t) -> torch.Tensor:
    tt = _check_t(t)
    if spec.kind is PathKind.GVP:
        a, s = gvp_coefficients(tt)
        return 0.5 * math.pi * (_bcast(a, x1) * x1 - _bcast(s, x0) * x0)
    return x1 - x0


def pair(spec: PathSpec, x0: torch.Tensor, x1: torch.Tensor, rng=None) -> torch.Tensor:
    """Reorder ``x1`` according to the spec's coupling."""
    if spec.coupling_mode is CouplingMode.OPTIMAL_TRANSPORT:
        return coupling.pair_optimal(x0, x1).apply(x1)
    return coupling.pair_independent(x0.shape[0], rng).apply(x1)


def sample_batch(spec: PathSpec, data_batch: torch.Tensor, rng: torch.Generator, t=None) -> PathBatch:
    """Draw x1 ~ N(0, I) and t ~ U[0, 1] per row, pair, and build targets.

    ``t`` overrides the time draw (scalar or length-b tensor); the Gaussian
    draw happens first either way so x1 is unaffected by the override.
    """
    if data_batch.ndim != 2 or data_batch.shape[0] == 0:
        raise ContractError("sample_batch needs a non-empty [b, d] batch")
    b = data_batch.shape[0]
    x0 = data_batch.to(DTYPE)
    x1 = torch.randn(x0.shape, generator=rng, dtype=DTYPE)
    tt = torch.rand(b, generator=rng, dtype=DTYPE)
    if t is not None:
        tt = _check_t(t).expand(b).clone()
    x1 = pair(spec, x0, x1, rng)
    return PathBatch(interpolate(spec, x0, x1, tt), tt, target_velocity(spec, x0, x1, tt), x0, x1)
