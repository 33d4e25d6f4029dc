"""Log-densities through the instantaneous change of variables.

Integrating the state and the divergence jointly from data (t=0) to latent
(t=1) gives

    log p_0(x_0) = log N(x_1; 0, I) + int_0^1 div v(x_t, t) dt.

The divergence is either exact (one vector-Jacobian product per dimension) or
a Hutchinson estimate eps^T J eps averaged over random probes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import torch

from .ndmath import ContractError, DTYPE
from .odeint import Direction, Field, SolverKind, TimeGrid, check_state, step

EXACT_MAX_DIM = 16


@dataclass(frozen=True)
class DivergenceMode:
    kind: Literal["exact", "hutchinson"] = "exact"
    probe_count: int = 1
    probe_law: Literal["rademacher", "gaussian"] = "rademacher"

    def __post_init__(self):
        if self.kind not in ("exact", "hutchinson"):
            raise ContractError(f"unknown divergence mode {self.kind!r}")
        if self.kind == "hutchinson" and self.probe_count < 1:
            raise ContractError("hutchinson needs probe_count >= 1")
        if self.probe_law not in ("rademacher", "gaussian"):
            raise ContractError(f"unknown probe law {self.probe_law!r}")

    @classmethod
    def hutchinson(cls, probe_count: int, probe_law: str = "rademacher") -> "DivergenceMode":
        return cls("hutchinson", probe_count, probe_law)


EXACT = DivergenceMode()


@dataclass
class LogDensityResult:
    x1: torch.Tensor
    delta_logp: torch.Tensor
    logp_x0: torch.Tensor


def standard_normal_logpdf(x: torch.Tensor) -> torch.Tensor:
    d = x.shape[-1]
    return -0.5 * (x**2).sum(-1) - 0.5 * d * math.log(2 * math.pi)


def draw_probes(shape, law: str, rng: torch.Generator | None) -> torch.Tensor:
    if law == "gaussian":
        return torch.randn(shape, generator=rng, dtype=DTYPE)
    return torch.randint(0, 2, shape, generator=rng).to(DTYPE) * 2 - 1


def velocity_and_divergence(
    field: Field,
    x: torch.Tensor,
    t: float,
    mode: DivergenceMode = EXACT,
    rng: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    b, d = x.shape
    with torch.enable_grad():
        if mode.kind == "exact":
            if d > EXACT_MAX_DIM:
                raise ContractError(f"exact divergence limited to d <= {EXACT_MAX_DIM}, got {d}")
            xr = x.detach().requires_grad_(True)
            v = field(xr, t)
            div = torch.zeros(b, dtype=DTYPE)
            for j in range(d):
                if not v.requires_grad:
                    break
                (g,) = torch.autograd.grad(v[:, j].sum(), xr, retain_graph=j < d - 1, allow_unused=True)
                if g is not None:
                    div = div + g[:, j]
            return v.detach(), div
        p = mode.probe_count
        xr = x.detach().repeat(p, 1).requires_grad_(True)
        eps = draw_probes((p * b, d), mode.probe_law, rng)
        v = field(xr, t)
        if not v.requires_grad:
            return v[:b].detach(), torch.zeros(b, dtype=DTYPE)
        (vjp,) = torch.autograd.grad(v, xr, grad_outputs=eps, allow_unused=True)
        if vjp is None:
            return v[:b].detach(), torch.zeros(b, dtype=DTYPE)
        quad = (vjp * eps).sum(-1).reshape(p, b)
        return v[:b].detach(), quad.mean(0).detach()


def divergence(
    field: Field,
    x: torch.Tensor,
    t: float,
    mode: DivergenceMode = EXACT,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Per-row trace of d field / dx at (x, t), shape [b]."""
    return velocity_and_divergence(field, x, t, mode, rng)[1]


def log_density(
    field: Field,
    x0: torch.Tensor,
    grid: TimeGrid,
    solver: SolverKind = SolverKind.RK4,
    mode: DivergenceMode = EXACT,
    rng: torch.Generator | None = None,
) -> LogDensityResult:
    """Jointly integrate (x, log-density increment) from t=0 to t=1.

    The increment is stepped with the same scheme as the state, so the
    divergence is sampled at every internal stage of Midpoint/RK4.
    """
    if grid.direction is not Direction.INFER:
        raise ContractError("log_density integrates in the infer direction (t: 0 -> 1)")
    d = x0.shape[1]

    def augmented(s: torch.Tensor, t: float) -> torch.Tensor:
        v, div = velocity_and_divergence(field, s[:, :d], t, mode, rng)
        return torch.cat([v, div[:, None]], dim=1)

    s = torch.cat([x0.detach().to(DTYPE), torch.zeros(x0.shape[0], 1, dtype=DTYPE)], dim=1)
    with torch.no_grad():
        for i in range(grid.t_span):
            s = step(solver, augmented, s, grid.time(i), grid.h)
            check_state(s, i)
    x1, delta = s[:, :d], s[:, d]
    return LogDensityResult(x1, delta, standard_normal_logpdf(x1) + delta)


def mi_proxy(
    field: Field,
    data: torch.Tensor,
    grid: TimeGrid,
    solver: SolverKind = SolverKind.RK4,
    mode: DivergenceMode = EXACT,
    rng: torch.Generator | None = None,
    batch_size: int = 1024,
) -> float:
    """Mean log p(x0) over ``data``; tracks E[log p(x0 | x1)] for an invertible map."""
    if data.shape[0] == 0:
        raise ContractError("mi_proxy needs a non-empty dataset")
    total = 0.0
    for start in range(0, data.shape[0], batch_size):
        chunk = data[start : start + batch_size]
        total += float(log_density(field, chunk, grid, solver, mode, rng).logp_x0.sum())
    return total / data.shape[0]


MI_CSV_COLUMNS = ("epoch", "split", "mi_proxy", "probe_count")


def write_mi_csv(path, rows) -> None:
    """``rows`` are (epoch, split, mi_proxy, probe_count); probe_count 0 means exact."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MI_CSV_COLUMNS)
        for epoch, split, value, probes in rows:
            w.writerow([epoch, split, repr(float(value)), probes])
