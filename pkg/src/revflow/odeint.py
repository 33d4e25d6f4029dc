"""Fixed-step explicit integration of a velocity field over [0, 1].

A field is any callable ``field(x, t) -> v`` with ``x`` of shape [b, d];
``ParamNet`` instances qualify. In differentiable mode the steps stay on the
autograd graph so losses on the final state backpropagate through every step
into the field's parameters.
"""

from __future__ import annotations

import csv
import enum
from contextlib import nullcontext
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import torch

from .ndmath import ContractError, DTYPE

Field = Callable[[torch.Tensor, float], torch.Tensor]

BLOWUP_THRESHOLD = 1e6


class IntegrationBlowup(FloatingPointError):
    def __init__(self, step_index: int, detail: str = ""):
        super().__init__(f"integration blew up at step {step_index}{': ' + detail if detail else ''}")
        self.step_index = step_index


class SolverKind(str, enum.Enum):
    EULER = "euler"
    MIDPOINT = "midpoint"
    RK4 = "rk4"


class Direction(str, enum.Enum):
    GENERATE = "generate"  # t: 1 -> 0
    INFER = "infer"  # t: 0 -> 1


@dataclass(frozen=True)
class TimeGrid:
    t_span: int = 20
    direction: Direction = Direction.INFER
    cutoff_index: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction(self.direction))
        if self.t_span < 1:
            raise ContractError("t_span must be a positive integer")
        if self.cutoff_index is None:
            object.__setattr__(self, "cutoff_index", self.t_span)
        if not 0 <= self.cutoff_index <= self.t_span:
            raise ContractError(f"cutoff_index {self.cutoff_index} outside [0, {self.t_span}]")

    @property
    def h(self) -> float:
        """Signed step in t."""
        return (1.0 if self.direction is Direction.INFER else -1.0) / self.t_span

    def time(self, i: int) -> float:
        s = i / self.t_span
        return s if self.direction is Direction.INFER else 1.0 - s

    def times(self) -> list[float]:
        return [self.time(i) for i in range(self.t_span + 1)]

    @property
    def cutoff_fraction(self) -> float:
        return self.cutoff_index / self.t_span

    def refined(self, t_span: int) -> "TimeGrid":
        """Same direction and fractional cutoff on a grid of ``t_span`` steps."""
        cutoff = round(self.cutoff_fraction * t_span)
        return TimeGrid(t_span, self.direction, cutoff)

    def reversed(self) -> "TimeGrid":
        other = Direction.GENERATE if self.direction is Direction.INFER else Direction.INFER
        return replace(self, direction=other, cutoff_index=self.t_span)


@dataclass
class Trajectory:
    states: list[torch.Tensor]
    times: list[float]
    recorded: bool = True

    @property
    def final(self) -> torch.Tensor:
        return self.states[-1]


def step(solver: SolverKind, field: Field, x: torch.Tensor, t: float, h: float) -> torch.Tensor:
    """One explicit step of size ``h`` (signed) from (x, t)."""
    if h == 0:
        raise ContractError("step size must be non-zero")
    solver = SolverKind(solver)
    if solver is SolverKind.EULER:
        return x + h * field(x, t)
    if solver is SolverKind.MIDPOINT:
        k1 = field(x, t)
        return x + h * field(x + 0.5 * h * k1, t + 0.5 * h)
    k1 = field(x, t)
    k2 = field(x + 0.5 * h * k1, t + 0.5 * h)
    k3 = field(x + 0.5 * h * k2, t + 0.5 * h)
    k4 = field(x + h * k3, t + h)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def check_state(x: torch.Tensor, step_index: int) -> None:
    if not bool(torch.isfinite(x).all()):
        raise IntegrationBlowup(step_index, "non-finite state")
    peak = float(x.detach().abs().max()) if x.numel() else 0.0
    if peak > BLOWUP_THRESHOLD:
        raise IntegrationBlowup(step_index, f"|x| reached {peak:.3g}")


def integrate(
    solver: SolverKind,
    field: Field,
    x_init: torch.Tensor,
    grid: TimeGrid,
    record: bool = True,
    differentiable: bool = False,
    until: int | None = None,
) -> Trajectory:
    """Integrate from ``x_init`` along ``grid``.

    ``until`` stops after that many steps (default: the whole grid). Without
    ``record`` only the initial and final states are kept.
    """
    n = grid.t_span if until is None else until
    if not 0 <= n <= grid.t_span:
        raise ContractError(f"until={until} outside [0, {grid.t_span}]")
    h = grid.h
    x = x_init.to(DTYPE)
    if not differentiable:
        x = x.detach()
    states = [x]
    ctx = nullcontext() if differentiable else torch.no_grad()
    with ctx:
        for i in range(n):
            # grid times are i*h, not accumulated sums, so no drift
            x = step(solver, field, x, grid.time(i), h)
            check_state(x, i)
            if record:
                states.append(x)
    if not record:
        states.append(x)
    times = grid.times()[: n + 1] if record else [grid.time(0), grid.time(n)]
    return Trajectory(states, times, recorded=record)


def feature_at(trajectory: Trajectory, grid: TimeGrid) -> torch.Tensor:
    if not trajectory.recorded:
        raise ContractError("trajectory was integrated without recording states")
    if grid.cutoff_index >= len(trajectory.states):
        raise ContractError("trajectory is shorter than the cutoff index")
    return trajectory.states[grid.cutoff_index]


def extract_features(
    field: Field,
    x0: torch.Tensor,
    grid: TimeGrid,
    solver: SolverKind = SolverKind.EULER,
    differentiable: bool = False,
) -> torch.Tensor:
    """State at the grid's cutoff, integrating only as far as needed."""
    traj = integrate(solver, field, x0, grid, record=False, differentiable=differentiable, until=grid.cutoff_index)
    return traj.final


def write_trajectory_csv(path, trajectory: Trajectory) -> int:
    """Rows (sample_id, step, t, x_0..x_{d-1}); returns the row count."""
    if not trajectory.recorded:
        raise ContractError("trajectory was integrated without recording states")
    d = trajectory.states[0].shape[1]
    rows = 0
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "step", "t"] + [f"x_{j}" for j in range(d)])
        n = trajectory.states[0].shape[0]
        for sid in range(n):
            for k, (state, t) in enumerate(zip(trajectory.states, trajectory.times)):
                w.writerow([sid, k, repr(float(t))] + [repr(float(v)) for v in state[sid].tolist()])
                rows += 1
    return rows
