"""Trajectory straightness, encode/decode round trips and cutoff robustness."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch

from .datasets import LabeledDataset
from .ndmath import ContractError
from .odeint import Direction, Field, SolverKind, TimeGrid, integrate
from .training import evaluate


@dataclass(frozen=True)
class StraightnessReport:
    value: float
    t_span: int
    samples: int


def straightness(
    field: Field,
    x1_samples: torch.Tensor,
    grid: TimeGrid,
    solver: SolverKind = SolverKind.RK4,
) -> StraightnessReport:
    """Mean over samples and time of |(x(1) - x(0)) - v(x_t, t)|^2.

    The chord is expressed per unit of t so the value does not depend on
    t_span; the time average uses the trapezoidal rule on the grid.
    """
    if grid.direction is not Direction.GENERATE:
        raise ContractError("straightness is measured on generate-direction trajectories")
    traj = integrate(solver, field, x1_samples, grid, record=True)
    chord = traj.states[0] - traj.states[-1]  # x(t=1) - x(t=0)
    n = grid.t_span
    acc = torch.zeros(x1_samples.shape[0], dtype=chord.dtype)
    with torch.no_grad():
        for i, (x, t) in enumerate(zip(traj.states, traj.times)):
            w = 0.5 if i in (0, n) else 1.0
            acc += w * ((chord - field(x, t)) ** 2).sum(-1)
    return StraightnessReport(float((acc / n).mean()), n, x1_samples.shape[0])


@dataclass(frozen=True)
class RoundTrip:
    errors: torch.Tensor
    median: float
    p95: float


def roundtrip_error(
    field: Field,
    x0: torch.Tensor,
    grid: TimeGrid,
    solver: SolverKind = SolverKind.RK4,
) -> RoundTrip:
    """Relative L2 error of decode(encode(x0)) with matching infer/generate grids."""
    fwd = TimeGrid(grid.t_span, Direction.INFER)
    x1 = integrate(solver, field, x0, fwd, record=False).final
    back = integrate(solver, field, x1, fwd.reversed(), record=False).final
    err = (back - x0).norm(dim=1) / (x0.norm(dim=1) + 1e-12)
    return RoundTrip(err, float(err.median()), float(torch.quantile(err, 0.95)))


def offset_probe(
    net,
    data: LabeledDataset,
    base_grid: TimeGrid,
    offsets: Sequence[float],
    solver: SolverKind = SolverKind.EULER,
) -> dict[float, float]:
    """Accuracy with the feature cutoff moved by ``offset * t_span`` steps."""
    out = {}
    for off in offsets:
        cutoff = base_grid.cutoff_index + round(off * base_grid.t_span)
        if not 0 <= cutoff <= base_grid.t_span:
            raise ContractError(f"offset {off} moves the cutoff to {cutoff}, outside [0, {base_grid.t_span}]")
        grid = TimeGrid(base_grid.t_span, Direction.INFER, cutoff)
        out[off] = evaluate(net, data, grid, solver).accuracy
    return out


def write_metric_csv(path, rows) -> None:
    """Rows of (experiment_id, metric, value)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["experiment_id", "metric", "value"])
        for exp, metric, value in rows:
            w.writerow([exp, metric, repr(float(value))])
