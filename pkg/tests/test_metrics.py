import math

import pytest
import torch

from revflow.datasets import gaussian_mixture
from revflow.metrics import offset_probe, roundtrip_error, straightness, write_metric_csv
from revflow.ndmath import DTYPE, ContractError, NetSpec, ParamNet
from revflow.odeint import TimeGrid
from revflow.training import attach_head, evaluate


def test_constant_field_is_perfectly_straight():
    x = torch.randn(10, 2, dtype=DTYPE)
    # generating with dx/dt = c moves x by -c; the chord x(1) - x(0) is c
    rep = straightness(lambda x, t: torch.full_like(x, 0.5), x, TimeGrid(10, "generate"))
    assert rep.value == pytest.approx(0.0, abs=1e-28)


def test_rotation_straightness_closed_form():
    # dx/dt = w J x keeps |x| fixed; the chord has length 2|x| sin(w/2) and the
    # velocity has length w|x| at angle w/2 - w(1-t) ... averaged over t the
    # squared deviation is |x|^2 (w^2 - 4 sin^2(w/2))
    w = 1.3
    J = torch.tensor([[0.0, -w], [w, 0.0]], dtype=DTYPE)
    x = torch.tensor([[1.0, 0.0], [0.0, 2.0]], dtype=DTYPE)
    rep = straightness(lambda x, t: x @ J.T, x, TimeGrid(400, "generate"))
    r2 = torch.tensor([1.0, 4.0])
    expected = float((r2 * (w**2 - 4 * math.sin(w / 2) ** 2)).mean())
    assert rep.value == pytest.approx(expected, rel=1e-4)


def test_straightness_is_shuffle_invariant():
    field = lambda x, t: torch.sin(3 * x) * (1 + t)  # noqa: E731
    x = torch.randn(30, 2, generator=torch.Generator().manual_seed(0), dtype=DTYPE)
    g = TimeGrid(20, "generate")
    a = straightness(field, x, g).value
    b = straightness(field, x[torch.randperm(30)], g).value
    halves = (straightness(field, x[:15], g).value + straightness(field, x[15:], g).value) / 2
    assert a == pytest.approx(b, rel=1e-12) and a == pytest.approx(halves, rel=1e-12)


def test_straightness_needs_generate_grid():
    with pytest.raises(ContractError):
        straightness(lambda x, t: x, torch.zeros(1, 2, dtype=DTYPE), TimeGrid(5))


def test_zero_field_round_trip_is_exact():
    net = ParamNet(NetSpec(hidden=(8,), time_embed_dim=4), seed=0)
    rt = roundtrip_error(net, torch.randn(20, 2, dtype=DTYPE), TimeGrid(10))
    assert rt.median == 0.0 and float(rt.errors.max()) == 0.0


def test_round_trip_improves_with_refinement():
    field = lambda x, t: torch.tanh(2 * x) * (1 - t) - x.flip(1)  # noqa: E731
    x = torch.randn(50, 2, generator=torch.Generator().manual_seed(0), dtype=DTYPE)
    errs = [roundtrip_error(field, x, TimeGrid(n), "euler").median for n in (20, 100, 500)]
    assert errs[0] > errs[1] > errs[2]


def _classifier():
    ds = gaussian_mixture(200, [[-2.0, 0.0], [2.0, 0.0]], 0.25, seed=0)
    net = attach_head(ParamNet(NetSpec(hidden=(8,), time_embed_dim=4), seed=0), 2, (4,), seed=3)
    return net, ds


def test_offset_zero_matches_evaluate():
    net, ds = _classifier()
    grid = TimeGrid(20, "infer", 10)
    assert offset_probe(net, ds, grid, [0.0])[0.0] == evaluate(net, ds, grid).accuracy


def test_offset_out_of_range():
    net, ds = _classifier()
    with pytest.raises(ContractError):
        offset_probe(net, ds, TimeGrid(20, "infer", 18), [0.2])


def test_metric_csv(tmp_path):
    write_metric_csv(tmp_path / "m.csv", [("run", "straightness", 0.25)])
    assert (tmp_path / "m.csv").read_text().splitlines() == ["experiment_id,metric,value", "run,straightness,0.25"]
