import math

import pytest
import torch

from oracles import gradient_probe_error, loglog_slope
from revflow.ndmath import DTYPE, ContractError, NetSpec, ParamNet, backward
from revflow.odeint import (
    Direction,
    IntegrationBlowup,
    SolverKind,
    TimeGrid,
    extract_features,
    feature_at,
    integrate,
    step,
    write_trajectory_csv,
)


def decay(x, t):
    return -x


class TestTimeGrid:
    def test_default_cutoff_is_full_traversal(self):
        assert TimeGrid(20).cutoff_index == 20

    def test_times_follow_direction(self):
        assert TimeGrid(4, "infer").times() == [0.0, 0.25, 0.5, 0.75, 1.0]
        assert TimeGrid(4, "generate").times() == [1.0, 0.75, 0.5, 0.25, 0.0]

    @pytest.mark.parametrize("kw", [dict(t_span=0), dict(t_span=5, cutoff_index=6), dict(t_span=5, cutoff_index=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ContractError):
            TimeGrid(**kw)

    def test_refined_keeps_fraction(self):
        g = TimeGrid(20, "infer", 10).refined(500)
        assert (g.t_span, g.cutoff_index) == (500, 250)


def test_euler_single_step():
    x = torch.tensor([[2.0]], dtype=DTYPE)
    assert step("euler", decay, x, 0.0, 0.1).item() == pytest.approx(1.8, abs=1e-15)


def test_zero_step_rejected():
    with pytest.raises(ContractError):
        step("rk4", decay, torch.ones(1, 1, dtype=DTYPE), 0.0, 0.0)


def test_time_dependent_field_uses_stage_times():
    # dx/dt = t^3 is integrated exactly by RK4 (Simpson's rule)
    traj = integrate("rk4", lambda x, t: torch.full_like(x, t**3), torch.zeros(1, 1, dtype=DTYPE), TimeGrid(3))
    assert traj.final.item() == pytest.approx(0.25, abs=1e-15)


@pytest.mark.parametrize("solver,order", [("euler", 1), ("midpoint", 2), ("rk4", 4)])
def test_convergence_order(solver, order):
    spans = [10, 20, 40, 80, 160]
    x = torch.ones(1, 1, dtype=DTYPE)
    errs = [abs(integrate(solver, decay, x, TimeGrid(n), record=False).final.item() - math.exp(-1)) for n in spans]
    slope = loglog_slope([1 / n for n in spans], errs)
    assert abs(slope - order) < 0.2


def test_rk4_hundred_steps_hits_exp():
    out = integrate("rk4", decay, torch.ones(1, 1, dtype=DTYPE), TimeGrid(100), record=False).final
    assert abs(out.item() - math.exp(-1)) < 1e-8


def test_generate_direction_reverses_time():
    out = integrate("rk4", decay, torch.ones(1, 1, dtype=DTYPE), TimeGrid(100, "generate"), record=False).final
    assert out.item() == pytest.approx(math.e, rel=1e-8)


def test_blowup_reports_step():
    field = lambda x, t: 50 * x  # noqa: E731
    with pytest.raises(IntegrationBlowup) as info:
        integrate("euler", field, torch.ones(1, 1, dtype=DTYPE), TimeGrid(10))
    # (1 + 5)^k first exceeds 1e6 at k = 8, i.e. step index 7
    assert info.value.step_index == 7


def test_nan_is_blowup():
    with pytest.raises(IntegrationBlowup):
        integrate("euler", lambda x, t: x * float("nan"), torch.ones(1, 1, dtype=DTYPE), TimeGrid(2))


class TestFeatures:
    def test_cutoff_zero_is_input(self):
        x = torch.randn(4, 2, dtype=DTYPE)
        assert torch.equal(extract_features(decay, x, TimeGrid(10, "infer", 0)), x)

    def test_cutoff_end_is_terminal_state(self):
        x = torch.randn(4, 2, dtype=DTYPE)
        grid = TimeGrid(10)
        traj = integrate("euler", decay, x, grid)
        assert torch.equal(extract_features(decay, x, grid), traj.final)
        assert torch.equal(feature_at(traj, grid), traj.final)

    def test_feature_at_matches_partial_integration(self):
        x = torch.randn(4, 2, dtype=DTYPE)
        grid = TimeGrid(20, "infer", 10)
        traj = integrate("midpoint", decay, x, grid)
        assert torch.equal(feature_at(traj, grid), extract_features(decay, x, grid, "midpoint"))

    def test_unrecorded_trajectory(self):
        traj = integrate("euler", decay, torch.ones(1, 1, dtype=DTYPE), TimeGrid(5), record=False)
        assert len(traj.states) == 2
        with pytest.raises(ContractError):
            feature_at(traj, TimeGrid(5))


def test_zero_field_is_identity():
    net = ParamNet(NetSpec(hidden=(8,), time_embed_dim=4), seed=0)
    x = torch.randn(6, 2, dtype=DTYPE)
    for solver in SolverKind:
        assert torch.equal(integrate(solver, net, x, TimeGrid(7), record=False).final, x)


def test_gradient_through_unrolled_solve():
    net = ParamNet(NetSpec(hidden=(6, 6), time_embed_dim=4), seed=1)
    net.velocity_layers[-1].reset(torch.Generator().manual_seed(3))
    x = torch.randn(5, 2, generator=torch.Generator().manual_seed(0), dtype=DTYPE)
    params = dict(net.named_parameters())

    def loss():
        return integrate("euler", net, x, TimeGrid(20), record=False, differentiable=True).final.pow(2).sum()

    assert gradient_probe_error(loss, params, backward(loss(), params), 10, 9) < 1e-5


def test_trajectory_csv(tmp_path):
    x = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=DTYPE)
    traj = integrate("euler", decay, x, TimeGrid(3))
    rows = write_trajectory_csv(tmp_path / "t.csv", traj)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert rows == 8 and len(lines) == 9
    assert lines[0] == "sample_id,step,t,x_0,x_1"
    assert lines[1] == "0,0,0.0,1.0,2.0"
