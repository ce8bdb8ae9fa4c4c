import math

import numpy as np
import pytest

from levyrefract.levy_model import (
    EXACT, EventPath, GridPath, InvalidParameter, RngStream, classify_case,
    sample_path,
)
from levyrefract.path_engine import (
    BRANCH_ABOVE, BRANCH_FLOOR, BRANCH_INTERIOR,
)
from levyrefract.strategy_engine import (
    ControlledTrajectory, PassageTimes, StrategyParams, apply_strategy_exact,
    euler_exact_gap, first_passage_times, sample_randomized_passage,
    simulate_euler,
)

from conftest import drift_only


def params(b=1.0, alpha=0.5, beta=1.5, q=0.05):
    return StrategyParams(b=b, alpha=alpha, beta=beta, q=q)


def case_for(delta, alpha):
    return classify_case(drift_only(delta), alpha)


def drift_path(delta, x0, horizon, jumps=()):
    times = np.array([t for t, _ in jumps])
    sizes = np.array([s for _, s in jumps])
    return EventPath(x0=x0, horizon=horizon, drift=delta, times=times, sizes=sizes)


class TestStrategyParams:
    def test_accepts_infinite_rate_cap(self):
        assert params(alpha=math.inf).alpha == math.inf

    @pytest.mark.parametrize("kw", [
        dict(b=-0.1), dict(alpha=0.0), dict(alpha=-2.0),
        dict(beta=1.0), dict(beta=0.5), dict(q=0.0), dict(q=-0.05),
        dict(q=math.inf),
    ])
    def test_rejects_bad_fields(self, kw):
        with pytest.raises(InvalidParameter):
            params(**kw)


class TestExactStrategy:
    def test_matches_the_event_sweep(self):
        p = drift_path(1.0, 0.5, 4.0, jumps=[(2.0, -2.0)])
        traj = apply_strategy_exact(p, params(b=1.0, alpha=0.4), case_for(1.0, 0.4))
        assert traj.kind == "exact"
        assert traj.times[-1] == 4.0
        i = np.searchsorted(traj.times, 4.0)
        assert traj.z[i] == pytest.approx(1.6)
        assert traj.l[i] == pytest.approx(1.0)
        assert traj.r[i] == pytest.approx(0.1)
        assert traj.budget_residual() <= 1e-12

    def test_infinite_cap_degenerates_to_the_band(self):
        p = drift_path(1.0, 0.5, 3.0, jumps=[(2.0, -2.0), (2.5, 2.0)])
        traj = apply_strategy_exact(p, params(b=1.0, alpha=math.inf),
                                    case_for(1.0, 1.0))
        assert np.max(traj.z) <= 1.0 + 1e-12
        assert np.min(traj.z) >= -1e-12
        end = np.searchsorted(traj.times, 3.0)
        assert traj.l[end] == pytest.approx(3.5)
        assert traj.r[end] == pytest.approx(1.0)

    def test_budget_residual_on_sampled_paths(self, ref_spec_bv):
        case = classify_case(ref_spec_bv, 0.5)
        for i in range(30):
            p = sample_path(ref_spec_bv, 5.0, EXACT, RngStream(41, tag=6, index=i))
            traj = apply_strategy_exact(p, params(b=1.2), case)
            assert traj.budget_residual() <= 1e-12

    def test_perpetual_negative_drift_injects_forever(self):
        p = drift_path(-1.0, 0.0, math.inf)
        traj = apply_strategy_exact(p, params(b=2.0), case_for(-1.0, 0.5))
        dl, dr = traj.exact.discounted_flow(0.05, horizon=math.inf)
        assert dl == 0.0
        assert dr == pytest.approx(1.0 / 0.05, rel=1e-12)


class TestPassageTimes:
    def test_pinned_floor_reads_the_stretch_start(self):
        p = drift_path(-1.0, 0.5, 3.0)
        traj = apply_strategy_exact(p, params(b=2.0), case_for(-1.0, 0.5))
        pt = first_passage_times(traj)
        assert pt.kappa_strict == pytest.approx(0.5)
        assert pt.t_weak == pytest.approx(0.5)

    def test_jump_atom_reads_the_jump_time(self):
        p = drift_path(1.0, 0.5, 4.0, jumps=[(2.0, -2.0)])
        traj = apply_strategy_exact(p, params(b=1.0, alpha=0.4), case_for(1.0, 0.4))
        pt = first_passage_times(traj)
        assert pt.kappa_strict == pytest.approx(2.0)
        assert pt.t_weak == pytest.approx(2.0)

    def test_touch_without_injection_separates_weak_and_strict(self):
        # jump lands exactly on 0, then the drift recovers: visited but no top-up
        p = drift_path(1.0, 1.0, 4.0, jumps=[(0.5, -1.5)])
        traj = apply_strategy_exact(p, params(b=5.0), case_for(1.0, 0.5))
        pt = first_passage_times(traj)
        assert pt.t_weak == pytest.approx(0.5)
        assert pt.kappa_strict == math.inf

    def test_no_visit_gives_infinite_times(self):
        p = drift_path(1.0, 0.5, 4.0)
        pt = first_passage_times(apply_strategy_exact(p, params(), case_for(1.0, 0.5)))
        assert pt.kappa_strict == math.inf and pt.t_weak == math.inf

    def test_randomized_clock_mixes_the_two_times(self):
        pt = PassageTimes(kappa_strict=3.0, t_weak=1.0)
        s = RngStream(7, tag=8, index=0)
        assert sample_randomized_passage(pt, 1.0, s) == 3.0
        assert sample_randomized_passage(pt, 0.0, s) == 1.0
        with pytest.raises(InvalidParameter):
            sample_randomized_passage(pt, 1.5, s)
        draws = [sample_randomized_passage(pt, 0.5, s.for_path(i)) for i in range(400)]
        frac = np.mean(np.array(draws) == 3.0)
        assert 0.4 < frac < 0.6


class TestEulerRecursion:
    def hand_grid(self):
        incs = np.array([-2.0, 1.0, 2.0, 0.0, -0.5])
        return GridPath(x0=0.0, horizon=5.0, k=5, increments=incs)

    def test_three_branch_recursion_by_hand(self):
        """One step per branch: top-up, carry-over, capped dividend."""
        gp = self.hand_grid()
        traj = simulate_euler(1.0, params(b=1.5, alpha=0.5), drift_only(0.0),
                              5.0, 5, RngStream(1), grid_path=gp)
        np.testing.assert_allclose(traj.times, [0, 1, 2, 3, 4])
        np.testing.assert_allclose(traj.z, [1.0, 0.0, 1.0, 2.5, 2.0])
        np.testing.assert_allclose(traj.l, [0.0, 0.0, 0.0, 0.5, 1.0])
        np.testing.assert_allclose(traj.r, [0.0, 1.0, 1.0, 1.0, 1.0])
        np.testing.assert_array_equal(
            traj.branch,
            [BRANCH_INTERIOR, BRANCH_FLOOR, BRANCH_INTERIOR, BRANCH_ABOVE,
             BRANCH_ABOVE])

    def test_infinite_cap_projects_onto_the_threshold(self):
        gp = self.hand_grid()
        traj = simulate_euler(1.0, params(b=1.5, alpha=math.inf), drift_only(0.0),
                              5.0, 5, RngStream(1), grid_path=gp)
        # last step ties with b exactly and carries over
        np.testing.assert_allclose(traj.z, [1.0, 0.0, 1.0, 1.5, 1.5])
        np.testing.assert_allclose(traj.l, [0.0, 0.0, 0.0, 1.5, 1.5])

    def test_euler_passage_times_in_grid_units(self):
        gp = self.hand_grid()
        traj = simulate_euler(1.0, params(b=1.5, alpha=0.5), drift_only(0.0),
                              5.0, 5, RngStream(1), grid_path=gp)
        pt = first_passage_times(traj)
        assert pt.kappa_strict == pytest.approx(1.0)
        assert pt.t_weak == pytest.approx(1.0)

    def test_negative_start_tops_up_at_step_zero(self):
        gp = GridPath(x0=0.0, horizon=2.0, k=2, increments=np.array([0.5, 0.5]))
        traj = simulate_euler(-0.7, params(), drift_only(0.0), 2.0, 2,
                              RngStream(1), grid_path=gp)
        assert traj.r[0] == pytest.approx(0.7)
        assert traj.z[0] == 0.0
        assert traj.branch[0] == BRANCH_FLOOR

    def test_grid_path_step_count_must_match(self):
        with pytest.raises(InvalidParameter):
            simulate_euler(1.0, params(), drift_only(0.0), 5.0, 10,
                           RngStream(1), grid_path=self.hand_grid())

    def test_csv_shape(self):
        traj = simulate_euler(1.0, params(b=1.5, alpha=0.5), drift_only(0.0),
                              5.0, 5, RngStream(1), grid_path=self.hand_grid())
        lines = traj.to_csv().strip().splitlines()
        assert lines[0] == "t,Z,L,R,branch"
        assert len(lines) == 6

    def test_budget_identity_on_sampled_grids(self, ref_spec_bv):
        for i in range(10):
            s = RngStream(43, tag=7, index=i)
            traj = simulate_euler(0.5, params(b=1.2), ref_spec_bv, 5.0, 500, s)
            assert np.min(traj.z) >= 0.0
            assert np.all(np.diff(traj.l) >= 0)
            assert np.all(np.diff(traj.r) >= 0)


class TestEulerExactGap:
    def test_gap_shrinks_in_mean_with_grid_refinement(self, ref_spec_bv):
        case = classify_case(ref_spec_bv, 0.5)
        sp = params(b=1.2)
        means = []
        for k in (50, 400, 3200):
            gaps = [euler_exact_gap(ref_spec_bv, sp, case, 0.5, 5.0, k,
                                    RngStream(47, tag=9, index=i))
                    for i in range(30)]
            means.append(np.mean(gaps))
        assert means[0] > means[1] > means[2]
        assert means[2] < 0.02
