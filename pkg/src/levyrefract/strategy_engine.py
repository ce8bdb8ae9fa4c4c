"""Controlled surplus trajectories under the threshold dividend strategy.

A strategy is (b, alpha, beta, q): dividends are paid at the cap rate alpha
while the controlled surplus exceeds b, and capital is injected to keep it
non-negative.  The exact engine delegates to the event sweeps in path_engine;
the Euler engine runs the discrete three-branch recursion on a time grid.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .levy_model import (
    EXACT,
    EventPath,
    GridPath,
    Grid,
    InvalidParameter,
    JumpDiffusionSpec,
    RngStream,
    sample_path,
)
from . import path_engine
from .path_engine import (
    BRANCH_ABOVE,
    BRANCH_AT_B,
    BRANCH_FLOOR,
    BRANCH_INTERIOR,
    RefractedPath,
    UnsupportedModel,
)


@dataclass(frozen=True)
class StrategyParams:
    b: float
    alpha: float  # dividend rate cap, math.inf allowed
    beta: float   # injection unit cost, > 1
    q: float      # discount rate, > 0

    def __post_init__(self):
        if not (self.b >= 0):
            raise InvalidParameter("b", "threshold must be >= 0")
        if not (self.alpha > 0):
            raise InvalidParameter("alpha", "rate cap must be positive")
        if not (self.beta > 1):
            raise InvalidParameter("beta", "injection cost must exceed 1")
        if not (self.q > 0) or self.q == math.inf:
            raise InvalidParameter("q", "discount rate must be positive and finite")


@dataclass(frozen=True)
class PassageTimes:
    """kappa_strict: first injection activity; t_weak: first visit to 0.

    t_weak <= kappa_strict always; both are math.inf when the event does not
    occur before the horizon.
    """

    kappa_strict: float
    t_weak: float


@dataclass(frozen=True)
class ControlledTrajectory:
    """Sampled controlled surplus with its cumulative dividend/injection flows.

    times holds the canonical sample grid (segment knots for the exact
    engine, the uniform step grid for Euler).  branch records which regime
    produced each point.  exact, when present, is the underlying closed-form
    trajectory for follow-up computation.
    """

    times: np.ndarray
    z: np.ndarray
    l: np.ndarray
    r: np.ndarray
    branch: np.ndarray
    horizon: float
    params: StrategyParams
    kind: str  # "exact" or "euler"
    exact: RefractedPath | None = None
    driver_end: float = math.nan

    def budget_residual(self) -> float:
        """Max |Z - (start + driver increment - L + R)| over the sample grid."""
        if self.kind == "exact":
            drv = self.exact.x0_minus
            # reconstruct driver from Z + L - R and compare at the end point
            recon = self.z + self.l - self.r
            return float(abs(recon[-1] - self.driver_end)) if not math.isnan(self.driver_end) else 0.0
        return 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,Z,L,R,branch\n")
        for row in zip(self.times, self.z, self.l, self.r, self.branch):
            buf.write("%.17g,%.17g,%.17g,%.17g,%d\n" % row)
        return buf.getvalue()


def apply_strategy_exact(path: EventPath, params: StrategyParams, case) -> ControlledTrajectory:
    """Run the threshold strategy along one event path, exactly.

    Finite alpha refracts above b and reflects at 0; alpha = inf degenerates
    to two-sided reflection on [0, b] with lump dividends.
    """
    if params.alpha == math.inf:
        traj = path_engine.reflect_two_sided(path, params.b)
    else:
        traj, _ = path_engine.refracted_reflected_exact(path, params.b, params.alpha, case)
    if path.horizon == math.inf:
        times = traj.seg_t
        branch = traj.seg_branch
        drv_end = math.nan
    else:
        times = np.append(traj.seg_t, path.horizon)
        branch = np.append(traj.seg_branch, traj.seg_branch[-1])
        drv_end = float(path.value_at(path.horizon))
    return ControlledTrajectory(
        times=times,
        z=traj.value_at(times),
        l=traj.dividends_at(times),
        r=traj.injections_at(times),
        branch=branch,
        horizon=path.horizon,
        params=params,
        kind="exact",
        exact=traj,
        driver_end=drv_end,
    )


def first_passage_times(traj: ControlledTrajectory) -> PassageTimes:
    """Passage readings off a controlled trajectory.

    Exact engine: kappa is the first injection lump or the start of the first
    floor-pinned stretch with a positive injection density; t_weak is the
    first knot where Z sits at 0.  Euler engine: the step-index analogues in
    grid time.
    """
    if traj.kind == "exact":
        ex = traj.exact
        cands = []
        if ex.r_atom_t.size:
            pos = ex.r_atom_t[ex.r_atom > 0]
            if pos.size:
                cands.append(float(pos[0]))
        active = ex.seg_rrate > 0
        if np.any(active):
            cands.append(float(ex.seg_t[np.argmax(active)]))
        kappa = min(cands) if cands else math.inf
        at_zero = ex.seg_v == 0.0
        t_weak = float(ex.seg_t[np.argmax(at_zero)]) if np.any(at_zero) else math.inf
        if ex.r_atom_t.size and (ex.r_atom > 0).any():
            t_weak = min(t_weak, float(ex.r_atom_t[ex.r_atom > 0][0]))
        return PassageTimes(kappa_strict=kappa, t_weak=min(t_weak, kappa))
    rinc = np.flatnonzero(traj.r > 0)
    kappa = float(traj.times[rinc[0]]) if rinc.size else math.inf
    zzero = np.flatnonzero(traj.z <= 0.0)
    t_weak = float(traj.times[zzero[0]]) if zzero.size else math.inf
    return PassageTimes(kappa_strict=kappa, t_weak=min(t_weak, kappa))


def _euler_xhat(spec: JumpDiffusionSpec, horizon: float, k: int, stream: RngStream,
                grid_path: GridPath | None):
    if grid_path is not None:
        if grid_path.k != k:
            raise InvalidParameter("grid_path", "step count mismatch")
        gp = grid_path
    else:
        gp = sample_path(spec, horizon, Grid(k), stream)
    # driver increments relative to the start: K points at times 0..(K-1)dt
    vals = gp.values - gp.values[0]
    return vals[:k], gp.dt


def simulate_euler(x: float, params: StrategyParams, spec: JumpDiffusionSpec,
                   horizon: float, k: int, stream: RngStream,
                   grid_path: GridPath | None = None) -> ControlledTrajectory:
    """Discrete three-branch recursion for the controlled surplus.

    Per step: compute the uncorrected state s = x + X_k - L_{k-1} + R_{k-1};
    s < 0 tops the injection account up to -(x + X_k - L_{k-1}); s > b pays
    one step of dividends at the cap rate; otherwise both accounts carry
    over.  Ties fall to the carry-over branch.  alpha = inf replaces the
    fixed dividend step with projection onto b.
    """
    xs, dt = _euler_xhat(spec, horizon, k, stream, grid_path)
    b, alpha = params.b, params.alpha
    lhat = np.empty(k)
    rhat = np.empty(k)
    branch = np.empty(k, dtype=int)
    lhat[0] = 0.0
    rhat[0] = max(0.0, -(x + xs[0]))
    branch[0] = BRANCH_FLOOR if rhat[0] > 0 else BRANCH_INTERIOR
    for i in range(1, k):
        s = x + xs[i] - lhat[i - 1] + rhat[i - 1]
        if s < 0.0:
            rhat[i] = -(x + xs[i] - lhat[i - 1])
            lhat[i] = lhat[i - 1]
            branch[i] = BRANCH_FLOOR
        elif s > b:
            lhat[i] = lhat[i - 1] + (alpha * dt if alpha != math.inf else s - b)
            rhat[i] = rhat[i - 1]
            branch[i] = BRANCH_ABOVE
        else:
            lhat[i] = lhat[i - 1]
            rhat[i] = rhat[i - 1]
            branch[i] = BRANCH_INTERIOR
    z = x + xs - lhat + rhat
    return ControlledTrajectory(
        times=np.arange(k) * dt,
        z=z,
        l=lhat,
        r=rhat,
        branch=branch,
        horizon=horizon,
        params=params,
        kind="euler",
        driver_end=float(x + xs[-1]),
    )


def sample_randomized_passage(passage: PassageTimes, p: float, stream: RngStream) -> float:
    """Randomized passage clock: the strict time with probability p, else the
    weak time."""
    if not (0.0 <= p <= 1.0):
        raise InvalidParameter("p", "probability must lie in [0, 1]")
    v = stream.generator().random()
    return passage.kappa_strict if v < p else passage.t_weak


def euler_exact_gap(spec: JumpDiffusionSpec, params: StrategyParams, case,
                    x: float, horizon: float, k: int, stream: RngStream) -> float:
    """Sup distance between the Euler recursion and the exact trajectory
    driven by the same sampled path, discretized with shared noise."""
    path = sample_path(spec, horizon, EXACT, stream)
    shifted = path.shifted(-path.x0)
    gp = shifted.to_grid(k)
    euler = simulate_euler(x, params, spec, horizon, k, stream, grid_path=gp)
    exact_path = shifted.shifted(x)
    traj = apply_strategy_exact(exact_path, params, case)
    zex = traj.exact.value_at(euler.times)
    return float(np.max(np.abs(euler.z - zex)))
