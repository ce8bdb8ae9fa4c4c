"""Pathwise properties of the construction, run as checks over sampled paths.

The couplings here drive several controlled trajectories with one sampled
driver and verify order, budget, and support relations that the exact
construction must satisfy path by path: shifted starts stay ordered with a
conserved shift budget, trajectories under growing rate caps are ordered
and converge to the reflected limit, and the empirical characteristic
function matches the analytic exponent.  Exact-engine checks use absolute
tolerance 1e-9.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, replace

import numpy as np

from .levy_model import (
    EXACT,
    Exponential,
    InvalidParameter,
    JumpDiffusionSpec,
    PointMass,
    RngStream,
    Uniform,
    Weibull,
    _compensated_drift,
    characteristic_exponent,
    classify_case,
    sample_path,
)
from .path_engine import refract_exact, reflect_from_above
from .strategy_engine import StrategyParams, apply_strategy_exact

EXACT_TOL = 1e-9

PAIR_PROPS = (
    "pair_budget", "pair_gap_range", "pair_gap_monotone",
    "pair_div_range", "pair_div_monotone", "pair_div_support",
    "pair_inj_range", "pair_inj_monotone", "pair_inj_support",
    "budget",
)

LADDER_PROPS = (
    "ladder_refracted", "ladder_surplus", "ladder_dividends",
    "ladder_injections", "ladder_value_monotone",
)


class EngineUnavailable(RuntimeError):
    """Pathwise checks need the exact engine: sigma must be 0."""


class InvalidLadder(ValueError):
    """Rate-cap ladder must be strictly increasing and positive."""


@dataclass(frozen=True)
class Violation:
    time: float
    prop: str
    magnitude: float


def violations_csv(violations) -> str:
    buf = io.StringIO()
    buf.write("time,property,magnitude\n")
    for v in violations:
        buf.write("%.17g,%s,%.17g\n" % (v.time, v.prop, v.magnitude))
    return buf.getvalue()


def _counts(violations):
    out = {}
    for v in violations:
        out[v.prop] = out.get(v.prop, 0) + 1
    return out


def _summary_lines(checked, violations):
    counts = _counts(violations)
    lines = []
    for prop in checked:
        n = counts.get(prop, 0)
        if n:
            worst = max(v.magnitude for v in violations if v.prop == prop)
            lines.append("FAIL %s  violations=%d  max=%.3g" % (prop, n, worst))
        else:
            lines.append("PASS %s" % prop)
    return lines


@dataclass(frozen=True)
class CoupledPairReport:
    n_paths: int
    shift: float
    violations: tuple

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def violation_counts(self):
        return _counts(self.violations)

    @property
    def max_magnitude(self) -> float:
        return max((v.magnitude for v in self.violations), default=0.0)

    def summary_lines(self):
        return _summary_lines(PAIR_PROPS, self.violations)


@dataclass(frozen=True)
class AlphaLadderReport:
    n_paths: int
    alphas: tuple
    violations: tuple
    sup_gap_to_limit: tuple
    value_means: tuple
    value_ses: tuple

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def violation_counts(self):
        return _counts(self.violations)

    @property
    def max_magnitude(self) -> float:
        return max((v.magnitude for v in self.violations), default=0.0)

    def summary_lines(self):
        return _summary_lines(LADDER_PROPS, self.violations)


@dataclass(frozen=True)
class CharReport:
    lambdas: np.ndarray
    empirical: np.ndarray
    target: np.ndarray
    std_errors: np.ndarray

    @property
    def ok(self) -> bool:
        return bool(np.all(np.abs(self.empirical - self.target)
                           <= 3.0 * self.std_errors + 1e-12))


def _probe_times(trajs, horizon):
    knots = [t.seg_t for t in trajs]
    knots.append(np.asarray([horizon]))
    for t in trajs:
        if t.r_atom_t.size:
            knots.append(t.r_atom_t)
        if t.l_atom_t.size:
            knots.append(t.l_atom_t)
    ts = np.unique(np.concatenate(knots))
    mids = 0.5 * (ts[:-1] + ts[1:])
    return np.unique(np.concatenate((ts, mids)))


def check_pair(trajk, trajl, shift: float, b: float, tol: float = EXACT_TOL):
    """Order/budget/support relations between two coupled trajectories whose
    drivers differ by a constant shift >= 0.

    Returns a list of violations.  The support conditions are checked with
    one-knot slack: an increment between consecutive probe times is charged
    only if its condition fails at both endpoints.
    """
    out = []
    if shift < 0:
        raise InvalidParameter("shift", "upper start must not be below lower start")
    horizon = trajk.horizon
    ts = _probe_times((trajk, trajl), horizon)
    zk = trajk.value_at(ts)
    zl = trajl.value_at(ts)
    dz = zl - zk
    dl = trajl.dividends_at(ts) - trajk.dividends_at(ts)
    dr = trajl.injections_at(ts) - trajk.injections_at(ts)
    # (1) conserved budget of the initial shift
    resid = np.abs(dz + dl - dr - shift)
    bad = resid > tol
    for t, m in zip(ts[bad], resid[bad]):
        out.append(Violation(float(t), "pair_budget", float(m)))
    # (2) ordering gap shrinks, stays in [0, shift]
    rng_bad = (dz < -tol) | (dz > shift + tol)
    for t, m in zip(ts[rng_bad], np.maximum(-dz, dz - shift)[rng_bad]):
        out.append(Violation(float(t), "pair_gap_range", float(m)))
    inc = np.diff(dz)
    mono_bad = inc > tol
    for t, m in zip(ts[1:][mono_bad], inc[mono_bad]):
        out.append(Violation(float(t), "pair_gap_monotone", float(m)))
    # (3) dividend difference: range, monotone, support
    rng_bad = (dl < -tol) | (dl > shift + tol)
    for t, m in zip(ts[rng_bad], np.maximum(-dl, dl - shift)[rng_bad]):
        out.append(Violation(float(t), "pair_div_range", float(m)))
    dec = np.diff(dl)
    mono_bad = dec < -tol
    for t, m in zip(ts[1:][mono_bad], -dec[mono_bad]):
        out.append(Violation(float(t), "pair_div_monotone", float(m)))
    cond_l = (zk <= b + tol) & (zl >= b - tol) & (zl - zk > tol)
    grew = dec > tol
    support_bad = grew & ~(cond_l[:-1] | cond_l[1:])
    for t, m in zip(ts[1:][support_bad], dec[support_bad]):
        out.append(Violation(float(t), "pair_div_support", float(m)))
    # (4) injection difference: range, monotone, support at the floor
    rng_bad = (dr > tol) | (dr < -shift - tol)
    for t, m in zip(ts[rng_bad], np.maximum(dr, -shift - dr)[rng_bad]):
        out.append(Violation(float(t), "pair_inj_range", float(m)))
    rinc = np.diff(dr)
    mono_bad = rinc > tol
    for t, m in zip(ts[1:][mono_bad], rinc[mono_bad]):
        out.append(Violation(float(t), "pair_inj_monotone", float(m)))
    zk_left = trajk.left_limit_at(ts)
    cond_r = np.minimum(zk, zk_left) <= tol
    fell = rinc < -tol
    support_bad = fell & ~(cond_r[:-1] | cond_r[1:])
    for t, m in zip(ts[1:][support_bad], -rinc[support_bad]):
        out.append(Violation(float(t), "pair_inj_support", float(m)))
    return out


def coupled_pair_run(spec: JumpDiffusionSpec, params: StrategyParams, x: float,
                     k: float, l: float, horizon: float, n: int,
                     stream: RngStream, relaxed: bool = False) -> CoupledPairReport:
    """Drive the strategy from starts x+k and x+l with one driver per path.

    The shift l - k must lie strictly inside (0, b); relaxed lifts that to
    any l >= k, including the degenerate equal-start pair.
    """
    if spec.sigma != 0.0:
        raise EngineUnavailable("coupled pair checks need sigma = 0")
    shift = l - k
    if shift < 0 or (not relaxed and not (0 < shift < params.b)):
        raise InvalidParameter("l", "shift must lie in (0, b); pass relaxed to lift")
    case = classify_case(spec, params.alpha)
    base = replace(spec, x0=0.0)
    viol = []
    for i in range(n):
        path = sample_path(base, horizon, EXACT, stream.for_path(i))
        tk = apply_strategy_exact(path.shifted(x + k), params, case)
        tl = apply_strategy_exact(path.shifted(x + l), params, case)
        viol.extend(check_pair(tk.exact, tl.exact, shift, params.b))
        viol.extend(_budget_violations(tk, path.shifted(x + k)))
    return CoupledPairReport(n_paths=n, shift=shift, violations=tuple(viol))


def _budget_violations(traj, path, tol: float = EXACT_TOL):
    ts = traj.exact.seg_t
    lhs = traj.exact.value_at(ts)
    rhs = path.value_at(ts) - traj.exact.dividends_at(ts) + traj.exact.injections_at(ts)
    resid = np.abs(lhs - rhs)
    bad = resid > tol
    return [Violation(float(t), "budget", float(m)) for t, m in zip(ts[bad], resid[bad])]


def fixed_cap_violations(traj, alpha: float, tol: float = EXACT_TOL):
    """For b = 0 with drift above the cap, dividends accrue at the cap rate
    exactly: L_t = alpha * t for all t."""
    ts = _probe_times((traj,), traj.horizon)
    resid = np.abs(traj.dividends_at(ts) - alpha * ts)
    bad = resid > tol
    return [Violation(float(t), "cap_rate_dividends", float(m))
            for t, m in zip(ts[bad], resid[bad])]


def alpha_ladder_run(spec: JumpDiffusionSpec, b: float, alphas, x: float,
                     horizon: float, n: int, stream: RngStream,
                     beta: float = 1.5, q: float = 0.05) -> AlphaLadderReport:
    """Order of trajectories under a strictly increasing rate-cap ladder.

    Checks, pairwise along the ladder on shared noise: the refracted driver
    is pointwise ordered, the floored surplus is ordered, cumulative
    dividends and injections grow with the cap.  When the last rung is
    math.inf the sup gap of each surplus to the reflected limit is recorded,
    and discounted values must not decrease along the ladder within paired
    noise.
    """
    if spec.sigma != 0.0:
        raise EngineUnavailable("ladder checks need sigma = 0")
    alphas = tuple(float(a) for a in alphas)
    if len(alphas) < 2 or any(a <= 0 for a in alphas):
        raise InvalidLadder("need at least two positive rungs")
    if any(a2 <= a1 for a1, a2 in zip(alphas, alphas[1:])):
        raise InvalidLadder("rungs must be strictly increasing")
    base = replace(spec, x0=0.0)
    m = len(alphas)
    viol = []
    sup_gap = np.zeros(m)
    vals = np.zeros((m, n))
    for i in range(n):
        path = sample_path(base, horizon, EXACT, stream.for_path(i)).shifted(x)
        trajs, refr = [], []
        for a in alphas:
            case = classify_case(spec, a)
            pp = StrategyParams(b=b, alpha=a, beta=beta, q=q)
            trajs.append(apply_strategy_exact(path, pp, case).exact)
            if a == math.inf:
                refr.append(reflect_from_above(path, b))
            else:
                refr.append(refract_exact(path, b, a, case))
        ts = _probe_times(trajs + refr, horizon)
        zs = [t.value_at(ts) for t in trajs]
        ys = [t.value_at(ts) for t in refr]
        ls = [t.dividends_at(ts) for t in trajs]
        rs = [t.injections_at(ts) for t in trajs]
        for j in range(m):
            dl_j, dr_j = trajs[j].discounted_flow(q)
            vals[j, i] = dl_j - beta * dr_j
        if alphas[-1] == math.inf:
            for j in range(m):
                sup_gap[j] = max(sup_gap[j], float(np.max(zs[j] - zs[-1])))
        for j in range(m - 1):
            dy = ys[j] - ys[j + 1]
            bad = dy < -EXACT_TOL
            viol.extend(Violation(float(t), "ladder_refracted", float(-g))
                        for t, g in zip(ts[bad], dy[bad]))
            dz = zs[j] - zs[j + 1]
            bad = dz < -EXACT_TOL
            viol.extend(Violation(float(t), "ladder_surplus", float(-g))
                        for t, g in zip(ts[bad], dz[bad]))
            dl = ls[j] - ls[j + 1]
            bad = dl > EXACT_TOL
            viol.extend(Violation(float(t), "ladder_dividends", float(g))
                        for t, g in zip(ts[bad], dl[bad]))
            dr = rs[j] - rs[j + 1]
            bad = dr > EXACT_TOL
            viol.extend(Violation(float(t), "ladder_injections", float(g))
                        for t, g in zip(ts[bad], dr[bad]))
    means = vals.mean(axis=1)
    ses = vals.std(axis=1, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(m)
    for j in range(m - 1):
        diff = vals[j + 1] - vals[j]
        dm = diff.mean()
        dse = diff.std(ddof=1) / math.sqrt(n) if n > 1 else 0.0
        if dm < -3.0 * dse - EXACT_TOL:
            viol.append(Violation(float(alphas[j + 1]), "ladder_value_monotone",
                                  float(-dm)))
    return AlphaLadderReport(n_paths=n, alphas=alphas, violations=tuple(viol),
                             sup_gap_to_limit=tuple(sup_gap),
                             value_means=tuple(means), value_ses=tuple(ses))


def char_function_check(spec: JumpDiffusionSpec, t: float, lambdas, n: int,
                        stream: RngStream) -> CharReport:
    """Empirical characteristic function of X_t against the analytic
    exponent, three standard errors of the modulus."""
    lambdas = np.asarray(lambdas, dtype=float)
    rng = stream.generator()
    xt = np.full(n, _compensated_drift(spec) * t)
    if spec.sigma > 0:
        xt += spec.sigma * math.sqrt(t) * rng.standard_normal(n)
    for comp in spec.jump_components:
        counts = rng.poisson(comp.rate * t, n)
        tot = int(counts.sum())
        if tot:
            marks = comp.marks.sample(tot, rng) * comp.sign
            idx = np.repeat(np.arange(n), counts)
            np.add.at(xt, idx, marks)
    target = np.exp(-t * characteristic_exponent(spec, lambdas))
    emp = np.empty(len(lambdas), dtype=complex)
    ses = np.empty(len(lambdas))
    for i, lam in enumerate(lambdas):
        ph = np.exp(1j * lam * xt)
        emp[i] = ph.mean()
        ses[i] = math.sqrt((ph.real.var() + ph.imag.var()) / n)
    return CharReport(lambdas=lambdas, empirical=emp, target=target,
                      std_errors=ses)


@dataclass(frozen=True)
class ShapeReport:
    violations: tuple

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary_lines(self):
        checked = ("value_cap", "value_affine_below", "value_slope_cap",
                   "value_concavity", "value_slope_below_one_inside",
                   "value_slope_above_one_beyond")
        return _summary_lines(checked, self.violations)


def value_shape_check(xs, means, ses, params: StrategyParams, bstar: float,
                      slack_se: float = 3.0) -> ShapeReport:
    """Shape of an estimated value curve on an x grid.

    Checks the global bound alpha/q, concavity of the increments within
    noise, slope bounds (at most beta everywhere, at least 1 up to the
    threshold, at most 1 beyond), and exact affinity with slope beta below
    0 where the estimator extends linearly.
    """
    xs = np.asarray(xs, dtype=float)
    means = np.asarray(means, dtype=float)
    ses = np.asarray(ses, dtype=float)
    out = []
    cap = params.alpha / params.q if params.alpha != math.inf else math.inf
    over = means - (cap + slack_se * ses)
    for x, m in zip(xs[over > 0], over[over > 0]):
        out.append(Violation(float(x), "value_cap", float(m)))
    h = np.diff(xs)
    slopes = np.diff(means) / h
    sse = np.sqrt(ses[1:] ** 2 + ses[:-1] ** 2) / h
    neg = xs[1:] <= 0
    if np.any(neg):
        resid = np.abs(slopes[neg] - params.beta)
        bad = resid > 1e-9
        for x, m in zip(xs[1:][neg][bad], resid[bad]):
            out.append(Violation(float(x), "value_affine_below", float(m)))
    over = slopes - (params.beta + slack_se * sse)
    bad = over > 0
    for x, m in zip(xs[1:][bad], over[bad]):
        out.append(Violation(float(x), "value_slope_cap", float(m)))
    dec = np.diff(slopes) - slack_se * np.sqrt(sse[1:] ** 2 + sse[:-1] ** 2)
    bad = dec > 0
    for x, m in zip(xs[2:][bad], dec[bad]):
        out.append(Violation(float(x), "value_concavity", float(m)))
    mid = (xs[1:] + xs[:-1]) * 0.5
    inside = (mid > 0) & (mid <= bstar)
    under = (1.0 - slack_se * sse) - slopes
    bad = inside & (under > 0)
    for x, m in zip(mid[bad], under[bad]):
        out.append(Violation(float(x), "value_slope_below_one_inside", float(m)))
    beyond = mid > bstar
    over = slopes - (1.0 + slack_se * sse)
    bad = beyond & (over > 0)
    for x, m in zip(mid[bad], over[bad]):
        out.append(Violation(float(x), "value_slope_above_one_beyond", float(m)))
    return ShapeReport(violations=tuple(out))


def draw_random_bv_setup(rng: np.random.Generator):
    """Random bounded-variation model plus a compatible strategy and starts.

    Used by the randomized pathwise sweep: models span both drift regimes,
    all mark families, and one- or two-component jump mixes.
    """

    def draw_marks():
        u = rng.random()
        if u < 0.25:
            a = rng.uniform(0.0, 0.4)
            return Uniform(a, a + rng.uniform(0.3, 1.2))
        if u < 0.5:
            return Exponential(rng.uniform(0.6, 2.5))
        if u < 0.75:
            return Weibull(rng.uniform(0.8, 2.5), rng.uniform(0.4, 1.3))
        return PointMass(rng.uniform(0.2, 1.0))

    comps = []
    n_comp = 1 + int(rng.random() < 0.6)
    signs = [1, -1] if n_comp == 2 else [1 if rng.random() < 0.5 else -1]
    for sg in signs:
        comps.append((rng.uniform(0.2, 1.3), sg, draw_marks()))
    gamma = rng.uniform(-1.5, 1.5)
    spec = JumpDiffusionSpec(gamma=gamma, sigma=0.0,
                             jump_components=tuple(comps), x0=0.0)
    alpha = rng.uniform(0.25, 1.6)
    b = rng.uniform(0.3, 2.0)
    params = StrategyParams(b=b, alpha=alpha, beta=rng.uniform(1.1, 2.5),
                            q=rng.uniform(0.02, 0.2))
    x = rng.uniform(-0.5, 1.5)
    k = 0.0
    l = rng.uniform(0.05, 0.95) * b
    return spec, params, x, k, l
