"""Driving process definition: finite-activity jump diffusions.

A model is a drift, an optional Gaussian coefficient, and a finite list of
compound-Poisson jump components with signed marks.  This module validates
models, computes the bounded-variation net drift, classifies the regime
relative to a dividend cap, evaluates the characteristic exponent, and
samples paths either exactly (sigma = 0) or on a uniform grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special
from scipy.integrate import quad


class InvalidParameter(ValueError):
    """A model or distribution parameter is outside its legal range."""

    def __init__(self, field_name, message=None):
        self.field_name = field_name
        super().__init__(message or f"invalid parameter: {field_name}")


class InfiniteNegativeMean(ValueError):
    """The negative-jump mark law has no finite mean.

    Not reachable with the built-in mark families, which all have finite
    means; the check exists so extension distributions are still caught.
    """


class QuadratureFailure(RuntimeError):
    """Adaptive quadrature could not reach the requested tolerance."""


class ExactModeUnavailable(RuntimeError):
    """Exact path sampling requested for a model with sigma > 0."""


def _require(cond: bool, field_name: str, message: str):
    if not cond:
        raise InvalidParameter(field_name, message)


def _finite(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating)) and math.isfinite(x)


# ---------------------------------------------------------------------------
# mark distributions


class MarkDistribution:
    """Law of a positive jump size, before the component sign is applied.

    Subclasses provide the mean, the truncated mean E[M 1{M<1}] used by the
    drift compensation, the characteristic function E[exp(iuM)], the CDF,
    and inverse-CDF sampling.
    """

    def mean(self) -> float:
        raise NotImplementedError

    def truncated_mean(self) -> float:
        """E[M 1{M < 1}]."""
        raise NotImplementedError

    def char(self, u):
        """E[exp(i u M)] for real u (scalar or array)."""
        raise NotImplementedError

    def cdf(self, x):
        raise NotImplementedError

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def pdf_at(self, x):
        raise NotImplementedError

    def quantile_hi(self) -> float:
        """Upper point leaving at most ~1e-12 of mass above it."""
        raise NotImplementedError


@dataclass(frozen=True)
class Uniform(MarkDistribution):
    a: float
    b: float

    def __post_init__(self):
        _require(_finite(self.a) and self.a >= 0, "a", "Uniform lower bound must be >= 0")
        _require(_finite(self.b) and self.b > self.a, "b", "Uniform upper bound must exceed the lower")

    def mean(self):
        return 0.5 * (self.a + self.b)

    def truncated_mean(self):
        if self.a >= 1.0:
            return 0.0
        hi = min(self.b, 1.0)
        return (hi * hi - self.a * self.a) / (2.0 * (self.b - self.a))

    def char(self, u):
        u = np.asarray(u, dtype=float)
        out = np.ones(u.shape, dtype=complex)
        nz = u != 0
        iu = 1j * u[nz]
        out[nz] = (np.exp(iu * self.b) - np.exp(iu * self.a)) / (iu * (self.b - self.a))
        return out if out.shape else complex(out)

    def cdf(self, x):
        return np.clip((np.asarray(x, dtype=float) - self.a) / (self.b - self.a), 0.0, 1.0)

    def sample(self, n, rng):
        return self.a + (self.b - self.a) * rng.random(n)

    def pdf_at(self, x):
        x = np.asarray(x, dtype=float)
        return np.where((x >= self.a) & (x <= self.b), 1.0 / (self.b - self.a), 0.0)

    def quantile_hi(self):
        return self.b


@dataclass(frozen=True)
class Exponential(MarkDistribution):
    rho: float

    def __post_init__(self):
        _require(_finite(self.rho) and self.rho > 0, "rho", "Exponential rate must be positive")

    def mean(self):
        return 1.0 / self.rho

    def truncated_mean(self):
        r = self.rho
        return (1.0 - math.exp(-r) * (1.0 + r)) / r

    def char(self, u):
        u = np.asarray(u, dtype=float)
        out = self.rho / (self.rho - 1j * u)
        return out if out.shape else complex(out)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x <= 0, 0.0, 1.0 - np.exp(-self.rho * np.maximum(x, 0.0)))

    def sample(self, n, rng):
        # inverse CDF keeps the draw count per mark fixed at one uniform
        return -np.log1p(-rng.random(n)) / self.rho

    def pdf_at(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x >= 0, self.rho * np.exp(-self.rho * np.maximum(x, 0.0)), 0.0)

    def quantile_hi(self):
        return -math.log(1e-12) / self.rho


@dataclass(frozen=True)
class Weibull(MarkDistribution):
    shape: float
    scale: float

    def __post_init__(self):
        _require(_finite(self.shape) and self.shape > 0, "shape", "Weibull shape must be positive")
        _require(_finite(self.scale) and self.scale > 0, "scale", "Weibull scale must be positive")

    def mean(self):
        return self.scale * math.gamma(1.0 + 1.0 / self.shape)

    def truncated_mean(self):
        # E[M 1{M<1}] = scale * lower_incomplete_gamma(1 + 1/k, (1/scale)^k)
        a = 1.0 + 1.0 / self.shape
        z = (1.0 / self.scale) ** self.shape
        return self.scale * math.gamma(a) * special.gammainc(a, z)

    def _density(self, x):
        k, lam = self.shape, self.scale
        return (k / lam) * (x / lam) ** (k - 1.0) * np.exp(-((x / lam) ** k))

    def char(self, u):
        scalar = np.isscalar(u)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        # truncate where the survival function is below 1e-18; the tail
        # contribution is then smaller than the 1e-10 relative tolerance
        x_max = self.scale * (41.5 ** (1.0 / self.shape))
        out = np.empty(u.shape, dtype=complex)
        for i, ui in enumerate(u):
            re = _quad_checked(lambda x: self._density(x) * np.cos(ui * x), 0.0, x_max)
            im = _quad_checked(lambda x: self._density(x) * np.sin(ui * x), 0.0, x_max)
            out[i] = re + 1j * im
        return out[0] if scalar else out

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x <= 0, 0.0, -np.expm1(-((np.maximum(x, 0.0) / self.scale) ** self.shape)))

    def sample(self, n, rng):
        return self.scale * (-np.log1p(-rng.random(n))) ** (1.0 / self.shape)

    def pdf_at(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x > 0, self._density(np.maximum(x, 1e-300)), 0.0)

    def quantile_hi(self):
        return self.scale * (-math.log(1e-12)) ** (1.0 / self.shape)


@dataclass(frozen=True)
class HyperExponential(MarkDistribution):
    """Mixture of exponentials with strictly increasing rates."""

    weights: tuple
    rates: tuple

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        _require(len(self.weights) == len(self.rates) and len(self.rates) > 0,
                 "weights", "weights and rates must be equal-length and non-empty")
        _require(all(_finite(w) and w > 0 for w in self.weights), "weights",
                 "mixture weights must be positive")
        _require(abs(sum(self.weights) - 1.0) <= 1e-9, "weights",
                 "mixture weights must sum to 1")
        _require(all(_finite(r) and r > 0 for r in self.rates), "rates",
                 "mixture rates must be positive")
        _require(all(r1 < r2 for r1, r2 in zip(self.rates, self.rates[1:])),
                 "rates", "mixture rates must be strictly increasing")

    def mean(self):
        return sum(w / r for w, r in zip(self.weights, self.rates))

    def truncated_mean(self):
        return sum(w * Exponential(r).truncated_mean()
                   for w, r in zip(self.weights, self.rates))

    def char(self, u):
        u = np.asarray(u, dtype=float)
        out = sum(w * (r / (r - 1j * u)) for w, r in zip(self.weights, self.rates))
        return out if np.shape(out) else complex(out)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        pos = np.maximum(x, 0.0)
        val = sum(w * (1.0 - np.exp(-r * pos)) for w, r in zip(self.weights, self.rates))
        return np.where(x <= 0, 0.0, val)

    def sample(self, n, rng):
        comp = rng.choice(len(self.rates), size=n, p=np.asarray(self.weights))
        rates = np.asarray(self.rates)[comp]
        return -np.log1p(-rng.random(n)) / rates

    def pdf_at(self, x):
        x = np.asarray(x, dtype=float)
        val = sum(w * r * np.exp(-r * np.maximum(x, 0.0))
                  for w, r in zip(self.weights, self.rates))
        return np.where(x >= 0, val, 0.0)

    def quantile_hi(self):
        return -math.log(1e-12) / min(self.rates)


@dataclass(frozen=True)
class PointMass(MarkDistribution):
    c: float

    def __post_init__(self):
        _require(_finite(self.c) and self.c > 0, "c", "point mass must be positive")

    def mean(self):
        return self.c

    def truncated_mean(self):
        return self.c if self.c < 1.0 else 0.0

    def char(self, u):
        u = np.asarray(u, dtype=float)
        out = np.exp(1j * u * self.c)
        return out if out.shape else complex(out)

    def cdf(self, x):
        return (np.asarray(x, dtype=float) >= self.c).astype(float)

    def sample(self, n, rng):
        return np.full(n, self.c)

    def quantile_hi(self):
        return self.c


def _quad_checked(f, a, b):
    val, err = quad(f, a, b, epsabs=1e-13, epsrel=1e-10, limit=200)
    if err > max(1e-10 * abs(val), 1e-11):
        raise QuadratureFailure(f"quadrature error estimate {err:.2e} for value {val:.6e}")
    return val


# ---------------------------------------------------------------------------
# model spec


@dataclass(frozen=True)
class JumpComponent:
    rate: float
    sign: int
    marks: MarkDistribution


@dataclass(frozen=True)
class JumpDiffusionSpec:
    """Drift gamma, Gaussian coefficient sigma, finite jump components, start x0.

    gamma is the truncated-drift coefficient of the characteristic exponent,
    not the slope seen between jumps; the two differ by the compensation of
    marks below 1 (see net_drift).
    """

    gamma: float
    sigma: float = 0.0
    jump_components: tuple = ()
    x0: float = 0.0

    def __post_init__(self):
        comps = tuple(
            c if isinstance(c, JumpComponent) else JumpComponent(*c)
            for c in self.jump_components
        )
        object.__setattr__(self, "jump_components", comps)


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    negative_jump_mean: float
    notes: tuple = ()


def validate_spec(spec: JumpDiffusionSpec) -> ValidationReport:
    """Check all model invariants; raises InvalidParameter naming the field.

    Returns a report carrying the total negative-jump mean, the quantity
    whose finiteness admissible strategies require.
    """
    _require(_finite(spec.gamma), "gamma", "gamma must be finite")
    _require(_finite(spec.sigma) and spec.sigma >= 0, "sigma", "sigma must be >= 0")
    _require(_finite(spec.x0), "x0", "x0 must be finite")
    neg_mean = 0.0
    for i, comp in enumerate(spec.jump_components):
        _require(_finite(comp.rate) and comp.rate > 0, "rate",
                 f"component {i}: rate must be positive")
        _require(comp.sign in (-1, 1), "sign", f"component {i}: sign must be +1 or -1")
        _require(isinstance(comp.marks, MarkDistribution), "marks",
                 f"component {i}: marks must be a MarkDistribution")
        m = comp.marks.mean()
        if not math.isfinite(m):
            raise InfiniteNegativeMean(f"component {i}: mark mean is not finite")
        if comp.sign < 0:
            neg_mean += comp.rate * m
    return ValidationReport(ok=True, negative_jump_mean=neg_mean)


def _compensated_drift(spec: JumpDiffusionSpec) -> float:
    """Slope of the path between jumps: gamma minus the small-mark compensation.

    Defined for every sigma; equals the net drift when sigma = 0.
    """
    comp = sum(c.rate * c.sign * c.marks.truncated_mean() for c in spec.jump_components)
    return spec.gamma - comp


def net_drift(spec: JumpDiffusionSpec):
    """Net drift delta of a bounded-variation model, or None when sigma > 0."""
    if spec.sigma > 0:
        return None
    return _compensated_drift(spec)


@dataclass(frozen=True)
class CaseLabel:
    """Regime label with the computed net drift (None when sigma > 0)."""

    label: str  # "Case1" or "Case2"
    delta: float | None = None

    @property
    def is_case2(self) -> bool:
        return self.label == "Case2"


def classify_case(spec: JumpDiffusionSpec, alpha) -> CaseLabel:
    """Case2 iff sigma = 0 and the net drift lies in [0, alpha]; else Case1.

    alpha may be math.inf, in which case only delta >= 0 is needed.
    """
    delta = net_drift(spec)
    if delta is None:
        return CaseLabel("Case1", None)
    if 0.0 <= delta <= alpha:
        return CaseLabel("Case2", delta)
    return CaseLabel("Case1", delta)


def characteristic_exponent(spec: JumpDiffusionSpec, lam):
    """Levy exponent Psi with E[exp(-t Psi(lam))] = E[exp(i lam (X_t - x0))]."""
    scalar = np.isscalar(lam)
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    psi = -1j * spec.gamma * lam + 0.5 * spec.sigma ** 2 * lam ** 2
    for comp in spec.jump_components:
        cf = np.atleast_1d(np.asarray(comp.marks.char(comp.sign * lam)))
        trunc = comp.marks.truncated_mean()
        psi = psi + comp.rate * (1.0 - cf + 1j * lam * comp.sign * trunc)
    return complex(psi[0]) if scalar else psi


# ---------------------------------------------------------------------------
# deterministic parallel RNG streams


@dataclass(frozen=True)
class RngStream:
    """Counter-based stream keyed by (seed, tag, index).

    generator() builds a fresh Philox generator every call, so a stream is
    stateless: sampling twice from the same stream repeats the draw.  Distinct
    (tag, index) pairs give statistically independent streams regardless of
    the order or thread they are consumed in.
    """

    seed: int
    tag: int = 0
    index: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.tag, self.index))
        return np.random.Generator(np.random.Philox(ss))

    def with_tag(self, tag: int) -> "RngStream":
        return RngStream(self.seed, tag, self.index)

    def for_path(self, i: int) -> "RngStream":
        return RngStream(self.seed, self.tag, self.index + i)

    @property
    def id(self) -> str:
        return f"{self.seed}/{self.tag}/{self.index}"


# ---------------------------------------------------------------------------
# sampled paths


@dataclass(frozen=True)
class EventPath:
    """Exact bounded-variation path: constant drift between timestamped jumps.

    Value at t is x0 + drift*t + sum of jumps at times <= t (right-continuous).
    """

    x0: float
    horizon: float
    drift: float
    times: np.ndarray = field(default_factory=lambda: np.empty(0))
    sizes: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        s = np.asarray(self.sizes, dtype=float)
        if t.size and not np.all(np.diff(t) > 0):
            raise InvalidParameter("times", "event times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "sizes", s)

    def value_at(self, t):
        """Right-continuous value X_t."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        jumps = np.concatenate(([0.0], np.cumsum(self.sizes)))
        return self.x0 + self.drift * t + jumps[idx]

    def left_limit_at(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="left")
        jumps = np.concatenate(([0.0], np.cumsum(self.sizes)))
        return self.x0 + self.drift * t + jumps[idx]

    def total_variation(self) -> float:
        return abs(self.drift) * self.horizon + float(np.sum(np.abs(self.sizes)))

    def shifted(self, dx: float) -> "EventPath":
        """Same driving noise started from x0 + dx."""
        return EventPath(self.x0 + dx, self.horizon, self.drift, self.times, self.sizes)

    def to_grid(self, k: int) -> "GridPath":
        """Evaluate on a uniform k-step grid (shared-noise discretization)."""
        dt = self.horizon / k
        grid = dt * np.arange(1, k + 1)
        vals = self.value_at(grid)
        incs = np.diff(np.concatenate(([self.x0], vals)))
        return GridPath(self.x0, self.horizon, k, incs)

    def to_csv(self, fname):
        times = np.concatenate(([0.0], self.times, [self.horizon]))
        lefts = np.concatenate(([self.x0], self.left_limit_at(self.times),
                                [self.value_at(self.horizon)]))
        jumps = np.concatenate(([0.0], self.sizes, [0.0]))
        vals = np.concatenate(([self.x0], self.value_at(self.times),
                               [self.value_at(self.horizon)]))
        with open(fname, "w") as fh:
            fh.write("time,left_limit,jump,value\n")
            for row in zip(times, lefts, jumps, vals):
                fh.write("%.17g,%.17g,%.17g,%.17g\n" % row)


@dataclass(frozen=True)
class GridPath:
    """Uniform-grid increments; values[k] = x0 + sum of the first k increments."""

    x0: float
    horizon: float
    k: int
    increments: np.ndarray

    @property
    def dt(self) -> float:
        return self.horizon / self.k

    @property
    def values(self) -> np.ndarray:
        """x0 + X-hat on the grid, length k+1 including the start."""
        return self.x0 + np.concatenate(([0.0], np.cumsum(self.increments)))

    @property
    def xhat(self) -> np.ndarray:
        """Centered path X-hat (starts at 0), length k+1."""
        return self.values - self.x0


class Exact:
    """Sampling mode marker: exact event-driven path (requires sigma = 0)."""


@dataclass(frozen=True)
class Grid:
    """Sampling mode marker: uniform grid with k steps."""

    k: int


EXACT = Exact()


def _component_arrivals(rate, horizon, rng):
    # exponential inter-arrival draws in blocks until the horizon is passed
    times = []
    t = 0.0
    while True:
        block = rng.exponential(1.0 / rate, size=max(8, int(rate * horizon * 0.5) + 8))
        for g in block:
            t += g
            if t > horizon:
                return np.array(times)
            times.append(t)


def sample_path(spec: JumpDiffusionSpec, horizon: float, mode, stream: RngStream):
    """Draw one path of X on [0, horizon].

    Exact mode returns an EventPath; grid mode returns a GridPath whose
    increments compose the compensated drift, the Gaussian part, and the
    jumps binned into the step containing them.  Deterministic in stream.
    """
    if horizon <= 0:
        raise InvalidParameter("horizon", "horizon must be positive")
    rng = stream.generator()
    delta = _compensated_drift(spec)
    if isinstance(mode, Exact):
        if spec.sigma > 0:
            raise ExactModeUnavailable("exact sampling needs sigma = 0")
        all_times = []
        all_sizes = []
        for comp in spec.jump_components:
            t = _component_arrivals(comp.rate, horizon, rng)
            m = comp.marks.sample(t.size, rng)
            all_times.append(t)
            all_sizes.append(comp.sign * m)
        if all_times:
            times = np.concatenate(all_times)
            sizes = np.concatenate(all_sizes)
            order = np.argsort(times, kind="stable")
            times, sizes = times[order], sizes[order]
        else:
            times = np.empty(0)
            sizes = np.empty(0)
        return EventPath(spec.x0, horizon, delta, times, sizes)
    if isinstance(mode, Grid):
        k = mode.k
        if k < 1:
            raise InvalidParameter("k", "grid steps must be >= 1")
        dt = horizon / k
        incs = np.full(k, delta * dt)
        if spec.sigma > 0:
            incs += spec.sigma * math.sqrt(dt) * rng.standard_normal(k)
        for comp in spec.jump_components:
            t = _component_arrivals(comp.rate, horizon, rng)
            m = comp.sign * comp.marks.sample(t.size, rng)
            if t.size:
                bins = np.minimum(np.ceil(t / dt).astype(int), k) - 1
                np.add.at(incs, bins, m)
        return GridPath(spec.x0, horizon, k, incs)
    raise InvalidParameter("mode", "mode must be Exact or Grid(k)")
