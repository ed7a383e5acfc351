"""Seedable sampling, 2x2 matrix helpers, and posterior-draw summaries.

Everything downstream (survival fitting, MCMC, Markov cohort PSA) draws its
randomness through :class:`RandomStream`, which wraps a counter-based
generator so that sub-streams derived from (seed, stream_id) pairs are
mutually independent and reproducible across worker layouts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_Z975 = 1.959963984540054  # two-sided 95% normal quantile


class ParameterError(ValueError):
    """A distribution or operation received an out-of-domain parameter."""


class DefinitenessError(ValueError):
    """A matrix that must be positive definite is not."""


class InsufficientDataError(ValueError):
    """Too few observations to compute the requested quantity."""


_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RandomStream:
    """Value-semantic handle on an independent random sub-stream.

    Identical (seed, stream_id) pairs always yield the identical draw
    sequence; distinct stream_ids give statistically independent streams
    (distinct Philox keys), which is what makes draw-indexed PSA and
    chain-indexed MCMC reproducible regardless of worker count.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def substream(self, stream_id: int) -> "RandomStream":
        return RandomStream(self.seed, stream_id)


# ---------------------------------------------------------------------------
# Distribution descriptors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Normal:
    """Normal(mean, var); the second parameter is the variance."""

    mean: float
    var: float

    def __post_init__(self):
        if not self.var > 0:
            raise ParameterError(f"Normal variance must be > 0, got {self.var}")

    def sample(self, rng: np.random.Generator, size=None):
        return rng.normal(self.mean, math.sqrt(self.var), size=size)

    def logpdf(self, x: float) -> float:
        return -0.5 * (math.log(2 * math.pi * self.var) + (x - self.mean) ** 2 / self.var)

    def mean_value(self) -> float:
        return self.mean

    def support(self):
        return (-math.inf, math.inf)


@dataclass(frozen=True)
class HalfNormal:
    """Absolute value of Normal(0, var); support (0, inf)."""

    var: float

    def __post_init__(self):
        if not self.var > 0:
            raise ParameterError(f"HalfNormal variance must be > 0, got {self.var}")

    def sample(self, rng: np.random.Generator, size=None):
        return np.abs(rng.normal(0.0, math.sqrt(self.var), size=size))

    def logpdf(self, x: float) -> float:
        if x < 0:
            return -math.inf
        return math.log(2.0) - 0.5 * (math.log(2 * math.pi * self.var) + x * x / self.var)

    def mean_value(self) -> float:
        return math.sqrt(self.var) * math.sqrt(2.0 / math.pi)

    def support(self):
        return (0.0, math.inf)


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ParameterError(f"Uniform requires lo < hi, got [{self.lo}, {self.hi}]")

    def sample(self, rng: np.random.Generator, size=None):
        return rng.uniform(self.lo, self.hi, size=size)

    def logpdf(self, x: float) -> float:
        if self.lo <= x <= self.hi:
            return -math.log(self.hi - self.lo)
        return -math.inf

    def mean_value(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def support(self):
        return (self.lo, self.hi)


@dataclass(frozen=True)
class Beta:
    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ParameterError(f"Beta parameters must be > 0, got ({self.a}, {self.b})")

    def sample(self, rng: np.random.Generator, size=None):
        return rng.beta(self.a, self.b, size=size)

    def logpdf(self, x: float) -> float:
        if not 0.0 < x < 1.0:
            return -math.inf
        return (
            (self.a - 1) * math.log(x)
            + (self.b - 1) * math.log1p(-x)
            - (math.lgamma(self.a) + math.lgamma(self.b) - math.lgamma(self.a + self.b))
        )

    def mean_value(self) -> float:
        return self.a / (self.a + self.b)

    def support(self):
        return (0.0, 1.0)


@dataclass(frozen=True)
class Gamma:
    """Gamma(shape, rate) so mean = shape / rate."""

    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise ParameterError(f"Gamma parameters must be > 0, got ({self.shape}, {self.rate})")

    def sample(self, rng: np.random.Generator, size=None):
        return rng.gamma(self.shape, 1.0 / self.rate, size=size)

    def logpdf(self, x: float) -> float:
        if x <= 0:
            return -math.inf
        return (
            self.shape * math.log(self.rate)
            - math.lgamma(self.shape)
            + (self.shape - 1) * math.log(x)
            - self.rate * x
        )

    def mean_value(self) -> float:
        return self.shape / self.rate

    def support(self):
        return (0.0, math.inf)


Distribution = Normal | HalfNormal | Uniform | Beta | Gamma


def sample(stream: RandomStream, spec: Distribution, size=None):
    """Draw from `spec` using a fresh generator for `stream`.

    Deterministic in (stream, spec, size): the same call always returns the
    same values. Long-running consumers should instead hold one
    ``stream.generator()`` and call ``spec.sample(rng)`` repeatedly.
    """
    return spec.sample(stream.generator(), size=size)


# ---------------------------------------------------------------------------
# 2x2 symmetric matrices and their Cholesky factors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sym2:
    """Symmetric 2x2 matrix [[a, b], [b, c]]."""

    a: float
    b: float
    c: float

    def as_array(self) -> np.ndarray:
        return np.array([[self.a, self.b], [self.b, self.c]])


@dataclass(frozen=True)
class Chol2:
    """Lower-triangular factor [[u, 0], [v, w]] of a Sym2."""

    u: float
    v: float
    w: float

    def as_array(self) -> np.ndarray:
        return np.array([[self.u, 0.0], [self.v, self.w]])

    def multiply_out(self) -> Sym2:
        return Sym2(self.u * self.u, self.u * self.v, self.v * self.v + self.w * self.w)


def cholesky2(m: Sym2) -> Chol2:
    """Closed-form Cholesky factor of a positive-definite Sym2.

    u = sqrt(a), v = b / sqrt(a), w = sqrt(c - b^2 / a).
    """
    if not m.a > 0:
        raise DefinitenessError(f"leading entry must be positive, got a={m.a}")
    det = m.a * m.c - m.b * m.b
    if not det > 0:
        raise DefinitenessError(f"determinant must be positive, got a*c - b^2 = {det}")
    u = math.sqrt(m.a)
    v = m.b / u
    w = math.sqrt(m.c - m.b * m.b / m.a)
    return Chol2(u, v, w)


def correlated_normal_pair(
    rng: np.random.Generator | RandomStream, mean: tuple[float, float], cov: Sym2
) -> tuple[float, float]:
    """One draw of mean + D z with D the Cholesky factor of cov."""
    if isinstance(rng, RandomStream):
        rng = rng.generator()
    d = cholesky2(cov)
    z0, z1 = rng.standard_normal(2)
    return (mean[0] + d.u * z0, mean[1] + d.v * z0 + d.w * z1)


# ---------------------------------------------------------------------------
# Draw summaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DrawSummary:
    """Mean, spread, and central 95% interval of a draw sequence.

    For hazard-ratio summaries produced by the synthesis module, `mean`,
    `lower`, and `upper` live on the HR scale while `se` is the standard
    deviation on the log-HR scale (the scale the models work on).
    """

    mean: float
    se: float
    lower: float
    upper: float
    n_draws: int

    def __post_init__(self):
        if self.lower > self.upper:
            raise ParameterError(f"summary bounds out of order: ({self.lower}, {self.upper})")

    def format_estimate(self, digits: int = 3) -> str:
        return f"{self.mean:.{digits}f} ({self.lower:.{digits}f}, {self.upper:.{digits}f})"


def summarize(draws) -> DrawSummary:
    """Mean, sample SD, and 2.5/97.5 percentiles (linear interpolation)."""
    arr = np.asarray(draws, dtype=float)
    if arr.ndim != 1:
        arr = arr.ravel()
    if arr.size < 2:
        raise InsufficientDataError(f"need at least 2 draws, got {arr.size}")
    lower, upper = np.percentile(arr, [2.5, 97.5])
    return DrawSummary(
        mean=float(arr.mean()),
        se=float(arr.std(ddof=1)),
        lower=float(lower),
        upper=float(upper),
        n_draws=int(arr.size),
    )


def summarize_log_hr(log_draws) -> DrawSummary:
    """Summary of log-scale draws reported on the hazard-ratio scale.

    The point estimate is exp(mean of log draws) and the interval is the
    exponential of the log-scale 2.5/97.5 percentiles, matching how pooled
    HRs with credible intervals are conventionally reported. `se` stays on
    the log scale.
    """
    s = summarize(log_draws)
    return DrawSummary(
        mean=math.exp(s.mean),
        se=s.se,
        lower=math.exp(s.lower),
        upper=math.exp(s.upper),
        n_draws=s.n_draws,
    )


def se_from_ci(lower: float, upper: float) -> float:
    """SE of a log hazard ratio recovered from a 95% CI on the HR scale."""
    if not 0 < lower < upper:
        raise ParameterError(f"need 0 < lower < upper, got ({lower}, {upper})")
    return (math.log(upper) - math.log(lower)) / (2.0 * 1.96)
