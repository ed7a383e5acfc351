"""Time-inhomogeneous Markov cohort models with probabilistic inputs.

Two model variants share one engine: a two-state model (stable disease,
death) whose exit transition follows a Weibull fitted to overall survival,
and a three-state model (stable disease, progressive disease, death) whose
progression transition follows a Weibull fitted to progression-free
survival, with a fixed background death rate from stable disease and an
exponential progression-to-death transition derived from mean survival
times. Costs and utilities accrue per cycle with annual step discounting.

Accrual convention: occupancy-based quantities (time in state, QALYs, drug
exposure) count the state at the start of each cycle; event-triggered costs
(follow-up, terminal care) attach to the cycle in which the event happens.
Both are discounted with that cycle's factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .stats import Beta, Gamma, Normal, RandomStream, Sym2, cholesky2

STD = "StD"
PD = "PD"
DEATH = "Death"

TWO_STATE = "two_state"
THREE_STATE = "three_state"

_EDGES = {TWO_STATE: ("std_death",), THREE_STATE: ("std_pd", "std_death", "pd_death")}


class MarkovError(ValueError):
    """Invalid model structure or out-of-range transition probability."""


# ---------------------------------------------------------------------------
# Transition probability primitives
# ---------------------------------------------------------------------------


def weibull_tp(lam: float, gamma: float, t: float, u: float) -> float:
    """Per-cycle transition probability 1 - S(t)/S(t-u) for S(t)=exp(-lam t^gamma)."""
    if lam <= 0 or gamma <= 0:
        raise MarkovError(f"weibull parameters must be positive, got ({lam}, {gamma})")
    if u <= 0 or t < u:
        raise MarkovError(f"need t >= u > 0, got t={t}, u={u}")
    return 1.0 - math.exp(lam * (t - u) ** gamma - lam * t**gamma)


def scaled_tp(base: float, log_hr: float) -> float:
    """Apply a hazard ratio to a base probability: 1 - (1 - base)**HR."""
    if not 0.0 <= base <= 1.0:
        raise MarkovError(f"base probability outside [0,1]: {base}")
    if base == 1.0:
        return 1.0
    return 1.0 - (1.0 - base) ** math.exp(log_hr)


def exp_tp_from_mean(mean_time: float, u: float) -> float:
    """Constant per-cycle probability 1 - exp(-u/mean) for exponential survival."""
    if mean_time <= 0:
        raise MarkovError(f"mean time must be positive, got {mean_time}")
    return 1.0 - math.exp(-u / mean_time)


def pd_death_mean(total_mean: Normal, std_to_pd_mean: Normal) -> Normal:
    """Mean time from progression to death by differencing total and
    pre-progression mean times; variances add under the normal approximation."""
    diff = total_mean.mean - std_to_pd_mean.mean
    if diff <= 0:
        raise MarkovError(
            f"total mean time ({total_mean.mean}) must exceed the "
            f"pre-progression mean ({std_to_pd_mean.mean})"
        )
    return Normal(diff, total_mean.var + std_to_pd_mean.var)


def draw_weibull_params(
    intercept: float, scale: float, cov: Sym2, rng: np.random.Generator
) -> tuple[float, float, int]:
    """One correlated draw of (lam, gamma) from AFT coefficient uncertainty.

    Draws (intercept*, scale*) = (intercept, scale) + D z with D the Cholesky
    factor of `cov`; non-positive scale draws are rejected and redrawn (the
    rejection count is returned).
    """
    d = cholesky2(cov)
    rejections = 0
    while True:
        z0, z1 = rng.standard_normal(2)
        b = intercept + d.u * z0
        a = scale + d.v * z0 + d.w * z1
        if a > 0:
            return math.exp(-b / a), 1.0 / a, rejections
        rejections += 1
        if rejections > 1000:
            raise MarkovError("scale draws keep coming out non-positive")


def discount_factor(
    cycle: int, annual_rate: float = 0.035, start_cycle: int = 13, cycles: int = 180
) -> float:
    """Annual step discounting: year one undiscounted, then 1/(1+r)^years."""
    if not 1 <= cycle <= cycles:
        raise MarkovError(f"cycle {cycle} outside [1, {cycles}]")
    years = (cycle - 1) // max(start_cycle - 1, 1)
    return (1.0 + annual_rate) ** (-years)


def usd_utility(
    tp_stay: float, tp_prog: float, tp_death: float, u_surviving: float, u_pd: float, u_other: float
) -> float:
    """Stable-disease utility as the transition-probability-weighted mix of
    the surviving, progressing, and other-cause-death utilities."""
    total = tp_stay + tp_prog + tp_death
    if abs(total - 1.0) > 1e-9:
        raise MarkovError(f"transition probabilities sum to {total}, not 1")
    return tp_stay * u_surviving + tp_prog * u_pd + tp_death * u_other


# ---------------------------------------------------------------------------
# Model structure
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeibullAft:
    """Time-dependent transition from AFT coefficients with uncertainty."""

    intercept: float
    scale: float
    cov: Sym2 | None = None  # None: no parameter uncertainty


@dataclass(frozen=True)
class HazardScaled:
    """A base transition with a hazard ratio applied per draw."""

    base: "TransitionGen"
    log_hr: Normal


@dataclass(frozen=True)
class ExponentialFromMean:
    """Constant transition probability from an uncertain mean time."""

    mean_time: Normal


@dataclass(frozen=True)
class FixedProb:
    p: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise MarkovError(f"fixed probability outside [0,1]: {self.p}")


TransitionGen = WeibullAft | HazardScaled | ExponentialFromMean | FixedProb


@dataclass(frozen=True)
class CostRatio:
    """Costs expressed as another intervention's costs times a drawn ratio."""

    base_label: str
    numerator: Gamma
    denominator: Gamma


@dataclass(frozen=True)
class InterventionSpec:
    label: str
    transitions: dict  # edge name -> TransitionGen
    drug_cost_per_cycle: float
    mean_cycles: Normal | None = None  # None: drug given for every cycle in StD
    follow_up_cost: Gamma | None = None
    terminal_care_cost: Gamma | None = None
    cost_ratio: CostRatio | None = None
    division_factor: float = 0.75  # share of follow-up cost charged at death

    def __post_init__(self):
        if not 0.0 <= self.division_factor <= 1.0:
            raise MarkovError(f"division factor outside [0,1]: {self.division_factor}")
        if self.drug_cost_per_cycle < 0:
            raise MarkovError("drug cost must be non-negative")
        if self.cost_ratio is None and (self.follow_up_cost is None or self.terminal_care_cost is None):
            raise MarkovError(f"{self.label}: follow-up/terminal costs or a cost ratio required")


@dataclass(frozen=True)
class UtilitySpec:
    pd: Beta = Beta(21.1, 18.1)
    surviving: Beta = Beta(581.3, 173.6)
    other_causes: Beta = Beta(29.1, 22.5)
    # death utility is identically zero


@dataclass(frozen=True)
class ModelSpec:
    variant: str
    interventions: tuple[InterventionSpec, ...]
    utilities: UtilitySpec = UtilitySpec()
    cycles: int = 180
    cycle_length: float = 1.0  # months
    cohort_size: float = 10_000.0
    annual_discount_rate: float = 0.035
    discount_start_cycle: int = 13

    def __post_init__(self):
        if self.variant not in _EDGES:
            raise MarkovError(f"unknown variant {self.variant!r}")
        labels = [iv.label for iv in self.interventions]
        if len(set(labels)) != len(labels):
            raise MarkovError(f"duplicate intervention labels: {labels}")
        seen = set()
        for iv in self.interventions:
            missing = set(_EDGES[self.variant]) - set(iv.transitions)
            if missing:
                raise MarkovError(f"{iv.label}: missing transitions {sorted(missing)}")
            if iv.cost_ratio is not None and iv.cost_ratio.base_label not in seen:
                raise MarkovError(
                    f"{iv.label}: cost ratio references {iv.cost_ratio.base_label!r}, "
                    "which must be declared earlier"
                )
            seen.add(iv.label)

    def intervention(self, label: str) -> InterventionSpec:
        for iv in self.interventions:
            if iv.label == label:
                return iv
        raise MarkovError(f"unknown intervention {label!r}")

    def discount(self, cycle: int) -> float:
        return discount_factor(
            cycle, self.annual_discount_rate, self.discount_start_cycle, self.cycles
        )


# ---------------------------------------------------------------------------
# Per-draw parameter realization
# ---------------------------------------------------------------------------


@dataclass
class RealizedTransition:
    kind: str
    lam: float = 0.0
    gamma: float = 1.0
    prob: float = 0.0
    base: "RealizedTransition | None" = None
    log_hr: float = 0.0
    rejections: int = 0

    def tp(self, t: float, u: float) -> float:
        if self.kind == "weibull":
            return weibull_tp(self.lam, self.gamma, t, u)
        if self.kind == "fixed":
            return self.prob
        if self.kind == "scaled":
            return scaled_tp(self.base.tp(t, u), self.log_hr)
        return 1.0 - math.exp(-self.lam * u)  # exponential: constant hazard


def _draw_positive_normal(dist: Normal, rng, what: str) -> tuple[float, int]:
    rejections = 0
    while True:
        x = float(dist.sample(rng))
        if x > 0:
            return x, rejections
        rejections += 1
        if rejections > 1000:
            raise MarkovError(f"{what}: draws keep coming out non-positive")


def _realize_transition(gen: TransitionGen, rng, cache: dict) -> RealizedTransition:
    key = id(gen)
    if key in cache:
        return cache[key]
    if isinstance(gen, WeibullAft):
        if gen.cov is None:
            out = RealizedTransition(
                "weibull", lam=math.exp(-gen.intercept / gen.scale), gamma=1.0 / gen.scale
            )
        else:
            lam, gamma, rej = draw_weibull_params(gen.intercept, gen.scale, gen.cov, rng)
            out = RealizedTransition("weibull", lam=lam, gamma=gamma, rejections=rej)
    elif isinstance(gen, FixedProb):
        out = RealizedTransition("fixed", prob=gen.p)
    elif isinstance(gen, ExponentialFromMean):
        mean, rej = _draw_positive_normal(gen.mean_time, rng, "mean time")
        out = RealizedTransition("exponential", prob=0.0, rejections=rej)
        out.prob = exp_tp_from_mean(mean, 1.0)  # recomputed below for cycle length
        out.lam = 1.0 / mean
    elif isinstance(gen, HazardScaled):
        base = _realize_transition(gen.base, rng, cache)
        out = RealizedTransition(
            "scaled", base=base, log_hr=float(gen.log_hr.sample(rng))
        )
    else:
        raise MarkovError(f"unknown transition generator {type(gen).__name__}")
    cache[key] = out
    return out


@dataclass
class UtilityDraw:
    pd: float
    surviving: float
    other_causes: float


@dataclass
class InterventionDraw:
    label: str
    transitions: dict  # edge -> RealizedTransition
    mean_cycles: float | None
    follow_up_cost: float
    terminal_care_cost: float
    drug_cost_per_cycle: float
    division_factor: float
    rejections: int = 0


@dataclass
class ParameterDraw:
    """Everything one PSA iteration needs, deterministic given its stream."""

    draw_id: int
    utilities: UtilityDraw
    interventions: dict  # label -> InterventionDraw


def draw_parameters(spec: ModelSpec, stream: RandomStream, draw_id: int = 0) -> ParameterDraw:
    """Realize all uncertain quantities for one PSA iteration.

    Draw order is fixed (utilities, then interventions in declared order,
    transitions in edge order, then costs), and shared descriptor objects
    are drawn once per iteration, so results do not depend on how draws are
    distributed over workers and identically-referenced parameters stay
    identical across interventions.
    """
    rng = stream.generator()
    util = UtilityDraw(
        pd=float(spec.utilities.pd.sample(rng)),
        surviving=float(spec.utilities.surviving.sample(rng)),
        other_causes=float(spec.utilities.other_causes.sample(rng)),
    )
    cache: dict = {}
    by_label: dict[str, InterventionDraw] = {}
    for iv in spec.interventions:
        transitions = {}
        rejections = 0
        for edge in _EDGES[spec.variant]:
            rt = _realize_transition(iv.transitions[edge], rng, cache)
            transitions[edge] = rt
            rejections += rt.rejections
        if iv.mean_cycles is not None:
            mc = _draw_value(iv.mean_cycles, rng, cache)
            if mc <= 0:
                mc, rej = _draw_positive_normal(iv.mean_cycles, rng, "mean cycles")
                rejections += rej
        else:
            mc = None
        if iv.cost_ratio is not None:
            base = by_label[iv.cost_ratio.base_label]
            num = _draw_value(iv.cost_ratio.numerator, rng, cache)
            den = _draw_value(iv.cost_ratio.denominator, rng, cache)
            ratio = num / den
            fu = base.follow_up_cost * ratio
            tc = base.terminal_care_cost * ratio
        else:
            fu = _draw_value(iv.follow_up_cost, rng, cache)
            tc = _draw_value(iv.terminal_care_cost, rng, cache)
        by_label[iv.label] = InterventionDraw(
            label=iv.label,
            transitions=transitions,
            mean_cycles=mc,
            follow_up_cost=fu,
            terminal_care_cost=tc,
            drug_cost_per_cycle=iv.drug_cost_per_cycle,
            division_factor=iv.division_factor,
            rejections=rejections,
        )
    return ParameterDraw(draw_id=draw_id, utilities=util, interventions=by_label)


def _draw_value(dist, rng, cache: dict) -> float:
    key = id(dist)
    if key not in cache:
        cache[key] = float(dist.sample(rng))
    return cache[key]


# ---------------------------------------------------------------------------
# Cohort engine
# ---------------------------------------------------------------------------


@dataclass
class CohortTrace:
    """Per-cycle cohort counts, event tallies, and discounted QALY accrual.

    `counts[i]` holds the state occupancy after cycle i's transitions
    (row 0 is the starting cohort); `new_progressions[i]` and
    `new_deaths[i]` count events during cycle i.
    """

    variant: str
    states: tuple[str, ...]
    counts: np.ndarray  # (cycles+1, n_states)
    new_progressions: np.ndarray  # (cycles+1,)
    new_deaths: np.ndarray  # (cycles+1,)
    discounted_qaly: np.ndarray  # (cycles+1,) per-cycle accrual, cohort level
    cohort_size: float
    cycle_length: float

    def total_qaly_per_patient(self) -> float:
        return float(self.discounted_qaly.sum() / self.cohort_size)

    def months_in_state(self, state: str) -> float:
        """Undiscounted mean months per patient, start-of-cycle occupancy."""
        j = self.states.index(state)
        return float(
            self.counts[:-1, j].sum() * self.cycle_length / self.cohort_size
        )


def run_cohort(spec: ModelSpec, label: str, draw: ParameterDraw) -> CohortTrace:
    """Advance the expected cohort through all cycles for one intervention.

    Utility accrues on start-of-cycle occupancy at cycle-length/12 years per
    cycle: in the three-state model the stable-disease utility is the
    transition-weighted mix recomputed every cycle and the progressive state
    carries the progressed utility; the two-state model applies the
    progressed utility to its combined stable state throughout.
    """
    iv = draw.interventions[label]
    u = spec.cycle_length
    util = draw.utilities
    three = spec.variant == THREE_STATE
    states = (STD, PD, DEATH) if three else (STD, DEATH)
    n_states = len(states)
    counts = np.zeros((spec.cycles + 1, n_states))
    counts[0, 0] = spec.cohort_size
    new_prog = np.zeros(spec.cycles + 1)
    new_deaths = np.zeros(spec.cycles + 1)
    qaly = np.zeros(spec.cycles + 1)

    for i in range(1, spec.cycles + 1):
        t = i * u
        disc = spec.discount(i)
        if three:
            n_std, n_pd, n_death = counts[i - 1]
            p_prog = iv.transitions["std_pd"].tp(t, u)
            p_die_std = iv.transitions["std_death"].tp(t, u)
            p_die_pd = iv.transitions["pd_death"].tp(t, u)
            for name, p in (("std_pd", p_prog), ("std_death", p_die_std), ("pd_death", p_die_pd)):
                if not 0.0 <= p <= 1.0:
                    raise MarkovError(f"{label}: {name} probability {p} outside [0,1] at cycle {i}")
            p_stay = 1.0 - p_prog - p_die_std
            if p_stay < 0.0:
                raise MarkovError(
                    f"{label}: stable-disease exits exceed 1 at cycle {i} "
                    f"({p_prog} + {p_die_std})"
                )
            prog = n_std * p_prog
            deaths = n_std * p_die_std + n_pd * p_die_pd
            counts[i, 0] = n_std * p_stay
            counts[i, 1] = n_pd * (1.0 - p_die_pd) + prog
            counts[i, 2] = n_death + deaths
            new_prog[i] = prog
            new_deaths[i] = deaths
            u_sd = usd_utility(p_stay, p_prog, p_die_std, util.surviving, util.pd, util.other_causes)
            qaly[i] = (n_std * u_sd + n_pd * util.pd) * (u / 12.0) * disc
        else:
            n_std, n_death = counts[i - 1]
            p_die = iv.transitions["std_death"].tp(t, u)
            if not 0.0 <= p_die <= 1.0:
                raise MarkovError(f"{label}: death probability {p_die} outside [0,1] at cycle {i}")
            deaths = n_std * p_die
            counts[i, 0] = n_std - deaths
            counts[i, 1] = n_death + deaths
            new_deaths[i] = deaths
            qaly[i] = n_std * util.pd * (u / 12.0) * disc

    return CohortTrace(
        variant=spec.variant,
        states=states,
        counts=counts,
        new_progressions=new_prog,
        new_deaths=new_deaths,
        discounted_qaly=qaly,
        cohort_size=spec.cohort_size,
        cycle_length=u,
    )


@dataclass
class CostBreakdown:
    drug: float
    follow_up: float
    terminal_care: float

    @property
    def total(self) -> float:
        return self.drug + self.follow_up + self.terminal_care


def accrue_costs(trace: CohortTrace, spec: ModelSpec, label: str, draw: ParameterDraw) -> CostBreakdown:
    """Discounted cost per patient for one cohort run.

    Drug cost accrues per cycle on stable-disease occupancy, capped per
    patient at the drawn mean number of treatment cycles when one is given.
    Follow-up cost is a one-off: in the two-state model it attaches entirely
    to deaths; in the three-state model the division factor's share attaches
    to deaths and the remainder to progressions. Terminal care attaches to
    deaths. One-off costs are discounted at the cycle of their trigger event.
    """
    iv = draw.interventions[label]
    psi = iv.division_factor
    three = trace.variant == THREE_STATE
    drug = 0.0
    fu = 0.0
    tc = 0.0
    for i in range(1, len(trace.new_deaths)):
        disc = spec.discount(i)
        n_std = trace.counts[i - 1, 0]
        if iv.mean_cycles is None:
            exposure = n_std
        else:
            exposure = n_std * min(max(iv.mean_cycles - (i - 1), 0.0), 1.0)
        drug += iv.drug_cost_per_cycle * exposure * disc
        if three:
            fu += (
                (1.0 - psi) * iv.follow_up_cost * trace.new_progressions[i]
                + psi * iv.follow_up_cost * trace.new_deaths[i]
            ) * disc
        else:
            fu += iv.follow_up_cost * trace.new_deaths[i] * disc
        tc += iv.terminal_care_cost * trace.new_deaths[i] * disc
    scale = trace.cohort_size
    return CostBreakdown(drug=drug / scale, follow_up=fu / scale, terminal_care=tc / scale)


# ---------------------------------------------------------------------------
# Probabilistic sensitivity analysis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PsaSample:
    draw_id: int
    results: dict  # label -> (discounted cost, discounted QALY) per patient

    def cost(self, label: str) -> float:
        return self.results[label][0]

    def qaly(self, label: str) -> float:
        return self.results[label][1]


def run_single_draw(spec: ModelSpec, seed: int, draw_id: int) -> PsaSample:
    draw = draw_parameters(spec, RandomStream(seed, draw_id), draw_id)
    results = {}
    for iv in spec.interventions:
        trace = run_cohort(spec, iv.label, draw)
        costs = accrue_costs(trace, spec, iv.label, draw)
        results[iv.label] = (costs.total, trace.total_qaly_per_patient())
    return PsaSample(draw_id=draw_id, results=results)


def _psa_chunk(args) -> list[PsaSample]:
    spec, seed, lo, hi = args
    return [run_single_draw(spec, seed, d) for d in range(lo, hi)]


def run_psa(spec: ModelSpec, n_draws: int, seed: int, workers: int = 1) -> list[PsaSample]:
    """Monte Carlo parameter draws through the cohort model.

    Each draw uses the sub-stream (seed, draw_id), so the sample list is
    identical for any worker count.
    """
    if n_draws < 1:
        raise MarkovError("need at least one draw")
    if workers <= 1:
        return [run_single_draw(spec, seed, d) for d in range(n_draws)]
    from concurrent.futures import ProcessPoolExecutor

    chunk = max(1, (n_draws + workers - 1) // workers)
    tasks = [
        (spec, seed, lo, min(lo + chunk, n_draws)) for lo in range(0, n_draws, chunk)
    ]
    samples: list[PsaSample] = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for part in pool.map(_psa_chunk, tasks):
            samples.extend(part)
    return samples


def write_psa_csv(path, samples: list[PsaSample]) -> None:
    """Write `draw,intervention,cost,qaly` rows at full precision."""
    import csv as _csv

    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = _csv.writer(f)
        writer.writerow(["draw", "intervention", "cost", "qaly"])
        for s in samples:
            for label in s.results:
                writer.writerow([s.draw_id, label, repr(s.cost(label)), repr(s.qaly(label))])
