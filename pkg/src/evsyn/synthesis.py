"""Meta-analysis and indirect comparison of log hazard ratios.

Implements closed-form inverse-variance pooling, Bayesian random-effects
pooling, a bivariate random-effects model that treats the two outcomes
(overall and progression-free survival) as correlated within and between
studies and imputes any study's missing outcome from the joint normal, the
anchored indirect comparison, and a contrast-based network meta-analysis.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .mcmc import ChainConfig, ChainOutput, Linear, ModelGraph, StateFn, run_chain
from .stats import (
    Distribution,
    DrawSummary,
    HalfNormal,
    Normal,
    Uniform,
    se_from_ci,
    summarize,
    summarize_log_hr,
)
from .survival import DataError

_Z975 = 1.959963984540054

OS = "OS"
PFS = "PFS"


@dataclass(frozen=True)
class StudyOutcome:
    """One study-by-outcome row: a log hazard ratio with its standard error.

    A missing `log_hr` marks the row as a prediction target; `se` may be
    missing only when `log_hr` is.
    """

    study: str
    treatment: str
    comparator: str
    outcome: str
    log_hr: float | None
    se: float | None

    def __post_init__(self):
        if self.outcome not in (OS, PFS):
            raise DataError(f"outcome must be OS or PFS, got {self.outcome!r}")
        if self.log_hr is not None and self.se is None:
            raise DataError(f"{self.study}/{self.outcome}: se missing for an observed effect")
        if self.se is not None and not self.se > 0:
            raise DataError(f"{self.study}/{self.outcome}: se must be positive")

    @property
    def observed(self) -> bool:
        return self.log_hr is not None

    @classmethod
    def from_hr_ci(cls, study, treatment, comparator, outcome, hr, lower, upper):
        return cls(study, treatment, comparator, outcome, math.log(hr), se_from_ci(lower, upper))


@dataclass(frozen=True, eq=False)
class Contrast:
    """A treatment-vs-comparator effect on the log-HR scale.

    Closed-form results carry (log_hr, se); sampler-backed results also
    carry the log-scale draws so downstream composition can stay draw-wise.
    """

    treatment: str
    comparator: str
    log_hr: float
    se: float
    draws: np.ndarray | None = None

    def hr(self) -> float:
        return math.exp(self.log_hr)

    def ci(self) -> tuple[float, float]:
        if self.draws is not None:
            lo, hi = np.percentile(self.draws, [2.5, 97.5])
            return (math.exp(lo), math.exp(hi))
        return (
            math.exp(self.log_hr - _Z975 * self.se),
            math.exp(self.log_hr + _Z975 * self.se),
        )

    def summary(self) -> DrawSummary:
        if self.draws is not None:
            return summarize_log_hr(self.draws)
        lo, hi = self.ci()
        return DrawSummary(mean=self.hr(), se=self.se, lower=lo, upper=hi, n_draws=0)

    def flipped(self) -> "Contrast":
        return Contrast(
            treatment=self.comparator,
            comparator=self.treatment,
            log_hr=-self.log_hr,
            se=self.se,
            draws=None if self.draws is None else -self.draws,
        )


def _require_same_contrast(rows: list[StudyOutcome]):
    keys = {(r.treatment, r.comparator, r.outcome) for r in rows}
    if len(keys) != 1:
        raise DataError(f"rows mix contrasts/outcomes: {sorted(keys)}")
    return keys.pop()


# ---------------------------------------------------------------------------
# Fixed-effect pooling (closed form)
# ---------------------------------------------------------------------------


def fixed_effect_ma(rows: list[StudyOutcome]) -> Contrast:
    """Inverse-variance pooled effect for one contrast and outcome."""
    complete = [r for r in rows if r.observed]
    if not complete:
        raise DataError("no complete rows to pool")
    treatment, comparator, _ = _require_same_contrast(complete)
    w = np.array([1.0 / r.se**2 for r in complete])
    y = np.array([r.log_hr for r in complete])
    pooled = float(np.sum(w * y) / np.sum(w))
    se = float(1.0 / math.sqrt(np.sum(w)))
    return Contrast(treatment=treatment, comparator=comparator, log_hr=pooled, se=se)


# ---------------------------------------------------------------------------
# Bayesian random-effects pooling
# ---------------------------------------------------------------------------


@dataclass
class ReMaResult:
    contrast: Contrast
    pooled: DrawSummary  # HR scale
    heterogeneity: DrawSummary | None
    output: ChainOutput | None
    warnings: tuple[str, ...] = ()


def random_effects_ma(
    rows: list[StudyOutcome],
    config: ChainConfig,
    pooled_prior: Normal = Normal(0.0, 1e3),
    het_prior: Distribution = Uniform(0.0, 5.0),
) -> ReMaResult:
    """Normal-normal hierarchy pooled over studies of one contrast.

    y_i ~ Normal(effect_i, se_i^2); effect_i ~ Normal(pooled, het^2) with the
    supplied priors on `pooled` and `het`. A single study collapses to the
    fixed-effect answer with a warning.
    """
    complete = [r for r in rows if r.observed]
    if not complete:
        raise DataError("no complete rows to pool")
    treatment, comparator, _ = _require_same_contrast(complete)
    if len(complete) == 1:
        fe = fixed_effect_ma(complete)
        return ReMaResult(
            contrast=fe,
            pooled=fe.summary(),
            heterogeneity=None,
            output=None,
            warnings=("single study: collapsed to the fixed-effect estimate",),
        )

    # The per-study true effects integrate out analytically:
    # y_i ~ Normal(pooled, se_i^2 + het^2). Sampling the collapsed form
    # avoids the funnel coupling between the latent effects and the
    # heterogeneity SD, so `het` sees its near-marginal conditional.
    g = ModelGraph()
    g.param("pooled", pooled_prior)
    g.param("het", het_prior)
    for r in complete:
        marg_sd = StateFn(
            (lambda v, s=r.se: math.sqrt(s * s + v["het"] ** 2)), ("het",)
        )
        g.normal(r.log_hr, Linear({"pooled": 1.0}), marg_sd)
    out = run_chain(g, config)
    draws = out.pooled("pooled")
    contrast = Contrast(
        treatment=treatment,
        comparator=comparator,
        log_hr=float(draws.mean()),
        se=float(draws.std(ddof=1)),
        draws=draws,
    )
    warnings = tuple(out.warnings)
    return ReMaResult(
        contrast=contrast,
        pooled=summarize_log_hr(draws),
        heterogeneity=out.summaries["het"],
        output=out,
        warnings=warnings,
    )


# ---------------------------------------------------------------------------
# Bivariate random-effects model with missing-outcome prediction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BrmaConfig:
    """Priors and run settings for the bivariate model.

    The between-study structure is parameterized by the two heterogeneity
    SDs and the between-study correlation; the conditional slope and
    conditional variance are derived per draw from those. Within-study
    correlations get one prior each (weakly identified by design). Missing
    within-study variances follow a log-normal exchangeability model with
    vague hyperpriors.
    """

    chain: ChainConfig = field(default_factory=ChainConfig)
    pooled_os_prior: Normal = Normal(0.0, 1e3)
    intercept_pfs_prior: Normal = Normal(0.0, 1e3)
    het_os_prior: Distribution = HalfNormal(1e-3)
    het_pfs_prior: Distribution = HalfNormal(1e-3)
    between_cor_prior: Uniform = Uniform(-1.0, 1.0)
    within_cor_prior: Uniform = Uniform(-1.0, 1.0)
    log_var_mean_prior: Normal = Normal(0.0, 1e3)
    log_var_sd_prior: Distribution = HalfNormal(0.1)
    fixed_between_cor: float | None = None  # pin the between-study correlation
    fixed_within_cor: float | None = None  # pin all within-study correlations


@dataclass(frozen=True)
class PredictedEffect:
    """Posterior of a study's unreported effect.

    `log_hr`/`se` summarize the predictive draws of the would-have-been
    observed effect (the imputed value, including within-study noise);
    `true_log_hr`/`true_se` summarize the study's underlying true effect.
    """

    study: str
    outcome: str
    log_hr: float
    se: float
    hr_summary: DrawSummary
    true_log_hr: float
    true_se: float

    def contrast(self, treatment: str, comparator: str, draws=None) -> Contrast:
        return Contrast(treatment, comparator, self.log_hr, self.se, draws=draws)


@dataclass
class BrmaPosterior:
    """Draws and summaries from the bivariate meta-analysis."""

    pooled_hr_os: DrawSummary
    pooled_hr_pfs: DrawSummary
    heterogeneity_os: DrawSummary
    heterogeneity_pfs: DrawSummary
    between_cor: DrawSummary
    within_cor: dict  # study -> DrawSummary
    slope: DrawSummary
    cond_var_pfs: DrawSummary
    true_effects_os: dict  # study -> DrawSummary (log scale)
    true_effects_pfs: dict
    predicted: dict  # study -> PredictedEffect
    negative_cond_var_draws: int
    output: ChainOutput

    def predicted_single(self) -> PredictedEffect:
        if len(self.predicted) != 1:
            raise DataError(f"expected one prediction target, have {sorted(self.predicted)}")
        return next(iter(self.predicted.values()))


def _split_by_study(rows: list[StudyOutcome]):
    studies: dict[str, dict[str, StudyOutcome]] = {}
    order: list[str] = []
    for r in rows:
        if r.study not in studies:
            studies[r.study] = {}
            order.append(r.study)
        if r.outcome in studies[r.study]:
            raise DataError(f"duplicate outcome {r.outcome} for study {r.study}")
        studies[r.study][r.outcome] = r
    return studies, order


def brma_fit(rows: list[StudyOutcome], config: BrmaConfig) -> BrmaPosterior:
    """Joint model of OS and PFS effects with per-study prediction of
    missing PFS observations.

    Observed pairs enter through the bivariate normal likelihood factored as
    a marginal on the OS effect times a conditional on the PFS effect. True
    effects follow the product-normal between-study structure: the OS true
    effects are exchangeable around the pooled OS effect, and each PFS true
    effect is conditionally normal around an intercept plus slope times the
    study's centered OS true effect. For a study without a reported PFS
    effect, its within-study SD is drawn from the exchangeable log-variance
    hierarchy and the unreported observation is imputed from the joint
    normal; the retained imputations form the predicted effect.
    """
    studies, order = _split_by_study(rows)
    n = len(order)
    complete = [s for s in order if OS in studies[s] and studies[s].get(PFS, None) and studies[s][PFS].observed]
    missing_pfs = [
        s for s in order if PFS in studies[s] and not studies[s][PFS].observed
    ]
    for s in order:
        if OS not in studies[s] or not studies[s][OS].observed:
            raise DataError(f"study {s}: the model requires an observed OS effect")
    if len(complete) < 2:
        raise DataError(
            f"need at least 2 studies observing both outcomes, got {len(complete)}"
        )

    cfg = config
    g = ModelGraph()
    g.param("pooled_os", cfg.pooled_os_prior)
    g.param("intercept_pfs", cfg.intercept_pfs_prior)
    g.param("het_os", cfg.het_os_prior)
    g.param("het_pfs", cfg.het_pfs_prior)

    if cfg.fixed_between_cor is None:
        g.param("cor_between", cfg.between_cor_prior)
        rho_b = lambda v: v["cor_between"]
        rho_b_deps = ("cor_between",)
    else:
        rho_b = lambda v, c=float(cfg.fixed_between_cor): c
        rho_b_deps = ()

    def slope_fn(v):
        return rho_b(v) * v["het_pfs"] / v["het_os"]

    slope_deps = rho_b_deps + ("het_pfs", "het_os")

    def cond_sd_fn(v):
        r = rho_b(v)
        return v["het_pfs"] * math.sqrt(max(1.0 - r * r, 0.0))

    cond_sd = StateFn(cond_sd_fn, rho_b_deps + ("het_pfs",))
    het_os_sd = StateFn(lambda v: v["het_os"], ("het_os",))

    def rho_w_for(study):
        if cfg.fixed_within_cor is not None:
            return (lambda v, c=float(cfg.fixed_within_cor): c), ()
        name = f"cor_within_{study}"
        g.param(name, cfg.within_cor_prior)
        return (lambda v, name=name: v[name]), (name,)

    # exchangeable log-variance hierarchy for PFS within-study variances
    g.param("log_var_mean", cfg.log_var_mean_prior)
    g.param("log_var_sd", cfg.log_var_sd_prior)
    lv_sd = StateFn(lambda v: v["log_var_sd"], ("log_var_sd",))

    os_names = {}
    for s in order:
        name = f"effect_os_{s}"
        os_names[s] = name
        g.param(name, init=studies[s][OS].log_hr)
        g.normal(name, Linear({"pooled_os": 1.0}), het_os_sd)

    inv_n = 1.0 / n
    pfs_names = {}
    for s in order:
        name = f"effect_pfs_{s}"
        pfs_names[s] = name
        g.param(name, init=studies[s][OS].log_hr)
        terms = {"intercept_pfs": 1.0}
        for s2 in order:
            delta = 1.0 if s2 == s else 0.0
            terms[os_names[s2]] = StateFn(
                (lambda v, d=delta - inv_n: slope_fn(v) * d), slope_deps
            )
        g.normal(name, Linear(terms), cond_sd)

    predicted_names = {}
    for s in order:
        row_os = studies[s][OS]
        g.normal(row_os.log_hr, Linear({os_names[s]: 1.0}), row_os.se)
        row_pfs = studies[s].get(PFS)
        if row_pfs is not None and row_pfs.observed:
            rw, rw_deps = rho_w_for(s)
            k = StateFn(
                (lambda v, rw=rw, r=row_pfs.se / row_os.se: rw(v) * r), rw_deps
            )
            neg_k = StateFn(
                (lambda v, rw=rw, r=row_pfs.se / row_os.se: -rw(v) * r), rw_deps
            )
            off = StateFn(
                (lambda v, rw=rw, r=row_pfs.se / row_os.se, y=row_os.log_hr: rw(v) * r * y),
                rw_deps,
            )
            sd = StateFn(
                (
                    lambda v, rw=rw, s0=row_pfs.se: s0
                    * math.sqrt(max(1.0 - rw(v) ** 2, 0.0))
                ),
                rw_deps,
            )
            g.normal(
                row_pfs.log_hr,
                Linear({pfs_names[s]: 1.0, os_names[s]: neg_k}, off),
                sd,
            )
            g.normal(2.0 * math.log(row_pfs.se), Linear({"log_var_mean": 1.0}), lv_sd)
        elif row_pfs is not None:
            lv_name = f"log_var_pfs_{s}"
            g.param(lv_name, init=2.0 * math.log(row_os.se))
            g.normal(lv_name, Linear({"log_var_mean": 1.0}), lv_sd)
            rw, rw_deps = rho_w_for(s)
            deps = rw_deps + (lv_name,)
            sig = lambda v, lv=lv_name: math.exp(0.5 * v[lv])
            pred = f"predicted_pfs_{s}"
            predicted_names[s] = pred
            g.param(pred, init=studies[s][OS].log_hr)
            neg_k = StateFn(
                (lambda v, rw=rw, sig=sig, s1=row_os.se: -rw(v) * sig(v) / s1), deps
            )
            off = StateFn(
                (
                    lambda v, rw=rw, sig=sig, s1=row_os.se, y=row_os.log_hr: rw(v)
                    * sig(v)
                    / s1
                    * y
                ),
                deps,
            )
            sd = StateFn(
                (
                    lambda v, rw=rw, sig=sig: sig(v)
                    * math.sqrt(max(1.0 - rw(v) ** 2, 0.0))
                ),
                deps,
            )
            g.normal(pred, Linear({pfs_names[s]: 1.0, os_names[s]: neg_k}, off), sd)

    g.deterministic("slope", slope_fn, deps=slope_deps)
    g.deterministic(
        "cond_var_pfs",
        lambda v: cond_sd_fn(v) ** 2,
        deps=rho_b_deps + ("het_pfs",),
    )

    out = run_chain(g, cfg.chain)

    predicted = {}
    for s, pred in predicted_names.items():
        dr = out.pooled(pred)
        true_dr = out.pooled(pfs_names[s])
        predicted[s] = PredictedEffect(
            study=s,
            outcome=PFS,
            log_hr=float(dr.mean()),
            se=float(dr.std(ddof=1)),
            hr_summary=summarize_log_hr(dr),
            true_log_hr=float(true_dr.mean()),
            true_se=float(true_dr.std(ddof=1)),
        )

    cond_var_draws = out.pooled("cond_var_pfs")
    if cfg.fixed_between_cor is None:
        between = out.summaries["cor_between"]
    else:
        between = DrawSummary(
            cfg.fixed_between_cor, 0.0, cfg.fixed_between_cor, cfg.fixed_between_cor, 0
        )
    within = {}
    if cfg.fixed_within_cor is None:
        for s in order:
            name = f"cor_within_{s}"
            if name in out.summaries:
                within[s] = out.summaries[name]
    return BrmaPosterior(
        pooled_hr_os=summarize_log_hr(out.pooled("pooled_os")),
        pooled_hr_pfs=summarize_log_hr(out.pooled("intercept_pfs")),
        heterogeneity_os=out.summaries["het_os"],
        heterogeneity_pfs=out.summaries["het_pfs"],
        between_cor=between,
        within_cor=within,
        slope=out.summaries["slope"],
        cond_var_pfs=out.summaries["cond_var_pfs"],
        true_effects_os={s: out.summaries[os_names[s]] for s in order},
        true_effects_pfs={s: out.summaries[pfs_names[s]] for s in order},
        predicted=predicted,
        negative_cond_var_draws=int(np.sum(cond_var_draws < 0.0)),
        output=out,
    )


# ---------------------------------------------------------------------------
# Indirect comparison
# ---------------------------------------------------------------------------


def bucher_indirect(ac: Contrast, bc: Contrast) -> Contrast:
    """Anchored indirect comparison through a shared comparator.

    log(A vs B) = log(A vs C) - log(B vs C); variances add. The second
    contrast may be supplied in either orientation as long as it shares the
    anchor C with the first. When both inputs carry draws of equal length
    the composition is done draw-wise as well.
    """
    if bc.comparator == ac.comparator:
        pass
    elif bc.treatment == ac.comparator:
        bc = bc.flipped()
    else:
        raise DataError(
            f"no common comparator between {ac.treatment}/{ac.comparator} "
            f"and {bc.treatment}/{bc.comparator}"
        )
    log_hr = ac.log_hr - bc.log_hr
    se = math.sqrt(ac.se**2 + bc.se**2)
    draws = None
    if ac.draws is not None and bc.draws is not None and len(ac.draws) == len(bc.draws):
        draws = ac.draws - bc.draws
    return Contrast(treatment=ac.treatment, comparator=bc.treatment, log_hr=log_hr, se=se, draws=draws)


# ---------------------------------------------------------------------------
# Network meta-analysis (contrast-based, consistency, common heterogeneity)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContrastGraph:
    treatments: tuple[str, ...]
    rows: tuple[StudyOutcome, ...]

    @classmethod
    def from_rows(cls, rows: list[StudyOutcome]) -> "ContrastGraph":
        treatments = sorted({r.treatment for r in rows} | {r.comparator for r in rows})
        return cls(treatments=tuple(treatments), rows=tuple(rows))

    def components(self) -> list[set[str]]:
        parent = {t: t for t in self.treatments}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for r in self.rows:
            a, b = find(r.treatment), find(r.comparator)
            if a != b:
                parent[a] = b
        groups: dict[str, set[str]] = {}
        for t in self.treatments:
            groups.setdefault(find(t), set()).add(t)
        return sorted(groups.values(), key=lambda s: sorted(s)[0])

    def connected(self) -> bool:
        return len(self.components()) <= 1


@dataclass
class NmaResult:
    reference: str
    basic: dict  # treatment -> DrawSummary of log effect vs reference
    output: ChainOutput
    _draws: dict

    def contrast(self, treatment: str, comparator: str) -> Contrast:
        da = self._draws[treatment]
        db = self._draws[comparator]
        d = da - db
        return Contrast(
            treatment=treatment,
            comparator=comparator,
            log_hr=float(d.mean()),
            se=float(d.std(ddof=1)),
            draws=d,
        )

    def hr_summary(self, treatment: str, comparator: str) -> DrawSummary:
        return summarize_log_hr(self._draws[treatment] - self._draws[comparator])


def nma_fit(
    graph: ContrastGraph,
    outcome: str,
    config: ChainConfig,
    reference: str | None = None,
    effect_prior: Normal = Normal(0.0, 1e3),
    het_prior: HalfNormal = HalfNormal(1e3),
) -> NmaResult:
    """Random-effects network meta-analysis under consistency.

    Basic parameters are treatment effects versus a reference; every study's
    true effect is normal around the difference of its arms' basic
    parameters with a common heterogeneity SD. Any contrast is derived by
    differencing basic-parameter draws.
    """
    rows = [r for r in graph.rows if r.outcome == outcome and r.observed]
    if not rows:
        raise DataError(f"no observed rows for outcome {outcome}")
    sub = ContrastGraph.from_rows(rows)
    comps = sub.components()
    if len(comps) > 1:
        raise DataError(
            "network is disconnected: " + "; ".join(",".join(sorted(c)) for c in comps)
        )
    treatments = list(sub.treatments)
    if reference is None:
        reference = treatments[0]
    if reference not in treatments:
        raise DataError(f"reference {reference!r} not in network {treatments}")

    g = ModelGraph()
    for t in treatments:
        if t != reference:
            g.param(f"d_{t}", effect_prior)
    g.param("het", het_prior)
    het_sd = StateFn(lambda v: v["het"], ("het",))
    for i, r in enumerate(rows):
        name = f"effect_{i}"
        g.param(name, init=r.log_hr)
        terms = {}
        if r.treatment != reference:
            terms[f"d_{r.treatment}"] = 1.0
        if r.comparator != reference:
            terms[f"d_{r.comparator}"] = -1.0
        g.normal(name, Linear(terms), het_sd)
        g.normal(r.log_hr, Linear({name: 1.0}), r.se)
    out = run_chain(g, config)

    zeros = np.zeros(out.config.n_retained * out.config.n_chains)
    draws = {t: (out.pooled(f"d_{t}") if t != reference else zeros) for t in treatments}
    basic = {t: summarize(draws[t]) for t in treatments}
    return NmaResult(reference=reference, basic=basic, output=out, _draws=draws)


# ---------------------------------------------------------------------------
# Study CSV interface
# ---------------------------------------------------------------------------

_STUDY_COLUMNS = ["study", "treatment", "comparator", "outcome", "log_hr", "se"]


def read_study_csv(path) -> list[StudyOutcome]:
    """Read `study,treatment,comparator,outcome,log_hr,se` rows; empty
    log_hr/se fields mark prediction targets."""
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not set(_STUDY_COLUMNS).issubset(reader.fieldnames):
            raise DataError(f"{path}: expected header with columns {_STUDY_COLUMNS}")
        for row in reader:
            log_hr = row["log_hr"].strip()
            se = row["se"].strip()
            rows.append(
                StudyOutcome(
                    study=row["study"],
                    treatment=row["treatment"],
                    comparator=row["comparator"],
                    outcome=row["outcome"],
                    log_hr=float(log_hr) if log_hr else None,
                    se=float(se) if se else None,
                )
            )
    if not rows:
        raise DataError(f"{path}: no data rows")
    return rows


def write_study_csv(path, rows: list[StudyOutcome]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(_STUDY_COLUMNS)
        for r in rows:
            writer.writerow(
                [
                    r.study,
                    r.treatment,
                    r.comparator,
                    r.outcome,
                    "" if r.log_hr is None else repr(r.log_hr),
                    "" if r.se is None else repr(r.se),
                ]
            )
