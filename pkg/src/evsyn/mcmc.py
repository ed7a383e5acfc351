"""Metropolis-within-Gibbs engine for small hierarchical normal models.

The graph language is deliberately narrow: scalar parameters with proper
priors (or hierarchical normal relations), normal observation/relation terms
whose means are linear in selected parameters with state-dependent
coefficients, and deterministic nodes recorded alongside the draws.
Parameters whose full conditional is normal (normal prior/relations, linear
appearances only) are updated by exact Gibbs draws; everything else gets an
adaptive random-walk Metropolis step whose scale is tuned during burn-in and
frozen afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .stats import (
    Distribution,
    DrawSummary,
    Normal,
    RandomStream,
    summarize,
)

_LOG_2PI = math.log(2.0 * math.pi)


class ModelSpecError(ValueError):
    """The model graph is structurally invalid."""


class InitializationError(RuntimeError):
    """Posterior density is not finite at the initial state."""


@dataclass(frozen=True)
class ChainConfig:
    iterations: int = 30_000
    burn_in: int = 15_000
    thinning: int = 1
    seed: int = 0
    n_chains: int = 1

    def __post_init__(self):
        if self.burn_in >= self.iterations:
            raise ModelSpecError("burn_in must be smaller than iterations")
        if self.thinning < 1 or self.n_chains < 1:
            raise ModelSpecError("thinning and n_chains must be >= 1")

    @property
    def n_retained(self) -> int:
        return (self.iterations - self.burn_in) // self.thinning


@dataclass(frozen=True)
class StateFn:
    """A state-dependent scalar with an explicit dependency list.

    `fn` receives a name-indexed view of the current state; `deps` must name
    every parameter the function reads, since conjugacy detection and
    Metropolis blanket construction rely on it.
    """

    fn: object
    deps: tuple[str, ...]


@dataclass(frozen=True)
class Linear:
    """Mean expression: offset + sum(coef[name] * state[name]).

    Coefficients and offset may be constants or StateFns; a coefficient for
    a parameter must not depend on that same parameter.
    """

    terms: dict
    offset: object = 0.0


@dataclass(frozen=True)
class _Relation:
    child: object  # parameter name or observed float
    mean: Linear
    sd: object  # float or StateFn


def _deps_of(x) -> tuple[str, ...]:
    return x.deps if isinstance(x, StateFn) else ()


class ModelGraph:
    """Builder for the parameter/relation/deterministic-node graph."""

    def __init__(self):
        self._priors: dict[str, Distribution | None] = {}
        self._inits: dict[str, float | None] = {}
        self._rels: list[_Relation] = []
        self._dets: dict[str, StateFn] = {}
        self._order: list[str] = []

    def param(self, name: str, prior: Distribution | None = None, init: float | None = None):
        if name in self._priors or name in self._dets:
            raise ModelSpecError(f"duplicate node name {name!r}")
        self._priors[name] = prior
        self._inits[name] = init
        self._order.append(name)
        return name

    def normal(self, child, mean, sd):
        """Add `child ~ Normal(mean, sd^2)`; child is a parameter name or data."""
        if isinstance(mean, (int, float)):
            mean = Linear({}, float(mean))
        if isinstance(mean, str):
            mean = Linear({mean: 1.0})
        if not isinstance(mean, Linear):
            raise ModelSpecError("mean must be a Linear, parameter name, or constant")
        rel = _Relation(child=child, mean=mean, sd=sd)
        self._check_rel(rel)
        self._rels.append(rel)

    def deterministic(self, name: str, fn, deps: tuple[str, ...] = ()):
        if name in self._priors or name in self._dets:
            raise ModelSpecError(f"duplicate node name {name!r}")
        self._dets[name] = StateFn(fn, tuple(deps))

    def _check_rel(self, rel: _Relation):
        names = set(self._priors)
        refs = set(rel.mean.terms) | set(_deps_of(rel.mean.offset)) | set(_deps_of(rel.sd))
        for coef in rel.mean.terms.values():
            refs |= set(_deps_of(coef))
        unknown = refs - names
        if isinstance(rel.child, str):
            if rel.child not in names:
                raise ModelSpecError(f"unknown child parameter {rel.child!r}")
            if rel.child in refs:
                raise ModelSpecError(f"relation for {rel.child!r} refers to itself")
        if unknown:
            raise ModelSpecError(f"relation refers to undeclared parameters {sorted(unknown)}")

    # -- compilation ------------------------------------------------------

    def _roles(self, name: str):
        """Classify every relation (by index) relative to `name`."""
        as_child, as_predictor, in_deps = [], [], []
        for ridx, rel in enumerate(self._rels):
            coef_deps = set()
            for coef in rel.mean.terms.values():
                coef_deps |= set(_deps_of(coef))
            other_deps = set(_deps_of(rel.mean.offset)) | set(_deps_of(rel.sd)) | coef_deps
            if rel.child == name:
                if name in other_deps:
                    raise ModelSpecError(f"relation for {name!r} depends on itself")
                as_child.append(ridx)
            elif name in rel.mean.terms:
                own_coef_deps = set(_deps_of(rel.mean.terms[name]))
                if name in own_coef_deps:
                    raise ModelSpecError(f"coefficient of {name!r} depends on itself")
                as_predictor.append(ridx)
                if name in other_deps:
                    in_deps.append(ridx)
            elif name in other_deps:
                in_deps.append(ridx)
        return as_child, as_predictor, in_deps

    def gibbs_eligible(self, name: str) -> bool:
        prior = self._priors[name]
        if prior is not None and not isinstance(prior, Normal):
            return False
        as_child, as_predictor, in_deps = self._roles(name)
        if in_deps:
            return False
        if prior is None and not as_child and not as_predictor:
            raise ModelSpecError(f"parameter {name!r} has no prior and no relations")
        # A predictor appearance is linear only if the sd and offset of that
        # relation do not involve the parameter; checked via in_deps above.
        return True

    def initial_value(self, name: str) -> float:
        if self._inits[name] is not None:
            return float(self._inits[name])
        prior = self._priors[name]
        if prior is not None:
            return float(prior.mean_value())
        return 0.0


class _View:
    __slots__ = ("state", "index")

    def __init__(self, state, index):
        self.state = state
        self.index = index

    def __getitem__(self, name):
        return self.state[self.index[name]]


def _evaluator(x, view):
    if isinstance(x, StateFn):
        f = x.fn
        return lambda: f(view)
    c = float(x)
    return lambda: c


@dataclass
class ChainOutput:
    draws: dict  # name -> array (n_chains, n_retained)
    acceptance: dict  # name -> mean acceptance rate (1.0 for Gibbs updates)
    summaries: dict  # name -> DrawSummary pooled over chains
    rhat: dict | None  # name -> split-Rhat or None when undefined
    step_trace: dict  # name -> list of (iteration, step size) change points
    warnings: list
    config: ChainConfig

    def pooled(self, name: str) -> np.ndarray:
        return self.draws[name].reshape(-1)


def run_chain(model: ModelGraph, config: ChainConfig, inits: list[dict] | None = None) -> ChainOutput:
    """Run `config.n_chains` chains and pool retained draws per node.

    Bit-reproducible for a fixed (model, config): chain c draws from the
    sub-stream (config.seed, c).
    """
    names = list(model._order)
    idx = {n: i for i, n in enumerate(names)}
    monitored = names + list(model._dets)
    n_ret = config.n_retained
    draws = {n: np.empty((config.n_chains, n_ret)) for n in monitored}
    acc_by_chain: dict[str, list[float]] = {n: [] for n in names}
    step_trace: dict[str, list] = {}
    warnings: list[str] = []

    for chain_i in range(config.n_chains):
        rng = RandomStream(config.seed, chain_i).generator()
        state = [model.initial_value(n) for n in names]
        if inits is not None and chain_i < len(inits):
            for k, v in inits[chain_i].items():
                state[idx[k]] = float(v)
        view = _View(state, idx)

        rel_mean_ev = []
        rel_sd_ev = []
        rel_child_val = []
        for rel in model._rels:
            offset_ev = _evaluator(rel.mean.offset, view)
            term_evs = [(idx[n], _evaluator(c, view)) for n, c in rel.mean.terms.items()]

            def mean_ev(offset_ev=offset_ev, term_evs=term_evs, state=state):
                m = offset_ev()
                for i, cev in term_evs:
                    m += cev() * state[i]
                return m

            rel_mean_ev.append(mean_ev)
            rel_sd_ev.append(_evaluator(rel.sd, view))
            if isinstance(rel.child, str):
                rel_child_val.append(lambda i=idx[rel.child], state=state: state[i])
            else:
                rel_child_val.append(lambda v=float(rel.child): v)

        def rel_logdens(r):
            sd = rel_sd_ev[r]()
            if not sd > 0:
                return -math.inf
            resid = rel_child_val[r]() - rel_mean_ev[r]()
            return -0.5 * (_LOG_2PI + 2.0 * math.log(sd) + (resid / sd) ** 2)

        # initialization sanity
        logp0 = 0.0
        for n in names:
            prior = model._priors[n]
            if prior is not None:
                logp0 += prior.logpdf(state[idx[n]])
        logp0 += sum(rel_logdens(r) for r in range(len(model._rels)))
        if not math.isfinite(logp0):
            raise InitializationError(
                f"log posterior not finite at the initial state (chain {chain_i})"
            )

        # per-parameter updaters
        updaters = []
        chain_trace: dict[str, list] = {}
        for n in names:
            i = idx[n]
            prior = model._priors[n]
            child_ids, pred_ids, dep_ids = model._roles(n)
            if model.gibbs_eligible(n):
                pred_coef_ev = [
                    _evaluator(model._rels[r].mean.terms[n], view) for r in pred_ids
                ]

                def gibbs(
                    rng,
                    i=i,
                    prior=prior,
                    child_ids=child_ids,
                    pred_ids=pred_ids,
                    pred_coef_ev=pred_coef_ev,
                    state=state,
                ):
                    prec = 0.0
                    num = 0.0
                    if prior is not None:
                        p0 = 1.0 / prior.var
                        prec += p0
                        num += prior.mean * p0
                    for r in child_ids:
                        sd = rel_sd_ev[r]()
                        w = 1.0 / (sd * sd)
                        prec += w
                        num += rel_mean_ev[r]() * w
                    for r, cev in zip(pred_ids, pred_coef_ev):
                        c = cev()
                        if c == 0.0:
                            continue
                        sd = rel_sd_ev[r]()
                        w = 1.0 / (sd * sd)
                        rest = rel_mean_ev[r]() - c * state[i]
                        y = rel_child_val[r]()
                        prec += c * c * w
                        num += c * (y - rest) * w
                    mean = num / prec
                    state[i] = mean + rng.standard_normal() / math.sqrt(prec)
                    return True

                updaters.append((n, gibbs, None))
            else:
                blanket = sorted(set(child_ids + pred_ids + dep_ids))

                def local_logp(i=i, prior=prior, blanket=blanket, state=state):
                    lp = prior.logpdf(state[i]) if prior is not None else 0.0
                    if lp == -math.inf:
                        return lp
                    for r in blanket:
                        lp += rel_logdens(r)
                    return lp

                mh_state = {"step": 0.5}
                chain_trace[n] = [(0, mh_state["step"])]
                support = prior.support() if prior is not None else (-math.inf, math.inf)
                log_walk = support[0] == 0.0 and support[1] == math.inf

                if log_walk:
                    # random walk on log theta (with Jacobian) keeps scale
                    # parameters mixing across orders of magnitude
                    def mh(
                        rng,
                        i=i,
                        local_logp=local_logp,
                        mh_state=mh_state,
                        state=state,
                    ):
                        cur = state[i]
                        lp_cur = local_logp()
                        state[i] = cur * math.exp(mh_state["step"] * rng.standard_normal())
                        lp_new = local_logp()
                        ratio = lp_new - lp_cur + math.log(state[i]) - math.log(cur)
                        if math.log(rng.uniform()) < ratio:
                            return True
                        state[i] = cur
                        return False

                else:
                    def mh(
                        rng,
                        i=i,
                        local_logp=local_logp,
                        mh_state=mh_state,
                        state=state,
                    ):
                        cur = state[i]
                        lp_cur = local_logp()
                        state[i] = cur + mh_state["step"] * rng.standard_normal()
                        lp_new = local_logp()
                        if math.log(rng.uniform()) < lp_new - lp_cur:
                            return True
                        state[i] = cur
                        return False

                updaters.append((n, mh, mh_state))

        det_evs = [(n, _evaluator(sfn, view)) for n, sfn in model._dets.items()]

        # main loop
        window = 50
        acc_total = {n: 0 for n in names}
        acc_window = {n: 0 for n in names}
        ret_k = 0
        for it in range(1, config.iterations + 1):
            in_burn = it <= config.burn_in
            for n, update, mh_state in updaters:
                accepted = update(rng)
                if mh_state is not None:
                    acc_window[n] += accepted
                if not in_burn:
                    acc_total[n] += accepted
            if in_burn and it % window == 0:
                for n, _, mh_state in updaters:
                    if mh_state is None:
                        continue
                    rate = acc_window[n] / window
                    if rate < 0.2:
                        mh_state["step"] *= 0.7
                        chain_trace[n].append((it, mh_state["step"]))
                    elif rate > 0.5:
                        mh_state["step"] *= 1.4
                        chain_trace[n].append((it, mh_state["step"]))
                    acc_window[n] = 0
            if not in_burn:
                k = it - config.burn_in - 1
                if k % config.thinning == 0 and ret_k < n_ret:
                    for n in names:
                        draws[n][chain_i, ret_k] = state[idx[n]]
                    for n, ev in det_evs:
                        draws[n][chain_i, ret_k] = ev()
                    ret_k += 1

        post_iters = config.iterations - config.burn_in
        for n, _, mh_state in updaters:
            rate = acc_total[n] / post_iters if mh_state is not None else 1.0
            acc_by_chain[n].append(rate)
            if mh_state is not None and not 0.05 <= rate <= 0.95:
                warnings.append(
                    f"chain {chain_i}: acceptance rate {rate:.3f} for {n!r} "
                    f"outside [0.05, 0.95] after adaptation"
                )
        for n, trace in chain_trace.items():
            step_trace.setdefault(n, []).append(trace)

    acceptance = {n: float(np.mean(v)) for n, v in acc_by_chain.items()}
    summaries = {n: summarize(draws[n].reshape(-1)) for n in monitored}
    rhat = None
    if config.n_chains >= 2:
        rhat = {n: split_rhat(draws[n]) for n in monitored}
    return ChainOutput(
        draws=draws,
        acceptance=acceptance,
        summaries=summaries,
        rhat=rhat,
        step_trace=step_trace,
        warnings=warnings,
        config=config,
    )


# ---------------------------------------------------------------------------
# Convergence diagnostics
# ---------------------------------------------------------------------------


def split_rhat(chain_draws: np.ndarray) -> float | None:
    """Split-Rhat over an (n_chains, n_draws) array; None when variance is 0."""
    m, n = chain_draws.shape
    half = n // 2
    if half < 2:
        return None
    seqs = np.vstack([chain_draws[:, :half], chain_draws[:, half : 2 * half]])
    w = seqs.var(axis=1, ddof=1).mean()
    if w <= 0:
        return None
    b_over_n = seqs.mean(axis=1).var(ddof=1)
    var_hat = (half - 1) / half * w + b_over_n
    return float(math.sqrt(var_hat / w))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = len(x)
    xd = x - x.mean()
    f = np.fft.rfft(xd, 2 * n)
    acov = np.fft.irfft(f * np.conj(f))[:n]
    return acov / n


def effective_sample_size(chain_draws: np.ndarray) -> float | None:
    """Multi-chain ESS with Geyer initial-positive-pair truncation."""
    m, n = chain_draws.shape
    if n < 4:
        return None
    acovs = np.vstack([_autocov(chain_draws[c]) for c in range(m)])
    w = chain_draws.var(axis=1, ddof=1).mean()
    var_hat = w
    if m >= 2:
        var_hat = (n - 1) / n * w + chain_draws.mean(axis=1).var(ddof=1)
    if var_hat <= 0:
        return None
    rho = 1.0 - (w - acovs.mean(axis=0)) / var_hat
    total = 0.0
    t = 1
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        total += pair
        t += 2
    return float(m * n / (1.0 + 2.0 * total))


@dataclass(frozen=True)
class DiagnosticReport:
    rhat: dict
    ess: dict
    flagged: tuple[str, ...]  # parameters with Rhat > 1.05
    not_applicable: tuple[str, ...]  # zero-variance or too-short sequences

    def converged(self) -> bool:
        return not self.flagged


def diagnose(output: ChainOutput) -> DiagnosticReport:
    """Split-Rhat and effective sample size for every monitored node."""
    m, n = next(iter(output.draws.values())).shape
    if m < 2:
        raise ModelSpecError("diagnose requires at least 2 chains")
    if n < 100:
        raise ModelSpecError(f"diagnose requires >= 100 retained draws, got {n}")
    rhat = {}
    ess = {}
    flagged = []
    not_applicable = []
    for name, arr in output.draws.items():
        r = split_rhat(arr)
        e = effective_sample_size(arr)
        rhat[name] = r
        ess[name] = e
        if r is None:
            not_applicable.append(name)
        elif r > 1.05:
            flagged.append(name)
    return DiagnosticReport(
        rhat=rhat, ess=ess, flagged=tuple(flagged), not_applicable=tuple(not_applicable)
    )
