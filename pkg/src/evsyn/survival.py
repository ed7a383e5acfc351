"""Survival analysis on reconstructed patient-level data.

Covers the product-limit estimator, inversion of a digitized step curve back
into patient-level records, two-arm Cox partial-likelihood fitting, Weibull
accelerated-failure-time fitting, and restricted mean survival.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .stats import Sym2

_Z975 = 1.959963984540054


class DataError(ValueError):
    """Input records or files violate a structural requirement."""


class ReconstructionError(ValueError):
    """No integer event/censor allocation reproduces the curve."""


class ConvergenceError(RuntimeError):
    """An iterative fit failed to converge."""


@dataclass(frozen=True)
class IpdRecord:
    """One patient: follow-up time in months, event indicator, arm label."""

    time: float
    event: bool
    arm: str

    def __post_init__(self):
        if not (math.isfinite(self.time) and self.time > 0):
            raise DataError(f"time must be finite and positive, got {self.time}")


@dataclass(frozen=True)
class KmCurve:
    """Survival step function plus the numbers-at-risk table beneath it.

    `steps` is ((time, survival), ...) starting at (0.0, 1.0) with strictly
    increasing times and non-increasing survival in [0, 1]. `risk_table` is
    ((interval_start, n_at_risk), ...) with n(t) counting patients whose
    observation time is >= t.
    """

    steps: tuple[tuple[float, float], ...]
    risk_table: tuple[tuple[float, int], ...]

    def __post_init__(self):
        if not self.steps:
            raise DataError("curve needs at least one step")
        if self.steps[0] != (0.0, 1.0):
            raise DataError("curve must start at (0.0, 1.0)")
        times = [t for t, _ in self.steps]
        survs = [s for _, s in self.steps]
        if any(t2 <= t1 for t1, t2 in zip(times, times[1:])):
            raise DataError("step times must be strictly increasing")
        if any(not 0.0 <= s <= 1.0 for s in survs):
            raise DataError("survival values must lie in [0, 1]")
        if any(s2 > s1 + 1e-12 for s1, s2 in zip(survs, survs[1:])):
            raise DataError("survival must be non-increasing")
        if self.risk_table:
            starts = [t for t, _ in self.risk_table]
            ns = [n for _, n in self.risk_table]
            if any(t2 <= t1 for t1, t2 in zip(starts, starts[1:])):
                raise DataError("risk-table times must be strictly increasing")
            if any(n2 > n1 for n1, n2 in zip(ns, ns[1:])):
                raise DataError("numbers at risk must be non-increasing")

    def survival_at(self, t: float) -> float:
        s = 1.0
        for time, surv in self.steps:
            if time <= t:
                s = surv
            else:
                break
        return s


@dataclass(frozen=True)
class CoxFit:
    log_hr: float
    se: float
    iterations: int
    converged: bool

    def hr(self) -> float:
        return math.exp(self.log_hr)

    def ci(self) -> tuple[float, float]:
        return (
            math.exp(self.log_hr - _Z975 * self.se),
            math.exp(self.log_hr + _Z975 * self.se),
        )


@dataclass(frozen=True)
class WeibullFit:
    """Accelerated-failure-time fit: log(T) = intercept + scale * W.

    W is standard minimum extreme value, so the survival function is
    S(t) = exp(-lam * t**gamma) with lam = exp(-intercept/scale) and
    gamma = 1/scale.
    """

    intercept: float
    scale: float
    cov: Sym2
    log_lik: float
    n_events: int
    converged: bool

    @property
    def lam(self) -> float:
        return math.exp(-self.intercept / self.scale)

    @property
    def gamma(self) -> float:
        return 1.0 / self.scale


@dataclass(frozen=True)
class MeanSurvival:
    mean: float
    se: float
    horizon: float
    warnings: tuple[str, ...] = field(default=())


# ---------------------------------------------------------------------------
# Kaplan-Meier estimation
# ---------------------------------------------------------------------------


def km_estimate(records: list[IpdRecord], grid: list[float] | None = None) -> KmCurve:
    """Product-limit estimate of a single arm, with risk table on `grid`.

    S(t) is the product over event times <= t of (1 - d_i / n_i). The risk
    table reports, for each grid time g, the count of records with time >= g.
    """
    if not records:
        raise DataError("no records")
    arms = {r.arm for r in records}
    if len(arms) > 1:
        raise DataError(f"km_estimate expects a single arm, got {sorted(arms)}")
    times = np.array([r.time for r in records])
    events = np.array([r.event for r in records])
    order = np.argsort(times, kind="stable")
    times, events = times[order], events[order]

    steps = [(0.0, 1.0)]
    s = 1.0
    n_at_risk = len(times)
    for t in np.unique(times):
        mask = times == t
        d = int(events[mask].sum())
        if d > 0:
            s *= 1.0 - d / n_at_risk
            steps.append((float(t), s))
        n_at_risk -= int(mask.sum())

    if grid is None:
        grid = [0.0]
    risk = tuple((float(g), int(np.sum(times >= g))) for g in grid)
    return KmCurve(steps=tuple(steps), risk_table=risk)


# ---------------------------------------------------------------------------
# Curve inversion back to patient-level records
# ---------------------------------------------------------------------------


def _allocate_interval(step_list, censor_times, n_enter, s_enter):
    """Walk one risk interval, returning (events, n_left, s_left, records).

    Events are placed at step times sized so the running product-limit value
    tracks each step's target; censorings are consumed in time order.
    """
    n = n_enter
    s_run = s_enter
    recs = []  # (time, is_event, count)
    n_events = 0
    ci = 0
    for t, s_target in step_list:
        while ci < len(censor_times) and censor_times[ci] < t:
            if n > 0:
                recs.append((censor_times[ci], False, 1))
                n -= 1
            ci += 1
        if n <= 0:
            if s_target < s_run - 1e-9:
                return None  # nobody left to produce the drop
            continue
        frac = 1.0 - (s_target / s_run if s_run > 0 else 0.0)
        d = int(round(n * frac))
        d = max(0, min(d, n))
        if d > 0:
            s_run *= 1.0 - d / n
            recs.append((t, True, d))
            n -= d
            n_events += d
    while ci < len(censor_times):
        if n > 0:
            recs.append((censor_times[ci], False, 1))
            n -= 1
        ci += 1
    return n_events, n, s_run, recs


def _censor_grid(lo: float, hi: float, c: int) -> list[float]:
    if c <= 0:
        return []
    if hi <= lo:
        return [lo] * c
    span = hi - lo
    return [lo + span * (i + 1) / (c + 1) for i in range(c)]


def reconstruct_ipd(
    curve: KmCurve, total_events: int | None = None, arm: str = "reconstructed"
) -> list[IpdRecord]:
    """Invert a digitized survival curve into patient-level records.

    Within each risk interval the event and censoring counts are chosen so
    that (i) re-estimating the curve reproduces each step, (ii) the number
    at risk at every interval boundary matches the risk table exactly, and
    (iii) when `total_events` is supplied the overall event count matches it
    exactly. Censoring times are spread uniformly inside their interval.
    The search over censor counts is exhaustive per interval, so the output
    is deterministic.
    """
    if not curve.risk_table:
        raise DataError("reconstruction requires at least one risk-table entry")
    boundaries = [t for t, _ in curve.risk_table]
    targets = [n for _, n in curve.risk_table]
    steps = [(t, s) for t, s in curve.steps if t > 0]
    t_end = max([boundaries[-1]] + [t for t, _ in steps])

    # A step at exactly boundary b belongs to the interval starting at b,
    # consistent with n(t) counting times >= t.
    interval_steps: list[list[tuple[float, float]]] = [[] for _ in boundaries]
    for t, s in steps:
        k = 0
        for j, b in enumerate(boundaries):
            if t >= b:
                k = j
        interval_steps[k].append((t, s))

    records: list[tuple[float, bool, int]] = []
    n = targets[0]
    s_run = 1.0
    events_so_far = 0

    for k in range(len(boundaries)):
        lo = boundaries[k]
        last = k == len(boundaries) - 1
        hi = t_end if last else boundaries[k + 1]
        step_list = interval_steps[k]

        if not last:
            n_target = targets[k + 1]
            if n_target > n:
                raise ReconstructionError(
                    f"interval starting at {lo}: at-risk target {n_target} exceeds {n}"
                )
            best = None
            for c in range(0, n - n_target + 1):
                out = _allocate_interval(step_list, _censor_grid(lo, hi, c), n, s_run)
                if out is None:
                    continue
                n_ev, n_left, s_left, recs = out
                if n_left == n_target:
                    s_target_end = step_list[-1][1] if step_list else s_run
                    score = abs(s_left - s_target_end)
                    if best is None or score < best[0]:
                        best = (score, c, n_ev, n_left, s_left, recs)
            if best is None:
                raise ReconstructionError(
                    f"interval starting at {lo}: no censor count matches "
                    f"the at-risk target {n_target}"
                )
            _, _, n_ev, n, s_run, recs = best
            records.extend(recs)
            events_so_far += n_ev
        else:
            if total_events is None:
                out = _allocate_interval(step_list, [], n, s_run)
                if out is None:
                    raise ReconstructionError(f"interval starting at {lo}: infeasible steps")
                n_ev, n, s_run, recs = out
                records.extend(recs)
                events_so_far += n_ev
            else:
                need = total_events - events_so_far
                if need < 0:
                    raise ReconstructionError(
                        f"interval starting at {lo}: already placed more events "
                        f"({events_so_far}) than the reported total ({total_events})"
                    )
                best = None
                for c in range(0, n + 1):
                    out = _allocate_interval(step_list, _censor_grid(lo, hi, c), n, s_run)
                    if out is None:
                        continue
                    n_ev, n_left, s_left, recs = out
                    if n_ev == need:
                        best = (c, n_ev, n_left, s_left, recs)
                        break
                if best is None:
                    raise ReconstructionError(
                        f"interval starting at {lo}: cannot reach the reported "
                        f"event total {total_events}"
                    )
                _, n_ev, n, s_run, recs = best
                records.extend(recs)
                events_so_far += n_ev
            if n > 0:
                records.append((max(t_end, lo), False, n))
                n = 0

    out_records: list[IpdRecord] = []
    for t, is_event, count in records:
        t = max(t, 1e-9)  # guard against a drop digitized at exactly zero
        out_records.extend(IpdRecord(t, is_event, arm) for _ in range(count))
    out_records.sort(key=lambda r: (r.time, not r.event))
    return out_records


# ---------------------------------------------------------------------------
# Cox proportional hazards (two arms, Breslow ties)
# ---------------------------------------------------------------------------


def _cox_score_info(b, event_times, d_t, s_t, n0_t, n1_t):
    eb = math.exp(b)
    score = 0.0
    info = 0.0
    for d, s, n0, n1 in zip(d_t, s_t, n0_t, n1_t):
        denom = n0 + n1 * eb
        p1 = n1 * eb / denom
        score += s - d * p1
        info += d * p1 * (1.0 - p1)
    return score, info


def cox_fit(records: list[IpdRecord], reference_arm: str) -> CoxFit:
    """Two-arm Cox log hazard ratio with Breslow tie handling.

    Newton-Raphson on the partial likelihood; converges when |score| < 1e-8
    or stops (flagged) after 50 iterations. `se` is the inverse square root
    of the observed information at the estimate.
    """
    arms = sorted({r.arm for r in records})
    if len(arms) != 2:
        raise DataError(f"cox_fit needs exactly two arms, got {arms}")
    if reference_arm not in arms:
        raise DataError(f"reference arm {reference_arm!r} not in {arms}")
    if not any(r.event for r in records):
        raise DataError("no events in the pooled data")

    times = np.array([r.time for r in records])
    events = np.array([r.event for r in records])
    x = np.array([0.0 if r.arm == reference_arm else 1.0 for r in records])

    event_times = np.unique(times[events])
    d_t, s_t, n0_t, n1_t = [], [], [], []
    for t in event_times:
        at_risk = times >= t
        ev_here = events & (times == t)
        d_t.append(int(ev_here.sum()))
        s_t.append(float(x[ev_here].sum()))
        n1 = float(x[at_risk].sum())
        n1_t.append(n1)
        n0_t.append(float(at_risk.sum()) - n1)

    b = 0.0
    converged = False
    iterations = 0
    for iterations in range(1, 51):
        score, info = _cox_score_info(b, event_times, d_t, s_t, n0_t, n1_t)
        if abs(score) < 1e-8:
            converged = True
            break
        if info <= 1e-12 or abs(b) > 50:
            break  # monotone likelihood; leave last iterate flagged
        b += score / info
    _, info = _cox_score_info(b, event_times, d_t, s_t, n0_t, n1_t)
    se = 1.0 / math.sqrt(info) if info > 0 else math.inf
    return CoxFit(log_hr=b, se=se, iterations=iterations, converged=converged)


def cox_log_partial_likelihood(records: list[IpdRecord], reference_arm: str, b: float) -> float:
    """Breslow partial log-likelihood at a fixed log HR (grid-search oracle)."""
    times = np.array([r.time for r in records])
    events = np.array([r.event for r in records])
    x = np.array([0.0 if r.arm == reference_arm else 1.0 for r in records])
    ll = 0.0
    for t in np.unique(times[events]):
        at_risk = times >= t
        ev_here = events & (times == t)
        d = int(ev_here.sum())
        s = float(x[ev_here].sum())
        n1 = float(x[at_risk].sum())
        n0 = float(at_risk.sum()) - n1
        ll += s * b - d * math.log(n0 + n1 * math.exp(b))
    return ll


# ---------------------------------------------------------------------------
# Weibull accelerated failure time
# ---------------------------------------------------------------------------


def _weibull_loglik_terms(params, log_t, delta):
    beta, log_alpha = params
    alpha = math.exp(log_alpha)
    z = (log_t - beta) / alpha
    ez = np.exp(z)
    ll = float(np.sum(delta * (z - log_alpha)) - np.sum(ez))
    d_beta = float(np.sum(ez - delta)) / alpha
    d_logalpha = float(np.sum(z * (ez - delta)) - np.sum(delta))
    return ll, np.array([d_beta, d_logalpha]), z, ez, alpha


def _weibull_observed_information(log_t, delta, beta, alpha):
    """Observed information in (beta, alpha) coordinates."""
    z = (log_t - beta) / alpha
    ez = np.exp(z)
    d = delta.astype(float)
    h_bb = -np.sum(ez) / alpha**2
    h_ba = -np.sum(ez - d + z * ez) / alpha**2
    h_aa = -np.sum(2.0 * z * (ez - d) + z * z * ez - d) / alpha**2
    return np.array([[-h_bb, -h_ba], [-h_ba, -h_aa]])


def weibull_fit(records: list[IpdRecord]) -> WeibullFit:
    """Censored Weibull AFT maximum likelihood for a single arm.

    Optimizes (intercept, log scale) with analytic gradients, then reports
    the coefficient covariance as the inverse observed information in
    (intercept, scale) coordinates.
    """
    arms = {r.arm for r in records}
    if len(arms) > 1:
        raise DataError(f"weibull_fit expects a single arm, got {sorted(arms)}")
    n_events = sum(r.event for r in records)
    if n_events < 2:
        raise DataError(f"need at least 2 events, got {n_events}")
    log_t = np.log(np.array([r.time for r in records]))
    delta = np.array([r.event for r in records])

    ev_logs = log_t[delta]
    beta0 = float(np.mean(ev_logs))
    spread = float(np.std(ev_logs))
    alpha0 = max(spread * math.sqrt(6.0) / math.pi, 0.05)

    def neg(params):
        ll, grad, *_ = _weibull_loglik_terms(params, log_t, delta)
        return -ll, -grad

    res = minimize(
        neg,
        x0=np.array([beta0, math.log(alpha0)]),
        jac=True,
        method="BFGS",
        options={"maxiter": 100, "gtol": 1e-9},
    )
    beta, alpha = float(res.x[0]), float(math.exp(res.x[1]))
    info = _weibull_observed_information(log_t, delta, beta, alpha)
    det = info[0, 0] * info[1, 1] - info[0, 1] ** 2
    if det <= 0:
        raise ConvergenceError("observed information not positive definite")
    inv = np.linalg.inv(info)
    cov = Sym2(float(inv[0, 0]), float(inv[0, 1]), float(inv[1, 1]))
    ll = -float(res.fun)
    return WeibullFit(
        intercept=beta,
        scale=alpha,
        cov=cov,
        log_lik=ll,
        n_events=int(n_events),
        converged=bool(res.success),
    )


def weibull_log_likelihood(records: list[IpdRecord], beta: float, alpha: float) -> float:
    """Censored AFT log-likelihood at fixed coefficients (perturbation oracle)."""
    log_t = np.log(np.array([r.time for r in records]))
    delta = np.array([r.event for r in records])
    ll, *_ = _weibull_loglik_terms((beta, math.log(alpha)), log_t, delta)
    return ll


# ---------------------------------------------------------------------------
# Restricted mean survival
# ---------------------------------------------------------------------------


def restricted_mean(data, horizon: float) -> MeanSurvival:
    """Area under the survival step function from 0 to `horizon`.

    Accepts either a KmCurve or a list of records (estimated first). The
    standard error integrates Greenwood-style variance contributions at each
    event time up to the horizon.
    """
    if horizon <= 0:
        raise DataError(f"horizon must be positive, got {horizon}")
    warnings: tuple[str, ...] = ()
    if isinstance(data, KmCurve):
        curve = data
        event_info = None
    else:
        records = list(data)
        curve = km_estimate(records, grid=[0.0])
        times = np.array([r.time for r in records])
        events = np.array([r.event for r in records])
        event_info = []
        for t in np.unique(times[events]):
            d = int((events & (times == t)).sum())
            n = int((times >= t).sum())
            event_info.append((float(t), d, n))
        first = float(times.min())
        if horizon < first:
            warnings = (f"horizon {horizon} precedes first observation {first}",)

    # exact step integration
    mean = 0.0
    prev_t, prev_s = 0.0, 1.0
    for t, s in curve.steps[1:]:
        if t >= horizon:
            break
        mean += prev_s * (t - prev_t)
        prev_t, prev_s = t, s
    mean += prev_s * (horizon - prev_t)

    se = 0.0
    if event_info is not None:
        var = 0.0
        for t, d, n in event_info:
            if t >= horizon or n <= d:
                continue
            # area under the curve from t to horizon
            a = 0.0
            pt, ps = t, curve.survival_at(t)
            for t2, s2 in curve.steps:
                if t2 <= t:
                    continue
                if t2 >= horizon:
                    break
                a += ps * (t2 - pt)
                pt, ps = t2, s2
            a += ps * (horizon - pt)
            var += a * a * d / (n * (n - d))
        se = math.sqrt(var)
    return MeanSurvival(mean=mean, se=se, horizon=horizon, warnings=warnings)


# ---------------------------------------------------------------------------
# CSV interfaces
# ---------------------------------------------------------------------------


def read_ipd_csv(path) -> list[IpdRecord]:
    """Read `time,event,arm` rows (months, 0/1, label)."""
    records = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        required = {"time", "event", "arm"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(f"{path}: expected header with columns {sorted(required)}")
        for row in reader:
            records.append(
                IpdRecord(float(row["time"]), row["event"].strip() in ("1", "true", "True"), row["arm"])
            )
    if not records:
        raise DataError(f"{path}: no data rows")
    return records


def write_ipd_csv(path, records: list[IpdRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["time", "event", "arm"])
        for r in records:
            writer.writerow([repr(r.time), int(r.event), r.arm])


def read_km_csv(km_path, risk_path) -> KmCurve:
    """Read a `time,survival` step file and an `interval_start,n_at_risk` table."""
    steps = []
    with open(km_path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"time", "survival"}.issubset(reader.fieldnames):
            raise DataError(f"{km_path}: expected header time,survival")
        for row in reader:
            steps.append((float(row["time"]), float(row["survival"])))
    if not steps or steps[0] != (0.0, 1.0):
        steps.insert(0, (0.0, 1.0))
    risk = []
    with open(risk_path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"interval_start", "n_at_risk"}.issubset(reader.fieldnames):
            raise DataError(f"{risk_path}: expected header interval_start,n_at_risk")
        for row in reader:
            risk.append((float(row["interval_start"]), int(row["n_at_risk"])))
    return KmCurve(steps=tuple(steps), risk_table=tuple(risk))


def write_km_csv(km_path, risk_path, curve: KmCurve) -> None:
    with open(km_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["time", "survival"])
        for t, s in curve.steps:
            writer.writerow([repr(t), repr(s)])
    with open(risk_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["interval_start", "n_at_risk"])
        for t, n in curve.risk_table:
            writer.writerow([repr(t), n])
