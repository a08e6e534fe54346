"""Evaluation: WER with edit breakdown, endpoint latency, filtering, sweeps.

Percentiles are nearest-rank so every reported value is a member of the
sample. The sweep grid-searches the two EOQ thresholds and the mandatory
wait, then picks the latency-lexicographic best point under a WER budget.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

from .runtime import Mode, Thresholds, run_session


class EvalError(Exception):
    pass


class BudgetError(EvalError):
    """No sweep point met the WER budget; carries the best-WER point."""

    def __init__(self, budget, best_point):
        super().__init__(
            f"no sweep point met wer budget {budget}; best wer "
            f"{best_point.wer.wer:.2f}")
        self.best_point = best_point


# ---------------------------------------------------------------------------
# word error rate


@dataclass
class WerBreakdown:
    wer: float
    del_rate: float
    ins_rate: float
    sub_rate: float
    n_del: int
    n_ins: int
    n_sub: int
    n_ref: int


def wer(ref, hyp) -> WerBreakdown:
    """Levenshtein alignment with unit costs and a fixed backtrace.

    Tie-breaking precedence in the backtrace is substitution, then deletion,
    then insertion; total WER is tie-independent.
    """
    ref = list(ref)
    hyp = list(hyp)
    if not ref:
        raise EvalError("WER undefined for an empty reference")
    R, H = len(ref), len(hyp)
    d = [[0] * (H + 1) for _ in range(R + 1)]
    for i in range(R + 1):
        d[i][0] = i
    for j in range(H + 1):
        d[0][j] = j
    for i in range(1, R + 1):
        for j in range(1, H + 1):
            sub = d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i][j] = min(sub, d[i - 1][j] + 1, d[i][j - 1] + 1)

    n_sub = n_del = n_ins = 0
    i, j = R, H
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] != hyp[j - 1]:
                n_sub += 1
            i -= 1
            j -= 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            n_del += 1
            i -= 1
        else:
            n_ins += 1
            j -= 1

    sub_rate = 100.0 * n_sub / R
    del_rate = 100.0 * n_del / R
    ins_rate = 100.0 * n_ins / R
    return WerBreakdown(wer=sub_rate + del_rate + ins_rate,
                        del_rate=del_rate, ins_rate=ins_rate,
                        sub_rate=sub_rate, n_del=n_del, n_ins=n_ins,
                        n_sub=n_sub, n_ref=R)


def corpus_wer(refs, hyps) -> WerBreakdown:
    """Pooled WER over a set: counts summed before dividing."""
    n_sub = n_del = n_ins = n_ref = 0
    for ref, hyp in zip(refs, hyps):
        b = wer(ref, hyp)
        n_sub += b.n_sub
        n_del += b.n_del
        n_ins += b.n_ins
        n_ref += b.n_ref
    sub_rate = 100.0 * n_sub / n_ref
    del_rate = 100.0 * n_del / n_ref
    ins_rate = 100.0 * n_ins / n_ref
    return WerBreakdown(wer=sub_rate + del_rate + ins_rate,
                        del_rate=del_rate, ins_rate=ins_rate,
                        sub_rate=sub_rate, n_del=n_del, n_ins=n_ins,
                        n_sub=n_sub, n_ref=n_ref)


# ---------------------------------------------------------------------------
# endpoint latency


@dataclass
class LatencyStats:
    latencies: list
    ep50: float
    ep90: float
    cutoff_count: int


def endpoint_latency(trace, utt):
    """Latency (ms) of the declared endpoint past the true end of speech.

    Returns (latency_ms, cutoff). A session that never endpoints contributes
    the max-latency sentinel: utterance end minus ground-truth end.
    """
    gt_end = utt.segments[-1].end_ms if utt.segments else 0
    if trace.event is not None:
        lat = trace.event.endpoint_ms - gt_end
        return lat, lat < 0
    return utt.duration_ms - gt_end, False


def nearest_rank(sorted_values, pct):
    n = len(sorted_values)
    idx = max(0, -(-int(pct) * n // 100) - 1)  # ceil(pct/100 * n) - 1
    return sorted_values[idx]


def latency_stats(latencies) -> LatencyStats:
    lats = list(latencies)
    if not lats:
        raise EvalError("latency_stats needs a nonempty list")
    s = sorted(lats)
    return LatencyStats(latencies=lats,
                        ep50=nearest_rank(s, 50),
                        ep90=nearest_rank(s, 90),
                        cutoff_count=sum(1 for x in lats if x < 0))


def speech_pct(traces) -> float:
    """Fraction of frames surviving the filter across a set of traces."""
    total = sum(len(t.rows) for t in traces)
    if total == 0:
        raise EvalError("speech_pct over zero frames")
    kept = sum(sum(1 for r in t.rows if not r.filtered) for t in traces)
    return kept / total


# ---------------------------------------------------------------------------
# grid sweep and tradeoff curve


@dataclass
class SweepPoint:
    thresholds: Thresholds
    wer: WerBreakdown
    latency: LatencyStats
    speech_pct: float


@dataclass
class SweepResult:
    points: list
    selected: SweepPoint


def evaluate_point(system, records, th: Thresholds, mode=Mode.SHORT_QUERY) -> SweepPoint:
    traces = [run_session(rec, mode, th, system) for rec in records]
    refs = [rec.target_tokens for rec in records]
    hyps = [t.hypothesis for t in traces]
    breakdown = corpus_wer(refs, hyps)
    lats = [endpoint_latency(t, rec)[0] for t, rec in zip(traces, records)]
    return SweepPoint(thresholds=th, wer=breakdown,
                      latency=latency_stats(lats),
                      speech_pct=speech_pct(traces))


def sweep(system, records, *, theta_vad, theta_eoq_grid, theta_eos_grid,
          wait_ms_grid, wer_budget) -> SweepResult:
    """Evaluate every (theta_EOQ, theta_eos, w) tuple and pick the best.

    Selection: lexicographic minimum of (ep50, ep90) among points with
    wer <= wer_budget. Raises BudgetError (carrying the best-WER point) if
    the budget is infeasible.
    """
    grid = list(itertools.product(theta_eoq_grid, theta_eos_grid, wait_ms_grid))
    if not grid:
        raise EvalError("empty sweep grid")
    points = []
    for teoq, teos, w in grid:
        th = Thresholds(theta_vad=theta_vad, theta_eoq=teoq, theta_eos=teos,
                        wait_ms=int(w))
        points.append(evaluate_point(system, records, th))
    feasible = [p for p in points if p.wer.wer <= wer_budget]
    if not feasible:
        best = min(points, key=lambda p: p.wer.wer)
        raise BudgetError(wer_budget, best)
    selected = min(feasible, key=lambda p: (p.latency.ep50, p.latency.ep90))
    return SweepResult(points=points, selected=selected)


def tradeoff_curve(points):
    """Pareto lower envelope: (wer, best ep50 achievable at wer or below).

    Sorted by WER ascending; dominated points are excluded, so ep50 is
    strictly decreasing along the curve.
    """
    by_wer = sorted(points, key=lambda p: (p.wer.wer, p.latency.ep50))
    curve = []
    best = None
    for p in by_wer:
        if best is None or p.latency.ep50 < best:
            best = p.latency.ep50
            if curve and curve[-1][0] == p.wer.wer:
                curve[-1] = (p.wer.wer, best)
            else:
                curve.append((p.wer.wer, best))
    return curve


# ---------------------------------------------------------------------------
# CSV output

SWEEP_COLUMNS = ["theta_eoq", "theta_eos", "w_ms", "wer", "del", "ins", "sub",
                 "ep50_ms", "ep90_ms", "speech_pct", "cutoffs"]


def _fmt(x):
    return format(float(x), ".9g")


def write_sweep_csv(points, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for p in points:
            w.writerow([
                _fmt(p.thresholds.theta_eoq), _fmt(p.thresholds.theta_eos),
                p.thresholds.wait_ms, _fmt(p.wer.wer), _fmt(p.wer.del_rate),
                _fmt(p.wer.ins_rate), _fmt(p.wer.sub_rate),
                _fmt(p.latency.ep50), _fmt(p.latency.ep90),
                _fmt(p.speech_pct), p.latency.cutoff_count,
            ])


def write_curve_csv(curve, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wer", "ep50_ms"])
        for wer_value, ep50 in curve:
            w.writerow([_fmt(wer_value), _fmt(ep50)])
