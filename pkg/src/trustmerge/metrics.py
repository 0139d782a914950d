"""Per-episode metrics, the paired signed-rank test and the ablation report.

Metrics are computed over the interaction window: from the first signaling
tick to merge completion plus the post-merge grace (full episode, flagged,
when no signal was ever raised). The exact signed-rank p-value comes from
the full distribution of the statistic over sign assignments, computed by
dynamic programming on doubled ranks (ties get average ranks, zero
differences are dropped); above n = 25 a normal approximation with
continuity and tie corrections takes over.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import median
from typing import Optional, Sequence

import numpy as np

from .logs import EpisodeLog
from .sim import LATERAL_OCCUPY_MARGIN, MERGE_GRACE_S, lateral_position
from .world import MergePhase, THW_CAP, VEHICLE_LENGTH, jerk_of

EXACT_LIMIT = 25

CSV_HEADER = ("seed", "mode", "min_thw_s", "min_distance_m", "avg_speed_sv",
              "avg_speed_hv", "max_jerk_sv", "max_jerk_hv", "outcome")


@dataclass(frozen=True)
class EpisodeMetrics:
    seed: int
    mode: str
    min_thw: float
    min_distance: float
    avg_speed_sv: float
    avg_speed_hv: Optional[float]
    max_jerk_sv: float
    max_jerk_hv: Optional[float]
    merge_duration: Optional[float]
    outcome: str
    window_flagged: bool = False

    def csv_row(self) -> list:
        def fmt(x):
            return "" if x is None else f"{x:.6g}"
        return [self.seed, self.mode, fmt(self.min_thw), fmt(self.min_distance),
                fmt(self.avg_speed_sv), fmt(self.avg_speed_hv),
                fmt(self.max_jerk_sv), fmt(self.max_jerk_hv), self.outcome]


def _outcome_of(log: EpisodeLog) -> str:
    kinds = {e.kind for e in log.events}
    if "collision" in kinds:
        return "collision"
    if "merge_complete" in kinds:
        return "merged"
    if "deadlock" in kinds:
        return "deadlock"
    return "timeout"


def episode_metrics(log: EpisodeLog) -> EpisodeMetrics:
    config = log.config
    dt = config["dt"]
    width = config["layout"]["lane_width"]
    sv_id = next(v["id"] for v in config["vehicles"] if v["controller"] == "sv")
    hv_ids = [v["id"] for v in config["vehicles"] if v["kind"] == "HV"]
    hv_id = hv_ids[0] if hv_ids else None

    signal_tick = None
    done_tick = None
    for record in log.ticks:
        phase = record.vehicles[sv_id]["merge_phase"]
        if signal_tick is None and phase == MergePhase.SIGNALING.value:
            signal_tick = record.tick
        if done_tick is None and phase == MergePhase.DONE.value:
            done_tick = record.tick

    flagged = signal_tick is None
    start = 0 if flagged else signal_tick
    if done_tick is not None:
        end = min(done_tick + int(round(MERGE_GRACE_S / dt)), log.ticks[-1].tick)
    else:
        end = log.ticks[-1].tick
    window = [r for r in log.ticks if start <= r.tick <= end]

    sv_speeds = [r.vehicles[sv_id]["v"] for r in window]
    sv_accels = [r.vehicles[sv_id]["a"] for r in window]
    avg_speed_sv = float(np.mean(sv_speeds))
    max_jerk_sv = (float(np.max(np.abs(jerk_of(sv_accels, dt))))
                   if len(sv_accels) >= 2 else 0.0)

    avg_speed_hv = max_jerk_hv = None
    min_thw = THW_CAP
    min_distance = math.inf
    if hv_id is not None:
        hv_speeds = [r.vehicles[hv_id]["v"] for r in window]
        hv_accels = [r.vehicles[hv_id]["a"] for r in window]
        avg_speed_hv = float(np.mean(hv_speeds))
        max_jerk_hv = (float(np.max(np.abs(jerk_of(hv_accels, dt))))
                       if len(hv_accels) >= 2 else 0.0)
        shared = []
        for r in window:
            sv_e, hv_e = r.vehicles[sv_id], r.vehicles[hv_id]
            y_sv = sv_e["lane"] * width + sv_e["d"]
            y_hv = hv_e["lane"] * width + hv_e["d"]
            if abs(y_sv - y_hv) < LATERAL_OCCUPY_MARGIN:
                shared.append((sv_e, hv_e))
        for sv_e, hv_e in shared:
            gap = abs(sv_e["s"] - hv_e["s"]) - VEHICLE_LENGTH
            follower = sv_e if sv_e["s"] < hv_e["s"] else hv_e
            min_distance = min(min_distance, max(gap, 0.0))
            if follower["v"] > 0.1 and gap >= 0:
                min_thw = min(min_thw, min(gap / follower["v"], THW_CAP))
        if not shared:
            for r in window:
                gap = abs(r.vehicles[sv_id]["s"] - r.vehicles[hv_id]["s"]) - VEHICLE_LENGTH
                min_distance = min(min_distance, max(gap, 0.0))
    if min_distance is math.inf:
        min_distance = float("nan")

    merge_duration = None
    if signal_tick is not None and done_tick is not None:
        merge_duration = (done_tick - signal_tick) * dt

    return EpisodeMetrics(
        seed=log.seed, mode=log.mode, min_thw=min_thw, min_distance=min_distance,
        avg_speed_sv=avg_speed_sv, avg_speed_hv=avg_speed_hv,
        max_jerk_sv=max_jerk_sv, max_jerk_hv=max_jerk_hv,
        merge_duration=merge_duration, outcome=_outcome_of(log),
        window_flagged=flagged)


# ---------------------------------------------------------------------------
# Paired signed-rank test


@dataclass(frozen=True)
class WilcoxonResult:
    w_plus: float
    w_minus: float
    n_effective: int
    p_one_sided: float   # alternative: x tends to exceed y
    p_two_sided: float
    method: str          # exact | normal-approx | degenerate

    @property
    def w_statistic(self) -> float:
        return self.w_plus


def _average_ranks(values: Sequence[float]) -> list[float]:
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def _exact_pmf(doubled_ranks: list[int]) -> np.ndarray:
    """Distribution of 2*W+ over all sign assignments (counts, not normalized)."""
    total = sum(doubled_ranks)
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r] if r > 0 else counts
        counts = counts + shifted
    return counts


def _norm_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def wilcoxon_signed_rank(pairs: Sequence[tuple[float, float]]) -> WilcoxonResult:
    """Paired signed-rank test with standard tie and zero handling."""
    diffs = [float(x) - float(y) for x, y in pairs]
    diffs = [d for d in diffs if d != 0.0]
    n = len(diffs)
    if n == 0:
        return WilcoxonResult(w_plus=0.0, w_minus=0.0, n_effective=0,
                              p_one_sided=1.0, p_two_sided=1.0, method="degenerate")

    ranks = _average_ranks([abs(d) for d in diffs])
    w_plus = sum(r for r, d in zip(ranks, diffs) if d > 0)
    w_minus = sum(r for r, d in zip(ranks, diffs) if d < 0)

    if n <= EXACT_LIMIT:
        doubled = [int(round(2 * r)) for r in ranks]
        counts = _exact_pmf(doubled)
        total = counts.sum()
        k_plus = int(round(2 * w_plus))
        p_one = counts[k_plus:].sum() / total
        k_hi = int(round(2 * max(w_plus, w_minus)))
        k_lo = int(round(2 * min(w_plus, w_minus)))
        p_two = (counts[k_hi:].sum() + counts[:k_lo + 1].sum()) / total
        return WilcoxonResult(w_plus=w_plus, w_minus=w_minus, n_effective=n,
                              p_one_sided=float(min(p_one, 1.0)),
                              p_two_sided=float(min(p_two, 1.0)), method="exact")

    mu = n * (n + 1) / 4.0
    tie_groups: dict[float, int] = {}
    for d in diffs:
        tie_groups[abs(d)] = tie_groups.get(abs(d), 0) + 1
    tie_term = sum(t**3 - t for t in tie_groups.values()) / 48.0
    sigma = math.sqrt(n * (n + 1) * (2 * n + 1) / 24.0 - tie_term)
    z_one = (w_plus - mu - 0.5) / sigma
    p_one = 1.0 - _norm_cdf(z_one)
    z_two = (max(w_plus, w_minus) - mu - 0.5) / sigma
    p_two = min(2.0 * (1.0 - _norm_cdf(z_two)), 1.0)
    return WilcoxonResult(w_plus=w_plus, w_minus=w_minus, n_effective=n,
                          p_one_sided=p_one, p_two_sided=p_two,
                          method="normal-approx")


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Rank correlation with average ranks."""
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("need two aligned samples of length >= 2")
    rx = np.asarray(_average_ranks(list(x)))
    ry = np.asarray(_average_ranks(list(y)))
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0:
        return 0.0
    return float(rx @ ry) / denom


# ---------------------------------------------------------------------------
# Ablation report


ABLATION_METRICS = (
    ("avg_speed_sv", "higher"),
    ("max_jerk_sv", "lower"),
    ("min_thw", "higher"),
    ("min_distance", "higher"),
)


@dataclass(frozen=True)
class MetricComparison:
    metric: str
    median_a: float
    median_b: float
    direction: str        # sign of median difference: a vs b
    wilcoxon: WilcoxonResult


@dataclass(frozen=True)
class AblationReport:
    arm_a_mode: str
    arm_b_mode: str
    n_pairs: int
    comparisons: list[MetricComparison]
    collisions_a: int
    collisions_b: int

    def table(self) -> str:
        lines = [
            f"paired episodes: {self.n_pairs}  "
            f"({self.arm_a_mode} vs {self.arm_b_mode})",
            f"collisions: {self.arm_a_mode}={self.collisions_a} "
            f"{self.arm_b_mode}={self.collisions_b}",
            f"{'metric':<16}{'median A':>12}{'median B':>12}{'dir':>6}"
            f"{'p(1s)':>10}{'p(2s)':>10}  method",
        ]
        for c in self.comparisons:
            lines.append(
                f"{c.metric:<16}{c.median_a:>12.4g}{c.median_b:>12.4g}"
                f"{c.direction:>6}{c.wilcoxon.p_one_sided:>10.4g}"
                f"{c.wilcoxon.p_two_sided:>10.4g}  {c.wilcoxon.method}")
        return "\n".join(lines)


def ablation_compare(arm_a: Sequence[EpisodeMetrics],
                     arm_b: Sequence[EpisodeMetrics]) -> AblationReport:
    """Paired comparison of two arms sharing seeds (e.g. trust on vs off)."""
    by_seed_a = {m.seed: m for m in arm_a}
    by_seed_b = {m.seed: m for m in arm_b}
    if set(by_seed_a) != set(by_seed_b):
        raise ValueError("arms must pair by identical seeds")
    if len(by_seed_a) != len(arm_a) or len(by_seed_b) != len(arm_b):
        raise ValueError("duplicate seeds within an arm")
    seeds = sorted(by_seed_a)

    comparisons = []
    for metric, _preferred in ABLATION_METRICS:
        xs = [getattr(by_seed_a[s], metric) for s in seeds]
        ys = [getattr(by_seed_b[s], metric) for s in seeds]
        valid = [(x, y) for x, y in zip(xs, ys)
                 if x is not None and y is not None
                 and not (math.isnan(x) or math.isnan(y))]
        result = wilcoxon_signed_rank(valid) if valid else wilcoxon_signed_rank([])
        med_a = median([p[0] for p in valid]) if valid else float("nan")
        med_b = median([p[1] for p in valid]) if valid else float("nan")
        if med_a > med_b:
            direction = "a>b"
        elif med_a < med_b:
            direction = "a<b"
        else:
            direction = "a=b"
        comparisons.append(MetricComparison(metric=metric, median_a=med_a,
                                            median_b=med_b, direction=direction,
                                            wilcoxon=result))
    return AblationReport(
        arm_a_mode=arm_a[0].mode if arm_a else "?",
        arm_b_mode=arm_b[0].mode if arm_b else "?",
        n_pairs=len(seeds), comparisons=comparisons,
        collisions_a=sum(1 for m in arm_a if m.outcome == "collision"),
        collisions_b=sum(1 for m in arm_b if m.outcome == "collision"),
    )
