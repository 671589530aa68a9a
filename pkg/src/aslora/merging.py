"""Running averages of B, pairwise L2 similarity, and the merge schedule."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .adapters import AdapterBank, MergeEvent, apply_merge
from .errors import ContractError, DimensionError, MergeExhausted
from .tensor import Tensor

log = logging.getLogger(__name__)

PAIR_SCOPES = ("all_pairs", "adjacent_only")


@dataclass
class RunningAverage:
    """Incremental mean of every snapshot of one group's B."""

    group_id: int
    mean: np.ndarray
    count: int = 0

    @classmethod
    def zeros(cls, group_id: int, shape, dtype=np.float32) -> "RunningAverage":
        return cls(group_id, np.zeros(shape, dtype=dtype), 0)


def observe(avg: RunningAverage, current_B) -> None:
    w = current_B.data if isinstance(current_B, Tensor) else np.asarray(current_B)
    if w.shape != avg.mean.shape:
        raise DimensionError(f"snapshot shape {w.shape} does not match average {avg.mean.shape}")
    avg.count += 1
    flat = avg.mean.reshape(-1)
    kernels.running_mean_update(flat, np.ascontiguousarray(w, dtype=avg.mean.dtype).reshape(-1), avg.count)


def similarity(a: RunningAverage, b: RunningAverage) -> float:
    """Entrywise L2 distance between two averaged B's; smaller is more similar."""
    if a.mean.shape != b.mean.shape:
        raise DimensionError(f"cannot compare {a.mean.shape} with {b.mean.shape}")
    rows = np.ascontiguousarray(np.stack([a.mean.reshape(-1), b.mean.reshape(-1)]))
    return float(kernels.pairwise_l2(rows)[0, 1])


@dataclass
class SimilarityReport:
    step: int
    proj: str
    entries: list[tuple[int, int, float]]
    representatives: dict[int, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "type": self.proj,
            "entries": [[i, j, s] for i, j, s in self.entries],
            "representatives": {str(g): r for g, r in sorted(self.representatives.items())},
        }


def similarity_report(bank: AdapterBank, averages: dict[int, RunningAverage], step: int) -> SimilarityReport:
    gids = sorted(bank.groups, key=lambda g: bank.groups[g].representative_layer)
    rows = np.ascontiguousarray(np.stack([averages[g].mean.reshape(-1) for g in gids]))
    dist = kernels.pairwise_l2(rows)
    entries = [
        (gids[i], gids[j], float(dist[i, j]))
        for i in range(len(gids))
        for j in range(i + 1, len(gids))
    ]
    reps = {g: bank.groups[g].representative_layer for g in gids}
    return SimilarityReport(step, bank.proj, entries, reps)


def select_pair(report: SimilarityReport, scope: str = "all_pairs") -> tuple[int, int]:
    """Most similar pair, oriented ``(lower, upper)`` by representative layer.

    Ties go to the lexicographically smallest (lower rep, upper rep).  With
    ``adjacent_only`` only groups whose representatives are neighbours in
    sorted order are candidates.  Group ids double as representatives when
    the report carries none.
    """
    if scope not in PAIR_SCOPES:
        raise ContractError(f"unknown pair scope {scope!r}")
    reps = dict(report.representatives)
    for i, j, _ in report.entries:
        reps.setdefault(i, i)
        reps.setdefault(j, j)
    if len(reps) < 2 or not report.entries:
        raise MergeExhausted("need at least two live groups to merge")
    allowed = None
    if scope == "adjacent_only":
        order = sorted(reps.values())
        allowed = set(zip(order, order[1:]))
    best = None
    for i, j, s in report.entries:
        lo, hi = (i, j) if reps[i] < reps[j] else (j, i)
        key_reps = (reps[lo], reps[hi])
        if allowed is not None and key_reps not in allowed:
            continue
        key = (s, key_reps)
        if best is None or key < best[0]:
            best = (key, lo, hi)
    if best is None:
        raise MergeExhausted("no admissible pair under scope " + scope)
    return best[1], best[2]


@dataclass(frozen=True)
class MergeSchedule:
    start_step: int
    interval: int
    budget: int
    pair_scope: str = "all_pairs"

    def __post_init__(self):
        if self.start_step < 0 or self.interval < 1 or self.budget < 0:
            raise ContractError("merge schedule needs start_step >= 0, interval >= 1, budget >= 0")
        if self.pair_scope not in PAIR_SCOPES:
            raise ContractError(f"unknown pair scope {self.pair_scope!r}")

    def fires_at(self, t: int) -> bool:
        return t > self.start_step and (t - self.start_step) % self.interval == 0

    def merge_steps(self) -> list[int]:
        return [self.start_step + self.interval * (k + 1) for k in range(self.budget)]


class MergeEngine:
    """Drives adaptive merging for every adapted projection type.

    Budgets are per type.  Averages are refreshed each step while a type has
    budget left and are dropped once it is spent.
    """

    def __init__(self, schedule: MergeSchedule, banks: dict[str, AdapterBank]):
        self.schedule = schedule
        self.banks = banks
        self.remaining = {proj: schedule.budget for proj in banks}
        self.averages: dict[str, dict[int, RunningAverage]] = {}
        for proj, bank in banks.items():
            if schedule.budget > 0:
                self.averages[proj] = {
                    gid: RunningAverage.zeros(gid, g.B.shape, g.B.dtype) for gid, g in bank.groups.items()
                }
        self.events: list[MergeEvent] = []
        self.reports: list[SimilarityReport] = []
        self.last_merge_step: int | None = None

    @property
    def done(self) -> bool:
        return all(v == 0 for v in self.remaining.values())

    def step_hook(self, t: int) -> list[MergeEvent]:
        fired: list[MergeEvent] = []
        for proj, bank in self.banks.items():
            if self.remaining[proj] <= 0:
                continue
            avgs = self.averages[proj]
            for gid, g in bank.groups.items():
                observe(avgs[gid], g.B)
            if not self.schedule.fires_at(t):
                continue
            if bank.live_groups < 2:
                log.warning("step %d: %s has fewer than two groups, merge skipped", t, proj)
                continue
            report = similarity_report(bank, avgs, t)
            self.reports.append(report)
            lo, hi = select_pair(report, self.schedule.pair_scope)
            s = next(s for i, j, s in report.entries if {i, j} == {lo, hi})
            event = apply_merge(bank, lo, hi, step=t, similarity=s)
            del avgs[lo]  # survivor keeps its own mean and count
            self.remaining[proj] -= 1
            if self.remaining[proj] == 0:
                del self.averages[proj]
            self.events.append(event)
            fired.append(event)
            self.last_merge_step = t
        return fired
