"""Latency accounting for serial vs parallel extraction/inference pipelines.

Time is measured in denoising-step units (one denoising step = tau_m = 1);
wall-clock conversion is a report-level multiplier. In the parallel pipeline
the inference process is split into fixed segments; units selected during a
phase arrive at the following segment boundary, and a phase lasts as long as
the longer of its extraction work and its denoising segment.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

class EmptyFirstPhase(ValueError):
    """The first phase selected no units, so denoising can never start."""


@dataclass(frozen=True)
class LatencyConfig:
    tau_e: float = 5.0       # per-unit extraction latency, in denoising steps
    tau_m: float = 1.0       # duration of one denoising step (normalization)
    M: int = 60              # total denoising steps
    segment: int = 10        # denoising steps per phase
    tau_trans: float = 0.0   # transmission latency (negligible by default)

    def __post_init__(self) -> None:
        if self.tau_e <= 0:
            raise ValueError("tau_e must be > 0")
        if self.M % self.segment != 0:
            raise ValueError("M must be divisible by segment")
        if self.tau_trans < 0:
            raise ValueError("tau_trans must be >= 0")

    @property
    def tau_s(self) -> float:
        """Duration of one denoising segment."""
        return self.segment * self.tau_m

    @property
    def n_segments(self) -> int:
        return self.M // self.segment


@dataclass(frozen=True)
class ArrivalSchedule:
    """Map from denoising-step index to the unit ids that become available
    there, plus the ids that never make it before step M."""

    arrivals: dict[int, frozenset[int]]
    dropped: frozenset[int] = frozenset()
    segment: int = 10
    M: int = 60

    def __post_init__(self) -> None:
        seen: set[int] = set()
        for step, ids in self.arrivals.items():
            if step % self.segment != 0 or not (0 <= step < self.M):
                raise ValueError(
                    f"arrival step {step} is not a segment boundary in [0, {self.M})"
                )
            if seen & ids:
                raise ValueError("a unit id appears at two arrival steps")
            seen |= ids
        if seen & self.dropped:
            raise ValueError("a unit id is both delivered and dropped")

    def all_delivered(self) -> frozenset[int]:
        out: set[int] = set()
        for ids in self.arrivals.values():
            out |= ids
        return frozenset(out)


@dataclass(frozen=True)
class LatencyReport:
    total_latency: float
    residual_latency: float
    per_phase_overshoot: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.residual_latency < -1e-12:
            raise ValueError("residual latency cannot be negative")

    def as_dict(self) -> dict:
        return {
            "total_latency": self.total_latency,
            "residual_latency": self.residual_latency,
            "per_phase_overshoot": list(self.per_phase_overshoot),
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


def conventional_timeline(
    n_units: int,
    cfg: LatencyConfig,
    unit_ids: Sequence[int] | None = None,
) -> tuple[LatencyReport, ArrivalSchedule]:
    """Serial pipeline: extract everything, transmit once, then denoise.

    All units arrive at step 0 of a run that starts after the full
    extraction; the whole extraction time is residual latency.
    """
    if n_units < 1:
        raise ValueError("n_units must be >= 1")
    if unit_ids is None:
        unit_ids = range(n_units)
    ids = frozenset(unit_ids)
    if len(ids) != n_units:
        raise ValueError("unit_ids must contain n_units distinct ids")
    residual = n_units * cfg.tau_e + cfg.tau_trans
    report = LatencyReport(
        total_latency=residual + cfg.M * cfg.tau_m,
        residual_latency=residual,
        per_phase_overshoot=(residual,),
    )
    schedule = ArrivalSchedule(arrivals={0: ids}, dropped=frozenset(),
                               segment=cfg.segment, M=cfg.M)
    return report, schedule


def pgsc_timeline(
    selections: Sequence[Sequence[int]],
    cfg: LatencyConfig,
    censor_late: bool = False,
) -> tuple[LatencyReport, ArrivalSchedule]:
    """Parallel pipeline: per-phase selections overlap with segmented denoising.

    ``selections[t]`` holds the unit ids chosen at phase t. Phase 0 runs
    before any denoising and contributes its full extraction time; later
    phases contribute only the overshoot beyond one segment. Units chosen at
    the final phase (index M/segment) would arrive at the conclusion of the
    denoising and are dropped; the receiver never waits for them, so that
    phase adds no latency. With ``censor_late`` the transmitter skips
    extracting those doomed units instead of extracting and dropping them.
    """
    n_seg = cfg.n_segments
    if len(selections) > n_seg + 1:
        raise ValueError(
            f"at most {n_seg + 1} phases fit an episode of {cfg.M} steps"
        )
    if not selections or len(selections[0]) == 0:
        raise EmptyFirstPhase("phase 0 must select at least one unit")

    seen: set[int] = set()
    for ids in selections:
        dup = seen & set(ids)
        if dup:
            raise ValueError(f"unit ids selected twice: {sorted(dup)}")
        seen |= set(ids)

    arrivals: dict[int, frozenset[int]] = {}
    dropped: set[int] = set()
    contributions: list[float] = []
    for t, ids in enumerate(selections):
        n_t = len(ids)
        if t == 0:
            contributions.append(n_t * cfg.tau_e + cfg.tau_trans)
            arrivals[0] = frozenset(ids)
        elif t < n_seg:
            contributions.append(max(n_t * cfg.tau_e - cfg.tau_s, 0.0))
            if ids:
                arrivals[t * cfg.segment] = frozenset(ids)
        else:
            # final phase: arrivals would land at step M; never incorporated
            # and never waited for (extraction is censored or wasted)
            contributions.append(0.0)
            if not censor_late:
                dropped |= set(ids)

    residual = float(sum(contributions))
    report = LatencyReport(
        total_latency=residual + cfg.M * cfg.tau_m,
        residual_latency=residual,
        per_phase_overshoot=tuple(contributions),
    )
    schedule = ArrivalSchedule(arrivals=arrivals, dropped=frozenset(dropped),
                               segment=cfg.segment, M=cfg.M)
    return report, schedule


def write_timeline_csv(path: str | Path, selections: Sequence[Sequence[int]],
                       report: LatencyReport) -> None:
    """Per-phase trace: phase, n_t, overshoot, arrivals."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "n_t", "overshoot", "arrivals"])
        for t, ids in enumerate(selections):
            overshoot = report.per_phase_overshoot[t] if t < len(report.per_phase_overshoot) else 0.0
            writer.writerow([t, len(ids), overshoot, " ".join(str(i) for i in sorted(ids))])
