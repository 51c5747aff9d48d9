"""Split-point and compression-configuration selection.

Candidates carry measured accuracy drops as input data. Per split point the
planner keeps candidates whose drop stays within the budget and picks the
highest compression ratio, breaking ties toward lower edge energy and then
smaller payloads. The network-level plan then picks a global winner under
either the maximum-ratio or minimum-edge-energy objective. Points where no
candidate fits the budget are reported as infeasible rather than raised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .bottleneck import (
    baseline_payload_bytes,
    compression_ratio,
    make_bottleneck,
    spike_payload_bytes,
)

__all__ = [
    "CandidateConfig",
    "PointDecision",
    "SplitPlan",
    "select_per_point",
    "plan_network",
    "candidates_from_rows",
    "attach_edge_energy",
]


@dataclass(frozen=True)
class CandidateConfig:
    """One compression option at one split point."""

    split_point: int
    in_shape: tuple[int, int, int]
    out_shape: tuple[int, int, int]
    timesteps: int
    accuracy_drop: float
    compression_ratio: float
    spike_bytes: int
    baseline_bytes: int
    edge_energy_mj: float | None = None

    def __post_init__(self):
        if self.accuracy_drop < 0:
            raise ValueError(f"accuracy drop must be >= 0, got {self.accuracy_drop}")
        if self.compression_ratio < 1:
            raise ValueError(f"compression ratio must be >= 1, got {self.compression_ratio}")


@dataclass(frozen=True)
class PointDecision:
    """Outcome at a single split point; infeasible points carry a reason."""

    split_point: int
    chosen: CandidateConfig | None
    reason: str = ""

    @property
    def feasible(self) -> bool:
        return self.chosen is not None


@dataclass(frozen=True)
class SplitPlan:
    decisions: tuple[PointDecision, ...]
    best: CandidateConfig | None
    objective: str
    max_drop: float
    diagnostics: str = ""

    @property
    def feasible_points(self) -> list[PointDecision]:
        return [d for d in self.decisions if d.feasible]


def _selection_key(c: CandidateConfig):
    # Highest ratio wins; ties fall to lower edge energy, then smaller
    # payload, then lower accuracy drop, then a stable shape ordering, so
    # selection is a pure function of the candidate set.
    energy = c.edge_energy_mj if c.edge_energy_mj is not None else math.inf
    return (-c.compression_ratio, energy, c.spike_bytes, c.accuracy_drop, c.out_shape)


def select_per_point(candidates: list[CandidateConfig], max_drop: float = 2.0) -> PointDecision:
    """Pick the best candidate at one split point under the drop budget."""
    if not candidates:
        raise ValueError("candidate list is empty")
    splits = {c.split_point for c in candidates}
    if len(splits) != 1:
        raise ValueError(f"candidates span multiple split points: {sorted(splits)}")
    split = splits.pop()
    eligible = [c for c in candidates if c.accuracy_drop <= max_drop]
    if not eligible:
        best_drop = min(c.accuracy_drop for c in candidates)
        return PointDecision(
            split_point=split,
            chosen=None,
            reason=f"no candidate within {max_drop}% drop (best is {best_drop}%)",
        )
    return PointDecision(split_point=split, chosen=min(eligible, key=_selection_key))


def plan_network(
    candidates: list[CandidateConfig],
    objective: str = "max_ratio",
    max_drop: float = 2.0,
) -> SplitPlan:
    """Per-point selections plus a global pick under the objective."""
    if objective not in ("max_ratio", "min_energy"):
        raise ValueError(f"objective must be 'max_ratio' or 'min_energy', got {objective!r}")
    by_split: dict[int, list[CandidateConfig]] = {}
    for c in candidates:
        by_split.setdefault(c.split_point, []).append(c)

    decisions = tuple(
        select_per_point(by_split[s], max_drop) for s in sorted(by_split)
    )
    feasible = [d.chosen for d in decisions if d.feasible]
    if not feasible:
        return SplitPlan(
            decisions=decisions,
            best=None,
            objective=objective,
            max_drop=max_drop,
            diagnostics=f"no split point admits a candidate within {max_drop}% drop",
        )

    if objective == "max_ratio":
        best = min(feasible, key=_selection_key)
    else:
        missing = [c.split_point for c in feasible if c.edge_energy_mj is None]
        if missing:
            raise ValueError(
                f"objective 'min_energy' needs edge energies; missing at splits {missing}"
            )
        best = min(
            feasible,
            key=lambda c: (
                c.edge_energy_mj, -c.compression_ratio, c.spike_bytes,
                c.accuracy_drop, c.out_shape,
            ),
        )
    return SplitPlan(decisions=decisions, best=best, objective=objective, max_drop=max_drop)


def candidates_from_rows(rows: list[dict]) -> list[CandidateConfig]:
    """Build candidates from parsed table rows, recomputing byte accounting."""
    out = []
    for row in rows:
        if row.get("accuracy_drop") is None:
            raise ValueError(f"split {row['split']}: candidate row lacks an accuracy drop")
        config = make_bottleneck(row["original"], row["compressed"], row["timesteps"])
        out.append(
            CandidateConfig(
                split_point=row["split"],
                in_shape=tuple(row["original"]),
                out_shape=tuple(row["compressed"]),
                timesteps=row["timesteps"],
                accuracy_drop=row["accuracy_drop"],
                compression_ratio=compression_ratio(row["original"], row["compressed"]),
                spike_bytes=spike_payload_bytes(config),
                baseline_bytes=baseline_payload_bytes(config),
            )
        )
    return out


def attach_edge_energy(
    candidates: list[CandidateConfig], energy_mj_by_split: dict[int, float]
) -> list[CandidateConfig]:
    """Return candidates annotated with per-split edge energies."""
    out = []
    for c in candidates:
        if c.split_point in energy_mj_by_split:
            out.append(replace(c, edge_energy_mj=energy_mj_by_split[c.split_point]))
        else:
            out.append(c)
    return out
