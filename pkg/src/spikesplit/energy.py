"""Firing rates, synaptic-operation counts, and energy estimates.

Spike-driven layers replace multiply-accumulates with accumulates; the
expected accumulate count is firing_rate * timesteps * MACs. Energy is that
count times the hardware profile's per-operation cost, compared against a
dense baseline running every MAC on conventional hardware.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import torch
import yaml

from .arch import ArchitectureSpec, prefix_flops

__all__ = [
    "HardwareProfile",
    "EnergyReport",
    "FiringRateRow",
    "load_profiles",
    "measure_firing_rate",
    "measured_firing_rates",
    "syops",
    "energy_report",
    "energy_table",
    "load_firing_rates",
]


@dataclass(frozen=True)
class HardwareProfile:
    """Per-operation energy costs in joules. e_mac is absent on hardware
    that has no multiply path (neuromorphic chips)."""

    name: str
    e_ac: float
    e_mac: float | None = None
    display_decimals: int = 2

    def __post_init__(self):
        if self.e_ac <= 0:
            raise ValueError(f"e_ac must be positive, got {self.e_ac}")
        if self.e_mac is not None and self.e_mac <= 0:
            raise ValueError(f"e_mac must be positive, got {self.e_mac}")


def load_profiles(path=None) -> tuple[dict[str, HardwareProfile], str]:
    """Load hardware profiles; returns (profiles by name, baseline name)."""
    if path is None:
        from .arch import data_path

        path = data_path("profiles.yaml")
    with open(path, "r", encoding="utf-8") as fh:
        cfg = yaml.safe_load(fh)
    if cfg.get("schema") != 1:
        raise ValueError(f"unsupported profiles schema {cfg.get('schema')!r}")
    profiles = {}
    for entry in cfg["profiles"]:
        profiles[entry["name"]] = HardwareProfile(
            name=entry["name"],
            e_ac=float(entry["e_ac_j"]),
            e_mac=float(entry["e_mac_j"]) if "e_mac_j" in entry else None,
            display_decimals=int(entry.get("display_decimals", 2)),
        )
    baseline = cfg["baseline"]
    if baseline not in profiles:
        raise ValueError(f"baseline profile {baseline!r} not defined")
    if profiles[baseline].e_mac is None:
        raise ValueError(f"baseline profile {baseline!r} must define e_mac_j")
    return profiles, baseline


def measure_firing_rate(spike_records: list[torch.Tensor]) -> float:
    """Mean per-timestep spike probability, averaged across recorded layers.

    Each record is one layer's (T, B, C, H, W) spike output; its mean is the
    layer's per-neuron, per-timestep firing probability, and the layer means
    are averaged so layers of different sizes weigh equally.
    """
    if not spike_records:
        raise ValueError("no spike records to measure")
    layer_means = [float(r.detach().mean()) for r in spike_records]
    return sum(layer_means) / len(layer_means)


def measured_firing_rates(network, images: torch.Tensor, timesteps: int) -> list[FiringRateRow]:
    """Estimate per-split firing rates from live forward passes.

    For each split point, the rate is the average of per-layer mean spike
    probabilities over every LIF layer up to and including that block (the
    bottleneck encoder, when present, is not counted).
    """
    groups = network.record_block_spikes(images, timesteps)
    rows = []
    for split in range(1, len(groups)):
        records = [r for group in groups[: split + 1] for r in group]
        rows.append(FiringRateRow(split=split, fr=measure_firing_rate(records)))
    return rows


def syops(fr: float, timesteps: int, flops: float) -> float:
    """Expected accumulate operations: fr * timesteps * flops."""
    if not 0.0 <= fr <= 1.0:
        raise ValueError(f"firing rate must be in [0, 1], got {fr}")
    if timesteps < 1:
        raise ValueError(f"timesteps must be >= 1, got {timesteps}")
    if flops < 0:
        raise ValueError(f"flops must be nonnegative, got {flops}")
    return fr * timesteps * flops


@dataclass(frozen=True)
class EnergyReport:
    """Energy comparison for one split point under one spike profile."""

    split_point: int
    gflops: float
    gflops_source: str  # "file" | "computed"
    firing_rate: float
    fr_source: str  # "file" | "measured"
    timesteps: int
    gsyops: float
    e_baseline_mj: float
    e_spike_mj: float
    ratio: float
    profile: str
    baseline_profile: str


def energy_report(
    split_point: int,
    gflops: float,
    fr: float,
    timesteps: int,
    profile: HardwareProfile,
    baseline: HardwareProfile,
    gflops_source: str = "file",
    fr_source: str = "file",
) -> EnergyReport:
    """Energy for one split: dense baseline MACs vs spike-driven ACs."""
    if baseline.e_mac is None:
        raise ValueError(f"baseline profile {baseline.name!r} has no e_mac")
    flops = gflops * 1e9
    gsy = syops(fr, timesteps, flops) / 1e9
    e_base_j = flops * baseline.e_mac
    e_spike_j = gsy * 1e9 * profile.e_ac
    ratio = e_base_j / e_spike_j if e_spike_j > 0 else math.inf
    return EnergyReport(
        split_point=split_point,
        gflops=gflops,
        gflops_source=gflops_source,
        firing_rate=fr,
        fr_source=fr_source,
        timesteps=timesteps,
        gsyops=gsy,
        e_baseline_mj=e_base_j * 1e3,
        e_spike_mj=e_spike_j * 1e3,
        ratio=ratio,
        profile=profile.name,
        baseline_profile=baseline.name,
    )


@dataclass(frozen=True)
class FiringRateRow:
    split: int
    fr: float
    gflops: float | None = None


def load_firing_rates(path) -> list[FiringRateRow]:
    """Read per-split firing rates (CSV: split, fr[, gflops])."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            g = row.get("gflops")
            rows.append(
                FiringRateRow(
                    split=int(row["split"]),
                    fr=float(row["fr"]),
                    gflops=float(g) if g not in (None, "") else None,
                )
            )
    rows.sort(key=lambda r: r.split)
    return rows


def energy_table(
    arch: ArchitectureSpec,
    fr_rows: list[FiringRateRow],
    timesteps: int,
    profile: HardwareProfile,
    baseline: HardwareProfile,
    flops_source: str = "file",
    fr_source: str = "file",
) -> list[EnergyReport]:
    """Per-split energy reports for a whole architecture.

    ``flops_source`` picks between GFLOPs carried in the firing-rate file
    and GFLOPs recomputed from the architecture spec; rows lacking a file
    value fall back to the computed one.
    """
    if flops_source not in ("file", "computed"):
        raise ValueError(f"flops_source must be 'file' or 'computed', got {flops_source!r}")
    reports = []
    for row in fr_rows:
        computed = prefix_flops(arch, row.split) / 1e9
        if flops_source == "file" and row.gflops is not None:
            gflops, source = row.gflops, "file"
        else:
            gflops, source = computed, "computed"
        reports.append(
            energy_report(
                row.split, gflops, row.fr, timesteps, profile, baseline,
                gflops_source=source, fr_source=fr_source,
            )
        )
    return reports
