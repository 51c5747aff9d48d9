import math

import pytest
import torch

from spikesplit.arch import data_path
from spikesplit.energy import (
    HardwareProfile,
    energy_report,
    energy_table,
    load_firing_rates,
    load_profiles,
    measure_firing_rate,
    syops,
)

from conftest import DATA_DIR, matches_printed, read_csv_rows


@pytest.fixture(scope="module")
def profiles():
    return load_profiles()


class TestFiringRate:
    def test_all_zero(self):
        assert measure_firing_rate([torch.zeros(2, 1, 3, 4, 4)]) == 0.0

    def test_all_one(self):
        assert measure_firing_rate([torch.ones(2, 1, 3, 4, 4)]) == 1.0

    def test_layer_means_average_equally(self):
        # Layers of different sizes with means 0.2 and 0.3 average to 0.25,
        # matching a scalar computation of the per-layer mean average.
        a = torch.zeros(2, 1, 1, 10, 10)
        a[:, :, :, :, :2] = 1.0  # mean 0.2
        b = torch.zeros(2, 1, 4, 5, 5)
        b[:, :, :, :, 1] = 1.0
        b[0, :, :, :, 2] = 1.0  # mean 0.3
        assert b.mean().item() == pytest.approx(0.3)
        oracle = (a.mean().item() + b.mean().item()) / 2
        assert measure_firing_rate([a, b]) == pytest.approx(oracle) == pytest.approx(0.25)

    def test_empty_records_rejected(self):
        with pytest.raises(ValueError, match="no spike records"):
            measure_firing_rate([])


class TestSyops:
    def test_exact_product(self):
        assert syops(0.2066, 2, 0.08e9) == pytest.approx(0.2066 * 2 * 0.08e9)

    def test_zero_rate(self):
        assert syops(0.0, 4, 1e9) == 0.0

    def test_rate_out_of_range_rejected(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            syops(1.2, 2, 1e9)
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            syops(-0.1, 2, 1e9)

    def test_printed_example_rows(self):
        assert syops(0.2066, 2, 0.08e9) / 1e9 == pytest.approx(0.033, abs=5e-4)
        assert syops(0.2918, 2, 0.57e9) / 1e9 == pytest.approx(0.333, abs=5e-4)


class TestProfiles:
    def test_bundled_profiles(self, profiles):
        by_name, baseline = profiles
        assert baseline == "45nm"
        assert by_name["45nm"].e_mac == pytest.approx(4.6e-12)
        assert by_name["45nm"].e_ac == pytest.approx(0.9e-12)
        assert by_name["rolls"].e_ac == pytest.approx(77e-15)
        assert by_name["rolls"].e_mac is None

    def test_energies_must_be_positive(self):
        with pytest.raises(ValueError):
            HardwareProfile(name="bad", e_ac=0.0)
        with pytest.raises(ValueError):
            HardwareProfile(name="bad", e_ac=1e-12, e_mac=-1.0)


class TestEnergyReport:
    def test_resnet_first_split_on_45nm(self, profiles):
        by_name, _ = profiles
        rep = energy_report(1, 0.08, 0.2066, 2, by_name["45nm"], by_name["45nm"])
        assert rep.e_baseline_mj == pytest.approx(0.368, rel=1e-6)
        assert rep.e_spike_mj == pytest.approx(0.02975, rel=1e-3)
        assert rep.ratio == pytest.approx(12.37, abs=0.005)

    def test_resnet_first_split_on_neuromorphic(self, profiles):
        by_name, _ = profiles
        rep = energy_report(1, 0.08, 0.2066, 2, by_name["rolls"], by_name["45nm"])
        assert rep.e_spike_mj == pytest.approx(0.00254, abs=1e-5)
        assert rep.ratio == pytest.approx(144.58, abs=0.005)

    def test_mobilenet_last_split_on_neuromorphic(self, profiles):
        by_name, _ = profiles
        rep = energy_report(13, 0.57, 0.2918, 2, by_name["rolls"], by_name["45nm"])
        assert rep.ratio == pytest.approx(102.37, abs=0.005)

    def test_syops_identity(self, profiles):
        by_name, _ = profiles
        rep = energy_report(3, 0.22, 0.2210, 2, by_name["45nm"], by_name["45nm"])
        assert rep.gsyops / (rep.firing_rate * rep.timesteps) == pytest.approx(rep.gflops)
        assert rep.ratio == pytest.approx(rep.e_baseline_mj / rep.e_spike_mj)

    def test_ratio_invariant_to_flops_scaling(self, profiles):
        by_name, _ = profiles
        small = energy_report(1, 0.1, 0.25, 2, by_name["45nm"], by_name["45nm"])
        large = energy_report(1, 10.0, 0.25, 2, by_name["45nm"], by_name["45nm"])
        assert small.ratio == pytest.approx(large.ratio)

    def test_ratio_scales_inversely_with_rate_and_time(self, profiles):
        by_name, _ = profiles
        p, b = by_name["45nm"], by_name["45nm"]
        rep = energy_report(1, 0.5, 0.2, 2, p, b)
        assert rep.ratio == pytest.approx(b.e_mac / (p.e_ac * rep.firing_rate * rep.timesteps))
        doubled = energy_report(1, 0.5, 0.4, 2, p, b)
        assert doubled.ratio == pytest.approx(rep.ratio / 2)

    def test_zero_rate_gives_infinite_ratio(self, profiles):
        by_name, _ = profiles
        rep = energy_report(1, 0.5, 0.0, 2, by_name["45nm"], by_name["45nm"])
        assert rep.e_spike_mj == 0.0
        assert math.isinf(rep.ratio)


@pytest.mark.parametrize("arch_name", ["resnet50", "mobilenetv1"])
class TestTableSpotChecks:
    def test_ratio_columns_match_reference(self, arch_name, request, profiles):
        spec = request.getfixturevalue(arch_name)
        by_name, baseline = profiles
        fr_rows = load_firing_rates(data_path(f"{arch_name}_fr.csv"))
        expected = {int(r["split"]): r for r in
                    read_csv_rows(DATA_DIR / f"{arch_name}_energy_expected.csv")}
        for profile_name, column in (("45nm", "ratio_45nm"), ("rolls", "ratio_rolls")):
            reports = energy_table(spec, fr_rows, 2, by_name[profile_name], by_name[baseline])
            for rep in reports:
                assert matches_printed(rep.ratio, expected[rep.split_point][column]), (
                    arch_name, profile_name, rep.split_point, rep.ratio,
                )

    def test_computed_flops_alternative(self, arch_name, request, profiles):
        spec = request.getfixturevalue(arch_name)
        by_name, baseline = profiles
        fr_rows = load_firing_rates(data_path(f"{arch_name}_fr.csv"))
        reports = energy_table(spec, fr_rows, 2, by_name["45nm"], by_name[baseline],
                               flops_source="computed")
        assert all(r.gflops_source == "computed" for r in reports)
        file_reports = energy_table(spec, fr_rows, 2, by_name["45nm"], by_name[baseline])
        for comp, filed in zip(reports, file_reports):
            assert abs(comp.gflops - filed.gflops) / filed.gflops <= 0.15
