from fractions import Fraction

import numpy as np
import pytest

from cgmq.bop import (CostReport, InfeasibleBudget, check_budget, check_feasible,
                      floor_percent, layer_bop, network_bop)
from cgmq.gates import SatState
from cgmq.nn import Conv2d, Dense, MaxPool2d, attach_quantizers, lenet5
from oracles import dense_bop_enumerated

REFERENCE_FLOOR = 0.392
FLOOR_TOL_PP = 0.01


def quantized_lenet(granularity="layer"):
    net = lenet5()
    attach_quantizers(net, granularity)
    return net


def set_all_gates(net, g):
    for gate in net.gates().values():
        gate.value[...] = g


class TestLayerBop:
    def test_dense_mixed(self):
        assert layer_bop(Dense(2, 3), 4, 8) == 192

    def test_dense_32(self):
        assert layer_bop(Dense(2, 3), 32, 32) == 6144
        assert Fraction(192, 6144) == Fraction(4 * 8, 32 * 32)

    def test_dense_2_bit_ratio(self):
        assert Fraction(layer_bop(Dense(2, 3), 2, 2), layer_bop(Dense(2, 3), 32, 32)) == \
            Fraction(4, 1024)

    def test_dense_per_element_matches_enumeration(self, rng):
        layer = Dense(5, 4)
        wb = rng.choice([2, 4, 8, 16, 32], size=(5, 4))
        ab = rng.choice([2, 4, 8, 16, 32], size=4)
        assert layer_bop(layer, wb, ab) == dense_bop_enumerated(wb, ab)

    def test_conv_counts_every_output(self):
        layer = Conv2d(2, 3, 3, 6)
        # 3 channels * 4*4 positions, each with 2*3*3 MACs
        assert layer_bop(layer, 4, 8) == 3 * 16 * 18 * 32

    def test_conv_per_element(self, rng):
        layer = Conv2d(1, 2, 2, 3)
        wb = rng.choice([2, 4, 8], size=(2, 1, 2, 2))
        ab = rng.choice([2, 4, 8], size=(2, 2, 2))
        expected = sum(int(ab[o, i, j]) * int(wb[o].sum())
                       for o in range(2) for i in range(2) for j in range(2))
        assert layer_bop(layer, wb, ab) == expected

    def test_pooling_costs_nothing(self):
        assert layer_bop(MaxPool2d(2), 32, 32) == 0

    def test_rejects_bad_bits(self):
        with pytest.raises(ValueError, match="bit-widths"):
            layer_bop(Dense(2, 3), 3, 8)


class TestNetworkBop:
    def test_fresh_model_is_100_percent(self):
        rep = network_bop(quantized_lenet())
        assert rep.total == rep.total_32 == 2_348_032_000
        assert rep.rbop_percent == 100.0

    def test_per_layer_counts(self):
        rep = network_bop(quantized_lenet())
        assert rep.per_layer == {"conv1": 294_912_000, "conv2": 1_638_400_000,
                                 "fc1": 409_600_000, "fc2": 5_120_000}

    def test_all_two_bit_floor(self):
        net = quantized_lenet()
        set_all_gates(net, 0.5)
        rep = network_bop(net)
        assert Fraction(rep.total, rep.total_32) == Fraction(4, 1024)
        assert rep.rbop_percent == 0.390625
        assert abs(rep.rbop_percent - REFERENCE_FLOOR) <= FLOOR_TOL_PP
        assert floor_percent(net) == 0.390625

    def test_element_gates_agree_with_layer_gates(self):
        a, b = quantized_lenet("layer"), quantized_lenet("element")
        for bits_g in (0.5, 1.5, 2.5):
            set_all_gates(a, bits_g)
            set_all_gates(b, bits_g)
            assert network_bop(a).total == network_bop(b).total

    def test_lowering_any_gate_lowers_cost(self):
        net = quantized_lenet()
        base = network_bop(net).total
        for gate in net.gates().values():
            gate.value[...] = 3.5
            assert network_bop(net).total < base
            gate.value[...] = 5.5

    def test_no_configuration_beats_floor(self, rng):
        net = quantized_lenet()
        for _ in range(20):
            for gate in net.gates().values():
                gate.value[...] = rng.uniform(0.5, 6)
            assert network_bop(net).rbop_percent >= 0.390625

    def test_layer_bits_histogram(self):
        rep = network_bop(quantized_lenet())
        assert rep.layer_bits["fc1"]["weights"][32] == 1


class TestBudget:
    def _report(self, total, total_32=1000):
        return CostReport({"x": total}, total, total_32)

    def test_equal_is_sat(self):
        rep = self._report(4).attach_bound(Fraction(4, 10))
        assert check_budget(rep) is SatState.SAT

    def test_one_over_is_unsat(self):
        rep = self._report(5).attach_bound(Fraction(4, 10))
        assert check_budget(rep) is SatState.UNSAT

    def test_decimal_bound_is_exact(self):
        # 0.40% of 2,348,032,000 is exactly 9,392,128
        rep = CostReport({}, 9_392_128, 2_348_032_000).attach_bound(0.40)
        assert rep.satisfied
        rep = CostReport({}, 9_392_129, 2_348_032_000).attach_bound(0.40)
        assert not rep.satisfied

    def test_initial_model_unsat(self):
        rep = network_bop(quantized_lenet(), 0.40)
        assert check_budget(rep) is SatState.UNSAT

    def test_bound_required(self):
        with pytest.raises(ValueError):
            check_budget(self._report(1))

    def test_infeasible_bound(self):
        with pytest.raises(InfeasibleBudget, match="0.390625"):
            check_feasible(quantized_lenet(), 0.1)
        check_feasible(quantized_lenet(), 0.390625)

    def test_report_serializes(self):
        d = network_bop(quantized_lenet(), 5.0).to_dict()
        assert d["rbop_percent"] == 100.0 and d["satisfied"] is False
        assert np.isclose(d["budget"], 0.05 * 2_348_032_000)
