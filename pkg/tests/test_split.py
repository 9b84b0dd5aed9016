import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cloudq.errors import InfeasibleSplit
from cloudq.instance import Instance, base_instance
from cloudq.queueing import NodeParams, loss_rate_deriv
from cloudq.split import (
    SplitVector,
    _projected_gradient_split,
    big_lambda_star,
    bs_objective,
    c_star,
    kkt_residual,
    lambda_star,
    optimal_bs,
)


def _inst(lam, C, regime="dbs", theta=0.3):
    return Instance(regime, lam, theta, C, (NodeParams(2, 10.0), NodeParams(5, 4.0), NodeParams(10, 2.0)), 80)


class TestLambdaStar:
    @pytest.mark.parametrize("regime", ["dbs", "des"])
    @pytest.mark.parametrize("alpha", [0.15, 0.2, 0.5, 0.9])
    def test_inverts_derivative(self, regime, alpha):
        inst = _inst(60, 0.2, regime)
        nd = inst.nodes[1]
        lam = lambda_star(nd, inst.env, alpha)
        assert loss_rate_deriv(lam, nd, inst.env) == pytest.approx(alpha, abs=1e-9)

    def test_edges(self):
        inst = _inst(60, 0.2, "des")
        nd = inst.nodes[2]
        assert lambda_star(nd, inst.env, 0.1) == 0.0  # below the floor 0.3/2.3
        assert lambda_star(nd, inst.env, 1.0) == math.inf
        with pytest.raises(ValueError):
            lambda_star(nd, inst.env, -0.1)

    def test_monotone_in_alpha(self):
        inst = _inst(60, 0.2)
        vals = [big_lambda_star(inst, a) for a in np.linspace(0.01, 0.95, 40)]
        assert np.all(np.diff(vals) > 0)


class TestOptimalSplit:
    @pytest.mark.parametrize("regime", ["dbs", "des"])
    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_base_instances_kkt(self, regime, k):
        inst = base_instance(k, regime)
        split = optimal_bs(inst)
        assert split.method == "kkt"
        assert split.total == pytest.approx(inst.lam, rel=1e-12)
        assert split.alpha_star == pytest.approx(min(inst.C, split.c_star), abs=1e-15)
        assert kkt_residual(inst, split, split.alpha_star) <= 1e-7

    def test_external_used_when_c_below_c_star(self):
        inst = _inst(60, 0.2)
        split = optimal_bs(inst)
        assert split.c_star > inst.C
        assert split.external > 0
        assert split.alpha_star == inst.C

    def test_no_external_when_c_high(self):
        inst = _inst(20, 0.9)
        split = optimal_bs(inst)
        assert split.external == 0.0
        assert split.alpha_star == pytest.approx(split.c_star)
        assert split.basic.sum() == pytest.approx(20.0, rel=1e-14)

    def test_c_above_one(self):
        inst = _inst(60, 1.5)
        split = optimal_bs(inst)
        assert split.external == 0.0
        assert kkt_residual(inst, split, split.alpha_star) <= 1e-7

    def test_c_star_root(self):
        inst = _inst(60, 0.2)
        cs = c_star(inst)
        assert big_lambda_star(inst, cs) == pytest.approx(inst.lam, rel=1e-10)

    def test_des_drops_slow_nodes_at_small_c(self):
        # floors are 0.3/10.3, 0.3/4.3, 0.3/2.3; C between the first two
        inst = _inst(60, 0.05, "des")
        split = optimal_bs(inst)
        assert split.basic[0] > 0
        assert split.basic[1] == 0.0 and split.basic[2] == 0.0

    def test_projected_gradient_agrees(self):
        inst = _inst(45, 0.25, "des")
        kkt = optimal_bs(inst)
        pg = _projected_gradient_split(inst)
        assert bs_objective(inst, pg) == pytest.approx(bs_objective(inst, kkt), rel=1e-7)

    def test_random_perturbations_do_worse(self):
        rng = np.random.default_rng(7)
        inst = base_instance(2, "des")
        split = optimal_bs(inst)
        best = bs_objective(inst, split)
        for _ in range(50):
            x = np.maximum(split.rates + rng.normal(scale=0.5, size=4), 0)
            x *= inst.lam / x.sum()
            assert bs_objective(inst, x) >= best - 1e-9

    @given(
        lam=st.floats(1.0, 150.0),
        C=st.floats(0.02, 1.2),
        theta=st.floats(0.05, 2.0),
        regime=st.sampled_from(["dbs", "des"]),
    )
    def test_property_kkt(self, lam, C, theta, regime):
        inst = _inst(lam, C, regime, theta)
        split = optimal_bs(inst)
        assert np.all(split.rates >= 0)
        assert split.total == pytest.approx(lam, rel=1e-10)
        assert kkt_residual(inst, split, split.alpha_star) <= 1e-6


class TestObjective:
    def test_all_external(self):
        inst = _inst(10, 0.3)
        assert bs_objective(inst, [10, 0, 0, 0]) == pytest.approx(3.0)

    def test_rejects_infeasible(self):
        inst = _inst(10, 0.3)
        with pytest.raises(InfeasibleSplit):
            bs_objective(inst, [5, 0, 0, 0])
        with pytest.raises(InfeasibleSplit):
            bs_objective(inst, [11, -1, 0, 0])
        with pytest.raises(InfeasibleSplit):
            bs_objective(inst, [10, 0, 0])

    def test_split_vector_is_readonly(self):
        sv = SplitVector([1.0, 2.0])
        with pytest.raises(ValueError):
            sv.rates[0] = 3.0
        assert sv.probabilities.tolist() == [1 / 3, 2 / 3]
