import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cloudq.errors import IndexabilityViolation
from cloudq.indices import Family, IndexTable, index_tables, io_index, pi_index, rb_index, route, route_table
from cloudq.instance import base_instance
from cloudq.queueing import AbandonmentEnv, NodeParams, Regime, loss_rate
from cloudq.split import optimal_bs

import oracles


def _env(regime, theta=0.3):
    return AbandonmentEnv(theta, Regime.parse(regime))


class TestIO:
    def test_dbs_values(self):
        phi = io_index(NodeParams(3, 2.0), _env("dbs"), 10).values
        assert list(phi[:3]) == [0.0, 0.0, 0.0]
        j = np.arange(0, 8)
        np.testing.assert_allclose(phi[3:], (j + 1) * 0.3 / ((j + 1) * 0.3 + 6.0), rtol=1e-15)

    def test_des_values(self):
        phi = io_index(NodeParams(3, 2.0), _env("des"), 10).values
        assert list(phi[:3]) == [0.3 / 2.3] * 3
        i = np.arange(3, 11)
        np.testing.assert_allclose(phi[3:], (i + 1) * 0.3 / ((i + 1) * 0.3 + 6.0), rtol=1e-15)

    def test_independent_of_arrival_rate(self):
        inst = base_instance(1)
        a = index_tables(inst, "io")
        b = index_tables(inst.replace(lam=5.0), "io")
        for x, y in zip(a, b):
            assert np.array_equal(x.values, y.values)


class TestRB:
    @pytest.mark.parametrize("regime", ["dbs", "des"])
    @pytest.mark.parametrize("m,mu,theta,lam", [(1, 1.0, 0.5, 1.5), (2, 10.0, 0.3, 60.0), (3, 2.5, 1.0, 4.0)])
    def test_matches_threshold_policy_oracle(self, regime, m, mu, theta, lam):
        N = 25
        phi = rb_index(NodeParams(m, mu), _env(regime, theta), lam, N).values
        ref = oracles.whittle_threshold_oracle(lam, m, mu, theta, regime, N)
        np.testing.assert_allclose(phi, ref, rtol=1e-9, atol=1e-14)

    def test_prefix_closed_form(self):
        assert np.all(rb_index(NodeParams(5, 4.0), _env("dbs"), 60.0, 20).values[:5] == 0.0)
        assert np.all(rb_index(NodeParams(5, 4.0), _env("des"), 60.0, 20).values[:5] == 0.3 / 4.3)

    @pytest.mark.parametrize("regime", ["dbs", "des"])
    def test_bounded_and_monotone(self, regime):
        phi = rb_index(NodeParams(10, 2.0), _env(regime), 60.0, 300).values
        assert np.all(np.diff(phi) >= 0)
        assert phi[-1] <= 1.0 and phi[20] < 1.0

    def test_rejects_bad_rate(self):
        with pytest.raises(ValueError):
            rb_index(NodeParams(1, 1.0), _env("dbs"), 0.0, 5)

    def test_violation_type(self):
        assert issubclass(IndexabilityViolation, Exception)


class TestPI:
    @pytest.mark.parametrize("regime", ["dbs", "des"])
    @pytest.mark.parametrize("m,mu,lam", [(2, 10.0, 19.0), (5, 4.0, 22.0), (10, 2.0, 8.0), (40, 1.0, 40.0)])
    def test_stable_matches_poisson_solve(self, regime, m, mu, lam):
        nd, env = NodeParams(m, mu), _env(regime)
        phi = pi_index(nd, env, lam, 120).values
        ref = oracles.poisson_bias_differences(lam, m, mu, 0.3, regime, N=600)[:121]
        np.testing.assert_allclose(phi, ref, rtol=1e-9, atol=1e-12)

    def test_forward_agrees_on_low_states(self):
        nd, env = NodeParams(5, 4.0), _env("dbs")
        fw = pi_index(nd, env, 22.0, 40, method="forward")
        st_ = pi_index(nd, env, 22.0, 40)
        hi = fw.unstable_from or 41
        np.testing.assert_allclose(fw.values[: min(hi, 20)], st_.values[: min(hi, 20)], rtol=1e-6)

    def test_forward_monitor_trips(self):
        fw = pi_index(NodeParams(2, 10.0), _env("dbs"), 19.0, 200, method="forward")
        assert fw.unstable_from is not None
        assert np.all(np.isfinite(fw.values))

    def test_zero_rate_is_io(self):
        nd, env = NodeParams(3, 1.0), _env("des")
        assert np.array_equal(pi_index(nd, env, 0.0, 15).values, io_index(nd, env, 15).values)

    def test_starts_at_loss_per_arrival(self):
        nd, env = NodeParams(3, 1.0), _env("dbs")
        phi = pi_index(nd, env, 2.5, 15).values
        assert phi[0] == pytest.approx(loss_rate(2.5, nd, env) / 2.5, rel=1e-14)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            pi_index(NodeParams(1, 1.0), _env("dbs"), 1.0, 5, method="magic")

    @given(
        m=st.integers(1, 15),
        mu=st.floats(0.5, 5.0),
        theta=st.floats(0.1, 2.0),
        load=st.floats(0.1, 1.5),
        regime=st.sampled_from(["dbs", "des"]),
    )
    def test_property_monotone_and_bounded(self, m, mu, theta, load, regime):
        nd = NodeParams(m, mu)
        phi = pi_index(nd, _env(regime, theta), load * nd.capacity, 80).values
        assert np.all(np.diff(phi) >= -1e-10)
        assert np.all(phi >= -1e-12) and np.all(phi <= 1 + 1e-12)


@pytest.mark.parametrize("regime", ["dbs", "des"])
def test_ordering_above_servers_base_one(regime):
    # strict ordering holds past the server count on base instance 1
    inst = base_instance(1, regime, truncation=60)
    io, pi, rb = (index_tables(inst, f) for f in ("io", "pi", "rb"))
    for k, nd in enumerate(inst.nodes):
        i = np.arange(nd.m + 1, 61)
        assert np.all(io[k].values[i] < pi[k].values[i])
        assert np.all(pi[k].values[i] < rb[k].values[i])


class TestRouting:
    def _tables(self):
        return [
            IndexTable(Family.IO, 1, [0.0, 0.1, 0.3]),
            IndexTable(Family.IO, 2, [0.0, 0.1, 0.2]),
        ]

    def test_lowest_index_first_on_ties(self):
        t = self._tables()
        assert route((0, 0), t, 0.5) == 1
        assert route((1, 1), t, 0.5) == 1
        assert route((2, 1), t, 0.5) == 2

    def test_boundary_goes_basic(self):
        t = self._tables()
        assert route((2, 2), t, 0.2) == 2
        assert route((2, 2), t, 0.19) == 0

    def test_past_table_end_reuses_last(self):
        t = self._tables()
        assert t[0](99) == 0.3

    def test_route_table_matches_route(self):
        inst = base_instance(3, "des", truncation=12)
        tables = index_tables(inst, "pi")
        dims = (13, 13, 13)
        acts = route_table(tables, inst.C, dims)
        for flat in np.random.default_rng(1).integers(0, 13**3, 500):
            state = np.unravel_index(flat, dims)
            assert acts[flat] == route(state, tables, inst.C)

    def test_index_tables_node_ids(self):
        inst = base_instance(2)
        tabs = index_tables(inst, "pi", split=optimal_bs(inst))
        assert [t.node_id for t in tabs] == [1, 2, 3]
        assert all(t.N == inst.truncation for t in tabs)
        assert Family.parse("RB") is Family.RB
