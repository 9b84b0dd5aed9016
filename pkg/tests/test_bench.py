import math

import numpy as np
import pytest

from cloudq.bench import (
    FULL_GRID,
    SMALL_GRID,
    GapTable,
    TestBedSpec,
    generate_testbed,
    run_benchmark,
    sweep,
)
from cloudq.instance import base_instance
from cloudq.queueing import Regime


def _tiny_spec():
    return TestBedSpec(mu1=(2.0,), rho=(1.0, 1.3), theta=(0.5,), C=(0.3,), m=(2, 3), truncation=12)


def test_grid_sizes():
    assert FULL_GRID.size == 9 * 7 * 10 * 8 == 5040
    assert SMALL_GRID.size == 81
    assert SMALL_GRID.with_regimes("dbs", "des").size == 162


def test_testbed_order_and_names():
    spec = TestBedSpec(mu1=(1.0, 2.0), rho=(0.9,), theta=(0.2,), C=(0.1, 0.2), regimes=("dbs", "des"))
    insts = generate_testbed(spec)
    assert len(insts) == 8
    assert insts[0].name == "dbs-mu1-rho0.9-th0.2-C0.1"
    assert insts[1].name == "dbs-mu1-rho0.9-th0.2-C0.2"
    assert insts[4].regime is Regime.DES
    # nominal load is rho against m1 mu1 + m2 mu2
    assert insts[2].lam == pytest.approx(0.9 * (10 * 2.0 + 40 * 1.0))
    assert insts[2].load == pytest.approx(0.9)


def test_spec_validation():
    with pytest.raises(ValueError):
        TestBedSpec(mu1=(), rho=(1,), theta=(1,), C=(1,))
    with pytest.raises(ValueError):
        TestBedSpec(mu1=(1,), rho=(1,), theta=(-1,), C=(1,))


@pytest.fixture(scope="module")
def tiny_table():
    return run_benchmark(generate_testbed(_tiny_spec().with_regimes("dbs", "des")))


def test_benchmark_records(tiny_table):
    assert len(tiny_table.records) == 4
    assert [r["index"] for r in tiny_table.records] == [0, 1, 2, 3]
    for r in tiny_table.ok_records():
        assert 0 < r["z_star"] < 1
        for p in ("bs", "io", "pi", "rb"):
            assert r[f"gap_{p}"] >= -1e-6
        assert r["impr_pi_bs"] >= -1e-6


def test_benchmark_summary(tiny_table):
    s = tiny_table.summary()
    assert set(s) == {"bs", "io", "pi", "rb"}
    lo, avg, hi = s["bs"]
    assert lo <= avg <= hi
    rows = tiny_table.summary_rows()
    assert {r["table"] for r in rows} == {"gap", "pi_improvement"}


def test_threads_keep_order(tiny_table):
    again = run_benchmark(generate_testbed(_tiny_spec().with_regimes("dbs", "des")), threads=3)
    assert [r["instance"] for r in again.records] == [r["instance"] for r in tiny_table.records]
    np.testing.assert_allclose(
        [r["z_star"] for r in again.records], [r["z_star"] for r in tiny_table.records], rtol=1e-12
    )


def test_errors_are_recorded():
    inst = base_instance(1, truncation=80)
    table = run_benchmark([inst.replace(truncation=200)], policies=("bs",))
    assert table.records[0]["error"].startswith("StateSpaceTooLarge")
    assert table.summary()["bs"][0] != table.summary()["bs"][0]  # nan


def test_empty_table_summary():
    s = GapTable([], ("bs",)).summary()
    assert all(math.isnan(v) for v in s["bs"])


class TestSweeps:
    def test_lambda_split_sweep(self):
        res = sweep(base_instance(1), "lambda", np.arange(10, 121, 10))
        assert res.checks["lambda_0 nondecreasing"]
        assert res.checks["basic rates constant beyond Lambda*(C)"]
        assert len(res.rows) == 12 and "lambda_3" in res.rows[0]

    def test_c_split_sweep(self):
        res = sweep(base_instance(2, "des"), "C", np.linspace(0.05, 0.95, 10))
        assert res.checks["lambda_0 nonincreasing"]

    def test_index_state_sweep(self):
        res = sweep(base_instance(1), "state", range(0, 30), kind="index")
        assert all(res.checks.values())
        assert len(res.rows) == 90

    def test_index_mu_sweep(self):
        res = sweep(base_instance(1, "des"), "mu_k", [1.0, 2.0, 4.0], kind="index", node=2)
        assert all(res.checks.values())

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            sweep(base_instance(1), "speed", [1])
        with pytest.raises(ValueError):
            sweep(base_instance(1), "state", [1], kind="split")
        with pytest.raises(ValueError):
            sweep(base_instance(1), "mu_k", [1], node=5)
        with pytest.raises(ValueError):
            sweep(base_instance(1), "lambda", [1], kind="other")
