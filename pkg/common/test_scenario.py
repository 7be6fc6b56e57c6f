import json
import math
from collections import namedtuple

import numpy as np
import pytest

from . import casefetch
from . import netmodel
from . import scenario
from .powerflow import SolverOptions
from .security import default_limits, security_index

Bucket = namedtuple("Bucket", "label lo hi")
Bucket.contains = lambda self, factor: self.lo <= factor < self.hi


def case14():
    return netmodel.read_case(casefetch.SHIPPED_CASE_DIR / "case14.m")


def small_dataset(net, jobs=1, seed=7, samples=3, count=2):
    cfg = scenario.DatasetConfig(samples_per_contingency=samples)
    contingencies = scenario.enumerate_contingencies(net)[:count]
    return scenario.generate_dataset(net, cfg, seed=seed, jobs=jobs, contingencies=contingencies)


def test_case14_contingencies():
    net = case14()

    contingencies = scenario.enumerate_contingencies(net)

    assert len(contingencies) == 19
    assert "L14" not in [c.id for c in contingencies]
    assert contingencies[0] == scenario.Contingency("L1", 0, 1, 2)
    assert scenario.islanding_branches(net) == {13: "sole connection of generator bus 8"}


def test_bridge_to_load_bus_islands():
    net = netmodel.parse_case("""
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	135	1	1.1	0.9;
	2	1	10	0	0	0	1	1	0	135	1	1.1	0.9;
	3	1	10	0	0	0	1	1	0	135	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	300	-300	1	100	1	250	0;
];
mpc.branch = [
	1	2	0.01	0.1	0	0	0	0	0	0	1	-360	360;
	1	2	0.01	0.1	0	0	0	0	0	0	1	-360	360;
	2	3	0.01	0.1	0	0	0	0	0	0	1	-360	360;
];
""")

    assert scenario.islanding_branches(net) == {2: "outage islands the network"}
    assert [c.id for c in scenario.enumerate_contingencies(net)] == ["L1", "L2"]


def test_tap_grid():
    grid = scenario.grid_values(0.9, 1.1, 0.0125).tolist()

    assert len(grid) == 17
    assert grid[0] == 0.9 and grid[-1] == 1.1
    assert 1.025 in grid and 1.075 in grid


def test_degenerate_grid():
    assert scenario.grid_values(1.0, 1.0, 0.01).tolist() == [1.0]
    with pytest.raises(scenario.GridError):
        scenario.grid_values(1.0, 0.9, 0.01)
    with pytest.raises(scenario.GridError):
        scenario.grid_values(0.9, 1.0, 0)


def test_control_ranges_validation():
    with pytest.raises(scenario.GridError):
        scenario.ControlRanges(v_min=1.1, v_max=1.0)
    with pytest.raises(scenario.GridError):
        scenario.ControlRanges(tap_step=0)


def test_sample_controls_stay_in_range():
    net = case14()
    ranges = scenario.ControlRanges()
    rng = np.random.default_rng(3)
    tap_grid = set(scenario.grid_values(ranges.tap_min, ranges.tap_max, ranges.tap_step).tolist())

    draws = [scenario.sample_controls(net, ranges, rng) for _ in range(2000)]

    u = np.array([d.v_setpoints for d in draws])
    assert u.shape == (2000, 5)
    assert u.min() >= 0.95 and u.max() <= 1.05
    assert abs(u.mean() - 1.0) < 0.005
    assert all(tap in tap_grid for d in draws for tap in d.taps)
    assert all(0 <= q <= 50 for d in draws for q in d.q_c)
    assert all(d.p_g[0] == 232.4 for d in draws)
    for d in draws:
        for gen, p in zip(net.generators[1:], d.p_g[1:]):
            assert gen.p_min <= p <= gen.p_max


def test_sample_controls_degenerate_voltage_range():
    net = case14()

    controls = scenario.sample_controls(net, scenario.ControlRanges(v_min=1.0, v_max=1.0), np.random.default_rng(0))

    assert controls.v_setpoints == (1.0,) * 5


def test_feature_layout_case14():
    layout = scenario.feature_layout(case14())

    assert layout.size == 5 + 5 + 5 + 3 + 1 + 20
    assert layout.names[:2] == ("PG_1", "PG_2")
    assert layout.names[layout.block("T")] == ("T_L8", "T_L9", "T_L10")
    assert layout.names[layout.block("QC")] == ("QC_9",)
    assert layout.names[-1] == "L20"
    assert layout.voltage_buses == (1, 2, 3, 6, 8)


def test_features_mark_outage():
    net = case14()
    layout = scenario.feature_layout(net)
    controls = scenario.base_controls(net)
    q_gen = [gen.q_out for gen in net.generators]

    x = scenario.build_features(layout, controls, q_gen, 2, net.base_mva)

    flags = x[layout.block("L")]
    assert flags[2] == 0 and flags.sum() == 19
    assert x[0] == pytest.approx(2.324)
    np.testing.assert_allclose(x[layout.block("QG")], np.array(q_gen) / 100)
    np.testing.assert_allclose(x[layout.block("U")], controls.v_setpoints)
    np.testing.assert_allclose(x[layout.block("T")], controls.taps)
    np.testing.assert_allclose(x[layout.block("QC")], [0.19])


def test_fixed_controls_inside_ranges():
    net = case14()
    ranges = scenario.ControlRanges()

    a = scenario.fixed_controls(net, ranges, 4)
    b = scenario.fixed_controls(net, ranges, 4)

    assert a == b
    assert a != scenario.fixed_controls(net, ranges, 5)
    assert all(0.95 <= v <= 1.05 for v in a.v_setpoints)
    assert a != scenario.sample_controls(net, ranges, scenario.slot_rng(4, 0))
    assert scenario.base_controls(net).v_setpoints[0] > 1.05


def test_apply_controls_size_mismatch():
    net = case14()
    controls = scenario.base_controls(net)

    with pytest.raises(ValueError):
        scenario.apply_controls(net, scenario.ControlVector(controls.p_g, controls.v_setpoints[:2], controls.taps, ()))


def test_apply_controls_and_outage():
    net = case14()
    controls = scenario.base_controls(net)
    controls = scenario.ControlVector(controls.p_g, (1.0,) * 5, (1.0, 1.0, 1.0), (0.0,))

    case = scenario.apply_outage(scenario.apply_controls(net, controls), 0)

    assert not case.branches[0].in_service
    assert [case.branches[j].tap for j in netmodel.transformers(net)] == [1.0, 1.0, 1.0]
    assert all(gen.v_setpoint == 1.0 for gen in case.generators)
    assert case.shunt_capacitors[0].q_switched == 0.0
    assert net.branches[0].in_service


def test_slot_streams_are_reproducible():
    a = scenario.slot_rng(11, 5).uniform(size=4)
    b = scenario.slot_rng(11, 5).uniform(size=4)
    c = scenario.slot_rng(11, 6).uniform(size=4)

    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_dataset_is_independent_of_job_count():
    net = case14()

    serial = small_dataset(net, jobs=1)
    parallel = small_dataset(net, jobs=2)

    assert len(serial.samples) == 6
    assert [s.contingency for s in serial.samples] == ["L1"] * 3 + ["L2"] * 3
    for a, b in zip(serial.samples, parallel.samples):
        assert a.slot == b.slot
        assert a.load_factor == b.load_factor
        np.testing.assert_array_equal(a.features, b.features)
        assert a.response == b.response or (math.isnan(a.response) and math.isnan(b.response))
    assert serial.train == parallel.train
    assert serial.test == parallel.test


def test_dataset_responses_recompute():
    net = case14()
    ts = small_dataset(net)
    layout = ts.layout
    limits = default_limits(net, ts.config.limits)
    outage = {c.id: c.outage_branch for c in scenario.enumerate_contingencies(net)}

    replayed = 0
    for sample in ts.samples:
        if not sample.converged or sample.attempts != 1:
            continue
        rng = scenario.slot_rng(7, sample.slot)
        load_factor = rng.uniform(ts.config.load_min, ts.config.load_max)
        controls = scenario.sample_controls(net, ts.config.ranges, rng)
        _, sol = scenario.solve_contingency(net, controls, load_factor, outage[sample.contingency], ts.config)
        assert load_factor == sample.load_factor
        assert security_index(sol, limits).value == pytest.approx(sample.response, abs=1e-9)
        assert sample.features[layout.block("L")][outage[sample.contingency]] == 0
        np.testing.assert_allclose(sample.features[layout.block("U")], controls.v_setpoints)
        replayed += 1
    assert replayed > 0


def test_split_sizes():
    ts = small_dataset(case14(), samples=5)

    converged = ts.converged_count
    assert len(ts.test) == math.floor(0.2 * converged + 0.5)
    assert len(ts.train) + len(ts.test) == converged
    assert not set(ts.train) & set(ts.test)


def test_nothing_converges():
    cfg = scenario.DatasetConfig(
        samples_per_contingency=2,
        retry_budget=0,
        solver=SolverOptions(max_iterations=1, tolerance=1e-12),
    )
    net = case14()

    with pytest.raises(scenario.DatasetError, match="L1"):
        scenario.generate_dataset(net, cfg, contingencies=scenario.enumerate_contingencies(net)[:1])


def test_no_contingencies():
    with pytest.raises(scenario.DatasetError):
        scenario.generate_dataset(case14(), contingencies=[])


def test_save_and_load_dataset(tmp_path):
    net = case14()
    ts = small_dataset(net)

    scenario.save_dataset(ts, tmp_path, timestamp="2026-01-01T00:00:00Z")
    loaded = scenario.load_dataset(tmp_path, expected_fingerprint=netmodel.network_fingerprint(net))

    assert loaded.layout == ts.layout
    assert loaded.config == ts.config
    assert (loaded.train, loaded.test) == (ts.train, ts.test)
    X0, y0, f0 = ts.matrix()
    X1, y1, f1 = loaded.matrix()
    np.testing.assert_array_equal(X1, X0)
    np.testing.assert_array_equal(y1, y0)
    np.testing.assert_array_equal(f1, f0)
    header = (tmp_path / "dataset.csv").read_text().splitlines()[0].split(",")
    assert header[:4] == ["slot", "contingency", "load_factor", "attempts"]
    assert header[-3:] == ["pi_c", "converged", "split"]


def test_load_dataset_rejects_other_network(tmp_path):
    ts = small_dataset(case14(), samples=1, count=1)
    scenario.save_dataset(ts, tmp_path)

    with pytest.raises(scenario.DatasetError, match="fingerprint"):
        scenario.load_dataset(tmp_path, expected_fingerprint="0" * 64)


def test_load_dataset_rejects_schema_version(tmp_path):
    ts = small_dataset(case14(), samples=1, count=1)
    scenario.save_dataset(ts, tmp_path)
    sidecar = json.loads((tmp_path / "dataset.json").read_text())
    sidecar["schema_version"] = 99
    (tmp_path / "dataset.json").write_text(json.dumps(sidecar))

    with pytest.raises(scenario.DatasetError, match="schema"):
        scenario.load_dataset(tmp_path)


def test_split_by_bucket():
    ts = small_dataset(case14(), samples=5)
    buckets = [Bucket("low", 0.5, 1.0), Bucket("high", 1.0, 1.6)]

    parts = scenario.split_by_bucket(ts, buckets)

    assert sum(len(p.samples) for p in parts.values()) == len(ts.samples)
    assert sum(len(p.train) + len(p.test) for p in parts.values()) == len(ts.train) + len(ts.test)
    assert all(s.load_factor < 1.0 for s in parts["low"].samples)
    assert all(s.load_factor >= 1.0 for s in parts["high"].samples)


def test_dataset_config_round_trip():
    cfg = scenario.DatasetConfig(samples_per_contingency=4, ranges=scenario.ControlRanges(v_min=0.97))

    assert scenario.DatasetConfig.from_dict(cfg.to_dict()) == cfg
