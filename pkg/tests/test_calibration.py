import math
import random
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from trafcal.calibration import (CalibrationConfig, add_vehicle, build_regional_route,
                                 calibrate, choose_nearby_region, choose_pivot,
                                 compute_region_errors, init_random_model, objective,
                                 remove_vehicles, round_half_away, schedule_starting_times,
                                 transit_index)
from trafcal.counts import CountSeries, Sensor, TimeInterval, make_schedule
from trafcal.network import grid_network
from trafcal.regions import RegionalRoute, is_valid_regional_route, partition_grid
from trafcal.scenario import ScenarioSpec, generate_scenario
from trafcal.simulator import SimulatorParams, TrafficModel, Vehicle, simulate


def chi_square_uniform(counts, k):
    n = sum(counts.values())
    exp = n / k
    return sum((counts.get(i, 0) - exp) ** 2 / exp for i in range(k))


@pytest.fixture
def lgrid(grid3):
    # three regions in an L: r00c00 touches both r00c01 and r01c00
    return partition_grid(grid3, 100.0)


SMALL = ScenarioSpec(rows=3, cols=3, block=600.0, speed=8.33, cell_size=600.0, n_sensors=8,
                     horizon=1800, interval=600, peak_demand=60, seed=0)


# -- errors and objective ------------------------------------------------------

def one_region_case(y, yh, n_intervals=1):
    net = grid_network(1, 1, block=100.0)
    g = partition_grid(net, 1000.0)
    s = [Sensor("s", net.edge_ids[0])]
    return g, s, CountSeries(["s"], [y]), CountSeries(["s"], [yh]), make_schedule(n_intervals)


@pytest.mark.parametrize("y,yh,q,eps,d", [(40, 40, 0.15, 0, 0), (80, 40, 0.15, 40, 6),
                                          (40, 80, 0.05, -40, 2)])
def test_region_error_examples(y, yh, q, eps, d):
    g, s, real, sim, _ = one_region_case([y], [yh])
    (err,) = compute_region_errors(real, sim, g, 0, s, q)
    assert err.epsilon == eps and err.d == d


def test_objective_examples():
    g, s, real, sim, iv = one_region_case([10, 10], [7, 14], 2)
    assert objective(real, sim, g, iv, s) == 7
    assert objective(real, real, g, iv, s) == 0


def test_objective_hand_table(lgrid):
    sensors = [Sensor("a", "j0000-j0001"), Sensor("b", "j0001-j0000"),
               Sensor("c", "j0002-j0102"), Sensor("d", "j0201-j0202")]
    real = CountSeries(["a", "b", "c", "d"], [[10, 4], [20, 6], [5, 5], [0, 9]])
    sim = CountSeries(["a", "b", "c", "d"], [[12, 4], [12, 2], [9, 5], [3, 9]])
    # region means, real vs simulated, per interval:
    # r00c00: (15, 5) vs (12, 3) -> 3 + 2;  r00c01: (5, 5) vs (9, 5) -> 4 + 0
    # r01c00: (0, 9) vs (3, 9) -> 3 + 0
    assert objective(real, sim, lgrid, make_schedule(2), sensors) == 12
    # with only a and c active, r01c00 drops out and r00c00 uses a alone
    assert objective(real, sim, lgrid, make_schedule(2), sensors[::2]) == 2 + 0 + 4 + 0


@settings(max_examples=1000)
@given(st.floats(-1e4, 1e4, allow_nan=False), st.floats(0.01, 1.0))
def test_rounding_deadband(eps, q):
    d = round_half_away(eps * q)
    if abs(eps) < 0.5 / q and abs(eps * q) < 0.5:
        assert d == 0
    assert d == math.floor(abs(eps * q) + 0.5)
    assert d >= 0


def test_round_half_away():
    assert [round_half_away(x) for x in (0.5, 1.5, 2.5, -0.5, -2.5, 0.49)] == [1, 2, 3, 1, 3, 0]


# -- initial model -------------------------------------------------------------

def test_init_gamma_zero(grid3):
    assert len(init_random_model(grid3, make_schedule(1), 0, random.Random(0))) == 0


def test_init_littles_law():
    # 5 concurrent vehicles, trips of about 100 s over 900 s -> about 45 vehicles
    net = grid_network(2, 2, block=250.0, speed=10.0)
    iv = make_schedule(1)
    sizes, durs = [], []
    for seed in range(20):
        m = init_random_model(net, iv, 5, random.Random(seed))
        sizes.append(len(m))
        durs += [sum(net.free_flow[net.index[e]] for e in v.route) for v in m]
        assert all(net.is_valid_route(v.route) for v in m)
        assert all(v.regional_route == () for v in m)
    mean_dur = sum(durs) / len(durs)
    assert 70 < mean_dur < 130
    expected = 5 * 900 / mean_dur
    assert abs(sum(sizes) / len(sizes) - expected) <= 0.3 * expected
    assert abs(sum(sizes) / len(sizes) - 45) <= 0.3 * 45


# -- removal -------------------------------------------------------------------

def starter_model(lgrid):
    m = TrafficModel()
    for k in range(3):
        m.add(Vehicle(f"s{k}", 100 + k, ("j0000-j0001",)))
    m.add(Vehicle("late", 950, ("j0000-j0001",)))
    m.add(Vehicle("other", 10, ("j0002-j0102",)))
    return m


def test_remove_zero(lgrid):
    m = starter_model(lgrid)
    assert remove_vehicles(m, lgrid, make_schedule(2), "r00c00", 0, 0, random.Random(0)) == []
    assert len(m) == 5


def test_remove_from_start_pool(lgrid):
    m = starter_model(lgrid)
    gone = remove_vehicles(m, lgrid, make_schedule(2), "r00c00", 0, 2, random.Random(0))
    assert len(gone) == 2 and set(gone) <= {"s0", "s1", "s2"}
    assert "late" in m and "other" in m


def test_remove_transit_half_probability(lgrid):
    iv = make_schedule(1)
    transit = [f"t{k}" for k in range(10)]
    total = 0
    runs = 4000
    for seed in range(runs):
        m = TrafficModel([Vehicle(t, 0, ("j0002-j0102",)) for t in transit])
        total += len(remove_vehicles(m, lgrid, iv, "r00c00", 0, 4, random.Random(seed),
                                     transit=transit))
    # 4 attempts at p = 0.5: mean 2, sd of the mean ~ 1/sqrt(runs)
    assert abs(total / runs - 2.0) < 0.06


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_remove_only_touches_region_vehicles(seed):
    rng = random.Random(seed)
    net = grid_network(3, 3, block=100.0)
    g = partition_grid(net, 150.0)
    iv = make_schedule(2, 300)
    m = TrafficModel()
    for k in range(rng.randint(0, 30)):
        m.add(Vehicle(f"v{k}", rng.randrange(600), (rng.choice(net.edge_ids),)))
    region = rng.choice(g.ids)
    interval = rng.randrange(2)
    res = simulate(net, m, [], iv, SimulatorParams(p_reroute=0.0))
    transit = transit_index(res, g, iv).get((region, interval), [])
    before = m.copy()
    gone = remove_vehicles(m, g, iv, region, interval, rng.randint(0, 10), rng, transit)
    for vid in gone:
        v = before.vehicles[vid]
        starts = g.region_of(v.route[0]) == region and iv[interval].start <= v.depart < iv[interval].end
        assert starts or vid in transit
    assert len(m) == len(before) - len(gone)


# -- greedy choices ------------------------------------------------------------

def test_choose_region_examples():
    rng = random.Random(0)
    assert choose_nearby_region(["A"], {}, 0.5, rng) == "A"
    assert choose_nearby_region(["A", "B"], {"A": 10, "B": 2}, 0.0, rng) == "A"
    assert choose_nearby_region(["B", "A"], {"A": 2, "B": 2}, 0.0, rng) == "A"   # id tie-break
    with pytest.raises(ValueError):
        choose_nearby_region([], {}, 0.0, rng)


def test_choose_region_uniform_when_exploring():
    rng = random.Random(1)
    cands = ["A", "B", "C", "D"]
    hits = Counter(cands.index(choose_nearby_region(cands, {"A": 99}, 1.0, rng))
                   for _ in range(10_000))
    # chi-square with 3 dof, 0.1% critical value 16.27
    assert chi_square_uniform(hits, 4) < 16.27


def test_choose_pivot_examples():
    rng = random.Random(0)
    assert choose_pivot(["e1"], {}, 0.3, rng) == "e1"
    assert choose_pivot(["e1", "e2"], {"e1": 5, "e2": 9}, 0.0, rng) == "e2"
    with pytest.raises(ValueError):
        choose_pivot([], {}, 0.0, rng)
    hits = Counter(["e1", "e2", "e3"].index(choose_pivot(["e1", "e2", "e3"], {"e2": 9}, 1.0, rng))
                   for _ in range(10_000))
    assert chi_square_uniform(hits, 3) < 13.82


@settings(max_examples=1000)
@given(st.dictionaries(st.sampled_from("ABCDEFG"), st.integers(-50, 50), min_size=1),
       st.integers(0, 2**32 - 1))
def test_greedy_is_deterministic_without_exploration(errors, seed):
    cands = sorted(errors)
    a = choose_nearby_region(cands, errors, 0.0, random.Random(seed))
    b = choose_nearby_region(cands[::-1], errors, 0.0, random.Random(seed + 1))
    assert a == b
    assert errors[a] == max(errors.values())
    assert a == min(c for c in cands if errors[c] == errors[a])


# -- adding vehicles -----------------------------------------------------------

SENSOR_EDGES = {"r00c00": ["j0000-j0001"], "r00c01": ["j0002-j0102"],
                "r01c00": ["j0201-j0202"]}


def test_add_vehicle_m1_is_pivot(grid3, lgrid):
    m = TrafficModel()
    v = add_vehicle(grid3, lgrid, m, "r00c00", lambda i: 1.0, 1, {}, SENSOR_EDGES, {},
                    random.Random(0), "x", 0, 0.0)
    assert v.route == ("j0000-j0001",)
    assert v.regional_route == ("r00c00",)
    assert "x" in m


def test_add_vehicle_greedy_trace(grid3, lgrid):
    errors = {"r00c00": 0.0, "r00c01": 3.0, "r01c00": 10.0}
    phi = build_regional_route(lgrid, "r00c00", 3, errors, set(SENSOR_EDGES), 0.0,
                               random.Random(0))
    assert phi == ["r00c00", "r01c00", "r00c01"]
    v = add_vehicle(grid3, lgrid, TrafficModel(), "r00c00",
                    lambda i: grid3.free_flow[i], 3, errors, SENSOR_EDGES, {},
                    random.Random(0), "x", 0, 0.0)
    assert v.regional_route == tuple(phi)
    assert grid3.is_valid_route(v.route)
    # passes the three pivots in order
    pos = [v.route.index(SENSOR_EDGES[r][0]) for r in phi]
    assert pos == sorted(pos) and v.route[0] == SENSOR_EDGES["r00c00"][0]
    assert v.route[-1] == SENSOR_EDGES["r00c01"][0]
    # the join edge of consecutive segments appears once
    assert all(a != b for a, b in zip(v.route, v.route[1:]))


def test_add_vehicle_needs_sensor(grid3, lgrid):
    with pytest.raises(ValueError):
        add_vehicle(grid3, lgrid, TrafficModel(), "r00c00", lambda i: 1.0, 2, {}, {}, {},
                    random.Random(0), "x", 0)


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.sampled_from([0.0, 0.01, 0.5, 1.0]))
def test_regional_route_invariants(seed, m, eps):
    rng = random.Random(seed)
    net = grid_network(4, 4, block=100.0)
    g = partition_grid(net, 100.0)
    edges = rng.sample(net.edge_ids, rng.randint(3, 15))
    sensor_edges = {}
    for e in edges:
        sensor_edges.setdefault(g.region_of(e), []).append(e)
    errors = {r: rng.uniform(-20, 20) for r in g.ids}
    diffs = {e: rng.uniform(-10, 10) for e in edges}
    start = rng.choice(sorted(sensor_edges))
    v = add_vehicle(net, g, TrafficModel(), start, lambda i: net.free_flow[i], m, errors,
                    sensor_edges, diffs, rng, "x", 0, eps)
    assert is_valid_regional_route(g, RegionalRoute(v.regional_route), m)
    assert v.regional_route[0] == start
    assert net.is_valid_route(v.route)


# -- scheduling -----------------------------------------------------------------

def test_schedule_examples():
    one = [Vehicle("a", 500, ("e",))]
    schedule_starting_times(one, TimeInterval(0, 900), 0, random.Random(0))
    assert one[0].depart == 0
    three = [Vehicle(k, 10, ("e",)) for k in "abc"]
    schedule_starting_times(three, TimeInterval(0, 900), 0, random.Random(0))
    assert [v.depart for v in three] == [0, 300, 600]


@settings(max_examples=1000)
@given(st.integers(0, 2**32 - 1), st.integers(0, 40), st.integers(0, 60))
def test_schedule_stays_in_interval(seed, n, pmax):
    rng = random.Random(seed)
    iv = TimeInterval(900, 1800)
    vs = [Vehicle(f"v{k}", rng.randrange(900, 1800), ("e",)) for k in range(n)]
    schedule_starting_times(vs, iv, pmax, rng)
    assert all(900 <= v.depart < 1800 for v in vs)


# -- full loop --------------------------------------------------------------------

def test_zero_counts_converge_immediately(grid3):
    iv = make_schedule(2)
    sensors = [Sensor("s", "j0000-j0001")]
    g = partition_grid(grid3, 100.0)
    model, hist = calibrate(grid3, g, CountSeries.zeros(["s"], 2), iv, sensors,
                            CalibrationConfig(), initial_model=TrafficModel())
    assert len(hist) == 1 and hist.records[0].objective == 0
    assert len(model) == 0


def test_single_iteration_budget():
    sc = generate_scenario(SMALL)
    _, hist = calibrate(sc.network, sc.grid, sc.real_counts, sc.intervals, sc.sensors,
                        CalibrationConfig(max_iters=1, gamma=20))
    assert len(hist) == 1 and hist.simulations == 2


def test_empty_sensor_set_rejected():
    sc = generate_scenario(SMALL)
    with pytest.raises(ValueError):
        calibrate(sc.network, sc.grid, sc.real_counts, sc.intervals, [], CalibrationConfig())


def test_config_diagnostics():
    assert CalibrationConfig().diagnostics() == []
    bad = CalibrationConfig(q=0, p_reroute=2, m=0, max_iters=0, patience=0, perturb_max=-1)
    fields = {d.split(":")[0] for d in bad.diagnostics()}
    assert fields == {"q", "p_reroute", "m", "max_iters", "patience", "perturb_max"}


@pytest.fixture(scope="module")
def small_runs():
    sc = generate_scenario(SMALL)
    out = []
    for seed in range(3):
        cfg = CalibrationConfig(seed=seed, gamma=20, max_iters=8)
        model, hist = calibrate(sc.network, sc.grid, sc.real_counts, sc.intervals,
                                sc.sensors, cfg)
        out.append((sc, cfg, model, hist))
    return out


def test_best_so_far_monotone(small_runs):
    for _, _, _, hist in small_runs:
        bsf = hist.best_so_far(20)
        assert all(b <= a for a, b in zip(bsf, bsf[1:]))
        assert len(bsf) == 21
        assert len(hist.records) == hist.simulations - 1


def test_returns_best_model(small_runs):
    for sc, cfg, model, hist in small_runs:
        best = min([hist.initial_objective] + hist.objectives)
        assert hist.best_so_far()[-1] == best
        if hist.best_iteration:
            assert hist.records[hist.best_iteration - 1].objective == best
            assert hist.records[hist.best_iteration - 1].model_size == len(model)


def test_added_vehicles_have_valid_regional_routes(small_runs):
    for sc, cfg, model, _ in small_runs:
        added = [v for v in model if v.regional_route]
        for v in added:
            assert is_valid_regional_route(sc.grid, RegionalRoute(v.regional_route), cfg.m)
            assert sc.network.is_valid_route(v.route)
            assert v.origin_region == v.regional_route[0]


def test_calibration_reproducible(small_runs):
    sc, cfg, model, hist = small_runs[0]
    model2, hist2 = calibrate(sc.network, sc.grid, sc.real_counts, sc.intervals, sc.sensors, cfg)
    assert hist2.objectives == hist.objectives
    assert [(v.id, v.depart, v.route) for v in model2.sorted()] == \
        [(v.id, v.depart, v.route) for v in model.sorted()]


def test_region_error_records(small_runs):
    sc, cfg, _, hist = small_runs[0]
    for rec in hist.records:
        for e in rec.errors:
            assert e.d == round_half_away(e.epsilon * cfg.q)
        assert {e.interval for e in rec.errors} == set(range(len(sc.intervals)))


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_best_so_far_property(seed):
    rng = random.Random(seed)
    net = grid_network(2, 2, block=200.0, speed=10.0)
    grid = partition_grid(net, 200.0)
    sensors = [Sensor(f"s{i}", e) for i, e in enumerate(rng.sample(net.edge_ids, 4))]
    intervals = make_schedule(2, 300)
    real = CountSeries([s.id for s in sensors],
                       [[rng.randint(0, 6) for _ in intervals] for _ in sensors])
    cfg = CalibrationConfig(seed=seed % 2**31, gamma=rng.randint(0, 8), max_iters=6,
                            patience=rng.randint(1, 3))
    model, hist = calibrate(net, grid, real, intervals, sensors, cfg)
    bsf = hist.best_so_far(cfg.max_iters)
    assert all(b <= a for a, b in zip(bsf, bsf[1:]))
    assert bsf[-1] == min([hist.initial_objective] + hist.objectives)
    if hist.best_iteration:
        assert hist.records[hist.best_iteration - 1].model_size == len(model)
    assert len(hist) <= cfg.max_iters
