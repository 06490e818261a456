"""
Tests for the event kernel, lossy links and scripted mobility/churn
"""
import math

import pytest

from overlay.chord import ChordOverlay
from world.mobility import (ChurnSchedule, ChurnStep, InvalidScript, MobilityScript, apply_churn,
                            execute_churn_step)
from world.simulator import LinkModel, NetworkSimulator


def sink(received):
    return lambda src, dst, msg: received.append((src, dst, msg))


def test_empty_run_parks_the_clock(sim):
    assert sim.run_until(500) == 0
    assert sim.now == 500
    with pytest.raises(ValueError):
        sim.run_until(100)


def test_equal_time_events_run_in_scheduling_order(sim):
    fired = []
    for label in ("a", "b", "c"):
        sim.schedule(10, fired.append, label)
    sim.schedule(5, fired.append, "early")
    sim.run_until(10)
    assert fired == ["early", "a", "b", "c"]


def test_events_after_the_limit_wait(sim):
    fired = []
    sim.schedule(11, fired.append, "late")
    sim.run_until(10)
    assert fired == []
    sim.run_until(11)
    assert fired == ["late"]


def test_recorded_events_carry_fire_time():
    sim = NetworkSimulator(seed=1, record_events=True)
    sim.call_at(40, lambda: None, label="tick")
    sim.run_until(100)
    assert [(e.fire_at, e.action) for e in sim.event_log] == [(40, "tick")]


def test_lossless_link_delivers_after_latency(sim):
    received = []
    sim.attach("10.0.0.1", 0, sink(received))
    sim.attach("10.0.0.2", 0, sink(received))
    assert sim.transmit("10.0.0.1", "10.0.0.2", "hello")
    sim.run_until(9)
    assert received == []
    sim.run_until(10)
    assert received == [("10.0.0.1", "10.0.0.2", "hello")]


def test_total_loss_drops_everything():
    sim = NetworkSimulator(seed=3, default_link=LinkModel(10, 1.0))
    received = []
    sim.attach("a", 0, sink(received))
    sim.attach("b", 0, sink(received))
    for i in range(50):
        sim.transmit("a", "b", i)
    sim.run_until(100)
    link = sim.link("a", "b")
    assert received == []
    assert link.dropped == 50


def test_drop_count_matches_binomial_bound():
    n, p = 10000, 0.01
    sim = NetworkSimulator(seed=42, default_link=LinkModel(1, p))
    sim.attach("a", 0, lambda *args: None)
    sim.attach("b", 0, lambda *args: None)
    for i in range(n):
        sim.transmit("a", "b", i)
    sim.run_until(10)
    link = sim.link("a", "b")
    sigma = math.sqrt(n * p * (1 - p))
    assert abs(link.dropped - n * p) <= 3 * sigma
    assert link.delivered + link.dropped == link.sent == n


def test_detached_endpoints_lose_messages(sim):
    received = []
    sim.attach("a", 0, sink(received))
    sim.attach("b", 0, sink(received))
    sim.transmit("a", "b", 1)
    sim.detach("b")
    sim.run_until(20)
    sim.transmit("b", "a", 2)
    sim.run_until(40)
    assert received == []
    assert sim.totals() == {"sent": 2, "delivered": 0, "dropped": 2}


def test_link_overrides_by_network_and_address(sim):
    sim.attach("10.1.0.2", 1, lambda *args: None)
    sim.attach("10.3.0.2", 3, lambda *args: None)
    sim.override_link(LinkModel(25), networks=(1, 3))
    assert sim.link("10.1.0.2", "10.3.0.2").model.one_way_latency == 25
    assert sim.link("10.3.0.2", "10.1.0.2").model.one_way_latency == 10
    sim.override_link(LinkModel(3), src="10.1.0.2", dst="10.3.0.2")
    assert sim.link("10.1.0.2", "10.3.0.2").model.one_way_latency == 3


def test_named_streams_are_reproducible():
    a, b = NetworkSimulator(seed=5), NetworkSimulator(seed=5)
    assert list(a.stream("churn").integers(1000, size=5)) == list(b.stream("churn").integers(1000, size=5))
    assert list(a.stream("churn").random(3)) != list(a.stream("links").random(3))


def test_mobility_script_validation():
    MobilityScript().validate()
    with pytest.raises(InvalidScript):
        MobilityScript(t_enter_overlap=30000, t_switch=30000).validate()
    with pytest.raises(InvalidScript):
        MobilityScript(network2_address="10.1.0.2").validate()
    with pytest.raises(InvalidScript):
        MobilityScript(network1_address="not-an-address").validate()


def test_churn_schedule_from_config_and_validation():
    schedule = ChurnSchedule.from_config([
        {"time_ms": 2000, "action": "add", "count": 3},
        {"time_ms": 1000, "action": "remove", "count": 5, "graceful": True},
    ])
    assert [s.time_ms for s in schedule.steps] == [1000, 2000]
    assert schedule.populations(10) == [5, 8]
    assert schedule.to_config()[0] == {"time_ms": 1000, "action": "remove", "count": 5, "graceful": True}
    with pytest.raises(InvalidScript):
        schedule.validate(5)
    with pytest.raises(InvalidScript):
        ChurnSchedule.from_config([{"time_ms": 0, "action": "explode", "count": 1}])
    with pytest.raises(InvalidScript):
        ChurnSchedule.from_config([{"time_ms": 0, "action": "add"}])


def test_churn_steps_change_membership(sim):
    overlay = ChordOverlay(sim, 12)
    overlay.populate(overlay.spawn_ids(30))
    rng = sim.stream("churn")
    removed = execute_churn_step(ChurnStep(0, "remove", 10), overlay, rng)
    assert len(removed) == 10 and len(overlay.live_ids()) == 20
    added = execute_churn_step(ChurnStep(0, "add", 4), overlay, rng)
    assert len(added) == 4 and len(overlay.live_ids()) == 24


def test_apply_churn_runs_steps_at_their_times(sim):
    overlay = ChordOverlay(sim, 12)
    overlay.populate(overlay.spawn_ids(20))
    schedule = ChurnSchedule([ChurnStep(1000, "remove", 5), ChurnStep(3000, "add", 2)])
    apply_churn(schedule, overlay)
    sim.run_until(999)
    assert len(overlay.live_ids()) == 20
    sim.run_until(1000)
    assert len(overlay.live_ids()) == 15
    sim.run_until(3000)
    assert len(overlay.live_ids()) == 17


def test_churn_spares_protected_nodes(sim):
    overlay = ChordOverlay(sim, 12)
    overlay.populate(overlay.spawn_ids(20))
    keep = set(overlay.live_ids()[:5])
    rng = sim.stream("churn")
    execute_churn_step(ChurnStep(0, "remove", 15), overlay, rng, protected=keep)
    assert set(overlay.live_ids()) == keep
    with pytest.raises(InvalidScript):
        execute_churn_step(ChurnStep(0, "remove", 1), overlay, rng, protected=keep)


def test_apply_churn_repairs_the_ring_after_each_step(sim):
    overlay = ChordOverlay(sim, 12)
    overlay.populate(overlay.spawn_ids(24))
    schedule = ChurnSchedule([ChurnStep(500, "remove", 8, graceful=False)])
    apply_churn(schedule, overlay, stabilize_rounds=overlay.m + 4)
    sim.run_until(500)
    assert len(overlay.live_ids()) == 16
    for node in overlay.live_nodes():
        assert node.successor == overlay.oracle_successor(node.id + 1)
