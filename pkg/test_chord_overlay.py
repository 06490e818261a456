"""
Tests for the Chord overlay: interval arithmetic, routing, membership and storage
"""
import math

import numpy as np
import pytest

from overlay.chord import (ChordOverlay, JoinFailed, LookupTimeout, closest_preceding_finger, in_interval)
from overlay.ident import NodeId
from overlay.store import KeyValueStore
from world.simulator import NetworkSimulator


def linear_successor(values, id_value):
    """Brute-force successor over a list of member values."""
    above = [v for v in values if v >= id_value]
    return min(above) if above else min(values)


def interval_oracle(x, a, b, include_left, include_right, size):
    members = set()
    step = 1
    while True:
        point = (a + step) % size
        if point == b or point == a:
            break
        members.add(point)
        step += 1
    if a == b:
        members = set(range(size)) - {a}
    if include_left:
        members.add(a)
    if include_right:
        members.add(b)
    return x in members


def test_in_interval_examples():
    assert in_interval(NodeId(2, 5), NodeId(30, 5), NodeId(8, 5), include_right=True)
    assert not in_interval(NodeId(30, 5), NodeId(30, 5), NodeId(8, 5), include_right=True)


def test_in_interval_agrees_with_scan():
    size = 16
    for x in range(size):
        for a in range(size):
            for b in range(size):
                for left in (False, True):
                    for right in (False, True):
                        got = in_interval(NodeId(x, 4), NodeId(a, 4), NodeId(b, 4), left, right)
                        assert got == interval_oracle(x, a, b, left, right, size), (x, a, b, left, right)


def test_in_interval_rejects_mixed_circles():
    with pytest.raises(ValueError):
        in_interval(NodeId(1, 4), NodeId(2, 5), NodeId(3, 5))


def test_find_successor_examples(make_ring):
    overlay = make_ring([2, 8, 12, 16, 28], 5)
    entry = overlay.node(NodeId(2, 5))
    assert overlay.find_successor(entry, NodeId(9, 5)).node == NodeId(12, 5)
    assert overlay.find_successor(entry, NodeId(30, 5)).node == NodeId(2, 5)
    assert overlay.find_successor(entry, NodeId(12, 5)).node == NodeId(12, 5)


@pytest.mark.slow
def test_find_successor_matches_oracle_on_random_rings():
    rng = np.random.default_rng(2024)
    m = 8
    for ring in range(200):
        n = int(rng.integers(1, 65))
        values = sorted(int(v) for v in rng.choice(2 ** m, size=n, replace=False))
        overlay = ChordOverlay(NetworkSimulator(seed=ring), m)
        overlay.populate([NodeId(v, m) for v in values])
        nodes = overlay.live_nodes()
        for id_value in range(2 ** m):
            entry = nodes[int(rng.integers(len(nodes)))]
            found = overlay.find_successor(entry, NodeId(id_value, m))
            assert found.node.value == linear_successor(values, id_value), (ring, id_value)


def test_closest_preceding_finger_example(make_ring):
    overlay = make_ring([0, 8, 16, 24], 5)
    node = overlay.node(NodeId(0, 5))
    assert closest_preceding_finger(node, NodeId(20, 5)) == NodeId(16, 5)
    assert closest_preceding_finger(node, NodeId(1, 5)) == node.id


def test_closest_preceding_finger_matches_table_scan(make_ring):
    overlay = make_ring([1, 4, 6, 11, 13], 4)
    for node in overlay.live_nodes():
        for id_value in range(16):
            target = NodeId(id_value, 4)
            inside = [e.node for e in node.fingers if in_interval(e.node, node.id, target)]
            expected = min(inside, key=lambda n: n.distance_to(target)) if inside else node.id
            assert closest_preceding_finger(node, target) == expected


@pytest.mark.slow
@pytest.mark.parametrize("n", [16, 64, 256, 1024])
def test_hops_scale_logarithmically(n):
    sim = NetworkSimulator(seed=n)
    overlay = ChordOverlay(sim, 16)
    overlay.populate(overlay.spawn_ids(n))
    rng = sim.stream("lookups")
    nodes = overlay.live_nodes()
    hops = []
    for _ in range(1000):
        entry = nodes[int(rng.integers(len(nodes)))]
        target = NodeId(int(rng.integers(2 ** 16)), 16)
        result = overlay.find_successor(entry, target)
        assert result.node == overlay.oracle_successor(target)
        hops.append(result.hops)
    assert np.mean(hops) <= 2 * math.log2(n)


def test_first_node_is_its_own_successor(sim):
    overlay = ChordOverlay(sim, 8)
    node = overlay.new_node(NodeId(42, 8))
    overlay.join(node, None)
    assert node.successor == node.id
    assert overlay.find_successor(node, NodeId(7, 8)).node == node.id


def test_join_takes_over_keys_up_to_its_id(make_ring):
    overlay = make_ring([2, 24], 5)
    origin = overlay.node(NodeId(2, 5))
    for value in (10, 17, 18, 20):
        overlay.put(origin, NodeId(value, 5), f"v{value}".encode())
    newcomer = overlay.new_node(NodeId(18, 5))
    overlay.join(newcomer, NodeId(2, 5))
    assert [k.value for k in newcomer.store.keys()] == [10, 17, 18]
    assert [k.value for k in overlay.node(NodeId(24, 5)).store.keys()] == [20]
    assert overlay.get(origin, NodeId(17, 5)).values == frozenset({b"v17"})


def test_predecessor_adopts_new_node_within_one_round(make_ring):
    overlay = make_ring([10, 50], 8)
    overlay.join(overlay.new_node(NodeId(30, 8)), NodeId(50, 8))
    overlay.stabilize_round(overlay.node(NodeId(10, 8)))
    assert overlay.node(NodeId(10, 8)).successor == NodeId(30, 8)
    assert overlay.node(NodeId(30, 8)).successor == NodeId(50, 8)


def test_join_through_dead_bootstrap_fails(make_ring):
    overlay = make_ring([10, 50], 8)
    overlay.depart(overlay.node(NodeId(50, 8)), graceful=False)
    with pytest.raises(JoinFailed):
        overlay.join(overlay.new_node(NodeId(30, 8)), NodeId(50, 8))


def test_join_falls_back_to_a_live_contact(make_ring):
    overlay = make_ring([10, 50, 120], 8)
    overlay.depart(overlay.node(NodeId(50, 8)), graceful=False)
    newcomer = overlay.new_node(NodeId(30, 8))
    assert overlay.join(newcomer, NodeId(50, 8), fallbacks=[NodeId(120, 8)])
    assert newcomer.successor == NodeId(120, 8)


def test_join_contacts_are_bounded_by_retries(make_ring):
    overlay = make_ring([10, 50, 120], 8, rpc_retries=0)
    overlay.depart(overlay.node(NodeId(50, 8)), graceful=False)
    with pytest.raises(JoinFailed):
        overlay.join(overlay.new_node(NodeId(30, 8)), NodeId(50, 8), fallbacks=[NodeId(120, 8)])


def test_maintenance_routing_walks_past_an_empty_finger_table(make_ring):
    overlay = make_ring([10, 90, 170], 8)
    node = overlay.node(NodeId(10, 8))
    for entry in node.fingers:
        entry.node = node.id
    assert overlay.lookup_local(node, NodeId(150, 8)) == (NodeId(170, 8), 1)
    newcomer = overlay.new_node(NodeId(140, 8))
    overlay.join(newcomer, node.id)
    assert newcomer.successor == NodeId(170, 8)


def test_maintenance_routing_matches_oracle_on_a_joined_ring(sim):
    overlay = ChordOverlay(sim, 8)
    overlay.populate(overlay.spawn_ids(64))
    for node in overlay.live_nodes():
        assert node.successor == overlay.oracle_successor(node.id + 1)
        for id_value in range(0, 2 ** 8, 5):
            target = NodeId(id_value, 8)
            assert overlay.lookup_local(node, target)[0] == overlay.oracle_successor(target)


def test_find_successor_skips_a_dead_answer(make_ring):
    overlay = make_ring([10, 90, 170], 8)
    overlay.depart(overlay.node(NodeId(90, 8)), graceful=False)
    result = overlay.find_successor(overlay.node(NodeId(10, 8)), NodeId(50, 8))
    assert result.node == NodeId(170, 8)


def test_spawned_ids_depend_on_the_seed():
    first = ChordOverlay(NetworkSimulator(seed=1), 16).spawn_ids(8)
    second = ChordOverlay(NetworkSimulator(seed=2), 16).spawn_ids(8)
    assert first != second
    assert first == ChordOverlay(NetworkSimulator(seed=1), 16).spawn_ids(8)


def test_sequential_joins_converge_to_oracle(sim):
    overlay = ChordOverlay(sim, 16)
    overlay.populate(overlay.spawn_ids(100))
    for node in overlay.live_nodes():
        assert node.successor == overlay.oracle_successor(node.id + 1)


def test_stable_ring_is_unchanged_by_a_round(make_ring):
    overlay = make_ring([3, 40, 77, 120, 200, 250], 8)

    def snapshot():
        return [(n.successor_list[:], n.predecessor, [e.node for e in n.fingers]) for n in overlay.live_nodes()]

    before = snapshot()
    overlay.stabilize(1)
    assert snapshot() == before


def test_lookups_survive_one_failure(sim):
    overlay = ChordOverlay(sim, 8)
    overlay.populate(overlay.spawn_ids(16))
    victim = overlay.live_nodes()[5]
    overlay.depart(victim, graceful=False)
    overlay.stabilize(overlay.m)
    live = [n.value for n in overlay.live_ids()]
    nodes = overlay.live_nodes()
    for id_value in range(2 ** 8):
        entry = nodes[id_value % len(nodes)]
        assert overlay.find_successor(entry, NodeId(id_value, 8)).node.value == linear_successor(live, id_value)


def test_churn_burst_repaired_within_bound(sim):
    m, n = 8, 64
    overlay = ChordOverlay(sim, m)
    overlay.populate(overlay.spawn_ids(n))
    rng = sim.stream("burst")
    for index in sorted(rng.choice(n, size=16, replace=False), reverse=True):
        overlay.depart(overlay.live_nodes()[int(index)], graceful=False)

    def settled():
        return all(node.successor == overlay.oracle_successor(node.id + 1) for node in overlay.live_nodes())

    rounds = 0
    while not settled():
        overlay.stabilize(1)
        rounds += 1
        assert rounds <= n * m
    assert settled()


def test_keys_follow_graceful_membership_changes(sim):
    overlay = ChordOverlay(sim, 8)
    overlay.populate(overlay.spawn_ids(20))
    origin = overlay.live_nodes()[0]
    keys = [NodeId(v, 8) for v in range(3, 256, 7)]
    for key in keys:
        overlay.put(origin, key, b"payload")
    for node in overlay.live_nodes()[4:9]:
        overlay.depart(node, graceful=True)
    for node_id in overlay.spawn_ids(5, prefix="late"):
        overlay.join(overlay.new_node(node_id), overlay.live_ids()[0])
    overlay.stabilize(overlay.m + 4)

    stored = []
    for node in overlay.live_nodes():
        for key in node.store.keys():
            assert overlay.oracle_successor(key) == node.id
            stored.append(key)
    assert sorted(stored) == sorted(keys)


def test_graceful_departure_hands_keys_to_successor(make_ring):
    overlay = make_ring([10, 60, 120], 8)
    origin = overlay.node(NodeId(10, 8))
    overlay.put(origin, NodeId(50, 8), b"kept")
    overlay.depart(overlay.node(NodeId(60, 8)), graceful=True)
    overlay.stabilize(2)
    result = overlay.get(origin, NodeId(50, 8))
    assert result.node == NodeId(120, 8)
    assert result.values == frozenset({b"kept"})


def test_put_get_on_singleton(sim):
    overlay = ChordOverlay(sim, 8)
    overlay.populate([NodeId(5, 8)])
    node = overlay.node(NodeId(5, 8))
    overlay.put(node, NodeId(200, 8), b"only")
    assert overlay.get(node, NodeId(200, 8)).values == frozenset({b"only"})


def test_multiple_values_and_idempotent_put(make_ring):
    overlay = make_ring([10, 90, 170], 8)
    origin = overlay.node(NodeId(90, 8))
    key = NodeId(33, 8)
    overlay.put(origin, key, b"a")
    overlay.put(origin, key, b"b")
    overlay.put(origin, key, b"a")
    assert overlay.get(origin, key).values == frozenset({b"a", b"b"})
    assert overlay.get(origin, NodeId(34, 8)).values == frozenset()


def test_store_is_insertion_order_invariant():
    first, second = KeyValueStore(), KeyValueStore()
    key = NodeId(3, 8)
    for value, t in ((b"x", 1), (b"y", 2), (b"z", 3)):
        first.put(key, value, t)
    for value, t in ((b"z", 1), (b"x", 2), (b"y", 3)):
        second.put(key, value, t)
    assert first.get(key) == second.get(key)
    assert not first.put(key, b"x", 9)
    assert first.inserted_at(key, b"x") == 1


def test_get_after_holder_failure_is_a_failure(make_ring):
    overlay = make_ring([10, 90, 170], 8)
    origin = overlay.node(NodeId(10, 8))
    overlay.put(origin, NodeId(50, 8), b"lost")
    overlay.depart(overlay.node(NodeId(90, 8)), graceful=False)
    overlay.stabilize(overlay.m)
    try:
        result = overlay.get(origin, NodeId(50, 8))
    except LookupTimeout:
        return
    assert result.values == frozenset()


def test_find_successor_from_dead_entry_times_out(make_ring):
    overlay = make_ring([10, 90], 8)
    entry = overlay.node(NodeId(90, 8))
    overlay.depart(entry, graceful=False)
    with pytest.raises(LookupTimeout):
        overlay.find_successor(entry, NodeId(5, 8))


@pytest.mark.slow
def test_gets_succeed_on_large_stable_ring():
    sim = NetworkSimulator(seed=11)
    overlay = ChordOverlay(sim, 16)
    overlay.populate(overlay.spawn_ids(400))
    rng = sim.stream("gets")
    nodes = overlay.live_nodes()
    keys = [NodeId(int(v), 16) for v in rng.choice(2 ** 16, size=25, replace=False)]
    for key in keys:
        overlay.put(nodes[int(rng.integers(len(nodes)))], key, b"value")
    answered = 0
    for key in keys:
        result = overlay.get(nodes[int(rng.integers(len(nodes)))], key)
        answered += result.values == frozenset({b"value"})
    assert answered == 25
