import pytest

from overlay.chord import ChordOverlay
from overlay.ident import UID, NodeId, hash_to_id
from world.simulator import NetworkSimulator


@pytest.fixture
def sim():
    return NetworkSimulator(seed=7)


@pytest.fixture
def make_ring(sim):
    """Factory for a stabilized ring with the given node values."""
    def build(values, m, rounds=None, **kwargs):
        overlay = ChordOverlay(sim, m, **kwargs)
        overlay.populate([NodeId(v, m) for v in values], rounds)
        return overlay
    return build


@pytest.fixture
def find_uid():
    """First UID of the form xyz:laptop:<n> whose key satisfies accept."""
    def search(m, accept, name="xyz"):
        for n in range(17301, 17301 + 100000):
            uid = UID(name, "laptop", str(n))
            if accept(hash_to_id(uid, m)):
                return uid
        raise AssertionError("no UID hashes into the requested range")
    return search
