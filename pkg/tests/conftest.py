import pytest

from kaatrust.che import Node, force_pairing, open_session
from kaatrust.identity import imprint, station_setup
from kaatrust.policy import PolicyConfig

T0 = 1_700_000_000


@pytest.fixture(scope="session")
def station():
    return station_setup("home", seed=1234)


@pytest.fixture(scope="session")
def other_station():
    return station_setup("away", seed=5678)


@pytest.fixture(scope="session")
def germs(station):
    return {name: imprint(station, name) for name in ("alice", "bob", "charlie", "dave", "eve")}


def make_node(germ, p=1, seed=0, **policy):
    cfg = PolicyConfig(p_receiver=p, p_provider=p, **policy)
    return Node.create(germ, cfg, seed=seed, clock=lambda: T0)


def pair(x: Node, y: Node, now: int = T0):
    x.pairing_confirmed = y.pairing_confirmed = True
    return force_pairing(*open_session(x, y), now=now)


@pytest.fixture
def trio(germs):
    """alice-bob and bob-charlie paired; alice and charlie have never met."""
    alice, bob, charlie = (make_node(germs[n], seed=i) for i, n in enumerate(("alice", "bob", "charlie")))
    pair(alice, bob, T0)
    pair(bob, charlie, T0 + 60)
    return alice, bob, charlie
