import pytest

from helpers import fixed_clock, make_store
from veil.handshake import ServerConfig


@pytest.fixture(scope="session")
def store():
    return make_store()


@pytest.fixture(scope="session")
def server_cfg(store):
    return ServerConfig(store, clock=fixed_clock())
