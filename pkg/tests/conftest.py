import numpy as np
import pytest

from synhat.types import HAT, Event


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_hat(times, coords=None, duration=3600.0 * 4, trace_id="t0"):
    coords = coords or [(40.0, -74.0)] * len(times)
    events = tuple(
        Event(activity_id=f"p{i}", lat=c[0], lon=c[1], timestamp=t)
        for i, (t, c) in enumerate(zip(times, coords))
    )
    return HAT(trace_id=trace_id, events=events, duration=duration)


@pytest.fixture
def simple_hat():
    return make_hat([100.0, 900.0, 2000.0])
