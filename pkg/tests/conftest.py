import numpy as np
import pytest

from livectr.sim import InteractionEvent


def make_log(sessions):
    """Build a sorted live event log.

    ``sessions`` is a list of ``(session_id, enter, exit, [(behavior, ts), ...])``.
    """
    rows = []
    for i, (sid, enter, exit_, beh) in enumerate(sessions):
        rows.append((enter, sid, 0, "impression"))
        for b, ts in beh:
            rows.append((ts, sid, 1, b))
        rows.append((exit_, sid, 2, "exit"))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    return [InteractionEvent(i, sid % 7, sid % 3, "live", b, float(ts), sid, 1.0 if b == "gift" else None)
            for i, (ts, sid, _, b) in enumerate(rows)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
