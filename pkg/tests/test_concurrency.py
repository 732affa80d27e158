import threading
from dataclasses import replace

import numpy as np
import pytest

from oclreid.concurrency import DropOldestQueue, SnapshotSlot
from oclreid.extractor import init_params


def test_queue_drops_oldest():
    q = DropOldestQueue(2)
    for k in range(5):
        q.put(k)
    assert q.dropped == 3 and q.put_count == 5
    assert [q.get(0), q.get(0)] == [3, 4]
    assert q.get(timeout=0.01) is None


def test_queue_close_drains():
    q = DropOldestQueue(4)
    q.put("a")
    q.close()
    assert q.get() == "a"
    assert q.get() is None


def test_queue_threaded_delivery():
    q = DropOldestQueue(1000)
    got = []

    def consume():
        while (item := q.get()) is not None:
            got.append(item)

    t = threading.Thread(target=consume)
    t.start()
    for k in range(500):
        q.put(k)
    q.close()
    t.join(5)
    assert got == list(range(500))


def test_snapshot_publish_and_read():
    p = init_params(np.random.default_rng(0), d_raw=4, hidden=3, embed_dim=2)
    slot = SnapshotSlot(p)
    newer = replace(p, version=p.version + 1)
    slot.publish(newer)
    assert slot.read() is newer and slot.version == newer.version
    assert slot.torn_reads == 0
    with pytest.raises(ValueError):
        slot.publish(p)


def test_snapshot_detects_tampering():
    p = init_params(np.random.default_rng(0), d_raw=4, hidden=3, embed_dim=2)
    slot = SnapshotSlot(p)
    p.W1[0, 0] += 1.0  # mutate after publication
    slot.read()
    assert slot.torn_reads == 1


def test_snapshot_concurrent_reads():
    rng = np.random.default_rng(0)
    p = init_params(rng, d_raw=4, hidden=3, embed_dim=2)
    slot = SnapshotSlot(p)
    stop = threading.Event()
    seen = []

    def reader():
        while not stop.is_set():
            seen.append(slot.read().version)

    t = threading.Thread(target=reader)
    t.start()
    for v in range(1, 200):
        p = replace(p, W1=p.W1 + 0.01, version=v)
        slot.publish(p)
    stop.set()
    t.join(5)
    assert slot.torn_reads == 0
    assert seen == sorted(seen)
