import socket
import threading
import time

import numpy as np
import pytest

from distdeblur.imaging import Region
from distdeblur.partition import build_layout
from distdeblur.transport import (
    ExchangePlan, HaloLink, InProcessHub, Message, ProtocolError, SocketEndpoint, Tag, TransportError,
    build_exchange_plans, exchange_halos, pack, unpack,
)
from distdeblur.transport import _Channel


def _run(fns):
    """Run callables in threads; return their results, re-raising the first exception."""
    out, errs = [None] * len(fns), []

    def wrap(i, f):
        try:
            out[i] = f()
        except BaseException as exc:  # noqa: BLE001
            errs.append(exc)

    ts = [threading.Thread(target=wrap, args=(i, f)) for i, f in enumerate(fns)]
    for t in ts:
        t.start()
    for t in ts:
        t.join(30)
    if errs:
        raise errs[0]
    return out


def _pair_plans():
    r = Region(0, 0, 1, 3)
    return [ExchangePlan(0, (HaloLink(1, r, r, r),)), ExchangePlan(1, (HaloLink(0, r, r, r),))]


def test_single_worker_is_noop():
    hub = InProcessHub(1)
    ep = hub.endpoint(0)
    ep.barrier("x")
    assert exchange_halos(ep, ExchangePlan(0, ()), {}, 0) == {}


def test_two_worker_loopback_inprocess():
    hub = InProcessHub(2, timeout=10)
    plans = _pair_plans()
    data = {0: np.array([[1.0, 2.0, 3.0]]), 1: np.array([[-4.0, 5.5, 1e300]])}
    eps = [hub.endpoint(0), hub.endpoint(1)]
    got = _run([lambda i=i: exchange_halos(eps[i], plans[i], {1 - i: data[i]}, 7) for i in (0, 1)])
    np.testing.assert_array_equal(got[0][1], data[1])
    np.testing.assert_array_equal(got[1][0], data[0])


def _tcp_pair():
    with socket.create_server(("127.0.0.1", 0)) as srv:
        a = socket.create_connection(srv.getsockname())
        b, _ = srv.accept()
    return a, b


def _socket_pair_endpoints(timeout=10):
    a, b = _tcp_pair()
    ca, cb = _tcp_pair()
    cc, cd = _tcp_pair()
    e0 = SocketEndpoint(0, _Channel(ca), {1: _Channel(a, 1)}, timeout)
    e1 = SocketEndpoint(1, _Channel(cc), {0: _Channel(b, 0)}, timeout)
    return (e0, e1), (cb, cd)


def test_two_worker_loopback_socket():
    (e0, e1), spare = _socket_pair_endpoints()
    plans = _pair_plans()
    data = {0: np.array([[1.0, 2.0, 3.0]]), 1: np.array([[np.pi, -0.0, 2.5e-310]])}
    got = _run([lambda: exchange_halos(e0, plans[0], {1: data[0]}, 3),
                lambda: exchange_halos(e1, plans[1], {0: data[1]}, 3)])
    assert got[0][1].tobytes() == data[1].tobytes()
    assert got[1][0].tobytes() == data[0].tobytes()
    for e in (e0, e1):
        e.close()
    for s in spare:
        s.close()


def test_socket_peer_disconnect_names_peer():
    (e0, e1), spare = _socket_pair_endpoints(timeout=5)
    e1.close()
    with pytest.raises(TransportError) as info:
        e0.recv(1)
    assert info.value.peer == 1
    e0.close()
    for s in spare:
        s.close()


def test_center_of_three_by_three_talks_to_eight():
    lay = build_layout(120, 120, 3, 3, 5, "smooth_variant")
    plans = build_exchange_plans(lay)
    assert plans[4].neighbors == (0, 1, 2, 3, 5, 6, 7, 8)
    for p in plans:
        touching = [b.index for b in lay if b.index != p.worker and lay.shared_region(p.worker, b.index)]
        assert list(p.neighbors) == touching
        for lk in p.links:
            back = plans[lk.neighbor].link(p.worker)
            assert lk.send.shape == back.recv.shape and lk.remote == back.send


def test_three_by_three_exchange_conserves_bytes():
    lay = build_layout(120, 120, 3, 3, 5, "smooth_variant")
    plans = build_exchange_plans(lay)
    hub = InProcessHub(9, timeout=10)
    eps = [hub.endpoint(i) for i in range(9)]

    def worker(i):
        out = {lk.neighbor: np.full((2,) + lk.send.shape, float(i)) for lk in plans[i].links}
        for k in range(3):
            eps[i].barrier(f"{k}")
            got = exchange_halos(eps[i], plans[i], out, k)
            for j, arr in got.items():
                assert np.all(arr == j)
        return len(got)

    counts = _run([lambda i=i: worker(i) for i in range(9)])
    assert counts[4] == 8
    sent = sum(e.counters.bytes_sent for e in eps)
    assert sent == sum(e.counters.bytes_received for e in eps) > 0


def test_barrier_releases_everyone_after_last_arrival():
    hub = InProcessHub(4, timeout=10)
    arrive, leave = [0.0] * 4, [0.0] * 4

    def worker(i):
        time.sleep(0.05 * i)
        arrive[i] = time.monotonic()
        hub.endpoint(i).barrier("phase-2")
        leave[i] = time.monotonic()

    _run([lambda i=i: worker(i) for i in range(4)])
    assert min(leave) >= max(arrive)


def test_barrier_tag_mismatch():
    hub = InProcessHub(2, timeout=5)
    with pytest.raises(ProtocolError):
        _run([lambda: hub.endpoint(0).barrier("3:consensus"), lambda: hub.endpoint(1).barrier("4:consensus")])


def test_barrier_timeout_names_missing_worker():
    hub = InProcessHub(3, timeout=0.2)
    with pytest.raises(TransportError, match=r"missing workers \[2\]"):
        _run([lambda: hub.endpoint(0).barrier("a"), lambda: hub.endpoint(1).barrier("a")])


def test_desynchronized_iteration_is_protocol_error():
    hub = InProcessHub(2, timeout=5)
    plans = _pair_plans()
    e0, e1 = hub.endpoint(0), hub.endpoint(1)
    e1.send(Message(Tag(4, 2, 1, 0), np.zeros(3)))
    with pytest.raises(ProtocolError) as info:
        exchange_halos(e0, plans[0], {1: np.zeros((1, 3))}, 5)
    assert info.value.peer == 1


def test_wrong_halo_size_rejected():
    hub = InProcessHub(2, timeout=5)
    plans = _pair_plans()
    with pytest.raises(ValueError):
        exchange_halos(hub.endpoint(0), plans[0], {1: np.zeros((1, 4))}, 0)
    hub.endpoint(1).send(Message(Tag(0, 2, 1, 0), np.zeros(5)))
    with pytest.raises(ProtocolError):
        exchange_halos(hub.endpoint(0), plans[0], {1: np.zeros((1, 3))}, 0)


def test_message_wire_format():
    m = Message(Tag(3, 2, 1, 0), np.array([1.5, -2.0]))
    buf = m.encode()
    assert buf[:16] == (3).to_bytes(4, "little") + (2).to_bytes(4, "little") + (1).to_bytes(4, "little") + bytes(4)
    assert buf[16:24] == (2).to_bytes(8, "little") and len(buf) == 24 + 16
    back = Message.decode(buf)
    assert back.tag == m.tag and back.payload.tolist() == [1.5, -2.0]
    with pytest.raises(ProtocolError):
        Message.decode(buf[:-1])
    with pytest.raises(ProtocolError):
        Message.decode(buf[:10])


def test_pack_roundtrip(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal(5)
    meta, arrays = unpack(pack({"k": [1, "x"]}, {"a": a, "b": b}))
    assert meta == {"k": [1, "x"]}
    assert arrays["a"].tobytes() == a.tobytes() and arrays["b"].tobytes() == b.tobytes()
