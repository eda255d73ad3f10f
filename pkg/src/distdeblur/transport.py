"""Halo exchange and barriers over two interchangeable backends.

``InProcessHub`` connects worker threads through bounded queues; the socket
backend connects worker processes over TCP. Both expose the same endpoint
interface (``send``, ``recv``, ``barrier``) so the worker loop is oblivious to
which one it runs on.

Wire format (all integers little-endian, fixed width):

* frame: ``kind`` (4 ASCII bytes), ``sender`` (u32), body length (u64), body;
* halo body: iteration, phase, sender, receiver (u32 each), value count (u64),
  then the float64 payload;
* handshake body: protocol version (u32), block id (u32).
"""

from __future__ import annotations

import json
import logging
import os
import queue
import selectors
import socket
import struct
import subprocess
import sys
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import Region
from .partition import BlockLayout, overlap_pairs

__all__ = [
    "PROTOCOL_VERSION",
    "DEFAULT_TIMEOUT",
    "TransportError",
    "ProtocolError",
    "Tag",
    "Message",
    "HaloLink",
    "ExchangePlan",
    "build_exchange_plans",
    "exchange_halos",
    "InProcessHub",
    "SocketEndpoint",
    "pack",
    "unpack",
    "run_socket_job",
    "connect_worker",
]

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
DEFAULT_TIMEOUT = 300.0
PHASE_CONSENSUS = 2
UNASSIGNED = 0xFFFFFFFF

_FRAME = struct.Struct("<4sIQ")
_HALO = struct.Struct("<IIIIQ")
_HELLO = struct.Struct("<II")
_PORT = struct.Struct("<I")


class TransportError(RuntimeError):
    """Communication failure; ``peer`` names the worker at fault when known."""

    def __init__(self, message, peer=None):
        super().__init__(message)
        self.peer = peer


class ProtocolError(TransportError):
    """Peers disagree on where they are in the protocol (tags, versions, sizes)."""


# -- messages -----------------------------------------------------------------


@dataclass(frozen=True)
class Tag:
    iteration: int
    phase: int
    sender: int
    receiver: int


@dataclass(frozen=True)
class Message:
    tag: Tag
    payload: np.ndarray  # float64, any shape; flattened on the wire

    def encode(self) -> bytes:
        data = np.ascontiguousarray(self.payload, dtype="<f8")
        t = self.tag
        return _HALO.pack(t.iteration, t.phase, t.sender, t.receiver, data.size) + data.tobytes()

    @classmethod
    def decode(cls, buf: bytes) -> "Message":
        if len(buf) < _HALO.size:
            raise ProtocolError(f"halo message truncated at {len(buf)} bytes")
        it, ph, snd, rcv, count = _HALO.unpack_from(buf)
        if len(buf) != _HALO.size + 8 * count:
            raise ProtocolError(f"halo payload announces {count} values but carries {len(buf) - _HALO.size} bytes")
        # copy out of the receive buffer so the caller owns a fresh array
        payload = np.frombuffer(buf, dtype="<f8", offset=_HALO.size, count=count).astype(np.float64)
        return cls(Tag(it, ph, snd, rcv), payload)


# -- exchange plans -----------------------------------------------------------


@dataclass(frozen=True)
class HaloLink:
    neighbor: int
    send: Region  # pixels this worker sends, in its own block coordinates
    recv: Region  # where the neighbor's pixels land, in this worker's coordinates
    remote: Region  # the same pixels in the neighbor's coordinates


@dataclass(frozen=True)
class ExchangePlan:
    worker: int
    links: tuple  # HaloLink, ascending neighbor id

    @property
    def neighbors(self) -> tuple:
        return tuple(link.neighbor for link in self.links)

    def link(self, neighbor: int) -> HaloLink:
        for lk in self.links:
            if lk.neighbor == neighbor:
                return lk
        raise KeyError(f"worker {self.worker} has no link to {neighbor}")


def build_exchange_plans(layout: BlockLayout) -> list:
    """One plan per block, derived from the layout's overlap pairs."""
    links = [[] for _ in range(len(layout))]
    for p in overlap_pairs(layout):
        links[p.i].append(HaloLink(p.j, p.local_i, p.local_i, p.local_j))
        links[p.j].append(HaloLink(p.i, p.local_j, p.local_j, p.local_i))
    return [ExchangePlan(i, tuple(sorted(ls, key=lambda lk: lk.neighbor))) for i, ls in enumerate(links)]


def exchange_halos(endpoint, plan: ExchangePlan, outgoing: dict, iteration: int,
                   phase: int = PHASE_CONSENSUS) -> dict:
    """Send ``outgoing[j]`` to every neighbor ``j`` and return what each neighbor sent back.

    Arrays are ``(channels, h, w)`` or ``(h, w)`` over the link's send region;
    received arrays come back with the same channel count over the receive region.
    """
    me = plan.worker
    if set(outgoing) != set(plan.neighbors):
        raise ValueError(f"worker {me}: outgoing keys {sorted(outgoing)} != neighbors {list(plan.neighbors)}")
    lead = {}
    for lk in plan.links:
        arr = np.asarray(outgoing[lk.neighbor], dtype=np.float64)
        if arr.shape[-2:] != lk.send.shape:
            raise ValueError(
                f"worker {me}: halo for {lk.neighbor} has shape {arr.shape}, plan expects {lk.send.shape}"
            )
        lead[lk.neighbor] = arr.shape[:-2]
        endpoint.send(Message(Tag(iteration, phase, me, lk.neighbor), arr))
    incoming = {}
    for lk in plan.links:
        msg = endpoint.recv(lk.neighbor)
        want = Tag(iteration, phase, lk.neighbor, me)
        if msg.tag != want:
            raise ProtocolError(f"worker {me}: expected {want}, received {msg.tag}", peer=lk.neighbor)
        shape = lead[lk.neighbor] + lk.recv.shape
        if msg.payload.size != int(np.prod(shape)):
            raise ProtocolError(
                f"worker {me}: halo from {lk.neighbor} has {msg.payload.size} values, expected {int(np.prod(shape))}",
                peer=lk.neighbor,
            )
        incoming[lk.neighbor] = msg.payload.reshape(shape)
    return incoming


# -- in-process backend -------------------------------------------------------


class _Counters:
    def __init__(self):
        self.bytes_sent = 0
        self.bytes_received = 0


class InProcessHub:
    """Shared state for ``n`` worker threads: one bounded queue per directed pair and a barrier.

    A halo exchange puts at most one message on each directed channel before
    the next barrier, so a capacity of two never blocks a sender.
    """

    def __init__(self, n_workers: int, timeout: float = DEFAULT_TIMEOUT, capacity: int = 2):
        if n_workers < 1:
            raise ValueError("need at least one worker")
        self.n = n_workers
        self.timeout = timeout
        self._queues = {}
        self._qlock = threading.Lock()
        self._capacity = capacity
        self._cond = threading.Condition()
        self._arrived = {}
        self._generation = 0
        self._error = None

    def endpoint(self, rank: int) -> "InProcessEndpoint":
        if not 0 <= rank < self.n:
            raise ValueError(f"rank {rank} out of range for {self.n} workers")
        return InProcessEndpoint(self, rank)

    def _queue(self, sender, receiver):
        with self._qlock:
            key = (sender, receiver)
            if key not in self._queues:
                self._queues[key] = queue.Queue(maxsize=self._capacity)
            return self._queues[key]

    def abort(self, exc: BaseException) -> None:
        """Wake every waiting worker with ``exc``."""
        with self._cond:
            if self._error is None:
                self._error = exc if isinstance(exc, TransportError) else TransportError(str(exc))
            self._cond.notify_all()

    def _check(self):
        if self._error is not None:
            raise self._error

    def barrier(self, rank: int, tag: str) -> None:
        with self._cond:
            self._check()
            self._arrived[rank] = tag
            if len(set(self._arrived.values())) > 1:
                self._error = ProtocolError(f"barrier tag mismatch: {dict(sorted(self._arrived.items()))}")
                self._cond.notify_all()
                raise self._error
            if len(self._arrived) == self.n:
                self._arrived = {}
                self._generation += 1
                self._cond.notify_all()
                return
            gen = self._generation
            deadline = time.monotonic() + self.timeout
            while self._generation == gen:
                self._check()
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    missing = sorted(set(range(self.n)) - set(self._arrived))
                    self._error = TransportError(
                        f"barrier {tag!r} timed out after {self.timeout:g} s; missing workers {missing}",
                        peer=missing[0] if missing else None,
                    )
                    self._cond.notify_all()
                    raise self._error
                self._cond.wait(remaining)


class InProcessEndpoint:
    def __init__(self, hub: InProcessHub, rank: int):
        self.hub = hub
        self.rank = rank
        self.counters = _Counters()

    def send(self, msg: Message) -> None:
        q = self.hub._queue(self.rank, msg.tag.receiver)
        deadline = time.monotonic() + self.hub.timeout
        while True:
            self.hub._check()
            try:
                q.put(msg, timeout=0.05)
                break
            except queue.Full:
                if time.monotonic() > deadline:
                    raise TransportError(f"send to worker {msg.tag.receiver} timed out", peer=msg.tag.receiver)
        self.counters.bytes_sent += 8 * msg.payload.size

    def recv(self, sender: int) -> Message:
        q = self.hub._queue(sender, self.rank)
        deadline = time.monotonic() + self.hub.timeout
        while True:
            self.hub._check()
            try:
                msg = q.get(timeout=0.05)
                break
            except queue.Empty:
                if time.monotonic() > deadline:
                    raise TransportError(f"worker {self.rank}: no halo from worker {sender}", peer=sender)
        self.counters.bytes_received += 8 * msg.payload.size
        return msg

    def barrier(self, tag: str) -> None:
        self.hub.barrier(self.rank, tag)


# -- socket framing -----------------------------------------------------------


def pack(meta: dict, arrays: dict | None = None) -> bytes:
    """JSON metadata plus named float64 arrays in one byte string."""
    arrays = arrays or {}
    desc = {"meta": meta, "arrays": [[k, list(np.shape(v))] for k, v in arrays.items()]}
    head = json.dumps(desc).encode()
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values())
    return struct.pack("<Q", len(head)) + head + body


def unpack(buf: bytes):
    (n,) = struct.unpack_from("<Q", buf)
    desc = json.loads(buf[8:8 + n].decode())
    offset = 8 + n
    arrays = {}
    for name, shape in desc["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(buf, "<f8", count, offset).astype(np.float64).reshape(shape)
        offset += 8 * count
    return desc["meta"], arrays


class _Channel:
    """A framed, thread-safe-for-sending TCP connection."""

    def __init__(self, sock: socket.socket, peer=None):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock
        self.peer = peer
        self._lock = threading.Lock()

    def send(self, kind: bytes, sender: int, body: bytes = b"") -> None:
        with self._lock:
            self.sock.sendall(_FRAME.pack(kind, sender, len(body)) + body)

    def _exact(self, n):
        chunks, got = [], 0
        while got < n:
            chunk = self.sock.recv(min(n - got, 1 << 20))
            if not chunk:
                raise ConnectionError("connection closed")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def recv(self):
        kind, sender, length = _FRAME.unpack(self._exact(_FRAME.size))
        return kind, sender, self._exact(length) if length else b""

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


_DISCONNECT = object()


class SocketEndpoint:
    """Worker side of the socket backend: direct peer links plus a coordinator link for barriers."""

    def __init__(self, rank: int, coordinator: _Channel, peers: dict, timeout: float = DEFAULT_TIMEOUT):
        self.rank = rank
        self.timeout = timeout
        self.counters = _Counters()
        self._coord = coordinator
        self._peers = peers
        self._inbox = {j: queue.Queue() for j in peers}
        self._control = queue.Queue()
        self._threads = []
        for j, ch in peers.items():
            self._spawn(self._pump_peer, j, ch)
        self._spawn(self._pump_coordinator)

    def _spawn(self, fn, *args):
        t = threading.Thread(target=fn, args=args, daemon=True)
        t.start()
        self._threads.append(t)

    def _pump_peer(self, j, ch):
        try:
            while True:
                kind, _, body = ch.recv()
                if kind != b"HALO":
                    raise ProtocolError(f"unexpected frame {kind!r} from worker {j}", peer=j)
                self._inbox[j].put(Message.decode(body))
        except Exception as exc:  # noqa: BLE001 - forwarded to the reader
            self._inbox[j].put((_DISCONNECT, exc))

    def _pump_coordinator(self):
        try:
            while True:
                kind, _, body = self._coord.recv()
                self._control.put((kind, body))
        except Exception as exc:  # noqa: BLE001
            self._control.put((_DISCONNECT, exc))

    def send(self, msg: Message) -> None:
        j = msg.tag.receiver
        try:
            self._peers[j].send(b"HALO", self.rank, msg.encode())
        except OSError as exc:
            raise TransportError(f"worker {self.rank}: send to worker {j} failed: {exc}", peer=j) from exc
        self.counters.bytes_sent += 8 * msg.payload.size

    def recv(self, sender: int) -> Message:
        try:
            item = self._inbox[sender].get(timeout=self.timeout)
        except queue.Empty:
            raise TransportError(f"worker {self.rank}: no halo from worker {sender}", peer=sender) from None
        if isinstance(item, tuple) and item[0] is _DISCONNECT:
            raise TransportError(f"worker {self.rank}: lost worker {sender} ({item[1]})", peer=sender)
        self.counters.bytes_received += 8 * item.payload.size
        return item

    def barrier(self, tag: str) -> None:
        self._coord.send(b"BARR", self.rank, tag.encode())
        try:
            kind, body = self._control.get(timeout=self.timeout)
        except queue.Empty:
            raise TransportError(f"worker {self.rank}: barrier {tag!r} timed out") from None
        if kind is _DISCONNECT:
            raise TransportError(f"worker {self.rank}: lost coordinator ({body})")
        if kind == b"ABRT":
            raise TransportError(f"worker {self.rank}: run aborted: {body.decode()}")
        if kind != b"RELS" or body.decode() != tag:
            raise ProtocolError(f"worker {self.rank}: barrier {tag!r} released as {kind!r} {body!r}")

    def finish(self, body: bytes) -> None:
        self._coord.send(b"DONE", self.rank, body)

    def fail(self, text: str) -> None:
        try:
            self._coord.send(b"FAIL", self.rank, text.encode())
        except OSError:
            pass

    def close(self):
        for ch in self._peers.values():
            ch.close()
        self._coord.close()


def _hello(ch: _Channel, rank: int):
    ch.send(b"HELO", rank, _HELLO.pack(PROTOCOL_VERSION, rank))


def _expect_hello(ch: _Channel):
    kind, _, body = ch.recv()
    if kind != b"HELO":
        raise ProtocolError(f"expected handshake, got {kind!r}")
    version, rank = _HELLO.unpack(body)
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"protocol version {version} != {PROTOCOL_VERSION}", peer=rank)
    return rank


def connect_worker(host: str, port: int, timeout: float = DEFAULT_TIMEOUT):
    """Worker-side startup.

    Returns ``(rank, job_body, addresses, wire)`` where ``wire(neighbors)``
    finishes the setup once the worker knows its neighbors and returns a
    :class:`SocketEndpoint`.
    """
    coord = _Channel(socket.create_connection((host, port), timeout=timeout))
    coord.sock.settimeout(None)
    _hello(coord, UNASSIGNED)
    kind, rank, job = coord.recv()
    if kind != b"JOB_":
        raise ProtocolError(f"expected job, got {kind!r}")

    listener = socket.create_server((host, 0))
    coord.send(b"PORT", rank, _PORT.pack(listener.getsockname()[1]))
    kind, _, addr_body = coord.recv()
    if kind != b"ADDR":
        raise ProtocolError(f"expected address table, got {kind!r}")
    addresses = {int(k): (h, p) for k, (h, p) in json.loads(addr_body.decode()).items()}

    def wire(neighbors) -> SocketEndpoint:
        peers = {}
        for j in sorted(n for n in neighbors if n < rank):
            ch = _Channel(socket.create_connection(addresses[j], timeout=timeout), j)
            ch.sock.settimeout(None)
            _hello(ch, rank)
            peers[j] = ch
        expected = {n for n in neighbors if n > rank}
        listener.settimeout(timeout)
        while expected - set(peers):
            try:
                conn, _ = listener.accept()
            except socket.timeout:
                raise TransportError(
                    f"worker {rank}: workers {sorted(expected - set(peers))} never connected"
                ) from None
            conn.settimeout(None)
            ch = _Channel(conn)
            j = _expect_hello(ch)
            if j not in expected or j in peers:
                raise ProtocolError(f"worker {rank}: unexpected peer {j}", peer=j)
            ch.peer = j
            peers[j] = ch
        listener.close()
        return SocketEndpoint(rank, coord, peers, timeout)

    return rank, job, addresses, wire


def _worker_env():
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parents[1])
    env["PYTHONPATH"] = src + (os.pathsep + env["PYTHONPATH"] if env.get("PYTHONPATH") else "")
    return env


def run_socket_job(jobs: list, host: str = "127.0.0.1", timeout: float = DEFAULT_TIMEOUT,
                   module: str = "distdeblur.worker") -> list:
    """Coordinate one socket run: spawn a process per job, hand out jobs and addresses,
    serve barriers, and collect each worker's result body (in rank order).

    ``jobs[i]`` is the opaque job body for rank ``i``. The coordinator carries no
    halo traffic; it only relays barrier arrivals and releases.
    """
    n = len(jobs)
    server = socket.create_server((host, 0))
    server.settimeout(timeout)
    port = server.getsockname()[1]
    procs = [
        subprocess.Popen([sys.executable, "-m", module, host, str(port)], env=_worker_env())
        for _ in range(n)
    ]
    chans = []
    try:
        for _ in range(n):
            try:
                conn, _ = server.accept()
            except socket.timeout:
                dead = [i for i, p in enumerate(procs) if p.poll() is not None]
                raise TransportError(f"only {len(chans)} of {n} workers connected (exited: {dead})") from None
            conn.settimeout(timeout)
            ch = _Channel(conn, len(chans))
            if _expect_hello(ch) != UNASSIGNED:
                raise ProtocolError("worker announced a block id before assignment")
            chans.append(ch)
        for rank, ch in enumerate(chans):
            ch.send(b"JOB_", rank, jobs[rank])
        addresses = {}
        for rank, ch in enumerate(chans):
            kind, _, body = ch.recv()
            if kind != b"PORT":
                raise ProtocolError(f"worker {rank}: expected port, got {kind!r}", peer=rank)
            addresses[rank] = (host, _PORT.unpack(body)[0])
        table = json.dumps({str(k): list(v) for k, v in addresses.items()}).encode()
        for rank, ch in enumerate(chans):
            ch.send(b"ADDR", rank, table)
        return _serve(chans, timeout)
    finally:
        for ch in chans:
            ch.close()
        server.close()
        for p in procs:
            try:
                p.wait(timeout=10)
            except subprocess.TimeoutExpired:
                p.kill()
                p.wait()


def _serve(chans, timeout):
    n = len(chans)
    sel = selectors.DefaultSelector()
    for rank, ch in enumerate(chans):
        ch.sock.settimeout(None)
        sel.register(ch.sock, selectors.EVENT_READ, rank)
    waiting, tag = set(), None
    results = [None] * n

    def abort(reason):
        for ch in chans:
            try:
                ch.send(b"ABRT", 0, reason.encode())
            except OSError:
                pass

    try:
        while any(r is None for r in results):
            events = sel.select(timeout)
            if not events:
                pending = sorted(set(range(n)) - waiting) if waiting else [i for i, r in enumerate(results) if r is None]
                reason = f"no progress for {timeout:g} s; waiting on workers {pending}"
                abort(reason)
                raise TransportError(reason, peer=pending[0] if pending else None)
            for key, _ in events:
                rank = key.data
                try:
                    kind, _, body = chans[rank].recv()
                except (ConnectionError, OSError):
                    sel.unregister(key.fileobj)
                    reason = f"worker {rank} disconnected"
                    abort(reason)
                    raise TransportError(reason, peer=rank) from None
                if kind == b"BARR":
                    t = body.decode()
                    if tag is None:
                        tag = t
                    elif t != tag:
                        reason = f"barrier tag mismatch: worker {rank} at {t!r}, others at {tag!r}"
                        abort(reason)
                        raise ProtocolError(reason, peer=rank)
                    waiting.add(rank)
                    if len(waiting) == n:
                        for ch in chans:
                            ch.send(b"RELS", 0, tag.encode())
                        waiting, tag = set(), None
                elif kind == b"DONE":
                    results[rank] = body
                    sel.unregister(key.fileobj)
                elif kind == b"FAIL":
                    reason = f"worker {rank} failed: {body.decode()}"
                    abort(reason)
                    raise TransportError(reason, peer=rank)
                else:
                    raise ProtocolError(f"unexpected frame {kind!r} from worker {rank}", peer=rank)
    finally:
        sel.close()
    return results
