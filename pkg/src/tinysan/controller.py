"""Controller: mirrors writes to every healthy replica, round-robins reads.

Two selectable dispatch strategies per replica:

  token  - a fixed-size slot array plus a blocking pool of slot indexes that
           double as wire ids. Submitters acquire an id, park their request
           in the slot, and the per-connection receive path completes the
           slot directly; no central worker anywhere in the path. The pool
           bounds in-flight requests and blocks when exhausted.

  legacy - the original shape: one loop worker per replica owns an id->request
           map and is the only thread that touches it, so requests and
           responses funnel through its inbox and are processed sequentially.

Writes complete once every healthy replica acknowledged; a replica that
errors or drops mid-flight is marked failed and excluded from then on, and
the write still succeeds if at least one healthy acknowledgment arrived.
"""

from __future__ import annotations

import itertools
import logging
import queue
import socket
import threading

from . import dataconn
from .dataconn import MSG_ERROR, MSG_PING, MSG_READ, MSG_RESPONSE, MSG_UNMAP, MSG_WRITE, WireMessage
from .errors import ProtocolError, StorageError, UsageError

log = logging.getLogger(__name__)

DEFAULT_CONNECTIONS = 6
DEFAULT_CAPACITY = 1024
STRATEGIES = ("token", "legacy")


class ReplicaDownError(StorageError):
    pass


class Pending:
    """One in-flight request; the issuer blocks on the completion event."""

    __slots__ = ("op", "offset", "length", "payload", "token", "data", "error", "_event", "_done")

    def __init__(self, op, offset=0, length=0, payload=b""):
        self.op = op
        self.offset = offset
        self.length = length
        self.payload = payload
        self.token = None
        self.data = b""
        self.error = None
        self._event = threading.Event()
        self._done = False

    def complete(self, data: bytes = b"") -> None:
        if self._done:
            return
        self._done = True
        self.data = data
        self._event.set()

    def fail(self, error: Exception) -> None:
        if self._done:
            return
        self._done = True
        self.error = error
        self._event.set()

    def wait(self) -> Exception | None:
        self._event.wait()
        return self.error

    def to_frame(self, msg_id: int) -> WireMessage:
        if self.op == "write":
            return WireMessage(MSG_WRITE, msg_id, self.offset, len(self.payload), self.payload)
        if self.op == "read":
            return WireMessage(MSG_READ, msg_id, self.offset, self.length)
        if self.op == "unmap":
            return WireMessage(MSG_UNMAP, msg_id, self.offset, self.length)
        return WireMessage(MSG_PING, msg_id)


class _Connection:
    """One TCP connection: a dedicated sender thread draining a frame queue
    and a receiver thread feeding responses back to the client."""

    def __init__(self, client, index: int, sock: socket.socket):
        self.client = client
        self.index = index
        self.sock = sock
        self.rfile = sock.makefile("rb")
        self.send_q: queue.SimpleQueue = queue.SimpleQueue()
        self._sender = threading.Thread(target=self._send_loop, daemon=True,
                                        name=f"ctl-send-{client.address}-{index}")
        self._receiver = threading.Thread(target=self._recv_loop, daemon=True,
                                          name=f"ctl-recv-{client.address}-{index}")

    def start(self) -> None:
        self._sender.start()
        self._receiver.start()

    def _send_loop(self) -> None:
        while True:
            frame = self.send_q.get()
            if frame is None:
                return
            try:
                if self.client.tap:
                    self.client.tap("send", self.client.address, frame)
                self.sock.sendall(dataconn.encode(frame))
            except OSError as exc:
                self.client.fail(StorageError(f"send failed: {exc}"))
                return

    def _recv_loop(self) -> None:
        try:
            while True:
                msg = dataconn.read_frame(self.rfile)
                if msg is None:
                    raise StorageError("replica closed connection")
                if self.client.tap:
                    self.client.tap("recv", self.client.address, msg)
                self.client.on_response(msg)
        except (ProtocolError, StorageError, OSError, ValueError) as exc:
            self.client.fail(StorageError(f"receive failed: {exc}"))

    def close(self) -> None:
        self.send_q.put(None)
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class ReplicaClient:
    """Connection bundle and dispatch state for one replica."""

    def __init__(self, address: str, connections: int, tap=None, on_failed=None):
        self.address = address
        self.n_connections = connections
        self.tap = tap
        self.on_failed = on_failed
        self.healthy = False
        self.closing = False
        self.conns: list[_Connection] = []
        self._conn_rr = itertools.count()
        self._fail_lock = threading.Lock()

    def start(self) -> None:
        host, _, port = self.address.rpartition(":")
        for i in range(self.n_connections):
            try:
                sock = socket.create_connection((host, int(port)), timeout=10)
            except OSError as exc:
                self._close_conns()
                raise StorageError(f"replica {self.address} unreachable: {exc}") from exc
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._handshake(sock)
            self.conns.append(_Connection(self, i, sock))
        self.healthy = True
        for conn in self.conns:
            conn.start()

    def _handshake(self, sock: socket.socket) -> None:
        # synchronous ping before the dispatch machinery takes over the socket
        try:
            sock.sendall(dataconn.encode(WireMessage(MSG_PING, 0)))
            rfile = sock.makefile("rb")
            msg = dataconn.read_frame(rfile)
            rfile.close()
            if msg is None or msg.msg_type != MSG_RESPONSE or msg.id != 0:
                raise StorageError(f"replica {self.address}: handshake (PING) failure")
        except OSError as exc:
            raise StorageError(f"replica {self.address}: handshake (PING) failure: {exc}") from exc

    def _next_conn(self) -> _Connection:
        return self.conns[next(self._conn_rr) % len(self.conns)]

    def _close_conns(self) -> None:
        for conn in self.conns:
            conn.close()

    def fail(self, error: Exception) -> None:
        with self._fail_lock:
            if not self.healthy:
                return
            self.healthy = False
        if not self.closing:
            log.warning("replica %s marked failed: %s", self.address, error)
        self._fail_inflight(error)
        self._close_conns()
        if self.on_failed and not self.closing:
            self.on_failed(self.address, error)

    def close(self) -> None:
        self.closing = True
        self.fail(StorageError("controller shut down"))

    # strategy hooks
    def submit(self, pending: Pending) -> Pending:
        raise NotImplementedError

    def finish(self, pending: Pending) -> None:
        raise NotImplementedError

    def on_response(self, msg: WireMessage) -> None:
        raise NotImplementedError

    def _fail_inflight(self, error: Exception) -> None:
        raise NotImplementedError


class TokenReplicaClient(ReplicaClient):
    """Modified path: ids come from a blocking pool and index a fixed slot
    array; each id has exactly one owner at any instant, so no thread ever
    races another on a slot and no loop worker exists."""

    def __init__(self, address, connections, capacity=DEFAULT_CAPACITY, tap=None, on_failed=None):
        super().__init__(address, connections, tap=tap, on_failed=on_failed)
        self.capacity = capacity
        self.slots: list[Pending | None] = [None] * capacity
        self.pool: queue.Queue = queue.Queue()
        for token in range(capacity):
            self.pool.put(token)

    def submit(self, pending: Pending) -> Pending:
        token = self._acquire_token()
        pending.token = token
        self.slots[token] = pending
        self._next_conn().send_q.put(pending.to_frame(token))
        if not self.healthy:
            pending.fail(ReplicaDownError(f"replica {self.address} down"))
        return pending

    def _acquire_token(self) -> int:
        while True:
            if not self.healthy:
                raise ReplicaDownError(f"replica {self.address} down")
            try:
                return self.pool.get(timeout=0.05)
            except queue.Empty:
                continue

    def finish(self, pending: Pending) -> None:
        token = pending.token
        if token is None:
            return
        pending.token = None
        self.slots[token] = None
        self.pool.put(token)

    def on_response(self, msg: WireMessage) -> None:
        pending = self.slots[msg.id] if 0 <= msg.id < self.capacity else None
        if pending is None:
            raise StorageError(f"response for unknown id {msg.id}")
        if msg.msg_type == MSG_RESPONSE:
            pending.complete(msg.payload)
        elif msg.msg_type == MSG_ERROR:
            pending.fail(StorageError(msg.payload.decode("utf-8", "replace")))
        else:
            raise StorageError(f"unexpected frame type {msg.msg_type}")

    def _fail_inflight(self, error: Exception) -> None:
        for pending in list(self.slots):
            if pending is not None:
                pending.fail(error)

    def pool_size(self) -> int:
        return self.pool.qsize()


class LegacyReplicaClient(ReplicaClient):
    """Original path: a single loop worker owns the id->request map; requests
    and responses are funneled through its inbox and handled sequentially."""

    def __init__(self, address, connections, tap=None, on_failed=None):
        super().__init__(address, connections, tap=tap, on_failed=on_failed)
        self.inbox: queue.SimpleQueue = queue.SimpleQueue()
        self.messages: dict[int, Pending] = {}
        self._next_id = 0
        self.loop_thread = threading.Thread(target=self._loop, daemon=True,
                                            name=f"ctl-loop-{address}")

    def start(self) -> None:
        super().start()
        self.loop_thread.start()

    def submit(self, pending: Pending) -> Pending:
        if not self.healthy:
            raise ReplicaDownError(f"replica {self.address} down")
        self.inbox.put(("req", pending))
        return pending

    def finish(self, pending: Pending) -> None:
        pending.token = None

    def on_response(self, msg: WireMessage) -> None:
        self.inbox.put(("resp", msg))

    def _fail_inflight(self, error: Exception) -> None:
        self.inbox.put(("down", error))

    def _loop(self) -> None:
        while True:
            item = self.inbox.get()
            if item is None:
                return
            kind, payload = item
            if kind == "req":
                pending = payload
                if not self.healthy:
                    pending.fail(ReplicaDownError(f"replica {self.address} down"))
                    continue
                msg_id = self._next_id
                self._next_id = (msg_id + 1) & 0xFFFFFFFF
                self.messages[msg_id] = pending
                pending.token = msg_id
                self._next_conn().send_q.put(pending.to_frame(msg_id))
            elif kind == "resp":
                msg = payload
                pending = self.messages.pop(msg.id, None)
                if pending is None:
                    continue
                if msg.msg_type == MSG_RESPONSE:
                    pending.complete(msg.payload)
                elif msg.msg_type == MSG_ERROR:
                    pending.fail(StorageError(msg.payload.decode("utf-8", "replace")))
                else:
                    pending.fail(StorageError(f"unexpected frame type {msg.msg_type}"))
            else:  # down
                error = payload
                for pending in self.messages.values():
                    pending.fail(error)
                self.messages.clear()

    def close(self) -> None:
        super().close()
        self.inbox.put(None)


class _NullBackend:
    """Frontend-only mode: requests complete in a small completer stage with
    no wire traffic at all."""

    def __init__(self, workers: int = 4):
        self._q: queue.SimpleQueue = queue.SimpleQueue()
        self._threads = [
            threading.Thread(target=self._run, daemon=True, name=f"null-backend-{i}")
            for i in range(workers)
        ]
        for t in self._threads:
            t.start()

    def submit(self, pending: Pending) -> Pending:
        self._q.put(pending)
        return pending

    def _run(self) -> None:
        while True:
            pending = self._q.get()
            if pending is None:
                return
            if pending.op == "read":
                pending.complete(bytes(pending.length))
            else:
                pending.complete()

    def close(self) -> None:
        for _ in self._threads:
            self._q.put(None)
        for t in self._threads:
            t.join(timeout=2)


class Controller:
    """I/O router over a set of replicas (or over nothing, in null-backend
    mode). Safe for concurrent submitters."""

    def __init__(self, volume_size: int, block_size: int = 4096, strategy: str = "token",
                 connections_per_replica: int = DEFAULT_CONNECTIONS,
                 capacity: int = DEFAULT_CAPACITY, null_backend: bool = False,
                 null_workers: int = 4, tap=None, on_replica_failed=None):
        if strategy not in STRATEGIES:
            raise UsageError(f"unknown strategy {strategy!r}")
        if connections_per_replica < 1 or capacity < 1:
            raise UsageError("connections_per_replica and capacity must be >= 1")
        self.volume_size = volume_size
        self.block_size = block_size
        self.strategy = strategy
        self.connections_per_replica = connections_per_replica
        self.capacity = capacity
        self.null_backend = null_backend
        self._null_workers = null_workers
        self.tap = tap
        self.on_replica_failed = on_replica_failed
        self.clients: list[ReplicaClient] = []
        self._null: _NullBackend | None = None
        self._read_rr = itertools.count()
        self._started = False

    def start(self, replicas=()):
        if self._started:
            raise UsageError("controller already started")
        if self.null_backend:
            self._null = _NullBackend(self._null_workers)
            self._started = True
            return self
        replicas = list(replicas)
        if not replicas:
            raise UsageError("no replicas given")
        for address in replicas:
            if self.strategy == "token":
                client = TokenReplicaClient(address, self.connections_per_replica,
                                            capacity=self.capacity, tap=self.tap,
                                            on_failed=self.on_replica_failed)
            else:
                client = LegacyReplicaClient(address, self.connections_per_replica,
                                             tap=self.tap, on_failed=self.on_replica_failed)
            try:
                client.start()
            except StorageError:
                self.close()
                raise
            self.clients.append(client)
        self._started = True
        return self

    # ------------------------------------------------------------------- I/O

    def _check_io(self, offset: int, length: int) -> None:
        bs = self.block_size
        if offset % bs or length % bs:
            raise UsageError(f"offset/length must be multiples of {bs}")
        if offset < 0 or length <= 0 or offset + length > self.volume_size:
            raise UsageError("I/O beyond volume end")

    def _healthy(self) -> list[ReplicaClient]:
        return [c for c in self.clients if c.healthy]

    def write(self, offset: int, data: bytes) -> None:
        self._fan_out("write", offset, len(data), data)

    def unmap(self, offset: int, length: int) -> None:
        self._fan_out("unmap", offset, length, b"")

    def _fan_out(self, op: str, offset: int, length: int, data: bytes) -> None:
        self._check_io(offset, length)
        if self._null is not None:
            self._null.submit(Pending(op, offset, length, data)).wait()
            return
        while True:
            clients = self._healthy()
            if not clients:
                raise StorageError(f"{op} failed: all replicas failed")
            issued = []
            for client in clients:
                try:
                    issued.append((client, client.submit(Pending(op, offset, length, data))))
                except ReplicaDownError:
                    continue
            acked = 0
            for client, pending in issued:
                error = pending.wait()
                client.finish(pending)
                if error is None:
                    acked += 1
                else:
                    client.fail(error)
            if acked:
                return
            # every submission failed; the loop re-evaluates what is healthy

    def read(self, offset: int, length: int) -> bytes:
        self._check_io(offset, length)
        if self._null is not None:
            pending = self._null.submit(Pending("read", offset, length))
            pending.wait()
            return pending.data
        for _ in range(2):  # chosen replica plus one retry
            clients = self._healthy()
            if not clients:
                break
            client = clients[next(self._read_rr) % len(clients)]
            try:
                pending = client.submit(Pending("read", offset, length))
            except ReplicaDownError:
                continue
            error = pending.wait()
            client.finish(pending)
            if error is None:
                return pending.data
            client.fail(error)
        raise StorageError("read failed: no healthy replica")

    # --------------------------------------------------------------- control

    def healthy_replicas(self) -> list[str]:
        return [c.address for c in self._healthy()]

    def close(self) -> None:
        if self._null is not None:
            self._null.close()
            self._null = None
        for client in self.clients:
            client.close()
