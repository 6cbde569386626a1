"""Replica: TCP server executing wire-protocol I/O against a backing store.

One acceptor, a reader thread per connection, a bounded number of requests
in flight per connection executed on a shared worker pool, and a per-
connection send lock. Responses may leave in any order; ids do the matching.
A protocol error tears down only the offending connection; a store error
turns into an ERROR response and the connection stays up.
"""

from __future__ import annotations

import logging
import socket
import threading
from concurrent.futures import ThreadPoolExecutor

from . import dataconn
from .dataconn import MSG_PING, MSG_READ, MSG_UNMAP, MSG_WRITE, WireMessage
from .errors import ProtocolError

log = logging.getLogger(__name__)


class ReplicaServer:
    def __init__(self, store, host: str = "127.0.0.1", port: int = 0,
                 max_inflight: int = 128, workers: int = 8):
        self.store = store
        self._listener = socket.create_server((host, port))
        self.address = self._listener.getsockname()[:2]
        self._max_inflight = max_inflight
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="replica-io")
        self._conns: set[socket.socket] = set()
        self._lock = threading.Lock()
        self._closed = False
        self._accept_thread: threading.Thread | None = None

    def start(self) -> tuple[str, int]:
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True,
                                               name="replica-accept")
        self._accept_thread.start()
        return self.address

    def serve_forever(self) -> None:
        self.start()
        self._accept_thread.join()

    def _accept_loop(self) -> None:
        while not self._closed:
            try:
                sock, peer = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                if self._closed:
                    sock.close()
                    return
                self._conns.add(sock)
            threading.Thread(target=self._serve_conn, args=(sock, peer),
                             daemon=True, name=f"replica-conn-{peer[1]}").start()

    def _serve_conn(self, sock: socket.socket, peer) -> None:
        rfile = sock.makefile("rb")
        send_lock = threading.Lock()
        inflight = threading.Semaphore(self._max_inflight)
        try:
            while True:
                msg = dataconn.read_frame(rfile)
                if msg is None:
                    return
                if msg.msg_type not in (MSG_READ, MSG_WRITE, MSG_UNMAP, MSG_PING):
                    raise ProtocolError(f"unexpected message type {msg.msg_type}")
                inflight.acquire()
                self._pool.submit(self._execute, msg, sock, send_lock, inflight)
        except (ProtocolError, OSError, ValueError) as exc:
            if not self._closed:
                log.debug("connection %s closed: %s", peer, exc)
        finally:
            rfile.close()
            with self._lock:
                self._conns.discard(sock)
            sock.close()

    def _execute(self, msg: WireMessage, sock, send_lock, inflight) -> None:
        try:
            try:
                if msg.msg_type == MSG_PING:
                    reply = dataconn.response(msg.id)
                elif msg.msg_type == MSG_READ:
                    data = self.store.read(msg.offset, msg.length)
                    reply = dataconn.response(msg.id, data)
                elif msg.msg_type == MSG_WRITE:
                    self.store.write(msg.offset, msg.payload)
                    reply = dataconn.response(msg.id)
                else:
                    self.store.unmap(msg.offset, msg.length)
                    reply = dataconn.response(msg.id)
            except Exception as exc:  # any store failure becomes an ERROR reply
                reply = dataconn.error_response(msg.id, str(exc) or type(exc).__name__)
            try:
                with send_lock:
                    sock.sendall(dataconn.encode(reply))
            except OSError:
                pass
        finally:
            inflight.release()

    def stop(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            conns = list(self._conns)
            self._conns.clear()
        try:
            self._listener.close()
        except OSError:
            pass
        for sock in conns:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        self._pool.shutdown(wait=True, cancel_futures=True)

    def __enter__(self) -> "ReplicaServer":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()
