"""Aligned file/device I/O, bypassing the OS cache where the filesystem allows.

Opens targets with O_DIRECT and mmap-backed page-aligned buffers; falls back
to buffered pread/pwrite when the filesystem rejects direct I/O (probed at
open). All offsets and lengths must be multiples of the logical block size.
"""

from __future__ import annotations

import mmap
import os
import threading

from .errors import StorageError


class _BufferPool:
    """Reusable page-aligned buffers for direct I/O (mmap is page-aligned)."""

    def __init__(self, max_per_size: int = 8):
        self._bufs: dict[int, list[mmap.mmap]] = {}
        self._lock = threading.Lock()
        self._max = max_per_size

    def get(self, size: int) -> mmap.mmap:
        with self._lock:
            stack = self._bufs.get(size)
            if stack:
                return stack.pop()
        return mmap.mmap(-1, size)

    def put(self, buf: mmap.mmap) -> None:
        with self._lock:
            stack = self._bufs.setdefault(len(buf), [])
            if len(stack) < self._max:
                stack.append(buf)
                return
        buf.close()

    def drain(self) -> None:
        with self._lock:
            for stack in self._bufs.values():
                for buf in stack:
                    buf.close()
            self._bufs.clear()


class BlockFile:
    """Random-access block I/O on a file or raw device.

    direct=None probes O_DIRECT support and falls back to buffered I/O;
    direct=True requires it; direct=False skips it.
    """

    def __init__(self, path: str, direct: bool | None = None):
        self.path = path
        self.read_ops = 0
        self.write_ops = 0
        self._pool = _BufferPool()
        self._fd = -1
        self.direct = False
        if direct is None or direct:
            try:
                self._fd = os.open(path, os.O_RDWR | os.O_DIRECT)
                self.direct = True
            except OSError as exc:
                if direct:
                    raise StorageError(f"direct I/O unavailable on {path}: {exc}") from exc
        if self._fd < 0:
            try:
                self._fd = os.open(path, os.O_RDWR)
            except FileNotFoundError:
                raise
            except OSError as exc:
                raise StorageError(f"cannot open {path}: {exc}") from exc
        if self.direct:
            self._probe_direct()

    def _probe_direct(self) -> None:
        # Some filesystems accept O_DIRECT at open but fail at I/O time.
        if self.size() < 512:
            return
        buf = self._pool.get(mmap.PAGESIZE)
        try:
            os.preadv(self._fd, [memoryview(buf)[:512]], 0)
        except OSError:
            os.close(self._fd)
            self._fd = os.open(self.path, os.O_RDWR)
            self.direct = False
        finally:
            self._pool.put(buf)

    def size(self) -> int:
        return os.lseek(self._fd, 0, os.SEEK_END)

    def pread(self, offset: int, length: int) -> bytes:
        self.read_ops += 1
        try:
            if not self.direct:
                data = os.pread(self._fd, length, offset)
                if len(data) != length:
                    raise StorageError(f"short read at {offset}: {len(data)}/{length}")
                return data
            buf = self._pool.get(_round_buf(length))
            try:
                view = memoryview(buf)[:length]
                done = 0
                while done < length:
                    n = os.preadv(self._fd, [view[done:]], offset + done)
                    if n <= 0:
                        raise StorageError(f"short read at {offset}: {done}/{length}")
                    done += n
                return bytes(view)
            finally:
                self._pool.put(buf)
        except OSError as exc:
            raise StorageError(f"read failed at {offset}: {exc}") from exc

    def pwrite(self, offset: int, data: bytes) -> None:
        self.write_ops += 1
        length = len(data)
        try:
            if not self.direct:
                done = 0
                while done < length:
                    done += os.pwrite(self._fd, data[done:], offset + done)
                return
            buf = self._pool.get(_round_buf(length))
            try:
                buf[:length] = data
                view = memoryview(buf)[:length]
                done = 0
                while done < length:
                    n = os.pwritev(self._fd, [view[done:]], offset + done)
                    if n <= 0:
                        raise StorageError(f"short write at {offset}: {done}/{length}")
                    done += n
            finally:
                self._pool.put(buf)
        except OSError as exc:
            raise StorageError(f"write failed at {offset}: {exc}") from exc

    def fsync(self) -> None:
        try:
            os.fdatasync(self._fd)
        except OSError:
            pass

    def close(self) -> None:
        if self._fd >= 0:
            self.fsync()
            os.close(self._fd)
            self._fd = -1
        self._pool.drain()

    def __enter__(self) -> "BlockFile":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _round_buf(length: int) -> int:
    return (length + mmap.PAGESIZE - 1) // mmap.PAGESIZE * mmap.PAGESIZE
