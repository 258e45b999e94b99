"""Key-value cache access: a RESP2 client (SET/GET/DEL with EX) and an
in-memory backend with the same interface.

Every socket call is bounded by the client timeout, so no call can block
forever.  Failures surface as distinct exception types.
"""

from __future__ import annotations

import os
import socket
import socketserver
import threading
import time
from urllib.parse import urlparse

ENV_URL = "CITYFLOW_CACHE_URL"


class CacheError(Exception):
    pass


class CacheConnectionRefused(CacheError):
    pass


class CacheTimeout(CacheError):
    pass


class CacheProtocolError(CacheError):
    pass


class CacheServerError(CacheError):
    """The server answered with a RESP error reply."""


def encode_command(*args) -> bytes:
    parts = [b"*%d\r\n" % len(args)]
    for a in args:
        if isinstance(a, str):
            a = a.encode()
        elif isinstance(a, int):
            a = str(a).encode()
        parts.append(b"$%d\r\n%s\r\n" % (len(a), a))
    return b"".join(parts)


class _Reader:
    def __init__(self, recv):
        self._recv = recv
        self._buf = b""

    def _fill(self):
        chunk = self._recv()
        if not chunk:
            raise CacheProtocolError("connection closed mid-reply")
        self._buf += chunk

    def line(self) -> bytes:
        while b"\r\n" not in self._buf:
            self._fill()
        line, self._buf = self._buf.split(b"\r\n", 1)
        return line

    def exact(self, n: int) -> bytes:
        while len(self._buf) < n + 2:
            self._fill()
        data, tail = self._buf[:n], self._buf[n:n + 2]
        if tail != b"\r\n":
            raise CacheProtocolError("bulk string not terminated by CRLF")
        self._buf = self._buf[n + 2:]
        return data

    def reply(self):
        line = self.line()
        if not line:
            raise CacheProtocolError("empty reply line")
        kind, body = line[:1], line[1:]
        try:
            if kind == b"+":
                return body.decode()
            if kind == b"-":
                return CacheServerError(body.decode(errors="replace"))
            if kind == b":":
                return int(body)
            if kind == b"$":
                n = int(body)
                return None if n == -1 else self.exact(n)
            if kind == b"*":
                n = int(body)
                return None if n == -1 else [self.reply() for _ in range(n)]
        except ValueError as e:
            raise CacheProtocolError(f"malformed reply {line!r}") from e
        raise CacheProtocolError(f"unknown reply type {kind!r}")


class RespClient:
    def __init__(self, host: str = "127.0.0.1", port: int = 6379, timeout: float = 2.0):
        self.host, self.port, self.timeout = host, port, timeout
        self._sock: socket.socket | None = None
        self._reader: _Reader | None = None

    def _connect(self):
        try:
            sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        except ConnectionRefusedError as e:
            raise CacheConnectionRefused(f"{self.host}:{self.port} refused the connection") from e
        except socket.timeout as e:
            raise CacheTimeout(f"connecting to {self.host}:{self.port} timed out") from e
        except OSError as e:
            raise CacheConnectionRefused(f"cannot reach {self.host}:{self.port}: {e}") from e
        sock.settimeout(self.timeout)
        self._sock = sock
        self._reader = _Reader(lambda: sock.recv(65536))

    def close(self):
        if self._sock is not None:
            self._sock.close()
        self._sock = self._reader = None

    def execute(self, *args):
        if self._sock is None:
            self._connect()
        try:
            self._sock.sendall(encode_command(*args))
            reply = self._reader.reply()
        except socket.timeout as e:
            self.close()
            raise CacheTimeout(f"{args[0]} timed out after {self.timeout}s") from e
        except CacheProtocolError:
            self.close()
            raise
        except OSError as e:
            self.close()
            raise CacheConnectionRefused(f"connection lost: {e}") from e
        if isinstance(reply, CacheServerError):
            raise reply
        return reply

    def set(self, key: str, value: bytes, ttl: int | None = None) -> None:
        args = ["SET", key, value] + (["EX", int(ttl)] if ttl is not None else [])
        if ttl is not None and int(ttl) <= 0:
            raise ValueError("ttl must be a positive number of seconds")
        reply = self.execute(*args)
        if reply != "OK":
            raise CacheProtocolError(f"unexpected SET reply {reply!r}")

    def get(self, key: str) -> bytes | None:
        reply = self.execute("GET", key)
        if reply is not None and not isinstance(reply, bytes):
            raise CacheProtocolError(f"unexpected GET reply {reply!r}")
        return reply

    def delete(self, key: str) -> int:
        reply = self.execute("DEL", key)
        if not isinstance(reply, int):
            raise CacheProtocolError(f"unexpected DEL reply {reply!r}")
        return reply


class MemoryKV:
    """Dictionary-backed cache honouring TTLs against ``clock``."""

    def __init__(self, clock=time.monotonic):
        self._clock = clock
        self._data: dict[str, tuple[bytes, float | None]] = {}
        self._lock = threading.Lock()

    def set(self, key: str, value: bytes, ttl: int | None = None) -> None:
        if ttl is not None and ttl <= 0:
            raise ValueError("ttl must be a positive number of seconds")
        with self._lock:
            self._data[key] = (bytes(value), None if ttl is None else self._clock() + ttl)

    def get(self, key: str) -> bytes | None:
        with self._lock:
            item = self._data.get(key)
            if item is None:
                return None
            value, expires = item
            if expires is not None and self._clock() >= expires:
                del self._data[key]
                return None
            return value

    def delete(self, key: str) -> int:
        with self._lock:
            return 1 if self._data.pop(key, None) is not None else 0

    def close(self):
        pass


def connect(url: str | None = None, timeout: float = 2.0):
    """Open a cache from ``url`` (``memory://``, ``redis://host:port`` or
    ``host:port``); ``$CITYFLOW_CACHE_URL`` takes precedence when set."""
    url = os.environ.get(ENV_URL) or url
    if not url or url == "memory://":
        return MemoryKV()
    if "://" not in url:
        url = "redis://" + url
    u = urlparse(url)
    if u.scheme not in ("redis", "tcp"):
        raise ValueError(f"unsupported cache url scheme {u.scheme!r}")
    return RespClient(u.hostname or "127.0.0.1", u.port or 6379, timeout)


# --- a small RESP server over MemoryKV, for demos and tests ---------------

class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        reader = _Reader(lambda: self.request.recv(65536))
        store: MemoryKV = self.server.store
        while True:
            try:
                cmd = reader.reply()
            except CacheProtocolError:
                return
            if not isinstance(cmd, list) or not cmd:
                self.wfile.write(b"-ERR expected a command array\r\n")
                continue
            name = cmd[0].upper()
            try:
                if name == b"SET" and len(cmd) in (3, 5):
                    ttl = None
                    if len(cmd) == 5:
                        if cmd[3].upper() != b"EX":
                            raise ValueError("syntax error")
                        ttl = int(cmd[4])
                    store.set(cmd[1].decode(), cmd[2], ttl)
                    self.wfile.write(b"+OK\r\n")
                elif name == b"GET" and len(cmd) == 2:
                    v = store.get(cmd[1].decode())
                    self.wfile.write(b"$-1\r\n" if v is None else b"$%d\r\n%s\r\n" % (len(v), v))
                elif name == b"DEL" and len(cmd) >= 2:
                    self.wfile.write(b":%d\r\n" % sum(store.delete(k.decode()) for k in cmd[1:]))
                elif name == b"PING":
                    self.wfile.write(b"+PONG\r\n")
                else:
                    self.wfile.write(b"-ERR unknown command or wrong arity\r\n")
            except ValueError as e:
                self.wfile.write(b"-ERR %s\r\n" % str(e).encode())


class RespServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, host: str = "127.0.0.1", port: int = 0, store: MemoryKV | None = None):
        super().__init__((host, port), _Handler)
        self.store = store or MemoryKV()

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start(self) -> "RespServer":
        threading.Thread(target=self.serve_forever, daemon=True).start()
        return self

    def stop(self):
        self.shutdown()
        self.server_close()
