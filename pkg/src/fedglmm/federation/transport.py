"""Message channels between coordinator, sites and the compensator.

A channel has ``send(msg)``, ``recv()`` and ``close()``. Every message goes
through :func:`encode` and :func:`decode` even in process, so the loopback
and TCP transports see exactly the same bytes.
"""

from __future__ import annotations

import hmac
import logging
import queue
import socket
import threading
import time
from collections import Counter, deque

from ..exceptions import ConfigurationError, ProtocolError, TransportError
from . import messages as M

log = logging.getLogger(__name__)


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigurationError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


class LoopbackChannel:
    """Coordinator-side channel to a site worker living in the same process.

    ``send`` hands the decoded message to ``worker.handle`` and queues the
    replies; ``recv`` pops them in order.
    """

    def __init__(self, worker, name=None):
        self.worker = worker
        self.name = name or worker.site_id
        self._inbox: deque[bytes] = deque()
        self.hello = M.decode(M.encode(worker.hello()))
        self.closed = False

    def send(self, msg: dict) -> None:
        if self.closed:
            raise TransportError(f"site {self.name} is closed", site=self.name)
        for reply in self.worker.handle(M.decode(M.encode(msg))):
            self._inbox.append(M.encode(reply))

    def recv(self) -> dict:
        if not self._inbox:
            if self.closed:
                raise TransportError(f"site {self.name} disconnected", site=self.name)
            raise ProtocolError(f"site {self.name} has no pending reply")
        return M.decode(self._inbox.popleft())

    def close(self):
        self.closed = True


class SocketChannel:
    """Newline-delimited JSON over a connected socket.

    Writes go through a background thread so that a coordinator can queue
    a whole round for every site before reading any reply.
    """

    def __init__(self, sock: socket.socket, name="peer"):
        self.sock = sock
        self.name = name
        self.hello = None
        self._reader = sock.makefile("rb")
        self._out: queue.Queue = queue.Queue()
        self._error = None
        self._writer = threading.Thread(target=self._write_loop, daemon=True)
        self._writer.start()

    def _write_loop(self):
        while True:
            data = self._out.get()
            if data is None:
                return
            try:
                self.sock.sendall(data)
            except OSError as exc:
                self._error = exc
                return

    def send(self, msg: dict) -> None:
        if self._error is not None:
            raise TransportError(f"site {self.name} disconnected: {self._error}",
                                 site=self.name)
        self._out.put(M.encode(msg))

    def recv(self) -> dict:
        try:
            line = self._reader.readline()
        except OSError as exc:
            raise TransportError(f"site {self.name} disconnected: {exc}",
                                 site=self.name) from None
        if not line:
            raise TransportError(f"site {self.name} disconnected", site=self.name)
        return M.decode(line)

    def flush(self, timeout=5.0):
        """Wait until queued messages were handed to the socket."""
        self._out.put(None)
        self._writer.join(timeout)

    def close(self):
        self.flush()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._reader.close()
        self.sock.close()


class CountingChannel:
    """Wraps a channel and counts messages by type in each direction."""

    def __init__(self, inner):
        self.inner = inner
        self.sent = Counter()
        self.received = Counter()

    @property
    def name(self):
        return self.inner.name

    @property
    def hello(self):
        return self.inner.hello

    def send(self, msg):
        self.sent[msg["type"]] += 1
        self.inner.send(msg)

    def recv(self):
        msg = self.inner.recv()
        self.received[msg["type"]] += 1
        return msg

    def close(self):
        self.inner.close()


def listen(host: str, port: int) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen()
    return srv


def accept_sites(server: socket.socket, k: int, token: str = "", timeout=None):
    """Accept ``k`` site connections and check their HELLO tokens.

    Returns the channels sorted by site id, which fixes the summation order
    no matter in which order the sites connected.
    """
    server.settimeout(timeout)
    channels = {}
    while len(channels) < k:
        try:
            conn, addr = server.accept()
        except socket.timeout:
            raise TransportError(f"only {len(channels)} of {k} sites connected") from None
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn.settimeout(None)
        ch = SocketChannel(conn, name=f"{addr[0]}:{addr[1]}")
        try:
            msg = ch.recv()
        except (TransportError, ProtocolError) as exc:
            log.warning("dropping connection from %s: %s", ch.name, exc)
            ch.close()
            continue
        if msg["type"] != "HELLO" or not hmac.compare_digest(
            msg.get("token", "").encode(), token.encode()
        ):
            log.warning("rejecting connection from %s: bad handshake", ch.name)
            ch.send(M.error("authentication failed", kind="auth"))
            ch.close()
            continue
        site_id = msg["site_id"]
        if site_id in channels:
            ch.close()
            raise ConfigurationError(f"two sites announced the id {site_id!r}")
        ch.name = site_id
        ch.hello = msg
        channels[site_id] = ch
        log.info("site %s connected", site_id)
    return [channels[s] for s in sorted(channels)]


def connect(address: str, name="coordinator", retries=50, delay=0.1) -> SocketChannel:
    """Connect to ``host:port``, retrying while the peer starts up."""
    host, port = parse_address(address)
    last = None
    for _ in range(max(1, retries)):
        try:
            sock = socket.create_connection((host, port))
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return SocketChannel(sock, name=name)
        except OSError as exc:
            last = exc
            time.sleep(delay)
    raise TransportError(f"cannot connect to {address}: {last}", site=name)


# compensator over TCP ------------------------------------------------------

class CompensatorClient:
    """Remote handle to a compensator with the in-process interface.

    Sites call :meth:`submit`, the coordinator calls :meth:`release`. Each
    party should use its own client (its own connection).
    """

    def __init__(self, channel):
        self.channel = channel
        self._lock = threading.Lock()

    def submit(self, record: M.NoiseRecord) -> None:
        with self._lock:
            self.channel.send(M.noise(record))

    def release(self, snp_id, iteration, timeout=None) -> M.NoiseRecord:
        with self._lock:
            self.channel.send(M.noise_request(snp_id, iteration))
            reply = self.channel.recv()
        if reply["type"] == "ERROR":
            raise ProtocolError(f"compensator: {reply['message']}")
        return M.parse_noise(reply)

    def close(self):
        self.channel.close()


def serve_compensator(server: socket.socket, compensator, timeout=60.0,
                      stop: threading.Event | None = None):
    """Serve a :class:`Compensator` until ``stop`` is set.

    Every connection gets its own thread. Noise submissions are stored; a
    request blocks up to ``timeout`` seconds for the round to complete, then
    answers with the summed noise or an ERROR.
    """
    stop = stop or threading.Event()
    server.settimeout(0.2)

    def handle(ch: SocketChannel):
        while not stop.is_set():
            try:
                msg = ch.recv()
            except (TransportError, ProtocolError):
                return
            if msg["type"] == "SHUTDOWN":
                stop.set()
                return
            if msg["type"] != "NOISE":
                ch.send(M.error(f"compensator cannot handle {msg['type']}"))
                continue
            try:
                if msg.get("request"):
                    rec = compensator.release(msg["snp_id"], msg["iteration"],
                                              timeout=timeout)
                    ch.send(M.noise_aggregate(rec.snp_id, rec.iteration,
                                              rec.noise_id.split(";"), rec.values))
                else:
                    compensator.submit(M.parse_noise(msg))
            except ProtocolError as exc:
                ch.send(M.error(str(exc)))

    threads = []
    while not stop.is_set():
        try:
            conn, addr = server.accept()
        except socket.timeout:
            continue
        except OSError:
            break
        conn.settimeout(None)
        t = threading.Thread(target=handle, args=(SocketChannel(conn, f"{addr}"),),
                             daemon=True)
        t.start()
        threads.append(t)
    return threads
