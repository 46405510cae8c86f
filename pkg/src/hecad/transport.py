"""Distributed node mode: a small framed protocol over keep-alive TCP.

Frame layout: 4-byte magic ``HEC1``, 1-byte message type, 4-byte big-endian
payload length, then a UTF-8 JSON payload (empty for bare HELLO/PING).

Payload schemas
---------------
DETECT_REQ   {"id": int, "dims": [T, D], "values": [float, ...] (row-major)}
DETECT_RESP  {"id": int, "verdict": 0|1, "layer": str, "hops": [str, ...],
              "confident": bool, "min_logpd": float, "error": str (optional)}
HELLO        request: {"role": str} (optional); reply: {"role": str, "link_delay_ms": float}
ERROR        {"error": str}
PING         any payload, echoed back unchanged

Floats go through Python's shortest round-trip repr, so values arrive bit-identical.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .datasets import Window
from .detectors import TrainedDetector

log = logging.getLogger("hecad.transport")

MAGIC = b"HEC1"
HEADER = struct.Struct(">4sBI")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 16 * 1024 * 1024
DEFAULT_TIMEOUT_S = 10.0

ROLES = ("device", "edge", "cloud")
ROLE_LAYER = {"device": "iot", "edge": "edge", "cloud": "cloud"}


class MsgType(IntEnum):
    HELLO = 1
    DETECT_REQ = 2
    DETECT_RESP = 3
    ERROR = 4
    PING = 5


class ProtocolError(ValueError):
    """Malformed, truncated, oversize or unknown frame."""


@dataclass(frozen=True)
class WireMessage:
    msg_type: MsgType
    payload: bytes = b""

    @classmethod
    def of(cls, msg_type: MsgType, obj: dict | None = None) -> "WireMessage":
        body = b"" if obj is None else json.dumps(obj, separators=(",", ":"), allow_nan=False).encode()
        return cls(MsgType(msg_type), body)

    def obj(self) -> dict:
        if not self.payload:
            return {}
        try:
            doc = json.loads(self.payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ProtocolError(f"payload is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ProtocolError("payload must be a JSON object")
        return doc


def encode(msg: WireMessage) -> bytes:
    if len(msg.payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(msg.payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(MAGIC, int(msg.msg_type), len(msg.payload)) + msg.payload


def _parse_header(header: bytes) -> tuple[MsgType, int]:
    magic, kind, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    try:
        msg_type = MsgType(kind)
    except ValueError:
        raise ProtocolError(f"unknown message type {kind}") from None
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"declared payload of {length} bytes exceeds {MAX_PAYLOAD}")
    return msg_type, length


def decode(frame: bytes) -> WireMessage:
    """Decode exactly one complete frame."""
    if len(frame) < HEADER_SIZE:
        raise ProtocolError(f"truncated header: {len(frame)} of {HEADER_SIZE} bytes")
    msg_type, length = _parse_header(frame[:HEADER_SIZE])
    body = frame[HEADER_SIZE:]
    if len(body) < length:
        raise ProtocolError(f"truncated payload: {len(body)} of {length} bytes")
    if len(body) > length:
        raise ProtocolError(f"{len(body) - length} trailing bytes after frame")
    return WireMessage(msg_type, bytes(body))


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            break
        buf += chunk
    return bytes(buf)


def read_message(sock: socket.socket) -> WireMessage | None:
    """Read one frame; None on a clean EOF between frames."""
    header = _recv_exact(sock, HEADER_SIZE)
    if not header:
        return None
    if len(header) < HEADER_SIZE:
        raise ProtocolError("connection closed inside a frame header")
    msg_type, length = _parse_header(header)
    body = _recv_exact(sock, length)
    if len(body) < length:
        raise ProtocolError("connection closed inside a frame payload")
    return WireMessage(msg_type, body)


def send_message(sock: socket.socket, msg: WireMessage, delay_ms: float = 0.0) -> None:
    if delay_ms > 0:
        time.sleep(delay_ms / 1000.0)
    sock.sendall(encode(msg))


# --------------------------------------------------------------------------
# Payload helpers
# --------------------------------------------------------------------------


def window_payload(window: Window | np.ndarray, window_id: int | None = None) -> dict:
    data = window.data if isinstance(window, Window) else np.asarray(window, dtype=np.float64)
    if window_id is None:
        window_id = window.id if isinstance(window, Window) else 0
    if data.ndim != 2:
        raise ValueError(f"window must be (T, D), got shape {data.shape}")
    return {"id": int(window_id), "dims": list(data.shape), "values": data.ravel().tolist()}


def window_from_payload(doc: dict) -> tuple[int, np.ndarray]:
    try:
        dims = [int(v) for v in doc["dims"]]
        values = np.asarray(doc["values"], dtype=np.float64)
        wid = int(doc["id"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"bad DETECT_REQ payload: {exc}") from None
    if len(dims) != 2 or values.size != dims[0] * dims[1]:
        raise ProtocolError(f"values length {values.size} does not match dims {dims}")
    return wid, values.reshape(dims)


# --------------------------------------------------------------------------
# Nodes
# --------------------------------------------------------------------------


@dataclass
class NodeConfig:
    """One node of the three-tier stack.

    ``injected_one_way_delay_ms`` is the one-way latency of the link between
    this node and its downstream neighbour. The node sleeps that long before
    each response it sends downstream and advertises it in its HELLO reply so
    the downstream node can apply the same delay to its requests.
    """

    role: str
    listen_addr: tuple[str, int]
    detector_path: str
    upstream_addr: tuple[str, int] | None = None
    injected_one_way_delay_ms: float = 0.0
    timeout_s: float = DEFAULT_TIMEOUT_S

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        if self.role == "cloud" and self.upstream_addr is not None:
            raise ValueError("the cloud node has no upstream")
        if self.role == "device" and self.upstream_addr is None:
            raise ValueError("the device node needs an upstream address")
        if self.injected_one_way_delay_ms < 0:
            raise ValueError("injected_one_way_delay_ms must be >= 0")
        self.listen_addr = (str(self.listen_addr[0]), int(self.listen_addr[1]))
        if self.upstream_addr is not None:
            self.upstream_addr = (str(self.upstream_addr[0]), int(self.upstream_addr[1]))

    @classmethod
    def from_dict(cls, d: dict) -> "NodeConfig":
        return cls(
            role=d["role"],
            listen_addr=tuple(d["listen_addr"]),
            detector_path=d["detector_path"],
            upstream_addr=tuple(d["upstream_addr"]) if d.get("upstream_addr") else None,
            injected_one_way_delay_ms=float(d.get("injected_one_way_delay_ms", 0.0)),
            timeout_s=float(d.get("timeout_s", DEFAULT_TIMEOUT_S)),
        )


@dataclass
class TrafficCounter:
    upstream_connections: int = 0
    upstream_requests: int = 0
    requests: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add(self, name: str, n: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + n)


class _Upstream:
    """Lazily opened keep-alive connection to the next tier, one per downstream client."""

    def __init__(self, node: "Node"):
        self.node = node
        self.sock: socket.socket | None = None
        self.link_delay_ms = 0.0

    def _connect(self) -> None:
        cfg = self.node.config
        sock = socket.create_connection(cfg.upstream_addr, timeout=cfg.timeout_s)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        send_message(sock, WireMessage.of(MsgType.HELLO, {"role": cfg.role}))
        reply = read_message(sock)
        if reply is None or reply.msg_type != MsgType.HELLO:
            sock.close()
            raise ProtocolError("upstream did not answer HELLO")
        self.link_delay_ms = float(reply.obj().get("link_delay_ms", 0.0))
        self.sock = sock
        self.node.traffic.add("upstream_connections")

    def request(self, msg: WireMessage) -> WireMessage:
        # one retry on a dropped keep-alive connection
        for attempt in range(2):
            try:
                if self.sock is None:
                    self._connect()
                send_message(self.sock, msg, self.link_delay_ms)
                self.node.traffic.add("upstream_requests")
                reply = read_message(self.sock)
                if reply is None:
                    raise ConnectionError("upstream closed the connection")
                return reply
            except (OSError, ProtocolError):
                self.close()
                if attempt:
                    raise

    def close(self) -> None:
        if self.sock is not None:
            try:
                self.sock.close()
            finally:
                self.sock = None


class _Handler(socketserver.BaseRequestHandler):
    server: "_Server"

    def setup(self):
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.upstream = _Upstream(self.server.node) if self.server.node.config.upstream_addr else None

    def handle(self):
        node = self.server.node
        while True:
            try:
                msg = read_message(self.request)
            except ProtocolError as exc:
                self._reply(WireMessage.of(MsgType.ERROR, {"error": str(exc)}))
                return
            except OSError:
                return
            if msg is None:
                return
            try:
                reply = node.handle(msg, self.upstream)
            except ProtocolError as exc:
                self._reply(WireMessage.of(MsgType.ERROR, {"error": str(exc)}))
                return
            self._reply(reply)

    def _reply(self, msg: WireMessage) -> None:
        try:
            send_message(self.request, msg, self.server.node.config.injected_one_way_delay_ms)
        except OSError:
            pass

    def finish(self):
        if self.upstream is not None:
            self.upstream.close()


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, node: "Node"):
        self.node = node
        super().__init__(node.config.listen_addr, _Handler)


class Node:
    """A device, edge or cloud node answering detection requests."""

    def __init__(self, config: NodeConfig, detector: TrainedDetector | None = None):
        self.config = config
        self.detector = detector if detector is not None else TrainedDetector.load(config.detector_path)
        expected = ROLE_LAYER[config.role]
        if self.detector.layer != expected:
            raise ValueError(f"{config.role} node needs a {expected!r} detector, got {self.detector.layer!r}")
        self.traffic = TrafficCounter()
        self._server: _Server | None = None
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        if self._server is None:
            raise RuntimeError("node is not listening")
        return self._server.server_address[:2]

    def handle(self, msg: WireMessage, upstream: _Upstream | None) -> WireMessage:
        if msg.msg_type == MsgType.PING:
            return msg
        if msg.msg_type == MsgType.HELLO:
            return WireMessage.of(MsgType.HELLO, {
                "role": self.config.role, "link_delay_ms": self.config.injected_one_way_delay_ms})
        if msg.msg_type != MsgType.DETECT_REQ:
            raise ProtocolError(f"unexpected {msg.msg_type.name} from a client")
        self.traffic.add("requests")
        t0 = time.perf_counter()
        doc = msg.obj()
        wid, data = window_from_payload(doc)
        det = self.detector.detect(data)
        layer = self.detector.layer
        resp = {"id": wid, "verdict": int(det.is_anomaly), "layer": layer, "hops": [layer],
                "confident": bool(det.confident), "min_logpd": float(det.min_logpd)}
        action = "answer"
        if upstream is not None and not det.confident:
            action = "forward"
            try:
                reply = upstream.request(msg)
                up = reply.obj()
                if reply.msg_type != MsgType.DETECT_RESP:
                    raise ProtocolError(up.get("error", f"upstream sent {reply.msg_type.name}"))
                up["hops"] = [layer] + list(up.get("hops", []))
                resp = up
            except (OSError, ProtocolError) as exc:
                resp["error"] = f"upstream unavailable: {exc}"
        log.info("id=%d role=%s action=%s delay_ms=%.2f", wid, self.config.role, action,
                 1000.0 * (time.perf_counter() - t0))
        return WireMessage.of(MsgType.DETECT_RESP, resp)

    def start(self) -> "Node":
        """Listen and serve from a background thread."""
        self._server = _Server(self)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server = _Server(self)
        try:
            self._server.serve_forever()
        finally:
            self._server.server_close()

    def shutdown(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


def serve(config: NodeConfig) -> None:
    Node(config).serve_forever()


# --------------------------------------------------------------------------
# Client
# --------------------------------------------------------------------------


@dataclass
class WireResult:
    window_id: int
    verdict: int
    layer: str
    hops: list[str]
    confident: bool
    min_logpd: float
    delay_ms: float
    error: str | None = None


class DetectClient:
    """Keep-alive client talking to one node (normally the device)."""

    def __init__(self, addr: tuple[str, int], timeout_s: float = DEFAULT_TIMEOUT_S):
        self.sock = socket.create_connection(tuple(addr), timeout=timeout_s)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _roundtrip(self, msg: WireMessage) -> WireMessage:
        try:
            send_message(self.sock, msg)
            reply = read_message(self.sock)
        except socket.timeout:
            raise TimeoutError("no response before the timeout") from None
        if reply is None:
            raise ConnectionError("node closed the connection")
        return reply

    def ping(self, payload: dict | None = None) -> dict:
        reply = self._roundtrip(WireMessage.of(MsgType.PING, payload))
        if reply.msg_type != MsgType.PING:
            raise ProtocolError(f"expected PING, got {reply.msg_type.name}")
        return reply.obj()

    def detect(self, window: Window | np.ndarray, window_id: int | None = None) -> WireResult:
        msg = WireMessage.of(MsgType.DETECT_REQ, window_payload(window, window_id))
        t0 = time.perf_counter()
        reply = self._roundtrip(msg)
        delay = 1000.0 * (time.perf_counter() - t0)
        doc = reply.obj()
        if reply.msg_type != MsgType.DETECT_RESP:
            raise ProtocolError(doc.get("error", f"unexpected {reply.msg_type.name}"))
        return WireResult(int(doc["id"]), int(doc["verdict"]), doc["layer"], list(doc["hops"]),
                          bool(doc["confident"]), float(doc["min_logpd"]), delay, doc.get("error"))

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def client_detect(device_addr: tuple[str, int], window: Window | np.ndarray,
                  timeout_s: float = DEFAULT_TIMEOUT_S) -> WireResult:
    with DetectClient(device_addr, timeout_s) as client:
        return client.detect(window)


def wait_for_node(addr: tuple[str, int], timeout_s: float = 10.0) -> None:
    """Block until a node answers PING."""
    deadline = time.monotonic() + timeout_s
    while True:
        try:
            with DetectClient(addr, timeout_s=1.0) as c:
                c.ping()
            return
        except OSError:
            if time.monotonic() > deadline:
                raise TimeoutError(f"node at {addr} did not come up") from None
            time.sleep(0.05)


def write_node_config(path: str | Path, config: NodeConfig) -> None:
    doc = {
        "role": config.role,
        "listen_addr": list(config.listen_addr),
        "detector_path": config.detector_path,
        "upstream_addr": list(config.upstream_addr) if config.upstream_addr else None,
        "injected_one_way_delay_ms": config.injected_one_way_delay_ms,
        "timeout_s": config.timeout_s,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


# --------------------------------------------------------------------------
# Loopback driver
# --------------------------------------------------------------------------

DEFAULT_LINK_DELAY_MS = {"edge": 125.0, "cloud": 125.0}


class LoopbackStack:
    """Cloud, edge and device nodes as three local ``hecad serve`` processes.

    ``detector_paths`` maps layer to detector bundle, ``link_delay_ms`` maps
    the edge and cloud roles to the one-way delay on their downstream link.
    Use as a context manager; ``device_addr`` is set once all nodes listen.
    """

    def __init__(self, detector_paths: dict[str, str | Path], workdir: str | Path,
                 link_delay_ms: dict[str, float] | None = None, host: str = "127.0.0.1",
                 timeout_s: float = DEFAULT_TIMEOUT_S):
        self.detector_paths = {k: str(v) for k, v in detector_paths.items()}
        self.workdir = Path(workdir)
        self.link_delay_ms = dict(link_delay_ms or {})
        self.host = host
        self.timeout_s = timeout_s
        self.procs: list = []
        self.addresses: dict[str, tuple[str, int]] = {}

    @property
    def device_addr(self) -> tuple[str, int]:
        return self.addresses["device"]

    def _launch(self, config: NodeConfig) -> tuple[str, int]:
        path = self.workdir / f"{config.role}.node.json"
        write_node_config(path, config)
        proc = subprocess.Popen([sys.executable, "-m", "hecad", "serve", "--node-config", str(path)],
                                stdout=subprocess.PIPE, text=True)
        self.procs.append(proc)
        line = proc.stdout.readline()
        if not line.startswith("listening"):
            raise RuntimeError(f"{config.role} node failed to start (exit code {proc.poll()})")
        host, port = line.split()[1].rsplit(":", 1)
        addr = (host, int(port))
        wait_for_node(addr, self.timeout_s)
        return addr

    def start(self) -> "LoopbackStack":
        self.workdir.mkdir(parents=True, exist_ok=True)
        upstream = None
        try:
            for role in ("cloud", "edge", "device"):
                cfg = NodeConfig(role, (self.host, 0), self.detector_paths[ROLE_LAYER[role]], upstream,
                                 self.link_delay_ms.get(role, 0.0), self.timeout_s)
                upstream = self.addresses[role] = self._launch(cfg)
        except BaseException:
            self.stop()
            raise
        return self

    def stop(self) -> None:
        for proc in reversed(self.procs):
            proc.terminate()
        for proc in self.procs:
            try:
                proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                proc.kill()
            if proc.stdout:
                proc.stdout.close()
        self.procs.clear()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
