"""Live-mentor bridge: a single-client WebSocket service that broadcasts
world snapshots at each simulator tick and latches takeover input.

Message payloads are length-prefixed, versioned, little-endian binary records
carried inside WebSocket binary frames (see docs/bridge_protocol.md for the
field-by-field layout). One client at a time; a second connection is refused.
Stale takeover input (older than 200 ms at the latch) reads as inactive.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

PROTOCOL_VERSION = 1
MAGIC = 0x444D  # reads "MD" on the wire (little-endian u16)

KIND_STATE_FRAME = 1
KIND_TAKEOVER_INPUT = 2
KIND_CONTROL = 3
KIND_METRICS_UPDATE = 4
KIND_ACK = 5

CONTROL_START, CONTROL_PAUSE, CONTROL_STOP = 0, 1, 2

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


class ProtocolError(ValueError):
    pass


# ---------------------------------------------------------------------------
# payload codec (transport-independent, reused by tests and the UI spec)


def _pack_header(kind: int, step_index: int) -> bytes:
    return struct.pack("<HBBI", MAGIC, PROTOCOL_VERSION, kind, step_index)


def _check_header(buf: bytes) -> Tuple[int, int, memoryview]:
    if len(buf) < 12:
        raise ProtocolError(f"frame too short ({len(buf)} bytes)")
    (length,) = struct.unpack_from("<I", buf, 0)
    if length != len(buf) - 4:
        raise ProtocolError(f"length prefix {length} != payload {len(buf) - 4}")
    magic, version, kind, step = struct.unpack_from("<HBBI", buf, 4)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic 0x{magic:04x}")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    return kind, step, memoryview(buf)[12:]


def _finish(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload


def encode_state_frame(step_index: int, world, source_flag: int, intervened: bool) -> bytes:
    """source_flag: 0 av, 1 human, 2 physics."""
    out = io.BytesIO()
    out.write(_pack_header(KIND_STATE_FRAME, step_index))
    ego = world.ego.state
    out.write(
        struct.pack(
            "<BBffffff",
            source_flag,
            1 if intervened else 0,
            ego.position.x,
            ego.position.y,
            ego.heading,
            ego.velocity,
            ego.length,
            ego.width,
        )
    )
    road = world.road
    pts = road.points[:: max(1, len(road.points) // 400)]
    out.write(struct.pack("<HBf", len(pts), road.lane_count, road.lane_width))
    for p in pts:
        out.write(struct.pack("<ff", float(p[0]), float(p[1])))
    vehicles = [a for a in world.others if a.on_road]
    out.write(struct.pack("<H", len(vehicles)))
    for a in vehicles:
        st = a.state
        out.write(
            struct.pack(
                "<Iffffff",
                a.uid,
                st.position.x,
                st.position.y,
                st.heading,
                st.velocity,
                st.length,
                st.width,
            )
        )
    out.write(struct.pack("<H", len(world.obstacles)))
    for a in world.obstacles:
        st = a.state
        out.write(struct.pack("<Ifffff", a.uid, st.position.x, st.position.y, st.heading, st.length, st.width))
    n = len(world.checkpoint_s)
    idx0 = min(world.next_checkpoint, n - 1)
    idx1 = min(idx0 + 1, n - 1)
    out.write(
        struct.pack(
            "<ffff",
            world.checkpoints[idx0].x,
            world.checkpoints[idx0].y,
            world.checkpoints[idx1].x,
            world.checkpoints[idx1].y,
        )
    )
    return _finish(out.getvalue())


def encode_takeover_input(step_index: int, active: bool, steer: float, throttle: float, client_ts_ms: float) -> bytes:
    payload = _pack_header(KIND_TAKEOVER_INPUT, step_index) + struct.pack(
        "<Bffd", 1 if active else 0, steer, throttle, client_ts_ms
    )
    return _finish(payload)


def encode_control(step_index: int, code: int) -> bytes:
    return _finish(_pack_header(KIND_CONTROL, step_index) + struct.pack("<B", code))


def encode_metrics_update(step_index: int, metrics: dict) -> bytes:
    raw = json.dumps(metrics, sort_keys=True).encode("utf-8")
    return _finish(_pack_header(KIND_METRICS_UPDATE, step_index) + struct.pack("<I", len(raw)) + raw)


def encode_ack(step_index: int, acked_kind: int) -> bytes:
    return _finish(_pack_header(KIND_ACK, step_index) + struct.pack("<B", acked_kind))


def decode_message(buf: bytes) -> dict:
    kind, step, body = _check_header(buf)
    if kind == KIND_TAKEOVER_INPUT:
        active, steer, throttle, ts = struct.unpack_from("<Bffd", body, 0)
        if not (-1.0 <= steer <= 1.0 and -1.0 <= throttle <= 1.0):
            raise ProtocolError("takeover input outside [-1,1]")
        return {
            "kind": "takeover_input",
            "step_index": step,
            "active": bool(active),
            "steer": steer,
            "throttle": throttle,
            "client_ts_ms": ts,
        }
    if kind == KIND_CONTROL:
        (code,) = struct.unpack_from("<B", body, 0)
        return {"kind": "control", "step_index": step, "code": code}
    if kind == KIND_ACK:
        (acked,) = struct.unpack_from("<B", body, 0)
        return {"kind": "ack", "step_index": step, "acked_kind": acked}
    if kind == KIND_METRICS_UPDATE:
        (n,) = struct.unpack_from("<I", body, 0)
        return {
            "kind": "metrics_update",
            "step_index": step,
            "metrics": json.loads(bytes(body[4 : 4 + n]).decode("utf-8")),
        }
    if kind == KIND_STATE_FRAME:
        source, intervened = struct.unpack_from("<BB", body, 0)
        ex, ey, eh, ev, el, ew = struct.unpack_from("<ffffff", body, 2)
        return {
            "kind": "state_frame",
            "step_index": step,
            "source": source,
            "intervened": bool(intervened),
            "ego": {"x": ex, "y": ey, "heading": eh, "v": ev, "length": el, "width": ew},
        }
    raise ProtocolError(f"unknown message kind {kind}")


# ---------------------------------------------------------------------------
# takeover latch


@dataclass
class LatchedInput:
    active: bool
    steer: float
    throttle: float
    client_ts_ms: float
    arrived_at: float
    clock: Callable[[], float]

    def age(self) -> float:
        return self.clock() - self.arrived_at


class TakeoverLatch:
    """Last-writer-wins input latch shared between the bridge reader thread
    and the trainer tick. A snapshot never blocks."""

    def __init__(self, clock: Callable[[], float] = time.monotonic):
        self._lock = threading.Lock()
        self._value: Optional[LatchedInput] = None
        self._clock = clock

    def write(self, active: bool, steer: float, throttle: float, client_ts_ms: float):
        with self._lock:
            self._value = LatchedInput(
                active, steer, throttle, client_ts_ms, self._clock(), self._clock
            )

    def snapshot(self) -> Optional[LatchedInput]:
        with self._lock:
            return self._value


# ---------------------------------------------------------------------------
# minimal RFC6455 server (single client), threaded


def _ws_accept_key(client_key: str) -> str:
    digest = hashlib.sha1((client_key + _WS_GUID).encode()).digest()
    return base64.b64encode(digest).decode()


def ws_encode_frame(payload: bytes, opcode: int = 2, mask: Optional[bytes] = None) -> bytes:
    """Encode one WebSocket frame (binary by default). Clients must mask."""
    out = bytearray([0x80 | opcode])
    n = len(payload)
    mask_bit = 0x80 if mask else 0
    if n < 126:
        out.append(mask_bit | n)
    elif n < 1 << 16:
        out.append(mask_bit | 126)
        out += struct.pack(">H", n)
    else:
        out.append(mask_bit | 127)
        out += struct.pack(">Q", n)
    if mask:
        out += mask
        out += bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
    else:
        out += payload
    return bytes(out)


def ws_read_frame(sock) -> Tuple[int, bytes]:
    def read_exact(k):
        buf = b""
        while len(buf) < k:
            chunk = sock.recv(k - len(buf))
            if not chunk:
                raise ConnectionError("socket closed")
            buf += chunk
        return buf

    b0, b1 = read_exact(2)
    opcode = b0 & 0x0F
    masked = bool(b1 & 0x80)
    n = b1 & 0x7F
    if n == 126:
        (n,) = struct.unpack(">H", read_exact(2))
    elif n == 127:
        (n,) = struct.unpack(">Q", read_exact(8))
    mask = read_exact(4) if masked else None
    payload = read_exact(n) if n else b""
    if mask:
        payload = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
    return opcode, payload


class BridgeServer:
    """Socket-upgrade bridge. Broadcasts frames to the single attached client
    and latches takeover/control input. Malformed frames are counted and
    dropped; a protocol-version mismatch refuses the connection."""

    def __init__(self, port: int = 0, clock: Callable[[], float] = time.monotonic):
        self.latch = TakeoverLatch(clock)
        self.clock = clock
        self.malformed_count = 0
        self.paused = threading.Event()
        self.stop_requested = threading.Event()
        self._client: Optional[socket.socket] = None
        self._client_lock = threading.Lock()
        self._last_client_seen = 0.0
        self._server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._server.bind(("127.0.0.1", port))
        self._server.listen(2)
        self.port = self._server.getsockname()[1]
        self._threads: List[threading.Thread] = []
        self._running = True
        t = threading.Thread(target=self._accept_loop, daemon=True)
        t.start()
        self._threads.append(t)
        self._send_step = 0

    # -- connection handling

    def _accept_loop(self):
        while self._running:
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            with self._client_lock:
                if self._client is not None:
                    self._refuse(conn, "409 Conflict", "single-mentor rule: a client is attached")
                    continue
            try:
                self._handshake(conn)
            except Exception:
                conn.close()
                continue
            with self._client_lock:
                self._client = conn
                self._last_client_seen = self.clock()
            t = threading.Thread(target=self._reader_loop, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _refuse(self, conn, status: str, reason: str):
        try:
            conn.sendall(
                f"HTTP/1.1 {status}\r\nContent-Length: {len(reason)}\r\n\r\n{reason}".encode()
            )
        finally:
            conn.close()

    def _handshake(self, conn):
        conn.settimeout(5.0)
        data = b""
        while b"\r\n\r\n" not in data:
            chunk = conn.recv(4096)
            if not chunk:
                raise ConnectionError("client closed during handshake")
            data += chunk
        headers = {}
        for line in data.split(b"\r\n")[1:]:
            if b":" in line:
                k, v = line.split(b":", 1)
                headers[k.strip().lower().decode()] = v.strip().decode()
        if headers.get("sec-websocket-protocol", f"mentordrive.v{PROTOCOL_VERSION}") != (
            f"mentordrive.v{PROTOCOL_VERSION}"
        ):
            self._refuse(conn, "426 Upgrade Required", "protocol version mismatch")
            raise ProtocolError("version mismatch")
        key = headers.get("sec-websocket-key", "")
        accept = _ws_accept_key(key)
        conn.sendall(
            (
                "HTTP/1.1 101 Switching Protocols\r\n"
                "Upgrade: websocket\r\nConnection: Upgrade\r\n"
                f"Sec-WebSocket-Accept: {accept}\r\n"
                f"Sec-WebSocket-Protocol: mentordrive.v{PROTOCOL_VERSION}\r\n\r\n"
            ).encode()
        )
        conn.settimeout(None)

    def _reader_loop(self, conn):
        try:
            while self._running:
                opcode, payload = ws_read_frame(conn)
                if opcode == 8:  # close
                    break
                if opcode == 9:  # ping -> pong
                    self._send_raw(ws_encode_frame(payload, opcode=10))
                    continue
                if opcode not in (1, 2):
                    continue
                self._last_client_seen = self.clock()
                try:
                    msg = decode_message(payload)
                except ProtocolError:
                    self.malformed_count += 1
                    continue
                if msg["kind"] == "takeover_input":
                    self.latch.write(msg["active"], msg["steer"], msg["throttle"], msg["client_ts_ms"])
                    self._send_raw(ws_encode_frame(encode_ack(msg["step_index"], KIND_TAKEOVER_INPUT)))
                elif msg["kind"] == "control":
                    if msg["code"] == CONTROL_PAUSE:
                        self.paused.set()
                    elif msg["code"] == CONTROL_START:
                        self.paused.clear()
                    elif msg["code"] == CONTROL_STOP:
                        self.stop_requested.set()
                    self._send_raw(ws_encode_frame(encode_ack(msg["step_index"], KIND_CONTROL)))
        except (ConnectionError, OSError):
            pass
        finally:
            with self._client_lock:
                if self._client is conn:
                    self._client = None
            self.latch.write(False, 0.0, 0.0, 0.0)
            try:
                conn.close()
            except OSError:
                pass

    def _send_raw(self, frame: bytes):
        with self._client_lock:
            conn = self._client
        if conn is None:
            return
        try:
            conn.sendall(frame)
        except OSError:
            with self._client_lock:
                if self._client is conn:
                    self._client = None

    # -- trainer-facing API

    @property
    def has_client(self) -> bool:
        with self._client_lock:
            return self._client is not None

    def broadcast_state(self, step_index: int, world, source_flag: int, intervened: bool):
        if step_index < self._send_step:
            raise ProtocolError("state_frame step_index must be non-decreasing")
        self._send_step = step_index
        self._send_raw(ws_encode_frame(encode_state_frame(step_index, world, source_flag, intervened)))

    def broadcast_metrics(self, step_index: int, metrics: dict):
        self._send_raw(ws_encode_frame(encode_metrics_update(step_index, metrics)))

    def close(self):
        self._running = False
        try:
            self._server.close()
        except OSError:
            pass
        with self._client_lock:
            if self._client is not None:
                try:
                    self._client.close()
                except OSError:
                    pass
                self._client = None


class BridgeClient:
    """Minimal scripted WebSocket client for tests and headless drivers."""

    def __init__(self, port: int, protocol: Optional[str] = None, timeout: float = 5.0):
        self.sock = socket.create_connection(("127.0.0.1", port), timeout=timeout)
        proto = protocol or f"mentordrive.v{PROTOCOL_VERSION}"
        key = base64.b64encode(b"0123456789abcdef").decode()
        self.sock.sendall(
            (
                "GET / HTTP/1.1\r\nHost: 127.0.0.1\r\nUpgrade: websocket\r\n"
                "Connection: Upgrade\r\n"
                f"Sec-WebSocket-Key: {key}\r\nSec-WebSocket-Version: 13\r\n"
                f"Sec-WebSocket-Protocol: {proto}\r\n\r\n"
            ).encode()
        )
        data = b""
        while b"\r\n\r\n" not in data:
            chunk = self.sock.recv(4096)
            if not chunk:
                raise ConnectionError("server closed during handshake")
            data += chunk
        status = data.split(b"\r\n", 1)[0].decode()
        if "101" not in status:
            body = data.split(b"\r\n\r\n", 1)[-1].decode(errors="replace")
            self.sock.close()
            raise ConnectionRefusedError(f"{status.strip()}: {body}")

    def send_message(self, payload: bytes):
        self.sock.sendall(ws_encode_frame(payload, mask=b"\x11\x22\x33\x44"))

    def recv_message(self, timeout: float = 5.0) -> dict:
        self.sock.settimeout(timeout)
        while True:
            opcode, payload = ws_read_frame(self.sock)
            if opcode in (1, 2):
                return decode_message(payload)
            if opcode == 8:
                raise ConnectionError("server closed")

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass
