"""Framed TCP protocol: envelope codec, frames, handshake, flow control.

Byte layouts are normative and identical across implementations:

  frame     = frame_type(1) || u32_be payload_length || payload
  envelope  = u16_be field_count || field*   (fields sorted by key bytes)
  field     = u16_be key_length || key || u32_be value_length || value

Frame types: 0x01 HELLO, 0x02 HELLO_ACK, 0x10 DATA, 0x20 CREDIT,
0x7E ERROR, 0x7F END. CREDIT payload is a u32_be grant count. All
integers are big-endian; no varints.
"""

from __future__ import annotations

import socket
import struct
from collections import deque
from dataclasses import dataclass

from . import WarcflowError

PROTO_VERSION = b"WDL1"
DEFAULT_PORT = 4850
DEFAULT_WINDOW = 64
MAX_FRAME_PAYLOAD = 64 * 1024 * 1024
HANDSHAKE_TIMEOUT = 10.0

FRAME_HELLO = 0x01
FRAME_HELLO_ACK = 0x02
FRAME_DATA = 0x10
FRAME_CREDIT = 0x20
FRAME_ERROR = 0x7E
FRAME_END = 0x7F

FRAME_TYPES = frozenset({FRAME_HELLO, FRAME_HELLO_ACK, FRAME_DATA,
                         FRAME_CREDIT, FRAME_ERROR, FRAME_END})

REQUIRED_KEYS = ("record_id", "target_uri", "mime", "payload")


class WireError(WarcflowError):
    pass


class TooLarge(WireError):
    pass


class MalformedEnvelope(WireError):
    def __init__(self, detail: str):
        self.detail = detail
        super().__init__(f"malformed envelope: {detail}")


class UnknownFrameType(WireError):
    def __init__(self, byte: int):
        self.byte = byte
        super().__init__(f"unknown frame type 0x{byte:02X}")


class FrameTooLarge(WireError):
    pass


class ProtocolMismatch(WireError):
    pass


class HandshakeTimeout(WireError):
    pass


class CreditViolation(WireError):
    pass


class ConnectionClosed(WireError):
    """Peer closed the TCP stream, possibly mid-frame."""


# ---------------------------------------------------------------------------
# Envelope codec
# ---------------------------------------------------------------------------

def encode_envelope(fields: dict[str, bytes], max_size: int = MAX_FRAME_PAYLOAD) -> bytes:
    """Canonical encoding: equal field maps always produce equal bytes."""
    items = sorted(((k.encode("utf-8"), v) for k, v in fields.items()))
    if len(items) > 0xFFFF:
        raise TooLarge("more than 65535 fields")
    parts = [struct.pack(">H", len(items))]
    total = 2
    for key, value in items:
        if len(key) > 0xFFFF:
            raise TooLarge("key longer than 65535 bytes")
        parts.append(struct.pack(">H", len(key)))
        parts.append(key)
        parts.append(struct.pack(">I", len(value)))
        parts.append(value)
        total += 2 + len(key) + 4 + len(value)
        if total > max_size:
            raise TooLarge(f"envelope exceeds {max_size} bytes")
    return b"".join(parts)


def decode_envelope(data: bytes) -> dict[str, bytes]:
    """Inverse of encode_envelope; rejects non-canonical input."""
    if len(data) < 2:
        raise MalformedEnvelope("truncated")
    (count,) = struct.unpack_from(">H", data, 0)
    pos = 2
    fields: dict[str, bytes] = {}
    prev_key = None
    for _ in range(count):
        if pos + 2 > len(data):
            raise MalformedEnvelope("truncated")
        (klen,) = struct.unpack_from(">H", data, pos)
        pos += 2
        if pos + klen + 4 > len(data):
            raise MalformedEnvelope("truncated")
        key = data[pos:pos + klen]
        pos += klen
        (vlen,) = struct.unpack_from(">I", data, pos)
        pos += 4
        if pos + vlen > len(data):
            raise MalformedEnvelope("truncated")
        value = data[pos:pos + vlen]
        pos += vlen
        if prev_key is not None and key <= prev_key:
            raise MalformedEnvelope("unsorted")
        prev_key = key
        try:
            fields[key.decode("utf-8")] = value
        except UnicodeDecodeError:
            raise MalformedEnvelope("key not utf-8") from None
    if pos != len(data):
        raise MalformedEnvelope("trailing bytes")
    return fields


def make_record_envelope(
    record_id: str,
    target_uri: str,
    mime: str,
    payload: bytes,
    **optional: bytes,
) -> dict[str, bytes]:
    env = {
        "record_id": record_id.encode("utf-8"),
        "target_uri": target_uri.encode("utf-8"),
        "mime": mime.encode("utf-8"),
        "payload": payload,
    }
    env.update(optional)
    return env


def validate_record_envelope(env: dict[str, bytes]) -> None:
    for key in REQUIRED_KEYS:
        if key not in env:
            raise MalformedEnvelope(f"missing required key {key}")


# ---------------------------------------------------------------------------
# Frames
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Frame:
    frame_type: int
    payload: bytes


def frame_encode(frame_type: int, payload: bytes, max_payload: int = MAX_FRAME_PAYLOAD) -> bytes:
    if frame_type not in FRAME_TYPES:
        raise UnknownFrameType(frame_type)
    if len(payload) > max_payload:
        raise FrameTooLarge(f"payload of {len(payload)} bytes exceeds {max_payload}")
    return struct.pack(">BI", frame_type, len(payload)) + payload


class FrameDecoder:
    """Streaming frame decoder; partial reads resume where they left off."""

    def __init__(self, max_payload: int = MAX_FRAME_PAYLOAD):
        self.max_payload = max_payload
        self._buf = bytearray()
        self._ready: deque[Frame] = deque()

    def feed(self, data: bytes) -> int:
        """Consume bytes; queue every frame they complete for next_frame().

        Returns the number of frames completed. A malformed header raises,
        but only after the frames decoded ahead of it were queued, so the
        caller can still process them before tearing the stream down.
        """
        self._buf.extend(data)
        count = 0
        while True:
            if not self._buf:
                break
            ftype = self._buf[0]
            if ftype not in FRAME_TYPES:
                raise UnknownFrameType(ftype)
            if len(self._buf) < 5:
                break
            (length,) = struct.unpack_from(">I", self._buf, 1)
            if length > self.max_payload:
                raise FrameTooLarge(f"declared payload of {length} bytes exceeds {self.max_payload}")
            if len(self._buf) < 5 + length:
                break
            payload = bytes(self._buf[5:5 + length])
            del self._buf[:5 + length]
            self._ready.append(Frame(ftype, payload))
            count += 1
        return count

    def next_frame(self) -> Frame | None:
        return self._ready.popleft() if self._ready else None

    def drain(self) -> list[Frame]:
        out = list(self._ready)
        self._ready.clear()
        return out

    @property
    def mid_frame(self) -> bool:
        return bool(self._buf)


def frame_decode(data: bytes) -> list[Frame]:
    """Decode a complete byte string into frames; rejects trailing bytes."""
    dec = FrameDecoder()
    dec.feed(data)
    if dec.mid_frame:
        raise ConnectionClosed("byte stream ends mid-frame")
    return dec.drain()


def send_frame(sock: socket.socket, frame_type: int, payload: bytes = b"") -> None:
    sock.sendall(frame_encode(frame_type, payload))


def read_frame(sock: socket.socket, decoder: FrameDecoder) -> Frame | None:
    """Blocking read of the next frame; None on clean EOF at a boundary."""
    while True:
        frame = decoder.next_frame()
        if frame is not None:
            return frame
        data = sock.recv(65536)
        if not data:
            if decoder.mid_frame:
                raise ConnectionClosed("connection closed mid-frame")
            return None
        decoder.feed(data)


# ---------------------------------------------------------------------------
# Handshake
# ---------------------------------------------------------------------------

def producer_handshake(sock: socket.socket, producer_id: str,
                       timeout: float = HANDSHAKE_TIMEOUT) -> int:
    """Client side: send HELLO, await HELLO_ACK; returns the initial credits."""
    old = sock.gettimeout()
    sock.settimeout(timeout)
    try:
        hello = encode_envelope({"proto": PROTO_VERSION,
                                 "producer_id": producer_id.encode("utf-8")})
        send_frame(sock, FRAME_HELLO, hello)
        frame = read_frame(sock, FrameDecoder())
        if frame is None:
            raise ConnectionClosed("peer closed during handshake")
        if frame.frame_type == FRAME_ERROR:
            raise ProtocolMismatch(frame.payload.decode("utf-8", "replace"))
        if frame.frame_type != FRAME_HELLO_ACK:
            raise ProtocolMismatch(f"expected HELLO_ACK, got 0x{frame.frame_type:02X}")
        fields = decode_envelope(frame.payload)
        if fields.get("proto") != PROTO_VERSION:
            send_frame(sock, FRAME_ERROR, b"proto")
            raise ProtocolMismatch("consumer speaks a different protocol version")
        raw = fields.get("initial_credits", b"")
        if len(raw) != 4:
            raise ProtocolMismatch("bad initial_credits field")
        return struct.unpack(">I", raw)[0]
    except socket.timeout:
        raise HandshakeTimeout("no HELLO_ACK within timeout") from None
    finally:
        sock.settimeout(old)


def consumer_handshake(sock: socket.socket, initial_credits: int,
                       timeout: float = HANDSHAKE_TIMEOUT) -> str:
    """Server side: await HELLO, reply HELLO_ACK; returns the producer id."""
    old = sock.gettimeout()
    sock.settimeout(timeout)
    try:
        frame = read_frame(sock, FrameDecoder())
        if frame is None:
            raise ConnectionClosed("peer closed during handshake")
        if frame.frame_type != FRAME_HELLO:
            send_frame(sock, FRAME_ERROR, b"expected HELLO")
            raise ProtocolMismatch(f"expected HELLO, got 0x{frame.frame_type:02X}")
        fields = decode_envelope(frame.payload)
        if fields.get("proto") != PROTO_VERSION:
            send_frame(sock, FRAME_ERROR, b"proto")
            raise ProtocolMismatch("producer speaks a different protocol version")
        producer_id = fields.get("producer_id", b"").decode("utf-8", "replace")
        ack = encode_envelope({"proto": PROTO_VERSION,
                               "initial_credits": struct.pack(">I", initial_credits)})
        send_frame(sock, FRAME_HELLO_ACK, ack)
        return producer_id
    except socket.timeout:
        raise HandshakeTimeout("no HELLO within timeout") from None
    finally:
        sock.settimeout(old)


# ---------------------------------------------------------------------------
# Flow control
# ---------------------------------------------------------------------------

@dataclass
class FlowState:
    """Credit bookkeeping for one side of one connection.

    The sender may only send DATA while credits_remaining >= 1; the
    receiver's granted-but-unconsumed credits never exceed the window.
    """

    window: int
    credits_remaining: int = 0
    data_sent: int = 0
    credits_granted: int = 0

    def send_data(self) -> None:
        if self.credits_remaining < 1:
            raise CreditViolation("DATA send attempted with zero credits")
        self.credits_remaining -= 1
        self.data_sent += 1

    def credit_received(self, n: int) -> None:
        self.credits_remaining += n

    def grant(self, n: int) -> None:
        if self.credits_remaining + n > self.window:
            raise CreditViolation("grant would exceed the window")
        self.credits_remaining += n
        self.credits_granted += n

    def data_received(self) -> None:
        if self.credits_remaining < 1:
            raise CreditViolation("peer sent DATA beyond granted credits")
        self.credits_remaining -= 1
        self.data_sent += 1


def check_sender_trace(events: list[tuple], window: int) -> int:
    """Replay a sender trace of ("credit", n) and ("data",) events.

    Grants include the handshake grant. Returns the maximum in-flight DATA
    (sent but not yet covered by re-granted credits); raises CreditViolation
    if any DATA was sent without a credit.
    """
    credits = 0
    granted = 0
    sent = 0
    max_in_flight = 0
    for ev in events:
        if ev[0] == "credit":
            credits += ev[1]
            granted += ev[1]
        elif ev[0] == "data":
            if credits < 1:
                raise CreditViolation(f"DATA at event {sent} without credit")
            credits -= 1
            sent += 1
            max_in_flight = max(max_in_flight, sent - (granted - window))
    return max_in_flight


def check_consumer_trace(events: list[tuple], window: int) -> dict:
    """Replay a consumer trace of ("grant", n), ("recv",), ("drain",) events.

    Verifies that DATA never arrives beyond granted credits, that grants only
    re-issue drained credits, and that granted-minus-drained never exceeds
    the window (so a full queue blocks further grants).
    """
    granted = 0
    received = 0
    drained = 0
    drained_at_last_grant = 0
    max_queue = 0
    grants = []
    for ev in events:
        if ev[0] == "grant":
            n = ev[1]
            if granted + n - drained > window:
                raise CreditViolation("grant overruns queue capacity")
            if granted > 0 and n > drained - drained_at_last_grant:
                raise CreditViolation("grant exceeds credits drained since the last grant")
            granted += n
            drained_at_last_grant = drained
            grants.append(n)
        elif ev[0] == "recv":
            received += 1
            if received > granted:
                raise CreditViolation("DATA received beyond granted credits")
            max_queue = max(max_queue, received - drained)
        elif ev[0] == "drain":
            drained += 1
    return {"max_queue": max_queue, "grants": grants,
            "received": received, "drained": drained}
