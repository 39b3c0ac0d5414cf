import json
import os
import random
import socket
import struct
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from warcflow.wire import (
    DEFAULT_PORT,
    FRAME_CREDIT,
    FRAME_DATA,
    FRAME_END,
    FRAME_ERROR,
    FRAME_HELLO,
    FRAME_HELLO_ACK,
    MAX_FRAME_PAYLOAD,
    PROTO_VERSION,
    CreditViolation,
    FlowState,
    Frame,
    FrameDecoder,
    MalformedEnvelope,
    ProtocolMismatch,
    TooLarge,
    UnknownFrameType,
    check_consumer_trace,
    check_sender_trace,
    consumer_handshake,
    decode_envelope,
    encode_envelope,
    frame_decode,
    frame_encode,
    make_record_envelope,
    producer_handshake,
    validate_record_envelope,
)

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


# --- frozen byte layouts -----------------------------------------------------


def test_envelope_frozen_example():
    enc = encode_envelope({"a": b"\x01", "b": b""})
    assert enc.hex() == "0002000161000000010100016200000000"


def test_end_frame_bytes():
    assert frame_encode(FRAME_END, b"").hex() == "7f00000000"


def test_credit_frame_bytes():
    assert frame_encode(FRAME_CREDIT, struct.pack(">I", 8)).hex() == \
        "200000000400000008"


def test_constants():
    assert PROTO_VERSION == b"WDL1"
    assert DEFAULT_PORT == 4850
    assert MAX_FRAME_PAYLOAD == 64 * 1024 * 1024
    assert (FRAME_HELLO, FRAME_HELLO_ACK, FRAME_DATA,
            FRAME_CREDIT, FRAME_ERROR, FRAME_END) == \
        (0x01, 0x02, 0x10, 0x20, 0x7E, 0x7F)


def test_golden_frames_decode_and_reencode():
    """The committed conformance fixture decodes to its manifest and
    re-encodes byte for byte."""
    with open(os.path.join(DATA_DIR, "golden_frames.bin"), "rb") as fh:
        blob = fh.read()
    with open(os.path.join(DATA_DIR, "golden_frames.json")) as fh:
        manifest = json.load(fh)

    frames = frame_decode(blob)
    assert len(frames) == len(manifest)
    for frame, entry in zip(frames, manifest):
        assert frame.frame_type == entry["type"]
        assert frame.payload.hex() == entry["payload_hex"]
        if "fields" in entry:
            fields = decode_envelope(frame.payload)
            assert {k: v.hex() for k, v in fields.items()} == entry["fields"]
            assert encode_envelope(fields) == frame.payload
    assert b"".join(frame_encode(f.frame_type, f.payload) for f in frames) == blob


# --- envelope codec ----------------------------------------------------------


def test_envelope_roundtrip_many():
    rng = random.Random(42)
    for _ in range(1000):
        n = rng.randrange(0, 8)
        fields = {}
        for _ in range(n):
            key = "".join(rng.choice("abcdefgh_.xyz") for _ in range(rng.randrange(1, 12)))
            fields[key] = rng.randbytes(rng.randrange(0, 200))
        enc = encode_envelope(fields)
        assert decode_envelope(enc) == fields


def test_envelope_keys_sorted_by_bytes():
    enc = encode_envelope({"zz": b"1", "a": b"2", "m.x": b"3"})
    # order in the wire bytes: a, m.x, zz
    pos_a = enc.find(b"\x00\x01a")
    pos_m = enc.find(b"\x00\x03m.x")
    pos_z = enc.find(b"\x00\x02zz")
    assert 0 < pos_a < pos_m < pos_z


def test_envelope_rejects_truncation_and_trailing():
    enc = encode_envelope({"abc": b"12345"})
    for cut in range(1, len(enc)):
        with pytest.raises(MalformedEnvelope):
            decode_envelope(enc[:cut])
    with pytest.raises(MalformedEnvelope):
        decode_envelope(enc + b"\x00")


def test_envelope_rejects_unsorted_and_duplicate_keys():
    body = b"".join([
        struct.pack(">H", 1), b"b", struct.pack(">I", 0),
        struct.pack(">H", 1), b"a", struct.pack(">I", 0),
    ])
    with pytest.raises(MalformedEnvelope):
        decode_envelope(struct.pack(">H", 2) + body)
    dup = b"".join([
        struct.pack(">H", 1), b"a", struct.pack(">I", 0),
        struct.pack(">H", 1), b"a", struct.pack(">I", 0),
    ])
    with pytest.raises(MalformedEnvelope):
        decode_envelope(struct.pack(">H", 2) + dup)


def test_envelope_rejects_non_utf8_key():
    body = struct.pack(">H", 1) + b"\xff" + struct.pack(">I", 0)
    with pytest.raises(MalformedEnvelope):
        decode_envelope(struct.pack(">H", 1) + body)


def test_envelope_too_large():
    with pytest.raises(TooLarge):
        encode_envelope({"payload": b"x" * 100}, max_size=50)


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(
    st.text(st.characters(min_codepoint=33, max_codepoint=126), min_size=1, max_size=20),
    st.binary(max_size=300), max_size=8))
def test_envelope_roundtrip_property(fields):
    assert decode_envelope(encode_envelope(fields)) == fields


def test_record_envelope_required_keys():
    env = make_record_envelope(record_id="<urn:uuid:1>", target_uri="http://x/",
                               mime="image/jpeg", payload=b"abc")
    validate_record_envelope(env)
    for key in ("record_id", "target_uri", "mime", "payload"):
        broken = dict(env)
        del broken[key]
        with pytest.raises(MalformedEnvelope):
            validate_record_envelope(broken)


# --- framing -----------------------------------------------------------------


def test_frame_roundtrip_stream_law():
    """Concatenated frames decode back to the same list regardless of how
    the bytes are sliced while feeding."""
    rng = random.Random(7)
    frames = []
    for _ in range(200):
        ftype = rng.choice([FRAME_HELLO, FRAME_HELLO_ACK, FRAME_DATA,
                            FRAME_CREDIT, FRAME_ERROR, FRAME_END])
        frames.append(Frame(ftype, rng.randbytes(rng.randrange(0, 64))))
    blob = b"".join(frame_encode(f.frame_type, f.payload) for f in frames)

    for trial in range(20):
        decoder = FrameDecoder()
        got = []
        pos = 0
        while pos < len(blob):
            step = rng.randrange(1, 40)
            decoder.feed(blob[pos:pos + step])
            got.extend(decoder.drain())
            pos += step
        assert got == frames
        assert not decoder.mid_frame


def test_frame_unknown_type():
    with pytest.raises(UnknownFrameType):
        FrameDecoder().feed(b"\x55\x00\x00\x00\x00")


def test_frames_before_garbage_survive_the_raise():
    good = frame_encode(FRAME_DATA, b"ok")
    decoder = FrameDecoder()
    with pytest.raises(UnknownFrameType):
        decoder.feed(good + b"\x42 junk")
    assert decoder.drain() == [Frame(FRAME_DATA, b"ok")]


def test_frame_oversized_length_rejected():
    header = bytes([FRAME_DATA]) + struct.pack(">I", MAX_FRAME_PAYLOAD + 1)
    with pytest.raises(Exception):
        FrameDecoder().feed(header)


def test_frame_decode_fuzz_never_hangs_or_crashes_wrongly():
    """Random garbage either decodes or raises a wire error; no other
    exception type and no infinite loop."""
    from warcflow.wire import WireError
    rng = random.Random(999)
    for _ in range(500):
        blob = rng.randbytes(rng.randrange(0, 120))
        try:
            frame_decode(blob)
        except WireError:
            pass


def test_mid_frame_flag():
    enc = frame_encode(FRAME_DATA, b"abcdef")
    d = FrameDecoder()
    d.feed(enc[:4])
    assert d.mid_frame
    d.feed(enc[4:])
    assert not d.mid_frame


# --- handshake over a real socket -------------------------------------------


def loopback_pair():
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen(1)
    cli = socket.socket()
    cli.connect(srv.getsockname())
    conn, _ = srv.accept()
    srv.close()
    return cli, conn


def test_handshake_success():
    cli, conn = loopback_pair()
    try:
        result = {}

        def consumer():
            result["producer_id"] = consumer_handshake(conn, 64, timeout=5.0)

        t = threading.Thread(target=consumer)
        t.start()
        credits = producer_handshake(cli, "w3", timeout=5.0)
        t.join(5)
        assert credits == 64
        assert result["producer_id"] == "w3"
    finally:
        cli.close()
        conn.close()


def test_handshake_version_mismatch():
    cli, conn = loopback_pair()
    try:
        bad_hello = frame_encode(
            FRAME_HELLO, encode_envelope({"proto": b"WDL2", "producer_id": b"w0"}))

        def consumer():
            with pytest.raises(ProtocolMismatch):
                consumer_handshake(conn, 8, timeout=5.0)

        t = threading.Thread(target=consumer)
        t.start()
        cli.sendall(bad_hello)
        t.join(5)
        # the consumer must have answered with ERROR "proto"
        decoder = FrameDecoder()
        cli.settimeout(5.0)
        frames = []
        while not frames:
            chunk = cli.recv(4096)
            if not chunk:
                break
            decoder.feed(chunk)
            frames.extend(decoder.drain())
        assert frames and frames[0].frame_type == FRAME_ERROR
        assert frames[0].payload == b"proto"
    finally:
        cli.close()
        conn.close()


# --- credit flow state --------------------------------------------------------


def test_flow_blocks_at_zero_credits():
    flow = FlowState(window=8, credits_remaining=8)
    for _ in range(8):
        flow.send_data()
    with pytest.raises(CreditViolation):
        flow.send_data()
    flow.credit_received(3)
    flow.send_data()
    assert flow.data_sent == 9
    assert flow.credits_remaining == 2


def test_consumer_grant_accounting():
    flow = FlowState(window=8)
    flow.grant(8)
    for _ in range(8):
        flow.data_received()
    with pytest.raises(CreditViolation):
        flow.data_received()  # producer overran its credits
    assert flow.credits_granted == 8


def test_sender_trace_checker():
    events = [("credit", 4), ("data",), ("data",), ("credit", 2),
              ("data",), ("data",), ("data",), ("data",)]
    assert check_sender_trace(events, window=4) == 4
    bad = [("credit", 2), ("data",), ("data",), ("data",)]
    with pytest.raises(CreditViolation):
        check_sender_trace(bad, window=2)


def test_consumer_trace_checker():
    events = [("grant", 4), ("recv",), ("recv",), ("drain",), ("drain",),
              ("grant", 2), ("recv",)]
    out = check_consumer_trace(events, window=4)
    assert out["received"] == 3
    assert out["drained"] == 2
    assert out["max_queue"] <= 4
    overflow = [("grant", 2), ("recv",), ("recv",), ("recv",)]
    with pytest.raises(CreditViolation):
        check_consumer_trace(overflow, window=2)
