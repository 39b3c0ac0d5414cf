#!/usr/bin/env python3
"""Regenerate the wire-conformance golden fixture.

Writes tests/data/golden_frames.bin (the byte stream) and
tests/data/golden_frames.json (the expected decode, frame by frame).
Any conforming implementation, in any language, must decode the .bin
into exactly the frames the .json describes and re-encode it byte for
byte.
"""

import json
import os
import struct
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from warcflow.wire import (  # noqa: E402
    FRAME_CREDIT,
    FRAME_DATA,
    FRAME_END,
    FRAME_ERROR,
    FRAME_HELLO,
    FRAME_HELLO_ACK,
    PROTO_VERSION,
    encode_envelope,
    frame_encode,
)

OUT_DIR = os.path.join(os.path.dirname(__file__), "..", "tests", "data")


def main() -> None:
    frames = []

    hello = encode_envelope({"proto": PROTO_VERSION, "producer_id": b"w0"})
    frames.append(("HELLO", FRAME_HELLO, hello,
                   {"proto": b"WDL1", "producer_id": b"w0"}))

    ack = encode_envelope({"proto": PROTO_VERSION,
                           "initial_credits": struct.pack(">I", 64)})
    frames.append(("HELLO_ACK", FRAME_HELLO_ACK, ack,
                   {"proto": b"WDL1", "initial_credits": b"\x00\x00\x00\x40"}))

    # the minimal two-field envelope with its frozen byte layout
    tiny = encode_envelope({"a": b"\x01", "b": b""})
    assert tiny.hex() == "0002000161000000010100016200000000"
    frames.append(("DATA", FRAME_DATA, tiny, {"a": b"\x01", "b": b""}))

    record = encode_envelope({
        "record_id": b"<urn:uuid:00000000-0000-4000-8000-000000000001>",
        "target_uri": b"http://example.com/img/one.jpg",
        "mime": b"image/jpeg",
        "payload": bytes(range(16)),
        "source_file": b"fixture-000.warc.gz",
        "source_offset": b"2048",
    })
    frames.append(("DATA", FRAME_DATA, record, {
        "record_id": b"<urn:uuid:00000000-0000-4000-8000-000000000001>",
        "target_uri": b"http://example.com/img/one.jpg",
        "mime": b"image/jpeg",
        "payload": bytes(range(16)),
        "source_file": b"fixture-000.warc.gz",
        "source_offset": b"2048",
    }))

    credit = struct.pack(">I", 8)
    assert frame_encode(FRAME_CREDIT, credit).hex() == "200000000400000008"
    frames.append(("CREDIT", FRAME_CREDIT, credit, None))

    frames.append(("ERROR", FRAME_ERROR, b"proto", None))

    assert frame_encode(FRAME_END, b"").hex() == "7f00000000"
    frames.append(("END", FRAME_END, b"", None))

    blob = b"".join(frame_encode(t, p) for _, t, p, _ in frames)
    manifest = []
    for name, ftype, payload, fields in frames:
        entry = {"name": name, "type": ftype, "payload_hex": payload.hex()}
        if fields is not None:
            entry["fields"] = {k: v.hex() for k, v in fields.items()}
        manifest.append(entry)

    os.makedirs(OUT_DIR, exist_ok=True)
    with open(os.path.join(OUT_DIR, "golden_frames.bin"), "wb") as fh:
        fh.write(blob)
    with open(os.path.join(OUT_DIR, "golden_frames.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    print(f"{len(frames)} frames, {len(blob)} bytes")


if __name__ == "__main__":
    main()
