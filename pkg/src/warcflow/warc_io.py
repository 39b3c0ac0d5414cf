"""WARC file reading and writing.

Handles plain and member-wise gzip-compressed archives. Each gzip member
is an independently decompressible stream, conventionally one per record,
which is what makes random access by member offset possible.
"""

from __future__ import annotations

import logging
import os
import zlib
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator, Optional

from . import WarcflowError

logger = logging.getLogger(__name__)

GZIP_MAGIC = b"\x1f\x8b"
_CHUNK = 64 * 1024
_MAX_HEADER_SECTION = 1024 * 1024

MANDATORY_HEADERS = ("WARC-Record-ID", "WARC-Type", "Content-Length", "WARC-Date")

WARC_TYPES = frozenset(
    {"warcinfo", "request", "response", "resource",
     "metadata", "revisit", "conversion", "continuation"}
)


class WarcIoError(WarcflowError):
    pass


class CorruptGzip(WarcIoError):
    def __init__(self, offset: int):
        self.offset = offset
        super().__init__(f"corrupt gzip member at offset {offset}")


class MalformedHeader(WarcIoError):
    def __init__(self, line_no: int, detail: str = ""):
        self.line_no = line_no
        super().__init__(f"malformed header at line {line_no}" + (f": {detail}" if detail else ""))


class MissingMandatoryHeader(WarcIoError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"missing mandatory header {name}")


class TruncatedBlock(WarcIoError):
    """Record body (including its CRLFCRLF terminator) ends early."""

    def __init__(self, expected: int, got: int):
        self.expected = expected
        self.got = got
        super().__init__(f"truncated block: expected {expected} bytes, got {got}")


class FileUnreadable(WarcIoError):
    def __init__(self, path: str):
        self.path = path
        super().__init__(f"cannot read {path}")


class NotHttp(WarcIoError):
    pass


class BadChunk(WarcIoError):
    def __init__(self, offset: int):
        self.offset = offset
        super().__init__(f"bad chunk at body offset {offset}")


class _Incomplete(Exception):
    """Internal: header section runs past the end of the buffer."""

    def __init__(self, line_no: int):
        self.line_no = line_no


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SourceLocation:
    """Where a record came from: gzip member offset, or record offset for
    uncompressed files."""

    file_path: str
    member_offset: int
    record_index: int


@dataclass(frozen=True)
class WarcRecord:
    record_id: str
    warc_type: str
    target_uri: Optional[str]
    content_length: int
    headers: tuple[tuple[str, str], ...]
    block: bytes
    source: SourceLocation

    def header(self, name: str) -> Optional[str]:
        """Case-insensitive lookup of the first header with this name."""
        lname = name.lower()
        for k, v in self.headers:
            if k.lower() == lname:
                return v
        return None


@dataclass(frozen=True)
class HttpPayload:
    status_code: int
    mime_type: str
    charset: Optional[str]
    body: bytes


# ---------------------------------------------------------------------------
# Gzip member scanning
# ---------------------------------------------------------------------------

class _MemberScanner:
    """Incremental scan over a stream of concatenated gzip members.

    Keeps at most one member's compressed bytes buffered, so memory stays
    bounded by the largest member plus one read chunk.
    """

    def __init__(self, stream: BinaryIO, head: bytes = b""):
        self.stream = stream
        self.buf = bytearray(head)
        self.base = 0
        self.eof = False

    def _fill(self, need: int) -> bool:
        while not self.eof and len(self.buf) < need:
            chunk = self.stream.read(_CHUNK)
            if not chunk:
                self.eof = True
                break
            self.buf.extend(chunk)
        return len(self.buf) >= need

    def _drop(self, n: int) -> None:
        del self.buf[:n]
        self.base += n

    def _try_member(self) -> tuple[int, bytes]:
        """Decode one member at the buffer head; (compressed_length, data).

        Raises zlib.error on corruption or truncation. Does not consume."""
        decomp = zlib.decompressobj(16 + zlib.MAX_WBITS)
        out = bytearray()
        fed = 0
        while True:
            self._fill(fed + _CHUNK)
            piece = bytes(self.buf[fed:fed + _CHUNK])
            if not piece:
                raise zlib.error("truncated gzip member")
            out.extend(decomp.decompress(piece))
            fed += len(piece)
            if decomp.eof:
                return fed - len(decomp.unused_data), bytes(out)

    def events(self, resync: bool) -> Iterator[tuple]:
        """Yield ("member", offset, comp_len, data) and ("corrupt", offset).

        With resync=False, the first corruption raises CorruptGzip after all
        prior members were yielded. With resync=True, one "corrupt" event is
        emitted per bad span and scanning continues at the next decodable
        member.
        """
        self._fill(2)
        bad_span = False
        while self.buf:
            start = self.base
            if self.buf[:2] == GZIP_MAGIC:
                try:
                    comp, data = self._try_member()
                except zlib.error:
                    pass
                else:
                    yield ("member", start, comp, data)
                    self._drop(comp)
                    self._fill(2)
                    bad_span = False
                    continue
            if not bad_span:
                if not resync:
                    raise CorruptGzip(start)
                yield ("corrupt", start)
                bad_span = True
            # advance to the next magic candidate; keep at most one byte of
            # tail so a magic straddling a chunk boundary is not lost
            idx = self.buf.find(GZIP_MAGIC, 1)
            if idx != -1:
                self._drop(idx)
            elif self.eof:
                self._drop(len(self.buf))
            else:
                self._drop(max(1, len(self.buf) - 1))
                self._fill(len(self.buf) + 1)


def split_gzip_members(stream: BinaryIO) -> Iterator[tuple[int, int]]:
    """Yield (offset, compressed_length) per gzip member of the stream.

    Non-gzip input yields one pseudo-member covering the whole stream, so
    downstream code has a single shape to handle. Corruption raises
    CorruptGzip(offset) after the members before it were yielded.
    """
    head = stream.read(2)
    if head[:2] != GZIP_MAGIC:
        total = len(head)
        while True:
            chunk = stream.read(_CHUNK)
            if not chunk:
                break
            total += len(chunk)
        if total:
            yield (0, total)
        return
    scanner = _MemberScanner(stream, head)
    for ev in scanner.events(resync=False):
        if ev[0] == "member":
            yield (ev[1], ev[2])


# ---------------------------------------------------------------------------
# Record grammar
# ---------------------------------------------------------------------------

def _decode_value(raw: bytes) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError:
        return raw.decode("latin-1")


def _parse_core(data: bytes, pos: int) -> tuple[list[tuple[str, str]], bytes, int]:
    """Parse one record at data[pos:]; (headers, block, end_pos).

    Raises _Incomplete when the buffer ends inside the header section, so
    streaming callers can refill and retry.
    """
    line_end = data.find(b"\r\n", pos)
    if line_end < 0:
        raise _Incomplete(1)
    version = data[pos:line_end]
    if version not in (b"WARC/1.0", b"WARC/1.1"):
        raise MalformedHeader(1, "bad version line")
    headers: list[tuple[str, str]] = []
    cursor = line_end + 2
    line_no = 1
    while True:
        if cursor - pos > _MAX_HEADER_SECTION:
            raise MalformedHeader(line_no, "header section too large")
        line_end = data.find(b"\r\n", cursor)
        if line_end < 0:
            raise _Incomplete(line_no + 1)
        line = data[cursor:line_end]
        cursor = line_end + 2
        line_no += 1
        if not line:
            break
        sep = line.find(b":")
        if sep < 0:
            raise MalformedHeader(line_no)
        name = _decode_value(line[:sep]).strip()
        if not name:
            raise MalformedHeader(line_no)
        headers.append((name, _decode_value(line[sep + 1:]).strip()))

    lookup = {k.lower(): v for k, v in headers}
    for name in MANDATORY_HEADERS:
        if name.lower() not in lookup:
            raise MissingMandatoryHeader(name)
    try:
        content_length = int(lookup["content-length"])
    except ValueError:
        raise MalformedHeader(line_no, "non-numeric Content-Length") from None
    if content_length < 0:
        raise MalformedHeader(line_no, "negative Content-Length")

    need = content_length + 4
    avail = len(data) - cursor
    if avail < need:
        raise TruncatedBlock(need, max(avail, 0))
    block = data[cursor:cursor + content_length]
    trailer = data[cursor + content_length:cursor + need]
    if trailer != b"\r\n\r\n":
        matching = 0
        for a, b in zip(trailer, b"\r\n\r\n"):
            if a != b:
                break
            matching += 1
        raise TruncatedBlock(need, content_length + matching)
    return headers, block, cursor + need


def _build(headers: list[tuple[str, str]], block: bytes, source: SourceLocation) -> WarcRecord:
    lookup = {k.lower(): v for k, v in headers}
    return WarcRecord(
        record_id=lookup["warc-record-id"],
        warc_type=lookup["warc-type"].lower(),
        target_uri=lookup.get("warc-target-uri"),
        content_length=len(block),
        headers=tuple(headers),
        block=block,
        source=source,
    )


def parse_record(data: bytes, source: SourceLocation) -> WarcRecord:
    """Parse a single record from bytes; bytes beyond the record are ignored."""
    try:
        headers, block, _ = _parse_core(data, 0)
    except _Incomplete as exc:
        raise MalformedHeader(exc.line_no, "header section not terminated") from None
    return _build(headers, block, source)


def write_record(record: WarcRecord, compress: bool = False) -> bytes:
    """Serialize a record; with compress=True, one gzip member per record."""
    if len(record.block) != record.content_length:
        raise ValueError("block length does not match content_length")
    out = bytearray(b"WARC/1.1\r\n")
    for name, value in record.headers:
        out += name.encode("utf-8") + b": " + value.encode("utf-8") + b"\r\n"
    out += b"\r\n"
    out += record.block
    out += b"\r\n\r\n"
    data = bytes(out)
    if compress:
        import gzip

        return gzip.compress(data, 9, mtime=0)
    return data


# ---------------------------------------------------------------------------
# File iteration
# ---------------------------------------------------------------------------

class WarcReader:
    """Single-pass record iterator over a .warc or .warc.gz file.

    Parse failures skip ahead (to the next gzip member, or to the next
    version marker for plain files) and increment skipped_count rather than
    aborting the file.
    """

    def __init__(self, path):
        self.path = os.fspath(path)
        self.skipped_count = 0
        self._index = 0

    def __iter__(self) -> Iterator[WarcRecord]:
        try:
            f = open(self.path, "rb")
        except OSError as exc:
            raise FileUnreadable(self.path) from exc
        with f:
            head = f.read(2)
            if head[:2] == GZIP_MAGIC:
                yield from self._iter_gzip(f, head)
            else:
                yield from self._iter_plain(f, head)

    def _skip(self, where: str) -> None:
        self.skipped_count += 1
        logger.warning("skipping unparseable data in %s (%s)", self.path, where)

    def _iter_gzip(self, f: BinaryIO, head: bytes) -> Iterator[WarcRecord]:
        scanner = _MemberScanner(f, head)
        for ev in scanner.events(resync=True):
            if ev[0] == "corrupt":
                self._skip(f"member at offset {ev[1]}")
                continue
            _, offset, _comp, data = ev
            pos = 0
            while pos < len(data):
                while data[pos:pos + 2] == b"\r\n":
                    pos += 2
                if pos >= len(data):
                    break
                try:
                    headers, block, pos = _parse_core(data, pos)
                except (WarcIoError, _Incomplete):
                    self._skip(f"record in member at offset {offset}")
                    break
                source = SourceLocation(self.path, offset, self._index)
                self._index += 1
                yield _build(headers, block, source)

    def _iter_plain(self, f: BinaryIO, head: bytes) -> Iterator[WarcRecord]:
        buf = bytearray(head)
        base = 0
        eof = False

        def fill(need: int) -> bool:
            nonlocal eof
            while not eof and len(buf) < need:
                chunk = f.read(_CHUNK)
                if not chunk:
                    eof = True
                    break
                buf.extend(chunk)
            return len(buf) >= need

        def drop(n: int) -> None:
            nonlocal base
            del buf[:n]
            base += n

        bad_span = False
        while True:
            fill(2)
            while buf[:2] == b"\r\n":
                drop(2)
                fill(2)
            if not buf:
                break
            start = base
            record = None
            while True:
                try:
                    headers, block, end = _parse_core(bytes(buf), 0)
                    record = (headers, block, end)
                    break
                except (_Incomplete, TruncatedBlock) as exc:
                    if eof or (isinstance(exc, _Incomplete) and len(buf) > _MAX_HEADER_SECTION):
                        record = exc
                        break
                    want = len(buf) + _CHUNK
                    if isinstance(exc, TruncatedBlock):
                        want = max(want, exc.expected + 16)
                    fill(want)
                except WarcIoError as exc:
                    record = exc
                    break
            if isinstance(record, tuple):
                headers, block, end = record
                source = SourceLocation(self.path, start, self._index)
                self._index += 1
                drop(end)
                bad_span = False
                yield _build(headers, block, source)
                continue
            # parse failed: resync at the next version marker
            if not bad_span:
                self._skip(f"record at offset {start}")
                bad_span = True
            while True:
                idx = buf.find(b"WARC/1.", 1)
                if idx != -1:
                    drop(idx)
                    bad_span = False
                    break
                if eof:
                    drop(len(buf))
                    break
                drop(max(1, len(buf) - 8))
                fill(len(buf) + 1)
            if not buf and eof:
                break


def iterate_records(path) -> WarcReader:
    """Open a WARC file for iteration; see WarcReader."""
    return WarcReader(path)


def read_record_at(path, offset: int, record_index: int = 0) -> WarcRecord:
    """Random access: parse the record at a known member (or record) offset."""
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise FileUnreadable(os.fspath(path)) from exc
    with f:
        f.seek(offset)
        head = f.read(2)
        source = SourceLocation(os.fspath(path), offset, record_index)
        if head[:2] == GZIP_MAGIC:
            scanner = _MemberScanner(f, head)
            try:
                _, data = scanner._try_member()
            except zlib.error:
                raise CorruptGzip(offset) from None
            return parse_record(data, source)
        buf = bytearray(head)
        while True:
            try:
                headers, block, _ = _parse_core(bytes(buf), 0)
                return _build(headers, block, source)
            except (_Incomplete, TruncatedBlock) as exc:
                chunk = f.read(_CHUNK)
                if not chunk:
                    if isinstance(exc, _Incomplete):
                        raise MalformedHeader(exc.line_no, "record runs past end of file") from None
                    raise
                buf.extend(chunk)


# ---------------------------------------------------------------------------
# HTTP payload extraction
# ---------------------------------------------------------------------------

def _dechunk(body: bytes) -> bytes:
    out = bytearray()
    pos = 0
    while True:
        line_end = body.find(b"\r\n", pos)
        if line_end < 0:
            raise BadChunk(pos)
        size_token = body[pos:line_end].split(b";", 1)[0].strip()
        try:
            size = int(size_token, 16)
        except ValueError:
            raise BadChunk(pos) from None
        pos = line_end + 2
        if size == 0:
            return bytes(out)
        if pos + size + 2 > len(body):
            raise BadChunk(pos)
        out += body[pos:pos + size]
        pos += size
        if body[pos:pos + 2] != b"\r\n":
            raise BadChunk(pos)
        pos += 2


def extract_http_payload(record: WarcRecord) -> HttpPayload:
    """Split an HTTP response block into status, media type and body.

    Chunked transfer coding is undone; Content-Encoding is left alone and
    passes through as payload bytes.
    """
    block = record.block
    sep = block.find(b"\r\n\r\n")
    if sep < 0:
        raise NotHttp("no CRLFCRLF header terminator")
    head_lines = block[:sep].split(b"\r\n")
    parts = head_lines[0].split(None, 2)
    if len(parts) < 2 or not parts[0].upper().startswith(b"HTTP/"):
        raise NotHttp("malformed status line")
    try:
        status = int(parts[1])
    except ValueError:
        raise NotHttp("non-numeric status code") from None
    if not 100 <= status <= 599:
        raise NotHttp(f"status code {status} out of range")

    http_headers: dict[str, str] = {}
    for line in head_lines[1:]:
        colon = line.find(b":")
        if colon <= 0:
            continue
        http_headers[_decode_value(line[:colon]).strip().lower()] = _decode_value(line[colon + 1:]).strip()

    mime = "application/octet-stream"
    charset = None
    ctype = http_headers.get("content-type")
    if ctype:
        pieces = ctype.split(";")
        mime = pieces[0].strip().lower()
        for param in pieces[1:]:
            if "=" in param:
                key, val = param.split("=", 1)
                if key.strip().lower() == "charset":
                    charset = val.strip().strip('"').lower() or None

    body = block[sep + 4:]
    if "chunked" in http_headers.get("transfer-encoding", "").lower():
        body = _dechunk(body)
    return HttpPayload(status_code=status, mime_type=mime, charset=charset, body=body)


# ---------------------------------------------------------------------------
# Manifest and record construction helpers
# ---------------------------------------------------------------------------

def read_manifest(path) -> list[str]:
    """Read a manifest file: one path per line, '#' comments allowed.

    Relative entries are resolved against the manifest's own directory."""
    path = os.fspath(path)
    try:
        with open(path, "r", encoding="utf-8-sig", newline="") as f:
            text = f.read()
    except OSError as exc:
        raise FileUnreadable(path) from exc
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        entries.append(line if os.path.isabs(line) else os.path.join(root, line))
    return entries


def build_record(
    warc_type: str,
    block: bytes,
    record_id: str,
    date: str = "2022-01-01T00:00:00Z",
    target_uri: Optional[str] = None,
    content_type: Optional[str] = None,
    extra_headers: tuple[tuple[str, str], ...] = (),
    source: SourceLocation = SourceLocation("<memory>", 0, 0),
) -> WarcRecord:
    """Assemble a well-formed record with the mandatory headers filled in."""
    headers: list[tuple[str, str]] = [
        ("WARC-Record-ID", record_id),
        ("WARC-Type", warc_type),
        ("WARC-Date", date),
        ("Content-Length", str(len(block))),
    ]
    if target_uri is not None:
        headers.append(("WARC-Target-URI", target_uri))
    if content_type is not None:
        headers.append(("Content-Type", content_type))
    headers.extend(extra_headers)
    return WarcRecord(
        record_id=record_id,
        warc_type=warc_type.lower(),
        target_uri=target_uri,
        content_length=len(block),
        headers=tuple(headers),
        block=block,
        source=source,
    )
