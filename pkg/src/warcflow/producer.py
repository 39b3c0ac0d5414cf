"""CPU-side worker: parse archive shards, filter, and stream envelopes.

File parsing fans out across reader threads, but every envelope funnels
through a single sender that owns the connection, applies the filter stages,
and obeys the credit window. The sender drains per-slot queues in manifest
order, so the byte sequence on the wire is a pure function of shard + config
no matter how the reader threads are scheduled.
"""

from __future__ import annotations

import hashlib
import heapq
import logging
import queue
import select
import socket
import threading
import time
from dataclasses import dataclass, field

from . import WarcflowError
from .config import PipelineConfig, split_endpoint
from .filters import Drop, Sample
from .linker import record_to_envelope
from .warc_io import NotHttp, WarcIoError, WarcReader, extract_http_payload
from .wire import (
    FRAME_CREDIT,
    FRAME_DATA,
    FRAME_END,
    FRAME_ERROR,
    ConnectionClosed,
    FlowState,
    FrameDecoder,
    TooLarge,
    WireError,
    encode_envelope,
    frame_encode,
    producer_handshake,
)

logger = logging.getLogger(__name__)


class ProducerError(WarcflowError):
    pass


class ConnectionLost(ProducerError):
    """Stream aborted; carries the frame count and stats gathered so far."""

    def __init__(self, frames_sent: int, stats: "ProducerStats", detail: str):
        self.frames_sent = frames_sent
        self.stats = stats
        super().__init__(f"connection lost after {frames_sent} data frames: {detail}")


# ---------------------------------------------------------------------------
# Shard assignment
# ---------------------------------------------------------------------------

@dataclass
class ShardAssignment:
    workers: dict[int, list[tuple[str, int]]]

    def load(self, worker_id: int) -> int:
        return sum(size for _, size in self.workers.get(worker_id, []))

    def makespan(self) -> int:
        if not self.workers:
            return 0
        return max(self.load(w) for w in self.workers)

    def files_for(self, worker_id: int) -> list[str]:
        return [path for path, _ in self.workers.get(worker_id, [])]


def assign_shards(files: list[tuple[str, int]], k: int) -> ShardAssignment:
    """Longest-processing-time greedy: biggest file to the least-loaded worker,
    ties to the lowest worker id. Deterministic for a fixed input order."""
    if k < 1:
        raise ProducerError(f"worker count must be >= 1, got {k}")
    for path, size in files:
        if size < 0:
            raise ProducerError(f"negative size for {path}")
    workers: dict[int, list[tuple[str, int]]] = {w: [] for w in range(k)}
    heap = [(0, w) for w in range(k)]
    heapq.heapify(heap)
    for path, size in sorted(files, key=lambda f: -f[1]):
        load, w = heapq.heappop(heap)
        workers[w].append((path, size))
        heapq.heappush(heap, (load + size, w))
    return ShardAssignment(workers)


# ---------------------------------------------------------------------------
# Producer stats
# ---------------------------------------------------------------------------

@dataclass
class ProducerStats:
    producer_id: str = "w0"
    records_read: int = 0
    records_kept: int = 0
    drop_counts: dict[str, int] = field(default_factory=dict)
    data_frames_sent: int = 0
    bytes_sent: int = 0
    files_unreadable: int = 0
    parse_skips: int = 0
    wall_time: float = 0.0
    post_filter_rate: float = 0.0
    envelope_stream_sha256: str = ""

    def to_dict(self) -> dict:
        return {
            "producer_id": self.producer_id,
            "records_read": self.records_read,
            "records_kept": self.records_kept,
            "drop_counts": dict(self.drop_counts),
            "data_frames_sent": self.data_frames_sent,
            "bytes_sent": self.bytes_sent,
            "files_unreadable": self.files_unreadable,
            "parse_skips": self.parse_skips,
            "wall_time": self.wall_time,
            "post_filter_rate": self.post_filter_rate,
            "envelope_stream_sha256": self.envelope_stream_sha256,
        }


# ---------------------------------------------------------------------------
# Record -> envelope
# ---------------------------------------------------------------------------

def envelope_for_record(record) -> tuple[dict[str, bytes], dict[str, str]]:
    """HTTP responses contribute their decoded body and header MIME; anything
    else ships its raw block under the record's own content type."""
    try:
        payload = extract_http_payload(record)
        body, mime = payload.body, payload.mime_type
    except (NotHttp, WarcIoError):
        body = record.block
        mime = record.header("Content-Type") or "application/octet-stream"
    env = record_to_envelope(record, body, mime)
    return env, {"warc_type": record.warc_type}


# ---------------------------------------------------------------------------
# Reader threads
# ---------------------------------------------------------------------------

_ITEM, _SKIPS, _FILE_END, _FILE_ERROR = "item", "skips", "file_end", "file_error"


def _queue_put(q: queue.Queue, item, stop: threading.Event) -> bool:
    while not stop.is_set():
        try:
            q.put(item, timeout=0.1)
            return True
        except queue.Full:
            continue
    return False


def _read_stripe(paths: list[str], out: queue.Queue, stop: threading.Event):
    for path in paths:
        try:
            reader = WarcReader(path)
            for record in reader:
                if not _queue_put(out, (_ITEM, envelope_for_record(record)), stop):
                    return
            _queue_put(out, (_SKIPS, reader.skipped_count), stop)
            _queue_put(out, (_FILE_END, path), stop)
        except (WarcIoError, OSError) as exc:
            logger.warning("skipping unreadable file %s: %s", path, exc)
            if not _queue_put(out, (_FILE_ERROR, path), stop):
                return


# ---------------------------------------------------------------------------
# Sender
# ---------------------------------------------------------------------------

class _Sender:
    def __init__(self, sock: socket.socket, flow: FlowState, trace):
        self.sock = sock
        self.flow = flow
        self.trace = trace
        self.decoder = FrameDecoder()

    def _pump(self, need_credit: bool):
        """Absorb CREDIT frames; block only while a credit is required."""
        while True:
            blocking = need_credit and self.flow.credits_remaining == 0
            ready, _, _ = select.select([self.sock], [], [], None if blocking else 0)
            if not ready:
                return
            data = self.sock.recv(65536)
            if not data:
                raise ConnectionClosed("consumer closed the connection mid-stream")
            try:
                self.decoder.feed(data)
                feed_error = None
            except WireError as exc:
                feed_error = exc  # credits ahead of the bad bytes still count
            while (frame := self.decoder.next_frame()) is not None:
                if frame.frame_type == FRAME_CREDIT:
                    if len(frame.payload) != 4:
                        raise WireError(f"credit frame with {len(frame.payload)} payload bytes")
                    n = int.from_bytes(frame.payload, "big")
                    self.flow.credit_received(n)
                    if self.trace is not None:
                        self.trace.append(("credit", n))
                elif frame.frame_type == FRAME_ERROR:
                    raise ConnectionClosed(
                        f"consumer reported error: {frame.payload[:80]!r}")
                else:
                    raise WireError(f"unexpected frame type 0x{frame.frame_type:02x}")
            if feed_error is not None:
                raise feed_error

    def send_data(self, payload: bytes) -> int:
        self._pump(need_credit=True)
        self.flow.send_data()
        data = frame_encode(FRAME_DATA, payload)
        self.sock.sendall(data)
        if self.trace is not None:
            self.trace.append(("data",))
        return len(data)

    def send_end(self) -> int:
        self._pump(need_credit=False)
        data = frame_encode(FRAME_END, b"")
        self.sock.sendall(data)
        return len(data)


def run_producer(config: PipelineConfig, files: list[str], *, worker_id: int = 0,
                 endpoint: str | None = None, trace: list | None = None,
                 connect_timeout: float = 10.0) -> ProducerStats:
    """Stream every surviving record of `files` (in order) to the consumer.

    Raises ConnectionLost if the consumer goes away mid-stream; the exception
    carries the stats accumulated so far and their accounting identity holds.
    """
    start = time.monotonic()
    stats = ProducerStats(producer_id=f"w{worker_id}")
    pipeline = config.build_pipeline()
    host, port = split_endpoint(endpoint or config.endpoint)

    sock = socket.create_connection((host, port), timeout=connect_timeout)
    stop = threading.Event()
    threads: list[threading.Thread] = []
    slots: list[queue.Queue] = []
    stream_hash = hashlib.sha256()

    def finalize():
        stats.records_read = pipeline.input_count
        stats.records_kept = pipeline.kept_count
        stats.drop_counts = dict(pipeline.drop_counts)
        stats.wall_time = max(time.monotonic() - start, 1e-9)
        stats.post_filter_rate = stats.records_kept / stats.wall_time
        stats.envelope_stream_sha256 = stream_hash.hexdigest()

    try:
        initial = producer_handshake(sock, stats.producer_id)
        sock.settimeout(None)
        flow = FlowState(window=initial, credits_remaining=initial)
        if trace is not None:
            trace.append(("credit", initial))
        sender = _Sender(sock, flow, trace)

        parallel = max(1, min(config.parallelism, len(files))) if files else 1
        slots = [queue.Queue(maxsize=max(1, config.window)) for _ in range(parallel)]
        for s in range(parallel):
            stripe = files[s::parallel]
            if not stripe:
                continue
            t = threading.Thread(target=_read_stripe, args=(stripe, slots[s], stop),
                                 daemon=True, name=f"warcflow-reader-{s}")
            t.start()
            threads.append(t)

        try:
            for index in range(len(files)):
                slot = slots[index % parallel]
                while True:
                    kind, value = slot.get()
                    if kind == _FILE_END:
                        break
                    if kind == _FILE_ERROR:
                        stats.files_unreadable += 1
                        break
                    if kind == _SKIPS:
                        stats.parse_skips += value
                        continue
                    env, derived = value
                    result = pipeline.apply(Sample(env, derived))
                    if isinstance(result, Drop):
                        continue
                    env = result.envelope
                    for key, text in result.derived.items():
                        if key != "warc_type":
                            env[f"stage_meta.{key}"] = text.encode("utf-8")
                    try:
                        payload = encode_envelope(env)
                    except TooLarge:
                        # keep the accounting identity: reclassify as a drop
                        pipeline.kept_count -= 1
                        pipeline.drop_counts["too_large"] += 1
                        continue
                    stream_hash.update(payload)
                    stats.bytes_sent += sender.send_data(payload)
                    stats.data_frames_sent += 1
            stats.bytes_sent += sender.send_end()
            try:
                sock.shutdown(socket.SHUT_WR)
                sock.settimeout(5.0)
                while sock.recv(65536):
                    pass
            except OSError:
                pass
        except (OSError, ConnectionClosed) as exc:
            finalize()
            raise ConnectionLost(stats.data_frames_sent, stats, str(exc)) from None
    finally:
        stop.set()
        for slot in slots:
            while True:
                try:
                    slot.get_nowait()
                except queue.Empty:
                    break
        for t in threads:
            t.join(timeout=2.0)
        sock.close()

    finalize()
    return stats
