"""GPU-side consumer: accept producer streams, interleave, batch, persist.

One receiver thread per connection feeds a bounded per-stream queue; a single
batcher thread drains all queues round-robin, so sink writes never race.
Credit grants are tied to queue drains, which turns the bounded queues into
explicit wire-level backpressure.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from . import WarcflowError
from .config import PipelineConfig
from .filters import DedupState
from .wire import (
    FRAME_CREDIT,
    FRAME_DATA,
    FRAME_END,
    FRAME_ERROR,
    FlowState,
    FrameDecoder,
    WireError,
    consumer_handshake,
    decode_envelope,
    encode_envelope,
    frame_encode,
    validate_record_envelope,
)

logger = logging.getLogger(__name__)


class ConsumerError(WarcflowError):
    pass


class BindFailure(ConsumerError):
    def __init__(self, address: str, detail: str):
        self.address = address
        super().__init__(f"cannot bind {address}: {detail}")


class IoError(ConsumerError):
    def __init__(self, path: str, detail: str):
        self.path = path
        super().__init__(f"{path}: {detail}")


class _Sentinel:
    def __init__(self, name: str):
        self._name = name

    def __repr__(self):
        return self._name


STREAMS_EXHAUSTED = _Sentinel("STREAMS_EXHAUSTED")
SAMPLE_TIMEOUT = _Sentinel("SAMPLE_TIMEOUT")


# ---------------------------------------------------------------------------
# Interleaving
# ---------------------------------------------------------------------------

class StreamQueue:
    """Per-connection queue; capacity equals the flow window, so credits plus
    queued samples can never exceed the window."""

    def __init__(self, stream_id: str, capacity: int, grant_fn=None, trace=None):
        self.stream_id = stream_id
        self.capacity = capacity
        self.items: deque = deque()
        self.ended = False
        self.drained_since_grant = 0
        self.grant_fn = grant_fn
        self.trace = trace
        self.received = 0
        self.drawn = 0

    def push(self, sample):
        if len(self.items) >= self.capacity:
            raise ConsumerError(
                f"stream {self.stream_id}: queue overflow past window {self.capacity}")
        self.items.append(sample)
        self.received += 1
        if self.trace is not None:
            self.trace.append(("recv",))


@dataclass
class InterleaverState:
    streams: list[StreamQueue] = field(default_factory=list)
    cursor: int = 0
    counts: dict[str, int] = field(default_factory=dict)


def _prune_streams(state: InterleaverState):
    if not any(sq.ended and not sq.items for sq in state.streams):
        return
    kept = []
    cursor = state.cursor
    for i, sq in enumerate(state.streams):
        if sq.ended and not sq.items:
            if i < state.cursor:
                cursor -= 1
        else:
            kept.append(sq)
    state.streams = kept
    state.cursor = cursor % len(kept) if kept else 0


def interleave_next(state: InterleaverState, more_expected: bool = False):
    """One round-robin poll. Returns a sample, STREAMS_EXHAUSTED when every
    stream has ended and drained (and no more connections are expected), or
    None when the caller should wait for data."""
    _prune_streams(state)
    n = len(state.streams)
    for step in range(n):
        i = (state.cursor + step) % n
        sq = state.streams[i]
        if sq.items:
            sample = sq.items.popleft()
            state.cursor = (i + 1) % n
            state.counts[sq.stream_id] = state.counts.get(sq.stream_id, 0) + 1
            sq.drawn += 1
            sq.drained_since_grant += 1
            if sq.trace is not None:
                sq.trace.append(("drain",))
            threshold = max(1, sq.capacity // 2)
            if sq.grant_fn is not None and sq.drained_since_grant >= threshold:
                grant = sq.drained_since_grant
                sq.drained_since_grant = 0
                sq.grant_fn(grant)
            return sample
    if n == 0 and not more_expected:
        return STREAMS_EXHAUSTED
    return None


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    samples: list
    batch_index: int
    flush_reason: str  # "full" | "timeout" | "end"


def form_batches(next_sample, batch_size: int, flush_timeout_ms: int,
                 clock=time.monotonic):
    """Group a sample stream into batches of up to batch_size.

    next_sample(timeout_s) must return a sample, SAMPLE_TIMEOUT once the
    given wait expires, or STREAMS_EXHAUSTED at the end of all streams.
    The flush timer runs from the first sample of each batch.
    """
    if batch_size < 1:
        raise ConsumerError(f"batch size must be >= 1, got {batch_size}")
    if flush_timeout_ms < 1:
        raise ConsumerError(f"flush timeout must be >= 1 ms, got {flush_timeout_ms}")
    pending: list = []
    index = 0
    deadline = None
    while True:
        timeout = None if deadline is None else max(0.0, deadline - clock())
        item = next_sample(timeout)
        if item is STREAMS_EXHAUSTED:
            if pending:
                yield Batch(pending, index, "end")
            return
        if item is SAMPLE_TIMEOUT:
            if pending and clock() >= deadline:
                yield Batch(pending, index, "timeout")
                index += 1
                pending = []
                deadline = None
            continue
        pending.append(item)
        if len(pending) == 1:
            deadline = clock() + flush_timeout_ms / 1000.0
        if len(pending) >= batch_size:
            yield Batch(pending, index, "full")
            index += 1
            pending = []
            deadline = None


# ---------------------------------------------------------------------------
# Deterministic stand-in model
# ---------------------------------------------------------------------------

@dataclass
class InferenceResult:
    record_id: str
    score: float
    label: str
    payload_sha256: bytes
    stored_path: str | None = None


def stub_model_infer(batch: Batch, threshold: float = 0.5) -> list[InferenceResult]:
    """Per-sample score: the first 8 bytes of SHA-256(payload) read as a
    big-endian u64, divided by 2**64. Order-independent and reproducible."""
    results = []
    for env in batch.samples:
        digest = hashlib.sha256(env.get("payload", b"")).digest()
        score = int.from_bytes(digest[:8], "big") / 2 ** 64
        label = "pos" if score >= threshold else "neg"
        record_id = env.get("record_id", b"").decode("utf-8", "replace")
        results.append(InferenceResult(record_id, score, label, digest))
    return results


# ---------------------------------------------------------------------------
# Content-addressed sink
# ---------------------------------------------------------------------------

def _result_line(result: InferenceResult, envelope: dict, rel_path: str) -> str:
    return (
        '{"record_id": %s, "target_uri": %s, "mime": %s, "score": %s, '
        '"label": %s, "payload_sha256": %s, "payload_path": %s}\n' % (
            json.dumps(result.record_id),
            json.dumps(envelope.get("target_uri", b"").decode("utf-8", "replace")),
            json.dumps(envelope.get("mime", b"").decode("utf-8", "replace")),
            format(result.score, ".6f"),
            json.dumps(result.label),
            json.dumps(result.payload_sha256.hex()),
            json.dumps(rel_path),
        )
    )


class ResultSink:
    """results.jsonl plus content-addressed payload blobs under one directory."""

    def __init__(self, out_dir: str, truncate: bool = False):
        self.out_dir = out_dir
        self.lines_written = 0
        self.blobs_written = 0
        path = os.path.join(out_dir, "results.jsonl")
        try:
            os.makedirs(os.path.join(out_dir, "blobs"), exist_ok=True)
            self._results = open(path, "wb" if truncate else "ab")
        except OSError as exc:
            raise IoError(path, str(exc)) from None

    def write(self, result: InferenceResult, envelope: dict) -> str:
        hexd = result.payload_sha256.hex()
        rel = f"blobs/{hexd[:2]}/{hexd}"
        blob_path = os.path.join(self.out_dir, rel)
        try:
            if not os.path.exists(blob_path):
                os.makedirs(os.path.dirname(blob_path), exist_ok=True)
                tmp = blob_path + ".tmp"
                with open(tmp, "wb") as fh:
                    fh.write(envelope.get("payload", b""))
                os.replace(tmp, blob_path)
                self.blobs_written += 1
            self._results.write(_result_line(result, envelope, rel).encode("utf-8"))
            self._results.flush()
        except OSError as exc:
            raise IoError(blob_path, str(exc)) from None
        result.stored_path = rel
        self.lines_written += 1
        return rel

    def close(self):
        self._results.close()


def sink_write(result: InferenceResult, envelope: dict, out_dir: str) -> str:
    sink = ResultSink(out_dir)
    try:
        return sink.write(result, envelope)
    finally:
        sink.close()


# ---------------------------------------------------------------------------
# Consumer stats
# ---------------------------------------------------------------------------

@dataclass
class ConsumerStats:
    producers_expected: int = 0
    producers_connected: int = 0
    envelopes_received: int = 0
    samples_processed: int = 0
    batches_emitted: int = 0
    results_written: int = 0
    blobs_written: int = 0
    dedup_dropped: int = 0
    wall_time: float = 0.0
    busy_time: float = 0.0
    idle_time: float = 0.0
    per_stream: dict[str, int] = field(default_factory=dict)
    flush_reasons: dict[str, int] = field(default_factory=dict)
    protocol_errors: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "producers_expected": self.producers_expected,
            "producers_connected": self.producers_connected,
            "envelopes_received": self.envelopes_received,
            "samples_processed": self.samples_processed,
            "batches_emitted": self.batches_emitted,
            "results_written": self.results_written,
            "blobs_written": self.blobs_written,
            "dedup_dropped": self.dedup_dropped,
            "wall_time": self.wall_time,
            "busy_time": self.busy_time,
            "idle_time": self.idle_time,
            "per_stream": dict(self.per_stream),
            "flush_reasons": dict(self.flush_reasons),
            "protocol_errors": list(self.protocol_errors),
        }


# ---------------------------------------------------------------------------
# Server
# ---------------------------------------------------------------------------

class ConsumerServer:
    """Accepts a fixed number of producer connections and runs one pipeline:
    interleave -> batch -> infer+sink (or dedup+train hook). serve() returns
    once every accepted producer has ENDed and all queues are drained."""

    def __init__(self, config: PipelineConfig, producers: int = 1, *,
                 listen: tuple[str, int] | None = None,
                 sample_work_fn=None, train_hook=None,
                 accept_timeout: float | None = None):
        self.config = config
        self.producers = producers
        self.sample_work_fn = sample_work_fn
        self.train_hook = train_hook
        self.accept_timeout = accept_timeout

        host, port = listen if listen is not None else config.host_port()
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._listener.bind((host, port))
            self._listener.listen(max(producers, 1))
        except OSError as exc:
            self._listener.close()
            raise BindFailure(f"{host}:{port}", str(exc)) from None
        self.host = host
        self.port = self._listener.getsockname()[1]

        self.state = InterleaverState()
        self.stats = ConsumerStats(producers_expected=producers)
        self.traces: dict[str, list] = {}
        self.batch_log: list[tuple[int, str, list[str]]] = []
        self._cond = threading.Condition()
        self._accepting_done = producers == 0
        self._pending_handshakes = 0
        self._shutdown = False

    # -- connection side ----------------------------------------------------

    def _accept_loop(self):
        start = time.monotonic()
        accepted = 0
        self._listener.settimeout(0.2)
        try:
            while accepted < self.producers and not self._shutdown:
                try:
                    sock, addr = self._listener.accept()
                except socket.timeout:
                    if (self.accept_timeout is not None
                            and time.monotonic() - start > self.accept_timeout):
                        break
                    continue
                except OSError:
                    break
                with self._cond:
                    self._pending_handshakes += 1
                accepted += 1
                threading.Thread(
                    target=self._serve_connection, args=(sock, accepted - 1),
                    daemon=True, name=f"warcflow-recv-{accepted - 1}").start()
        finally:
            self._listener.close()
            with self._cond:
                self._accepting_done = True
                self._cond.notify_all()

    def _make_grant_fn(self, sock: socket.socket, flow: FlowState, trace: list):
        def grant(n: int):
            flow.grant(n)  # raises CreditViolation if the window would overflow
            trace.append(("grant", n))
            try:
                sock.sendall(frame_encode(FRAME_CREDIT, n.to_bytes(4, "big")))
            except OSError:
                pass  # producer already gone; credits are moot
        return grant

    def _serve_connection(self, sock: socket.socket, index: int):
        window = self.config.window
        stream_id = f"conn{index}"
        sq = None
        try:
            producer_id = consumer_handshake(sock, initial_credits=window)
            stream_id = f"{producer_id}@{index}"
            trace: list = []
            flow = FlowState(window=window)
            grant_fn = self._make_grant_fn(sock, flow, trace)
            sq = StreamQueue(stream_id, window, grant_fn=grant_fn, trace=trace)
            with self._cond:
                flow.grant(window)  # the handshake's initial allowance
                trace.append(("grant", window))
                self.traces[stream_id] = trace
                self.state.streams.append(sq)
                self.stats.producers_connected += 1
                self._pending_handshakes -= 1
                self._cond.notify_all()

            sock.settimeout(None)
            decoder = FrameDecoder()
            ended = False
            while not ended:
                data = sock.recv(65536)
                if not data:
                    if decoder.mid_frame:
                        raise WireError("connection closed mid-frame")
                    raise WireError("connection closed before END")
                try:
                    decoder.feed(data)
                    feed_error = None
                except WireError as exc:
                    feed_error = exc  # frames ahead of the bad bytes still count
                while (frame := decoder.next_frame()) is not None:
                    if frame.frame_type == FRAME_DATA:
                        envelope = decode_envelope(frame.payload)
                        validate_record_envelope(envelope)
                        with self._cond:
                            flow.data_received()
                            sq.push(envelope)
                            self.stats.envelopes_received += 1
                            self.stats.per_stream[stream_id] = (
                                self.stats.per_stream.get(stream_id, 0) + 1)
                            self._cond.notify_all()
                    elif frame.frame_type == FRAME_END:
                        ended = True
                        break
                    elif frame.frame_type == FRAME_ERROR:
                        raise WireError(f"producer error: {frame.payload[:80]!r}")
                    else:
                        raise WireError(
                            f"unexpected frame type 0x{frame.frame_type:02x}")
                if feed_error is not None and not ended:
                    raise feed_error
        except (WireError, ConsumerError, OSError) as exc:
            logger.warning("connection %s failed: %s", stream_id, exc)
            with self._cond:
                self.stats.protocol_errors.append(f"{stream_id}: {exc}")
        finally:
            sock.close()
            with self._cond:
                if sq is None:
                    self._pending_handshakes -= 1
                else:
                    sq.ended = True
                self._cond.notify_all()

    # -- batcher side -------------------------------------------------------

    def _more_expected(self) -> bool:
        return not self._accepting_done or self._pending_handshakes > 0

    def _next_sample(self, timeout: float | None):
        wait_start = time.monotonic()
        deadline = None if timeout is None else wait_start + timeout
        with self._cond:
            while True:
                result = interleave_next(self.state, more_expected=self._more_expected())
                if result is not None:
                    self.stats.idle_time += time.monotonic() - wait_start
                    return STREAMS_EXHAUSTED if result is STREAMS_EXHAUSTED else result
                now = time.monotonic()
                if deadline is not None and now >= deadline:
                    self.stats.idle_time += now - wait_start
                    return SAMPLE_TIMEOUT
                self._cond.wait(None if deadline is None else deadline - now)

    def _process_infer(self, batch: Batch, sink: ResultSink):
        results = stub_model_infer(batch, self.config.threshold)
        for env, result in zip(batch.samples, results):
            if self.sample_work_fn is not None:
                self.sample_work_fn(env)
            if result.label == "pos":
                sink.write(result, env)
                self.stats.results_written += 1

    def _process_train(self, batch: Batch, dedup: DedupState, log):
        unique = []
        for env in batch.samples:
            if self.sample_work_fn is not None:
                self.sample_work_fn(env)
            key = hashlib.sha256(env.get("payload", b"")).digest()
            if dedup.check_and_insert(key):
                unique.append(env)
            else:
                self.stats.dedup_dropped += 1
        if not unique:
            return
        if self.train_hook is not None:
            self.train_hook(unique)
        else:
            digest = hashlib.sha256()
            for env in unique:
                digest.update(encode_envelope(env))
            log.write(digest.hexdigest().encode("ascii") + b"\n")
            log.flush()

    def serve(self) -> ConsumerStats:
        start = time.monotonic()
        out_dir = self.config.out_dir
        try:
            os.makedirs(out_dir, exist_ok=True)
        except OSError as exc:
            raise IoError(out_dir, str(exc)) from None

        # a server run starts from a clean slate; blobs stay (content-addressed)
        train = self.config.mode == "train"
        sink = batches_log = dedup = None
        if train:
            batches_log_path = os.path.join(out_dir, "batches.log")
            try:
                batches_log = open(batches_log_path, "wb")
            except OSError as exc:
                raise IoError(batches_log_path, str(exc)) from None
            dedup = DedupState("exact")
        else:
            sink = ResultSink(out_dir, truncate=True)

        accept_thread = None
        if self.producers > 0:
            accept_thread = threading.Thread(target=self._accept_loop, daemon=True,
                                             name="warcflow-accept")
            accept_thread.start()
        else:
            self._listener.close()

        try:
            for batch in form_batches(self._next_sample, self.config.batch_size,
                                      self.config.flush_timeout_ms):
                busy_start = time.monotonic()
                self.stats.batches_emitted += 1
                self.stats.flush_reasons[batch.flush_reason] = (
                    self.stats.flush_reasons.get(batch.flush_reason, 0) + 1)
                self.batch_log.append((
                    len(batch.samples), batch.flush_reason,
                    [env.get("record_id", b"").decode("utf-8", "replace")
                     for env in batch.samples]))
                if train:
                    self._process_train(batch, dedup, batches_log)
                else:
                    self._process_infer(batch, sink)
                self.stats.samples_processed += len(batch.samples)
                self.stats.busy_time += time.monotonic() - busy_start
        finally:
            self._shutdown = True
            if accept_thread is not None:
                accept_thread.join(timeout=5.0)
            if sink is not None:
                sink.close()
                self.stats.blobs_written = sink.blobs_written
            if batches_log is not None:
                batches_log.close()
            self.stats.wall_time = max(time.monotonic() - start, 1e-9)
            stats_path = os.path.join(out_dir, "stats.json")
            try:
                with open(stats_path, "w", encoding="utf-8") as fh:
                    json.dump(self.stats.to_dict(), fh, indent=1)
                    fh.write("\n")
            except OSError as exc:
                raise IoError(stats_path, str(exc)) from None
        return self.stats


def run_consumer(config: PipelineConfig, producers: int = 1, **kwargs) -> ConsumerStats:
    return ConsumerServer(config, producers, **kwargs).serve()
