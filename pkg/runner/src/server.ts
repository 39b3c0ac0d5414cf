/**
 * Batch-inference consumer: accept producer streams, interleave, score, persist.
 *
 * Each connection feeds a bounded per-stream queue; a single drain loop pulls
 * samples round-robin, batches them, and runs the model, so sink writes never
 * race. Credit grants are tied to queue drains, which turns the bounded
 * queues into explicit wire-level backpressure.
 */

import { createHash } from "node:crypto";
import * as fs from "node:fs";
import * as net from "node:net";
import * as path from "node:path";

import { ConsumerEvent, FlowState } from "./flow";
import { BatchModel, ModelKind } from "./model";
import { InferenceResult, ResultSink } from "./sink";
import {
  Envelope,
  FRAME_DATA,
  FRAME_END,
  FRAME_ERROR,
  FRAME_HELLO,
  FRAME_HELLO_ACK,
  Frame,
  FrameDecoder,
  PROTO_VERSION,
  WireError,
  creditFrame,
  decodeEnvelope,
  frameEncode,
  helloAckPayload,
  validateRecordEnvelope,
} from "./wire";

export interface RunnerConfig {
  host: string;
  port: number;
  model: ModelKind;
  outDir: string;
  window: number;
  batchSize: number;
  flushTimeoutMs: number;
  threshold: number;
  producers: number;
  seed: number;
}

export const RUNNER_DEFAULTS = {
  host: "127.0.0.1",
  port: 4850,
  window: 64,
  batchSize: 32,
  flushTimeoutMs: 1000,
  threshold: 0.5,
  producers: 1,
  seed: 7,
};

export class RunnerError extends Error {
  constructor(message: string) {
    super(message);
    this.name = new.target.name;
  }
}

export function validateConfig(config: RunnerConfig): void {
  if (config.window < 1) {
    throw new RunnerError(`window must be >= 1, got ${config.window}`);
  }
  if (config.batchSize < 1) {
    throw new RunnerError(`batch size must be >= 1, got ${config.batchSize}`);
  }
  if (config.flushTimeoutMs < 1) {
    throw new RunnerError(`flush timeout must be >= 1 ms, got ${config.flushTimeoutMs}`);
  }
  if (!(config.threshold >= 0 && config.threshold <= 1)) {
    throw new RunnerError(`threshold must be in [0, 1], got ${config.threshold}`);
  }
  if (config.producers < 1) {
    throw new RunnerError(`producer count must be >= 1, got ${config.producers}`);
  }
}

export interface RunnerStats {
  producers_expected: number;
  producers_connected: number;
  envelopes_received: number;
  samples_processed: number;
  batches_emitted: number;
  results_written: number;
  blobs_written: number;
  wall_time: number;
  per_stream: Record<string, number>;
  flush_reasons: Record<string, number>;
  protocol_errors: string[];
}

const STREAMS_EXHAUSTED = Symbol("STREAMS_EXHAUSTED");
const SAMPLE_TIMEOUT = Symbol("SAMPLE_TIMEOUT");

/** Per-connection queue; capacity equals the flow window, so credits plus
 *  queued samples can never exceed the window. */
class StreamState {
  readonly id: string;
  readonly capacity: number;
  readonly socket: net.Socket;
  readonly flow: FlowState;
  readonly trace: ConsumerEvent[] = [];
  items: Envelope[] = [];
  ended = false;
  drainedSinceGrant = 0;

  constructor(id: string, capacity: number, socket: net.Socket) {
    this.id = id;
    this.capacity = capacity;
    this.socket = socket;
    this.flow = new FlowState(capacity);
  }
}

interface Connection {
  socket: net.Socket;
  decoder: FrameDecoder;
  index: number;
  stream: StreamState | null;
  failed: boolean;
}

export interface ServeOptions {
  /** Test hook: awaited once per sample before scoring is accounted. */
  sampleWork?: () => Promise<void> | void;
}

export class RunnerServer {
  readonly config: RunnerConfig;
  readonly stats: RunnerStats;
  readonly traces: Record<string, ConsumerEvent[]> = {};
  port = 0;

  private readonly server: net.Server;
  private readonly streams: StreamState[] = [];
  private readonly sampleWork?: () => Promise<void> | void;
  private cursor = 0;
  private accepted = 0;
  private pendingHandshakes = 0;
  private acceptingDone = false;
  private waiters: Array<() => void> = [];
  private serving: Promise<RunnerStats> | null = null;

  constructor(config: RunnerConfig, options: ServeOptions = {}) {
    validateConfig(config);
    this.config = config;
    this.sampleWork = options.sampleWork;
    this.stats = {
      producers_expected: config.producers,
      producers_connected: 0,
      envelopes_received: 0,
      samples_processed: 0,
      batches_emitted: 0,
      results_written: 0,
      blobs_written: 0,
      wall_time: 0,
      per_stream: {},
      flush_reasons: {},
      protocol_errors: [],
    };
    this.server = net.createServer((socket) => this.onConnection(socket));
  }

  /** Bind the listen address and begin accepting; resolves with the port. */
  start(): Promise<number> {
    return new Promise((resolve, reject) => {
      this.server.once("error", reject);
      this.server.listen(this.config.port, this.config.host, () => {
        const addr = this.server.address() as net.AddressInfo;
        this.port = addr.port;
        this.serving = this.drainLoop();
        resolve(this.port);
      });
    });
  }

  /** Resolves once every accepted producer has ENDed and batches flushed. */
  waitStats(): Promise<RunnerStats> {
    if (this.serving === null) {
      throw new RunnerError("server not started");
    }
    return this.serving;
  }

  async serve(): Promise<RunnerStats> {
    await this.start();
    return this.waitStats();
  }

  // -- connection side ------------------------------------------------------

  private onConnection(socket: net.Socket): void {
    if (this.accepted >= this.config.producers) {
      socket.destroy();
      return;
    }
    const conn: Connection = {
      socket,
      decoder: new FrameDecoder(),
      index: this.accepted,
      stream: null,
      failed: false,
    };
    this.accepted += 1;
    this.pendingHandshakes += 1;
    if (this.accepted >= this.config.producers) {
      this.acceptingDone = true;
      this.server.close();
    }
    socket.on("data", (chunk) => this.onData(conn, chunk));
    socket.on("error", (err) => this.fail(conn, new WireError(String(err.message ?? err))));
    socket.on("end", () => {
      if (conn.stream !== null && conn.stream.ended) {
        return;
      }
      const detail = conn.decoder.midFrame
        ? "connection closed mid-frame"
        : "connection closed before END";
      this.fail(conn, new WireError(detail));
    });
  }

  private onData(conn: Connection, chunk: Buffer): void {
    if (conn.failed || (conn.stream !== null && conn.stream.ended)) {
      return;
    }
    let feedError: Error | null = null;
    try {
      conn.decoder.feed(chunk);
    } catch (err) {
      feedError = err as Error; // frames ahead of the bad bytes still count
    }
    let frame: Frame | null;
    while ((frame = conn.decoder.nextFrame()) !== null) {
      try {
        this.onFrame(conn, frame);
      } catch (err) {
        this.fail(conn, err as Error);
        return;
      }
      if (conn.failed || (conn.stream !== null && conn.stream.ended)) {
        return;
      }
    }
    if (feedError !== null) {
      this.fail(conn, feedError);
    }
  }

  private onFrame(conn: Connection, frame: Frame): void {
    if (conn.stream === null) {
      this.onHello(conn, frame);
      return;
    }
    const stream = conn.stream;
    if (frame.frameType === FRAME_DATA) {
      const envelope = decodeEnvelope(frame.payload);
      validateRecordEnvelope(envelope);
      stream.flow.dataReceived();
      if (stream.items.length >= stream.capacity) {
        throw new RunnerError(`stream ${stream.id}: queue overflow past window ${stream.capacity}`);
      }
      stream.items.push(envelope);
      stream.trace.push(["recv"]);
      this.stats.envelopes_received += 1;
      this.stats.per_stream[stream.id] = (this.stats.per_stream[stream.id] ?? 0) + 1;
      this.notify();
    } else if (frame.frameType === FRAME_END) {
      stream.ended = true;
      conn.socket.end();
      this.notify();
    } else if (frame.frameType === FRAME_ERROR) {
      throw new WireError(`producer error: ${frame.payload.subarray(0, 80).toString("utf-8")}`);
    } else {
      throw new WireError(`unexpected frame type 0x${frame.frameType.toString(16)}`);
    }
  }

  private onHello(conn: Connection, frame: Frame): void {
    if (frame.frameType !== FRAME_HELLO) {
      this.sendError(conn.socket, "expected HELLO");
      throw new WireError(`expected HELLO, got 0x${frame.frameType.toString(16)}`);
    }
    const fields = decodeEnvelope(frame.payload);
    const proto = fields.get("proto");
    if (proto === undefined || !proto.equals(PROTO_VERSION)) {
      this.sendError(conn.socket, "proto");
      throw new WireError("producer speaks a different protocol version");
    }
    const producerId = (fields.get("producer_id") ?? Buffer.alloc(0)).toString("utf-8");
    const stream = new StreamState(`${producerId}@${conn.index}`, this.config.window, conn.socket);
    stream.flow.grant(this.config.window); // the handshake's initial allowance
    stream.trace.push(["grant", this.config.window]);
    conn.socket.write(frameEncode(FRAME_HELLO_ACK, helloAckPayload(this.config.window)));
    conn.stream = stream;
    this.streams.push(stream);
    this.traces[stream.id] = stream.trace;
    this.stats.producers_connected += 1;
    this.pendingHandshakes -= 1;
    this.notify();
  }

  private sendError(socket: net.Socket, detail: string): void {
    if (!socket.destroyed) {
      socket.write(frameEncode(FRAME_ERROR, Buffer.from(detail, "utf-8")));
    }
  }

  private fail(conn: Connection, err: Error): void {
    if (conn.failed) {
      return;
    }
    conn.failed = true;
    const id = conn.stream?.id ?? `conn${conn.index}`;
    this.stats.protocol_errors.push(`${id}: ${err.message}`);
    conn.socket.destroy();
    if (conn.stream === null) {
      this.pendingHandshakes -= 1;
    } else {
      conn.stream.ended = true; // queued samples still drain
    }
    this.notify();
  }

  // -- drain side -------------------------------------------------------------

  private notify(): void {
    const waiters = this.waiters;
    this.waiters = [];
    for (const wake of waiters) {
      wake();
    }
  }

  private wait(timeoutMs: number | null): Promise<boolean> {
    return new Promise((resolve) => {
      let timer: NodeJS.Timeout | null = null;
      const wake = () => {
        if (timer !== null) {
          clearTimeout(timer);
        }
        resolve(true);
      };
      this.waiters.push(wake);
      if (timeoutMs !== null) {
        timer = setTimeout(() => {
          const idx = this.waiters.indexOf(wake);
          if (idx >= 0) {
            this.waiters.splice(idx, 1);
          }
          resolve(false);
        }, timeoutMs);
      }
    });
  }

  private pruneStreams(): void {
    for (let i = this.streams.length - 1; i >= 0; i--) {
      if (this.streams[i].ended && this.streams[i].items.length === 0) {
        this.streams.splice(i, 1);
        if (i < this.cursor) {
          this.cursor -= 1;
        }
      }
    }
    this.cursor = this.streams.length > 0 ? this.cursor % this.streams.length : 0;
  }

  /** One round-robin poll; a drain re-grants once half the window is free. */
  private tryDraw(): Envelope | typeof STREAMS_EXHAUSTED | null {
    this.pruneStreams();
    const n = this.streams.length;
    for (let step = 0; step < n; step++) {
      const i = (this.cursor + step) % n;
      const stream = this.streams[i];
      if (stream.items.length > 0) {
        const sample = stream.items.shift() as Envelope;
        this.cursor = (i + 1) % n;
        stream.drainedSinceGrant += 1;
        stream.trace.push(["drain"]);
        const threshold = Math.max(1, Math.floor(stream.capacity / 2));
        if (stream.drainedSinceGrant >= threshold) {
          const grant = stream.drainedSinceGrant;
          stream.drainedSinceGrant = 0;
          stream.flow.grant(grant); // throws if the window would overflow
          stream.trace.push(["grant", grant]);
          if (!stream.socket.destroyed) {
            stream.socket.write(creditFrame(grant));
          }
        }
        return sample;
      }
    }
    if (n === 0 && this.acceptingDone && this.pendingHandshakes === 0) {
      return STREAMS_EXHAUSTED;
    }
    return null;
  }

  private async nextSample(
    timeoutMs: number | null,
  ): Promise<Envelope | typeof STREAMS_EXHAUSTED | typeof SAMPLE_TIMEOUT> {
    const deadline = timeoutMs === null ? null : Date.now() + timeoutMs;
    for (;;) {
      const drawn = this.tryDraw();
      if (drawn !== null) {
        return drawn;
      }
      const remaining = deadline === null ? null : deadline - Date.now();
      if (remaining !== null && remaining <= 0) {
        return SAMPLE_TIMEOUT;
      }
      const woke = await this.wait(remaining);
      if (!woke) {
        return SAMPLE_TIMEOUT;
      }
    }
  }

  private async processBatch(
    model: BatchModel,
    sink: ResultSink,
    samples: Envelope[],
    reason: string,
  ): Promise<void> {
    this.stats.batches_emitted += 1;
    this.stats.flush_reasons[reason] = (this.stats.flush_reasons[reason] ?? 0) + 1;
    const scores = model.scoreBatch(samples.map((env) => env.get("payload") ?? Buffer.alloc(0)));
    for (let i = 0; i < samples.length; i++) {
      if (this.sampleWork !== undefined) {
        await this.sampleWork();
      }
      const env = samples[i];
      const score = scores[i];
      const digest = createHash("sha256")
        .update(env.get("payload") ?? Buffer.alloc(0))
        .digest();
      const result: InferenceResult = {
        recordId: (env.get("record_id") ?? Buffer.alloc(0)).toString("utf-8"),
        score,
        label: score >= this.config.threshold ? "pos" : "neg",
        payloadSha256: digest,
      };
      if (result.label === "pos") {
        sink.write(result, env);
        this.stats.results_written += 1;
      }
    }
    this.stats.samples_processed += samples.length;
  }

  private async drainLoop(): Promise<RunnerStats> {
    const start = Date.now();
    fs.mkdirSync(this.config.outDir, { recursive: true });
    const sink = new ResultSink(this.config.outDir, true);
    const model = new BatchModel(this.config.model, this.config.seed);
    try {
      let pending: Envelope[] = [];
      let deadline: number | null = null;
      for (;;) {
        const timeout = deadline === null ? null : Math.max(0, deadline - Date.now());
        const item = await this.nextSample(timeout);
        if (item === STREAMS_EXHAUSTED) {
          if (pending.length > 0) {
            await this.processBatch(model, sink, pending, "end");
          }
          break;
        }
        if (item === SAMPLE_TIMEOUT) {
          if (pending.length > 0 && deadline !== null && Date.now() >= deadline) {
            await this.processBatch(model, sink, pending, "timeout");
            pending = [];
            deadline = null;
          }
          continue;
        }
        pending.push(item);
        if (pending.length === 1) {
          deadline = Date.now() + this.config.flushTimeoutMs;
        }
        if (pending.length >= this.config.batchSize) {
          await this.processBatch(model, sink, pending, "full");
          pending = [];
          deadline = null;
        }
      }
    } finally {
      sink.close();
      model.dispose();
      this.stats.blobs_written = sink.blobsWritten;
      this.stats.wall_time = Math.max((Date.now() - start) / 1000, 1e-9);
      if (this.server.listening) {
        this.server.close();
      }
      const statsPath = path.join(this.config.outDir, "stats.json");
      fs.writeFileSync(statsPath, JSON.stringify(this.stats, null, 1) + "\n");
    }
    return this.stats;
  }
}
