import { createHash } from "node:crypto";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";

import { checkConsumerTrace, checkSenderTrace } from "../src/flow";
import { RunnerConfig, RunnerServer, validateConfig } from "../src/server";
import {
  FRAME_DATA,
  FRAME_ERROR,
  FRAME_HELLO,
  FRAME_HELLO_ACK,
  encodeEnvelope,
  frameDecode,
  frameEncode,
} from "../src/wire";
import { TestProducer, recordEnvelope, sleep, waitFor } from "./helpers";

const DATA_DIR = fileURLToPath(new URL("../../tests/data/", import.meta.url));

function tmpOut(): string {
  return fs.mkdtempSync(path.join(os.tmpdir(), "warcflow-runner-"));
}

function makeConfig(overrides: Partial<RunnerConfig> = {}): RunnerConfig {
  return {
    host: "127.0.0.1",
    port: 0,
    model: "image_classifier",
    outDir: tmpOut(),
    window: 8,
    batchSize: 4,
    flushTimeoutMs: 1000,
    threshold: 0,
    producers: 1,
    seed: 7,
    ...overrides,
  };
}

describe("config validation", () => {
  it("rejects out-of-range scalars", () => {
    expect(() => validateConfig(makeConfig({ window: 0 }))).toThrow(/window/);
    expect(() => validateConfig(makeConfig({ batchSize: 0 }))).toThrow(/batch size/);
    expect(() => validateConfig(makeConfig({ flushTimeoutMs: 0 }))).toThrow(/flush timeout/);
    expect(() => validateConfig(makeConfig({ threshold: 1.5 }))).toThrow(/threshold/);
    expect(() => validateConfig(makeConfig({ threshold: Number.NaN }))).toThrow(/threshold/);
    expect(() => validateConfig(makeConfig({ producers: 0 }))).toThrow(/producer count/);
  });
});

describe("flow bound", () => {
  it("keeps in-flight DATA within the window against a slow consumer", async () => {
    const config = makeConfig({ window: 8, batchSize: 4, threshold: 1 });
    const server = new RunnerServer(config, { sampleWork: () => sleep(10) });
    const port = await server.start();

    const producer = await TestProducer.connect(port);
    const reply = await producer.handshake("w0");
    expect(reply?.frameType).toBe(FRAME_HELLO_ACK);
    for (let i = 0; i < 60; i++) {
      await producer.sendData(recordEnvelope(i));
    }
    producer.sendEnd();
    const stats = await server.waitStats();
    await producer.waitClose();

    expect(stats.envelopes_received).toBe(60);
    expect(stats.samples_processed).toBe(60);
    expect(stats.protocol_errors).toEqual([]);
    expect(checkSenderTrace(producer.trace, 8)).toBeLessThanOrEqual(8);

    const consumerTrace = server.traces["w0@0"];
    const report = checkConsumerTrace(consumerTrace, 8);
    expect(report.received).toBe(60);
    expect(report.drained).toBe(60);
    expect(report.maxQueue).toBeLessThanOrEqual(8);
    expect(stats.flush_reasons["full"]).toBe(15);
  });
});

describe("handshake", () => {
  it("replies ERROR proto to a version mismatch and records it", async () => {
    const server = new RunnerServer(makeConfig());
    const port = await server.start();

    const producer = await TestProducer.connect(port);
    const reply = await producer.handshake("w0", Buffer.from("WDL9"));
    expect(reply?.frameType).toBe(FRAME_ERROR);
    expect(reply?.payload.toString()).toBe("proto");
    await producer.waitClose();

    const stats = await server.waitStats();
    expect(stats.producers_connected).toBe(0);
    expect(stats.protocol_errors.length).toBe(1);
    expect(stats.protocol_errors[0]).toContain("different protocol version");
  });

  it("rejects a first frame that is not HELLO", async () => {
    const server = new RunnerServer(makeConfig());
    const port = await server.start();

    const producer = await TestProducer.connect(port);
    producer.writeRaw(frameEncode(FRAME_DATA, Buffer.from("0000", "hex")));
    const reply = await producer.next();
    expect(reply?.frameType).toBe(FRAME_ERROR);
    expect(reply?.payload.toString()).toContain("expected HELLO");

    const stats = await server.waitStats();
    expect(stats.protocol_errors.length).toBe(1);
  });
});

describe("golden byte stream", () => {
  it("processes the recorded HELLO/DATA/END bytes end to end", async () => {
    const bin = fs.readFileSync(path.join(DATA_DIR, "golden_frames.bin"));
    const frames = frameDecode(bin);
    const hello = frames.find((f) => f.frameType === FRAME_HELLO)!;
    // the realistic record envelope, not the 2-field codec vector
    const data = frames
      .filter((f) => f.frameType === FRAME_DATA)
      .find((f) => f.payload.length > 40)!;
    const config = makeConfig({ threshold: 0 });
    const server = new RunnerServer(config);
    const port = await server.start();

    const producer = await TestProducer.connect(port);
    producer.writeRaw(frameEncode(hello.frameType, hello.payload));
    const reply = await producer.next();
    expect(reply?.frameType).toBe(FRAME_HELLO_ACK);
    producer.writeRaw(frameEncode(data.frameType, data.payload));
    producer.sendEnd();

    const stats = await server.waitStats();
    expect(stats.protocol_errors).toEqual([]);
    expect(stats.samples_processed).toBe(1);
    expect(stats.results_written).toBe(1);

    const lines = fs
      .readFileSync(path.join(config.outDir, "results.jsonl"), "utf-8")
      .trim()
      .split("\n");
    expect(lines.length).toBe(1);
    const row = JSON.parse(lines[0]);
    expect(row.record_id).toBe("<urn:uuid:00000000-0000-4000-8000-000000000001>");
    expect(row.mime).toBe("image/jpeg");
    const payload = Buffer.from("000102030405060708090a0b0c0d0e0f", "hex");
    const digest = createHash("sha256").update(payload).digest("hex");
    expect(row.payload_sha256).toBe(digest);
    const blob = fs.readFileSync(path.join(config.outDir, row.payload_path));
    expect(blob.equals(payload)).toBe(true);
  });
});

describe("stream failures", () => {
  it("keeps samples decoded ahead of garbage bytes and isolates the error", async () => {
    const server = new RunnerServer(makeConfig({ batchSize: 2 }));
    const port = await server.start();

    const producer = await TestProducer.connect(port);
    await producer.handshake("rogue");
    const burst = Buffer.concat([
      frameEncode(FRAME_DATA, encodeRecord(0)),
      frameEncode(FRAME_DATA, encodeRecord(1)),
      Buffer.from([0xff, 0x00, 0x00]),
    ]);
    producer.writeRaw(burst);

    const stats = await server.waitStats();
    expect(stats.envelopes_received).toBe(2);
    expect(stats.samples_processed).toBe(2);
    expect(stats.protocol_errors.length).toBe(1);
    expect(stats.protocol_errors[0]).toContain("unknown frame type");
  });

  it("counts an EOF before END as a protocol error but drains the queue", async () => {
    const server = new RunnerServer(makeConfig({ batchSize: 8 }));
    const port = await server.start();

    const producer = await TestProducer.connect(port);
    await producer.handshake("w0");
    await producer.sendData(recordEnvelope(0));
    producer.destroy();

    const stats = await server.waitStats();
    expect(stats.samples_processed).toBe(1);
    expect(stats.protocol_errors.length).toBe(1);
    expect(stats.protocol_errors[0]).toMatch(/before END|closed/);
  });

  it("enforces the credit window on an overrunning producer", async () => {
    let release: () => void = () => {};
    const gate = new Promise<void>((resolve) => {
      release = resolve;
    });
    const config = makeConfig({ window: 8, batchSize: 1 });
    const server = new RunnerServer(config, { sampleWork: () => gate });
    const port = await server.start();

    const producer = await TestProducer.connect(port, { absorbCredits: false });
    await producer.handshake("w0");
    // 9 DATA frames against an 8-credit grant, with the drain loop gated so
    // no re-grant can legitimize the 9th
    const frames: Buffer[] = [];
    for (let i = 0; i < 9; i++) {
      frames.push(frameEncode(FRAME_DATA, encodeRecord(i)));
    }
    producer.writeRaw(Buffer.concat(frames));

    await waitFor(() => server.stats.protocol_errors.length === 1);
    expect(server.stats.protocol_errors[0]).toContain("beyond granted credits");
    release();

    const stats = await server.waitStats();
    expect(stats.envelopes_received).toBe(8);
    expect(stats.samples_processed).toBe(8);
  });
});

describe("batching", () => {
  it("flushes a short batch when the timeout expires", async () => {
    const server = new RunnerServer(makeConfig({ batchSize: 8, flushTimeoutMs: 150 }));
    const port = await server.start();

    const producer = await TestProducer.connect(port);
    await producer.handshake("w0");
    await producer.sendData(recordEnvelope(0));
    await producer.sendData(recordEnvelope(1));
    await waitFor(() => server.stats.batches_emitted === 1, 3000);
    expect(server.stats.flush_reasons["timeout"]).toBe(1);
    producer.sendEnd();

    const stats = await server.waitStats();
    expect(stats.samples_processed).toBe(2);
  });

  it("interleaves multiple producers round-robin and ends when all END", async () => {
    const server = new RunnerServer(makeConfig({ producers: 3, batchSize: 4 }));
    const port = await server.start();

    const producers: TestProducer[] = [];
    for (let p = 0; p < 3; p++) {
      const producer = await TestProducer.connect(port);
      await producer.handshake(`w${p}`);
      producers.push(producer);
    }
    for (let i = 0; i < 10; i++) {
      for (const producer of producers) {
        await producer.sendData(recordEnvelope(i));
      }
    }
    producers.forEach((p) => p.sendEnd());

    const stats = await server.waitStats();
    expect(stats.producers_connected).toBe(3);
    expect(stats.samples_processed).toBe(30);
    expect(Object.keys(stats.per_stream).sort()).toEqual(["w0@0", "w1@1", "w2@2"]);
    expect(Object.values(stats.per_stream)).toEqual([10, 10, 10]);
  });
});

function encodeRecord(i: number): Buffer {
  return encodeEnvelope(recordEnvelope(i));
}
