import * as net from "node:net";

import { SenderEvent } from "../src/flow";
import {
  Envelope,
  FRAME_CREDIT,
  FRAME_DATA,
  FRAME_END,
  FRAME_HELLO,
  FRAME_HELLO_ACK,
  Frame,
  FrameDecoder,
  PROTO_VERSION,
  decodeEnvelope,
  encodeEnvelope,
  frameEncode,
} from "../src/wire";

/** Minimal credit-respecting producer for driving a live runner. */
export class TestProducer {
  readonly trace: SenderEvent[] = [];
  credits = 0;
  eof = false;

  private readonly socket: net.Socket;
  private readonly decoder = new FrameDecoder();
  private readonly queue: Frame[] = [];
  private waiters: Array<() => void> = [];
  private absorbCredits: boolean;

  private constructor(socket: net.Socket, absorbCredits: boolean) {
    this.socket = socket;
    this.absorbCredits = absorbCredits;
    socket.on("data", (chunk) => this.onData(chunk));
    socket.on("error", () => this.onEof());
    socket.on("close", () => this.onEof());
  }

  static connect(port: number, opts: { absorbCredits?: boolean } = {}): Promise<TestProducer> {
    return new Promise((resolve, reject) => {
      const socket = net.createConnection({ host: "127.0.0.1", port }, () =>
        resolve(new TestProducer(socket, opts.absorbCredits ?? true)),
      );
      socket.once("error", reject);
    });
  }

  private onData(chunk: Buffer): void {
    this.decoder.feed(chunk);
    for (const frame of this.decoder.drain()) {
      if (this.absorbCredits && frame.frameType === FRAME_CREDIT) {
        const n = frame.payload.readUInt32BE(0);
        this.credits += n;
        this.trace.push(["credit", n]);
      } else {
        this.queue.push(frame);
      }
    }
    this.notify();
  }

  private onEof(): void {
    this.eof = true;
    this.notify();
  }

  private notify(): void {
    const waiters = this.waiters;
    this.waiters = [];
    for (const wake of waiters) {
      wake();
    }
  }

  private waitEvent(): Promise<void> {
    return new Promise((resolve) => this.waiters.push(resolve));
  }

  /** Next non-credit frame, or null once the peer closes. */
  async next(): Promise<Frame | null> {
    for (;;) {
      const frame = this.queue.shift();
      if (frame !== undefined) {
        return frame;
      }
      if (this.eof) {
        return null;
      }
      await this.waitEvent();
    }
  }

  writeRaw(data: Buffer): void {
    this.socket.write(data);
  }

  /** Send HELLO and return the reply frame; HELLO_ACK credits are absorbed. */
  async handshake(producerId = "w0", proto: Buffer = PROTO_VERSION): Promise<Frame | null> {
    const hello = encodeEnvelope(
      new Map([
        ["proto", proto],
        ["producer_id", Buffer.from(producerId, "utf-8")],
      ]),
    );
    this.socket.write(frameEncode(FRAME_HELLO, hello));
    const frame = await this.next();
    if (frame !== null && frame.frameType === FRAME_HELLO_ACK) {
      const fields = decodeEnvelope(frame.payload);
      const init = fields.get("initial_credits");
      if (init === undefined || init.length !== 4) {
        throw new Error("bad initial_credits field");
      }
      this.credits += init.readUInt32BE(0);
      this.trace.push(["credit", init.readUInt32BE(0)]);
    }
    return frame;
  }

  /** Send one DATA envelope, waiting for credit first. */
  async sendData(env: Envelope): Promise<void> {
    while (this.credits === 0) {
      if (this.eof) {
        throw new Error("connection closed while waiting for credit");
      }
      await this.waitEvent();
    }
    this.credits -= 1;
    this.trace.push(["data"]);
    this.socket.write(frameEncode(FRAME_DATA, encodeEnvelope(env)));
  }

  sendEnd(): void {
    this.socket.write(frameEncode(FRAME_END, Buffer.alloc(0)));
  }

  async waitClose(): Promise<void> {
    while (!this.eof) {
      await this.waitEvent();
    }
  }

  destroy(): void {
    this.socket.destroy();
  }
}

export function recordEnvelope(i: number, payload?: Buffer): Envelope {
  return new Map<string, Buffer>([
    ["record_id", Buffer.from(`<urn:test:${i}>`, "utf-8")],
    ["target_uri", Buffer.from(`http://example.com/r/${i}`, "utf-8")],
    ["mime", Buffer.from("image/jpeg", "utf-8")],
    ["payload", payload ?? Buffer.from(`payload-${i}`, "utf-8")],
  ]);
}

export function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

/** Poll until check() passes or the deadline expires. */
export async function waitFor(check: () => boolean, timeoutMs = 5000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (!check()) {
    if (Date.now() > deadline) {
      throw new Error("condition not met in time");
    }
    await sleep(5);
  }
}
