/**
 * Framed TCP protocol: envelope codec, frames, flow bookkeeping.
 *
 * Byte layouts are normative and identical across implementations:
 *
 *   frame     = frame_type(1) || u32_be payload_length || payload
 *   envelope  = u16_be field_count || field*   (fields sorted by key bytes)
 *   field     = u16_be key_length || key || u32_be value_length || value
 *
 * Frame types: 0x01 HELLO, 0x02 HELLO_ACK, 0x10 DATA, 0x20 CREDIT,
 * 0x7E ERROR, 0x7F END. CREDIT payload is a u32_be grant count. All
 * integers are big-endian; no varints.
 */

export const PROTO_VERSION = Buffer.from("WDL1", "ascii");
export const DEFAULT_PORT = 4850;
export const DEFAULT_WINDOW = 64;
export const MAX_FRAME_PAYLOAD = 64 * 1024 * 1024;

export const FRAME_HELLO = 0x01;
export const FRAME_HELLO_ACK = 0x02;
export const FRAME_DATA = 0x10;
export const FRAME_CREDIT = 0x20;
export const FRAME_ERROR = 0x7e;
export const FRAME_END = 0x7f;

export const FRAME_TYPES = new Set<number>([
  FRAME_HELLO,
  FRAME_HELLO_ACK,
  FRAME_DATA,
  FRAME_CREDIT,
  FRAME_ERROR,
  FRAME_END,
]);

export const REQUIRED_KEYS = ["record_id", "target_uri", "mime", "payload"];

export class WireError extends Error {
  constructor(message: string) {
    super(message);
    this.name = new.target.name;
  }
}

export class TooLarge extends WireError {}

export class MalformedEnvelope extends WireError {
  readonly detail: string;
  constructor(detail: string) {
    super(`malformed envelope: ${detail}`);
    this.detail = detail;
  }
}

export class UnknownFrameType extends WireError {
  readonly byte: number;
  constructor(byte: number) {
    super(`unknown frame type 0x${byte.toString(16).toUpperCase().padStart(2, "0")}`);
    this.byte = byte;
  }
}

export class FrameTooLarge extends WireError {}

export class ProtocolMismatch extends WireError {}

export class CreditViolation extends WireError {}

export class ConnectionClosed extends WireError {}

export type Envelope = Map<string, Buffer>;

const strictUtf8 = new TextDecoder("utf-8", { fatal: true });

// ---------------------------------------------------------------------------
// Envelope codec
// ---------------------------------------------------------------------------

/** Canonical encoding: equal field maps always produce equal bytes. */
export function encodeEnvelope(fields: Envelope, maxSize: number = MAX_FRAME_PAYLOAD): Buffer {
  const items: Array<[Buffer, Buffer]> = [];
  for (const [key, value] of fields) {
    items.push([Buffer.from(key, "utf-8"), value]);
  }
  items.sort((a, b) => Buffer.compare(a[0], b[0]));
  if (items.length > 0xffff) {
    throw new TooLarge("more than 65535 fields");
  }
  const parts: Buffer[] = [];
  const head = Buffer.allocUnsafe(2);
  head.writeUInt16BE(items.length, 0);
  parts.push(head);
  let total = 2;
  for (const [key, value] of items) {
    if (key.length > 0xffff) {
      throw new TooLarge("key longer than 65535 bytes");
    }
    const meta = Buffer.allocUnsafe(2);
    meta.writeUInt16BE(key.length, 0);
    const vlen = Buffer.allocUnsafe(4);
    vlen.writeUInt32BE(value.length, 0);
    parts.push(meta, key, vlen, value);
    total += 2 + key.length + 4 + value.length;
    if (total > maxSize) {
      throw new TooLarge(`envelope exceeds ${maxSize} bytes`);
    }
  }
  return Buffer.concat(parts);
}

/** Inverse of encodeEnvelope; rejects non-canonical input. */
export function decodeEnvelope(data: Buffer): Envelope {
  if (data.length < 2) {
    throw new MalformedEnvelope("truncated");
  }
  const count = data.readUInt16BE(0);
  let pos = 2;
  const fields: Envelope = new Map();
  let prevKey: Buffer | null = null;
  for (let i = 0; i < count; i++) {
    if (pos + 2 > data.length) {
      throw new MalformedEnvelope("truncated");
    }
    const klen = data.readUInt16BE(pos);
    pos += 2;
    if (pos + klen + 4 > data.length) {
      throw new MalformedEnvelope("truncated");
    }
    const key = data.subarray(pos, pos + klen);
    pos += klen;
    const vlen = data.readUInt32BE(pos);
    pos += 4;
    if (pos + vlen > data.length) {
      throw new MalformedEnvelope("truncated");
    }
    const value = Buffer.from(data.subarray(pos, pos + vlen));
    pos += vlen;
    if (prevKey !== null && Buffer.compare(key, prevKey) <= 0) {
      throw new MalformedEnvelope("unsorted");
    }
    prevKey = key;
    let name: string;
    try {
      name = strictUtf8.decode(key);
    } catch {
      throw new MalformedEnvelope("key not utf-8");
    }
    fields.set(name, value);
  }
  if (pos !== data.length) {
    throw new MalformedEnvelope("trailing bytes");
  }
  return fields;
}

export function validateRecordEnvelope(env: Envelope): void {
  for (const key of REQUIRED_KEYS) {
    if (!env.has(key)) {
      throw new MalformedEnvelope(`missing required key ${key}`);
    }
  }
}

// ---------------------------------------------------------------------------
// Frames
// ---------------------------------------------------------------------------

export interface Frame {
  frameType: number;
  payload: Buffer;
}

export function frameEncode(
  frameType: number,
  payload: Buffer,
  maxPayload: number = MAX_FRAME_PAYLOAD,
): Buffer {
  if (!FRAME_TYPES.has(frameType)) {
    throw new UnknownFrameType(frameType);
  }
  if (payload.length > maxPayload) {
    throw new FrameTooLarge(`payload of ${payload.length} bytes exceeds ${maxPayload}`);
  }
  const head = Buffer.allocUnsafe(5);
  head.writeUInt8(frameType, 0);
  head.writeUInt32BE(payload.length, 1);
  return Buffer.concat([head, payload]);
}

/** Streaming frame decoder; partial reads resume where they left off. */
export class FrameDecoder {
  readonly maxPayload: number;
  private buf: Buffer;
  private ready: Frame[];

  constructor(maxPayload: number = MAX_FRAME_PAYLOAD) {
    this.maxPayload = maxPayload;
    this.buf = Buffer.alloc(0);
    this.ready = [];
  }

  /**
   * Consume bytes; queue every frame they complete for nextFrame().
   *
   * Returns the number of frames completed. A malformed header throws,
   * but only after the frames decoded ahead of it were queued, so the
   * caller can still process them before tearing the stream down.
   */
  feed(data: Buffer): number {
    this.buf = this.buf.length === 0 ? Buffer.from(data) : Buffer.concat([this.buf, data]);
    let count = 0;
    for (;;) {
      if (this.buf.length === 0) {
        break;
      }
      const ftype = this.buf[0];
      if (!FRAME_TYPES.has(ftype)) {
        throw new UnknownFrameType(ftype);
      }
      if (this.buf.length < 5) {
        break;
      }
      const length = this.buf.readUInt32BE(1);
      if (length > this.maxPayload) {
        throw new FrameTooLarge(`declared payload of ${length} bytes exceeds ${this.maxPayload}`);
      }
      if (this.buf.length < 5 + length) {
        break;
      }
      const payload = Buffer.from(this.buf.subarray(5, 5 + length));
      this.buf = this.buf.subarray(5 + length);
      this.ready.push({ frameType: ftype, payload });
      count += 1;
    }
    return count;
  }

  nextFrame(): Frame | null {
    return this.ready.length > 0 ? (this.ready.shift() as Frame) : null;
  }

  drain(): Frame[] {
    const out = this.ready;
    this.ready = [];
    return out;
  }

  get midFrame(): boolean {
    return this.buf.length > 0;
  }
}

/** Decode a complete byte string into frames; rejects trailing bytes. */
export function frameDecode(data: Buffer): Frame[] {
  const dec = new FrameDecoder();
  dec.feed(data);
  if (dec.midFrame) {
    throw new ConnectionClosed("byte stream ends mid-frame");
  }
  return dec.drain();
}

export function creditFrame(n: number): Buffer {
  const payload = Buffer.allocUnsafe(4);
  payload.writeUInt32BE(n, 0);
  return frameEncode(FRAME_CREDIT, payload);
}

export function helloAckPayload(initialCredits: number): Buffer {
  const credits = Buffer.allocUnsafe(4);
  credits.writeUInt32BE(initialCredits, 0);
  return encodeEnvelope(
    new Map([
      ["proto", PROTO_VERSION],
      ["initial_credits", credits],
    ]),
  );
}

export function helloPayload(producerId: string): Buffer {
  return encodeEnvelope(
    new Map([
      ["proto", PROTO_VERSION],
      ["producer_id", Buffer.from(producerId, "utf-8")],
    ]),
  );
}
