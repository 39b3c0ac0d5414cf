/** results.jsonl plus content-addressed payload blobs under one directory. */

import * as fs from "node:fs";
import * as path from "node:path";

import { Envelope } from "./wire";

export class IoError extends Error {
  readonly path: string;
  constructor(filePath: string, detail: string) {
    super(`${filePath}: ${detail}`);
    this.name = "IoError";
    this.path = filePath;
  }
}

export interface InferenceResult {
  recordId: string;
  score: number;
  label: string;
  payloadSha256: Buffer;
  storedPath?: string;
}

const SHORT_ESCAPES: Record<number, string> = {
  0x08: "\\b",
  0x09: "\\t",
  0x0a: "\\n",
  0x0c: "\\f",
  0x0d: "\\r",
  0x22: '\\"',
  0x5c: "\\\\",
};

/** ASCII-only JSON string literal; non-printables become \uXXXX escapes. */
export function jsonString(s: string): string {
  let out = '"';
  for (let i = 0; i < s.length; i++) {
    const c = s.charCodeAt(i);
    const short = SHORT_ESCAPES[c];
    if (short !== undefined) {
      out += short;
    } else if (c >= 0x20 && c <= 0x7e) {
      out += s[i];
    } else {
      out += "\\u" + c.toString(16).padStart(4, "0");
    }
  }
  return out + '"';
}

function envelopeText(envelope: Envelope, key: string): string {
  const value = envelope.get(key);
  return value === undefined ? "" : value.toString("utf-8");
}

export function resultLine(result: InferenceResult, envelope: Envelope, relPath: string): string {
  return (
    `{"record_id": ${jsonString(result.recordId)}, ` +
    `"target_uri": ${jsonString(envelopeText(envelope, "target_uri"))}, ` +
    `"mime": ${jsonString(envelopeText(envelope, "mime"))}, ` +
    `"score": ${result.score.toFixed(6)}, ` +
    `"label": ${jsonString(result.label)}, ` +
    `"payload_sha256": ${jsonString(result.payloadSha256.toString("hex"))}, ` +
    `"payload_path": ${jsonString(relPath)}}\n`
  );
}

export class ResultSink {
  readonly outDir: string;
  linesWritten = 0;
  blobsWritten = 0;
  private fd: number;

  constructor(outDir: string, truncate = false) {
    this.outDir = outDir;
    const resultsPath = path.join(outDir, "results.jsonl");
    try {
      fs.mkdirSync(path.join(outDir, "blobs"), { recursive: true });
      this.fd = fs.openSync(resultsPath, truncate ? "w" : "a");
    } catch (err) {
      throw new IoError(resultsPath, String((err as Error).message ?? err));
    }
  }

  write(result: InferenceResult, envelope: Envelope): string {
    const hex = result.payloadSha256.toString("hex");
    const rel = `blobs/${hex.slice(0, 2)}/${hex}`;
    const blobPath = path.join(this.outDir, rel);
    try {
      if (!fs.existsSync(blobPath)) {
        fs.mkdirSync(path.dirname(blobPath), { recursive: true });
        const tmp = blobPath + ".tmp";
        fs.writeFileSync(tmp, envelope.get("payload") ?? Buffer.alloc(0));
        fs.renameSync(tmp, blobPath);
        this.blobsWritten += 1;
      }
      fs.writeSync(this.fd, resultLine(result, envelope, rel));
    } catch (err) {
      throw new IoError(blobPath, String((err as Error).message ?? err));
    }
    result.storedPath = rel;
    this.linesWritten += 1;
    return rel;
  }

  close(): void {
    fs.closeSync(this.fd);
  }
}
