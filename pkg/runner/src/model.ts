/**
 * Small real neural models for payload scoring.
 *
 * Both kinds map a payload to a 256-bin byte histogram (the text variant
 * case-folds ASCII letters first) and feed it through a seeded dense
 * network ending in a sigmoid, so scores land in [0, 1] and a fixed seed
 * reproduces identical weights and therefore identical scores.
 */

import * as tf from "@tensorflow/tfjs";

export type ModelKind = "image_classifier" | "text_classifier";

export const MODEL_KINDS: ModelKind[] = ["image_classifier", "text_classifier"];

export const FEATURE_DIM = 256;

export function byteHistogram(payload: Buffer, foldCase: boolean): Float32Array {
  const hist = new Float32Array(FEATURE_DIM);
  for (let i = 0; i < payload.length; i++) {
    let b = payload[i];
    if (foldCase && b >= 0x41 && b <= 0x5a) {
      b += 0x20;
    }
    hist[b] += 1;
  }
  const n = Math.max(payload.length, 1);
  for (let i = 0; i < FEATURE_DIM; i++) {
    hist[i] /= n;
  }
  return hist;
}

export class BatchModel {
  readonly kind: ModelKind;
  readonly seed: number;
  private readonly net: tf.Sequential;

  constructor(kind: ModelKind, seed = 7) {
    if (!MODEL_KINDS.includes(kind)) {
      throw new Error(`unknown model kind ${JSON.stringify(kind)}`);
    }
    this.kind = kind;
    this.seed = seed;
    const hidden = kind === "image_classifier" ? [32, 16] : [64];
    const net = tf.sequential();
    let first = true;
    let layerSeed = seed;
    for (const units of hidden) {
      net.add(
        tf.layers.dense({
          units,
          activation: "relu",
          kernelInitializer: tf.initializers.glorotUniform({ seed: layerSeed }),
          ...(first ? { inputShape: [FEATURE_DIM] } : {}),
        }),
      );
      first = false;
      layerSeed += 1;
    }
    net.add(
      tf.layers.dense({
        units: 1,
        activation: "sigmoid",
        kernelInitializer: tf.initializers.glorotUniform({ seed: layerSeed }),
      }),
    );
    this.net = net;
  }

  /** One forward pass over the batch; returns one score per payload. */
  scoreBatch(payloads: Buffer[]): Float32Array {
    if (payloads.length === 0) {
      return new Float32Array(0);
    }
    const foldCase = this.kind === "text_classifier";
    const features = new Float32Array(payloads.length * FEATURE_DIM);
    payloads.forEach((payload, row) => {
      features.set(byteHistogram(payload, foldCase), row * FEATURE_DIM);
    });
    return tf.tidy(() => {
      const input = tf.tensor2d(features, [payloads.length, FEATURE_DIM]);
      const output = this.net.predict(input) as tf.Tensor;
      return output.dataSync() as Float32Array;
    });
  }

  dispose(): void {
    this.net.dispose();
  }
}
