/** Toy byte-level causal LM with low-rank adapters.
 *
 * The frozen base (embeddings, one causal self-attention block, output head)
 * is materialized deterministically from a seed, so artifacts only need to
 * carry the adapter weights. Adapters follow the usual low-rank scheme:
 * W_eff = W + (alpha/rank) * A.B with A gaussian and B zero-initialized,
 * applied to the query/value projections and the output head.
 */

import * as tf from "@tensorflow/tfjs";

import { ExecutorSpec } from "./manifest";
import { fnv1a } from "./rng";

export const BYTE_VOCAB = 256;
export const BOS = 256;
export const EOS = 257;
export const PAD = 258;
export const VOCAB = 259;

export interface ModelConfig {
  dim: number;
  context: number;
  device: "cpu";
  dryRun: boolean;
}

export const DEFAULT_CONFIG: ModelConfig = {
  dim: 32,
  context: 96,
  device: "cpu",
  dryRun: false,
};

export function encodeText(text: string): number[] {
  return Array.from(Buffer.from(text, "utf-8"));
}

export function decodeTokens(tokens: number[]): string {
  return Buffer.from(tokens.filter((t) => t < BYTE_VOCAB)).toString("utf-8");
}

export interface LoraTensors {
  aQ: tf.Variable;
  bQ: tf.Variable;
  aV: tf.Variable;
  bV: tf.Variable;
  aOut: tf.Variable;
  bOut: tf.Variable;
}

export class ToyLM {
  readonly config: ModelConfig;
  readonly spec: ExecutorSpec;
  readonly seed: number;
  readonly embed: tf.Tensor2D;
  readonly pos: tf.Tensor2D;
  readonly wQ: tf.Tensor2D;
  readonly wK: tf.Tensor2D;
  readonly wV: tf.Tensor2D;
  readonly wO: tf.Tensor2D;
  readonly wOut: tf.Tensor2D;
  readonly lora: LoraTensors;

  constructor(config: ModelConfig, spec: ExecutorSpec, seed: number,
              lora?: Record<string, { shape: number[]; values: Float32Array }>) {
    this.config = config;
    this.spec = spec;
    this.seed = seed;
    const d = config.dim;
    const scale = 1 / Math.sqrt(d);
    const base = (name: string, shape: [number, number], std: number) =>
      tf.randomNormal(shape, 0, std, "float32", fnv1a(seed, "base", name)) as tf.Tensor2D;
    this.embed = base("embed", [VOCAB, d], 0.8);
    this.pos = base("pos", [config.context, d], 0.1);
    this.wQ = base("wq", [d, d], scale);
    this.wK = base("wk", [d, d], scale);
    this.wV = base("wv", [d, d], scale);
    this.wO = base("wo", [d, d], scale);
    this.wOut = base("wout", [d, VOCAB], scale);

    const r = spec.lora_rank;
    const loraInit = (name: string, shape: [number, number], zero: boolean) => {
      if (lora && lora[name]) {
        const [rows, cols] = lora[name].shape;
        return tf.variable(tf.tensor2d(lora[name].values, [rows, cols]), true, name);
      }
      const init = zero
        ? tf.zeros(shape)
        : tf.randomNormal(shape, 0, 1 / r, "float32", fnv1a(seed, "lora", name));
      return tf.variable(init, true, name);
    };
    this.lora = {
      aQ: loraInit("aQ", [d, r], false),
      bQ: loraInit("bQ", [r, d], true),
      aV: loraInit("aV", [d, r], false),
      bV: loraInit("bV", [r, d], true),
      aOut: loraInit("aOut", [d, r], false),
      bOut: loraInit("bOut", [r, VOCAB], true),
    };
  }

  trainableVariables(): tf.Variable[] {
    const l = this.lora;
    return [l.aQ, l.bQ, l.aV, l.bV, l.aOut, l.bOut];
  }

  adapterParameterCount(): number {
    return this.trainableVariables()
      .map((v) => v.shape.reduce((a, b) => a * b, 1))
      .reduce((a, b) => a + b, 0);
  }

  /** logits [batch, T, VOCAB] for token ids [batch, T] with key mask [batch, T]. */
  logits(tokens: tf.Tensor2D, keyMask: tf.Tensor2D, training: boolean,
         dropSeed = 0): tf.Tensor3D {
    const { dim } = this.config;
    const scaleLora = this.spec.lora_alpha / this.spec.lora_rank;
    const t = tokens.shape[1];
    return tf.tidy(() => {
      const x = tf.add(
        tf.gather(this.embed, tokens.flatten()).reshape([tokens.shape[0], t, dim]),
        this.pos.slice([0, 0], [t, dim]).expandDims(0)) as tf.Tensor3D;
      const xLora = training && this.spec.lora_dropout > 0
        ? tf.dropout(x, this.spec.lora_dropout, undefined, dropSeed)
        : x;
      const project = (w: tf.Tensor2D, a?: tf.Variable, b?: tf.Variable) => {
        let out = tf.matMul(x.reshape([-1, dim]), w);
        if (a && b) {
          const low = tf.matMul(tf.matMul(xLora.reshape([-1, dim]), a as tf.Tensor2D),
                                b as tf.Tensor2D);
          out = tf.add(out, tf.mul(low, scaleLora));
        }
        return out.reshape([tokens.shape[0], t, -1]) as tf.Tensor3D;
      };
      const q = project(this.wQ, this.lora.aQ, this.lora.bQ);
      const k = project(this.wK);
      const v = project(this.wV, this.lora.aV, this.lora.bV);

      let scores = tf.matMul(q, k, false, true).div(Math.sqrt(dim)) as tf.Tensor3D;
      const causal = tf.linalg.bandPart(tf.ones([t, t]), -1, 0);
      scores = tf.add(scores, tf.mul(tf.sub(1, causal), -1e9).expandDims(0)) as tf.Tensor3D;
      scores = tf.add(scores,
                      tf.mul(tf.sub(1, keyMask), -1e9).expandDims(1)) as tf.Tensor3D;
      const attn = tf.softmax(scores, -1);
      const ctx = tf.matMul(attn, v);
      const h = tf.add(x, tf.matMul(ctx.reshape([-1, dim]), this.wO)
        .reshape([tokens.shape[0], t, dim])) as tf.Tensor3D;

      const flat = h.reshape([-1, dim]) as tf.Tensor2D;
      let out = tf.matMul(flat, this.wOut);
      const hLora = training && this.spec.lora_dropout > 0
        ? tf.dropout(flat, this.spec.lora_dropout, undefined, dropSeed + 1)
        : flat;
      const low = tf.matMul(tf.matMul(hLora, this.lora.aOut as tf.Tensor2D),
                            this.lora.bOut as tf.Tensor2D);
      out = tf.add(out, tf.mul(low, scaleLora));
      return out.reshape([tokens.shape[0], t, VOCAB]) as tf.Tensor3D;
    });
  }

  /** Masked mean next-token cross-entropy. */
  loss(tokens: tf.Tensor2D, keyMask: tf.Tensor2D, training: boolean,
       dropSeed = 0): tf.Scalar {
    return tf.tidy(() => {
      const t = tokens.shape[1];
      const logits = this.logits(tokens, keyMask, training, dropSeed)
        .slice([0, 0, 0], [-1, t - 1, -1]);
      const targets = tokens.slice([0, 1], [-1, t - 1]);
      const targetMask = keyMask.slice([0, 1], [-1, t - 1]);
      const logProbs = tf.logSoftmax(logits, -1);
      const oneHot = tf.oneHot(targets.cast("int32"), VOCAB);
      const ce = tf.neg(tf.sum(tf.mul(oneHot, logProbs), -1));
      const masked = tf.mul(ce, targetMask);
      return tf.div(tf.sum(masked), tf.maximum(tf.sum(targetMask), 1)) as tf.Scalar;
    });
  }

  dispose(): void {
    for (const tensor of [this.embed, this.pos, this.wQ, this.wK, this.wV,
                          this.wO, this.wOut]) {
      tensor.dispose();
    }
    for (const v of this.trainableVariables()) {
      v.dispose();
    }
  }
}

export interface ArtifactDoc {
  handle_id: string;
  seed: number;
  config: { dim: number; context: number };
  spec: ExecutorSpec;
  lora: Record<string, { shape: number[]; data: string }>;
}

export function exportLora(model: ToyLM): Record<string, { shape: number[]; data: string }> {
  const out: Record<string, { shape: number[]; data: string }> = {};
  for (const [name, variable] of Object.entries(model.lora)) {
    const values = variable.dataSync() as Float32Array;
    out[name] = {
      shape: variable.shape.slice(),
      data: Buffer.from(values.buffer, values.byteOffset, values.byteLength)
        .toString("base64"),
    };
  }
  return out;
}

export function importLora(doc: ArtifactDoc): Record<string, { shape: number[]; values: Float32Array }> {
  const out: Record<string, { shape: number[]; values: Float32Array }> = {};
  for (const [name, entry] of Object.entries(doc.lora)) {
    const buf = Buffer.from(entry.data, "base64");
    out[name] = {
      shape: entry.shape,
      values: new Float32Array(buf.buffer, buf.byteOffset, buf.byteLength / 4),
    };
  }
  return out;
}
