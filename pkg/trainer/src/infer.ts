/** Batch inference entrypoint for the rollout backend protocol. */

import * as fs from "fs";

import * as tf from "@tensorflow/tfjs";

import {
  GenerationRecord,
  InferManifest,
  ManifestError,
  loadInferManifest,
  readInstructionRecords,
  sortKeys,
  writeLinesAtomic,
} from "./manifest";
import {
  ArtifactDoc,
  BOS,
  BYTE_VOCAB,
  DEFAULT_CONFIG,
  EOS,
  ModelConfig,
  ToyLM,
  decodeTokens,
  encodeText,
  importLora,
} from "./model";
import { fnv1a, mulberry32 } from "./rng";

export interface InferStats {
  records: number;
  truncated_prompts: number;
}

function loadModel(manifest: InferManifest, config: ModelConfig): ToyLM {
  let doc: ArtifactDoc;
  try {
    doc = JSON.parse(fs.readFileSync(manifest.artifact_uri, "utf-8"));
  } catch (err) {
    throw new ManifestError(`artifact is not valid JSON: ${err}`);
  }
  if (!doc.lora || !doc.spec || typeof doc.seed !== "number") {
    throw new ManifestError("artifact is missing seed/spec/lora sections");
  }
  const modelConfig: ModelConfig = {
    ...config,
    dim: doc.config?.dim ?? config.dim,
    context: doc.config?.context ?? config.context,
  };
  return new ToyLM(modelConfig, doc.spec, doc.seed, importLora(doc));
}

function samplePosition(probs: Float32Array, topP: number, rng: () => number): number {
  const order = [...probs.keys()].sort((a, b) => probs[b] - probs[a]);
  let cumulative = 0;
  const kept: number[] = [];
  for (const idx of order) {
    kept.push(idx);
    cumulative += probs[idx];
    if (cumulative >= topP) break;
  }
  let total = 0;
  for (const idx of kept) total += probs[idx];
  let target = rng() * total;
  for (const idx of kept) {
    target -= probs[idx];
    if (target <= 0) return idx;
  }
  return kept[kept.length - 1];
}

function generateOne(model: ToyLM, promptTokens: number[], maxNew: number,
                     temperature: number, topP: number, rng: () => number): number[] {
  const ctx = model.config.context;
  let tokens = promptTokens.slice();
  const generated: number[] = [];
  const budget = Math.min(maxNew, 4 * ctx);
  for (let i = 0; i < budget; i++) {
    if (tokens.length >= ctx) tokens = tokens.slice(tokens.length - ctx + 1);
    const logits = tf.tidy(() => {
      const input = tf.tensor2d([tokens], [1, tokens.length], "int32");
      const mask = tf.ones([1, tokens.length]) as tf.Tensor2D;
      const out = model.logits(input, mask, false)
        .slice([0, tokens.length - 1, 0], [1, 1, -1])
        .reshape([-1]);
      const scaled = temperature > 0 ? tf.div(out, temperature) : out;
      return tf.softmax(scaled).dataSync() as Float32Array;
    });
    let next: number;
    if (temperature === 0) {
      next = logits.indexOf(Math.max(...logits));
    } else {
      next = samplePosition(logits, topP, rng);
    }
    if (next === EOS) {
      if (generated.some((t) => t < BYTE_VOCAB)) break;
      continue; // insist on at least one visible byte before stopping
    }
    generated.push(next);
    tokens.push(next);
  }
  return generated;
}

export function inferFromManifest(manifestPath: string,
                                  config: ModelConfig = DEFAULT_CONFIG): InferStats {
  const manifest = loadInferManifest(manifestPath);
  const model = loadModel(manifest, config);
  const prompts = readInstructionRecords(manifest.prompts_ref);
  // Inputs are capped by the training token limit and the model context;
  // max_new_tokens only budgets the generation.
  const promptBudget = Math.max(
    2, Math.min(model.config.context - 8, model.spec.max_tokens));
  const maxNew = config.dryRun
    ? Math.min(16, manifest.decoding.max_new_tokens)
    : manifest.decoding.max_new_tokens;

  let truncated = 0;
  const lines: string[] = [];
  for (const prompt of prompts) {
    let tokens = [BOS, ...encodeText(prompt.instruction)];
    if (tokens.length > promptBudget) {
      // Keep the most recent context; the warning is recorded, not fatal.
      tokens = [BOS, ...tokens.slice(tokens.length - promptBudget + 1)];
      truncated += 1;
      process.stderr.write(
        `warning: prompt ${prompt.id} truncated to ${promptBudget} tokens\n`);
    }
    for (let k = 1; k <= manifest.k; k++) {
      const rng = mulberry32(fnv1a(manifest.seed, prompt.id, k));
      const generated = generateOne(model, tokens, maxNew,
                                    manifest.decoding.temperature,
                                    manifest.decoding.top_p, rng);
      let text = decodeTokens(generated).trim();
      if (!text) text = `(k=${k})`;
      const record: GenerationRecord = {
        test_id: prompt.id,
        k_index: k,
        response: text,
        model: manifest.model,
        decoding: manifest.decoding,
      };
      lines.push(JSON.stringify(sortKeys(record)));
    }
  }
  writeLinesAtomic(manifest.output_ref, lines);
  if (truncated > 0) {
    writeLinesAtomic(manifest.output_ref + ".warnings",
                     [JSON.stringify({ truncated_prompts: truncated })]);
  }
  model.dispose();
  return { records: lines.length, truncated_prompts: truncated };
}
