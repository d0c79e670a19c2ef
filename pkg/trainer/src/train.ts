/** Training entrypoint for the executor protocol. */

import * as crypto from "crypto";
import * as fs from "fs";
import * as path from "path";

import * as tf from "@tensorflow/tfjs";

import {
  ManifestError,
  TrainManifest,
  loadTrainManifest,
  readInstructionRecords,
  sortKeys,
  writeJsonAtomic,
} from "./manifest";
import {
  BOS,
  DEFAULT_CONFIG,
  EOS,
  ModelConfig,
  PAD,
  ToyLM,
  encodeText,
  exportLora,
} from "./model";
import { fnv1a, mulberry32 } from "./rng";

const SEP = 10; // newline byte between instruction and response

export interface TrainResult {
  handle_id: string;
  artifact_uri: string;
  final_loss: number;
  steps: number;
  adapter: {
    lora_rank: number;
    lora_alpha: number;
    trainable_params: number;
    initial_loss: number;
    epochs: number;
  };
}

export function sequencesFromRefs(manifest: TrainManifest,
                                  config: ModelConfig): number[][] {
  const cap = Math.min(config.context, manifest.spec.max_tokens);
  const sequences: number[][] = [];
  for (const ref of manifest.dataset_refs) {
    for (const rec of readInstructionRecords(ref)) {
      const body = [...encodeText(rec.instruction), SEP, ...encodeText(rec.response)];
      const seq = [BOS, ...body, EOS].slice(0, cap);
      if (seq.length >= 2) sequences.push(seq);
    }
  }
  if (sequences.length === 0) {
    throw new ManifestError("manifest datasets produced no usable sequences");
  }
  return sequences;
}

function batchTensors(batch: number[][]) {
  const t = Math.max(...batch.map((s) => s.length));
  const tokens = batch.map((s) => [...s, ...Array(t - s.length).fill(PAD)]);
  const mask = batch.map((s) => [
    ...Array(s.length).fill(1),
    ...Array(t - s.length).fill(0),
  ]);
  return {
    tokens: tf.tensor2d(tokens, [batch.length, t], "int32"),
    mask: tf.tensor2d(mask, [batch.length, t], "float32"),
  };
}

export function trainFromManifest(manifestPath: string,
                                  config: ModelConfig = DEFAULT_CONFIG): TrainResult {
  const manifest = loadTrainManifest(manifestPath);
  const spec = manifest.spec;
  const epochs = config.dryRun ? Math.min(1, spec.epochs) : spec.epochs;
  const sequences = sequencesFromRefs(manifest, config);

  const model = new ToyLM(config, spec, manifest.seed);
  const optimizer = tf.train.adam(spec.learning_rate);
  const batchSize = Math.max(1, Math.min(spec.batch_size, sequences.length));
  const stepsPerEpoch = Math.ceil(sequences.length / batchSize);
  const maxSteps = config.dryRun ? Math.min(8, epochs * stepsPerEpoch)
    : epochs * stepsPerEpoch;

  // Measured before any update: the zero-initialized adapter B matrices make
  // this exactly the frozen base model's loss.
  const first = batchTensors(sequences.slice(0, batchSize));
  const initialLoss = model.loss(first.tokens, first.mask, false).dataSync()[0];

  const order = [...sequences.keys()];
  const shuffle = mulberry32(fnv1a(manifest.seed, "order"));
  let step = 0;
  let lastEpochLossSum = 0;
  let lastEpochBatches = 0;
  for (let epoch = 0; epoch < epochs && step < maxSteps; epoch++) {
    for (let i = order.length - 1; i > 0; i--) {
      const j = Math.floor(shuffle() * (i + 1));
      [order[i], order[j]] = [order[j], order[i]];
    }
    lastEpochLossSum = 0;
    lastEpochBatches = 0;
    for (let start = 0; start < order.length && step < maxSteps; start += batchSize) {
      const batch = order.slice(start, start + batchSize).map((idx) => sequences[idx]);
      const { tokens, mask } = batchTensors(batch);
      if (spec.scheduler === "cosine") {
        const progress = step / Math.max(1, maxSteps);
        (optimizer as unknown as { learningRate: number }).learningRate =
          spec.learning_rate * 0.5 * (1 + Math.cos(Math.PI * progress));
      }
      const cost = optimizer.minimize(
        () => model.loss(tokens, mask, true, fnv1a(manifest.seed, "drop", step)),
        true, model.trainableVariables()) as tf.Scalar;
      lastEpochLossSum += cost.dataSync()[0];
      lastEpochBatches += 1;
      cost.dispose();
      tokens.dispose();
      mask.dispose();
      step += 1;
    }
  }
  first.tokens.dispose();
  first.mask.dispose();

  const finalLoss = lastEpochBatches > 0
    ? lastEpochLossSum / lastEpochBatches : initialLoss;

  const manifestBytes = fs.readFileSync(manifestPath);
  const handleId = "toy-" + crypto.createHash("sha256")
    .update(manifestBytes).update(String(manifest.seed))
    .digest("hex").slice(0, 16);

  const artifactRel = path.posix.join(manifest.output_dir, "artifact.json");
  writeJsonAtomic(artifactRel, {
    handle_id: handleId,
    seed: manifest.seed,
    config: { dim: config.dim, context: config.context },
    spec: sortKeys(spec),
    lora: exportLora(model),
  });

  const result: TrainResult = {
    handle_id: handleId,
    artifact_uri: artifactRel,
    final_loss: Number(finalLoss.toFixed(6)),
    steps: step,
    adapter: {
      lora_rank: spec.lora_rank,
      lora_alpha: spec.lora_alpha,
      trainable_params: model.adapterParameterCount(),
      initial_loss: Number(initialLoss.toFixed(6)),
      epochs,
    },
  };
  writeJsonAtomic(path.posix.join(manifest.output_dir, "result"), result);

  model.dispose();
  optimizer.dispose();
  return result;
}
