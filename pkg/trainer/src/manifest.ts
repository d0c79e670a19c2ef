/** Manifest and record schemas for the executor subprocess protocol.
 *
 * Paths inside manifests are relative to the process working directory
 * (the orchestrator's run directory).
 */

import * as fs from "fs";
import * as path from "path";

export class ManifestError extends Error {}
export class ResourceError extends Error {}

export interface ExecutorSpec {
  base_model: string;
  precision: string;
  scheduler: string;
  max_tokens: number;
  adapter_method: string;
  lora_rank: number;
  lora_alpha: number;
  lora_dropout: number;
  epochs: number;
  learning_rate: number;
  batch_size: number;
}

export interface TrainManifest {
  cycle: number;
  dataset_refs: string[];
  output_dir: string;
  seed: number;
  total_samples: number;
  spec: ExecutorSpec;
}

export interface DecodingParams {
  temperature: number;
  top_p: number;
  max_new_tokens: number;
}

export interface InferManifest {
  artifact_uri: string;
  prompts_ref: string;
  output_ref: string;
  k: number;
  seed: number;
  model: string;
  decoding: DecodingParams;
}

export interface InstructionRecord {
  id: string;
  instruction: string;
  response: string;
}

export interface GenerationRecord {
  test_id: string;
  k_index: number;
  response: string;
  model: string;
  decoding: DecodingParams;
}

function readJson(file: string): unknown {
  if (!fs.existsSync(file)) {
    throw new ManifestError(`manifest not found: ${file}`);
  }
  try {
    return JSON.parse(fs.readFileSync(file, "utf-8"));
  } catch (err) {
    throw new ManifestError(`manifest is not valid JSON: ${err}`);
  }
}

function requireNumber(obj: Record<string, unknown>, key: string, fallback?: number): number {
  const value = obj[key] ?? fallback;
  if (typeof value !== "number" || !Number.isFinite(value)) {
    throw new ManifestError(`manifest field ${key} must be a finite number`);
  }
  return value;
}

function requireString(obj: Record<string, unknown>, key: string, fallback?: string): string {
  const value = obj[key] ?? fallback;
  if (typeof value !== "string" || value.length === 0) {
    throw new ManifestError(`manifest field ${key} must be a non-empty string`);
  }
  return value;
}

export function loadTrainManifest(file: string): TrainManifest {
  const doc = readJson(file) as Record<string, unknown>;
  if (typeof doc !== "object" || doc === null) {
    throw new ManifestError("manifest must be a JSON object");
  }
  const refs = doc["dataset_refs"];
  if (!Array.isArray(refs) || refs.length === 0 || !refs.every((r) => typeof r === "string")) {
    throw new ManifestError("manifest field dataset_refs must be a non-empty string array");
  }
  for (const ref of refs as string[]) {
    if (!fs.existsSync(ref)) {
      throw new ManifestError(`dataset ref missing: ${ref}`);
    }
  }
  const rawSpec = (doc["spec"] ?? {}) as Record<string, unknown>;
  const spec: ExecutorSpec = {
    base_model: requireString(rawSpec, "base_model", "toy"),
    precision: requireString(rawSpec, "precision", "bf16"),
    scheduler: requireString(rawSpec, "scheduler", "cosine"),
    max_tokens: requireNumber(rawSpec, "max_tokens", 1024),
    adapter_method: requireString(rawSpec, "adapter_method", "qlora"),
    lora_rank: requireNumber(rawSpec, "lora_rank", 8),
    lora_alpha: requireNumber(rawSpec, "lora_alpha", 16),
    lora_dropout: requireNumber(rawSpec, "lora_dropout", 0.05),
    epochs: requireNumber(rawSpec, "epochs", 3),
    learning_rate: requireNumber(rawSpec, "learning_rate", 2e-4),
    batch_size: requireNumber(rawSpec, "batch_size", 8),
  };
  if (spec.lora_rank < 1 || spec.lora_alpha < 1) {
    throw new ManifestError("lora_rank and lora_alpha must be >= 1");
  }
  return {
    cycle: requireNumber(doc, "cycle", 0),
    dataset_refs: refs as string[],
    output_dir: requireString(doc, "output_dir"),
    seed: requireNumber(doc, "seed", 0),
    total_samples: requireNumber(doc, "total_samples", 0),
    spec,
  };
}

export function loadInferManifest(file: string): InferManifest {
  const doc = readJson(file) as Record<string, unknown>;
  const k = requireNumber(doc, "k");
  if (k < 1 || !Number.isInteger(k)) {
    throw new ManifestError("manifest field k must be an integer >= 1");
  }
  const rawDecoding = (doc["decoding"] ?? {}) as Record<string, unknown>;
  const decoding: DecodingParams = {
    temperature: requireNumber(rawDecoding, "temperature", 0.7),
    top_p: requireNumber(rawDecoding, "top_p", 0.95),
    max_new_tokens: requireNumber(rawDecoding, "max_new_tokens", 1024),
  };
  const manifest: InferManifest = {
    artifact_uri: requireString(doc, "artifact_uri"),
    prompts_ref: requireString(doc, "prompts_ref"),
    output_ref: requireString(doc, "output_ref"),
    k,
    seed: requireNumber(doc, "seed", 0),
    model: requireString(doc, "model", "toy"),
    decoding,
  };
  if (!fs.existsSync(manifest.artifact_uri)) {
    throw new ManifestError(`artifact missing: ${manifest.artifact_uri}`);
  }
  if (!fs.existsSync(manifest.prompts_ref)) {
    throw new ManifestError(`prompts file missing: ${manifest.prompts_ref}`);
  }
  return manifest;
}

export function readInstructionRecords(file: string): InstructionRecord[] {
  const out: InstructionRecord[] = [];
  const lines = fs.readFileSync(file, "utf-8").split("\n");
  lines.forEach((line, idx) => {
    if (!line.trim()) return;
    let rec: Record<string, unknown>;
    try {
      rec = JSON.parse(line);
    } catch (err) {
      throw new ManifestError(`${file}:${idx + 1}: bad record (${err})`);
    }
    const id = rec["id"];
    const instruction = rec["instruction"];
    const response = rec["response"];
    if (typeof id !== "string" || typeof instruction !== "string"
        || typeof response !== "string") {
      throw new ManifestError(`${file}:${idx + 1}: record needs id/instruction/response`);
    }
    out.push({ id, instruction, response });
  });
  if (out.length === 0) {
    throw new ManifestError(`no records in ${file}`);
  }
  return out;
}

export function writeJsonAtomic(file: string, payload: unknown): void {
  const tmp = `${file}.tmp`;
  try {
    fs.mkdirSync(path.dirname(file), { recursive: true });
    fs.writeFileSync(tmp, JSON.stringify(sortKeys(payload)) + "\n", "utf-8");
    fs.renameSync(tmp, file);
  } catch (err) {
    throw new ResourceError(`cannot write ${file}: ${err}`);
  }
}

export function writeLinesAtomic(file: string, lines: string[]): void {
  const tmp = `${file}.tmp`;
  try {
    fs.mkdirSync(path.dirname(file), { recursive: true });
    fs.writeFileSync(tmp, lines.map((l) => l + "\n").join(""), "utf-8");
    fs.renameSync(tmp, file);
  } catch (err) {
    throw new ResourceError(`cannot write ${file}: ${err}`);
  }
}

export function sortKeys(value: unknown): unknown {
  if (Array.isArray(value)) return value.map(sortKeys);
  if (value !== null && typeof value === "object") {
    const out: Record<string, unknown> = {};
    for (const key of Object.keys(value as Record<string, unknown>).sort()) {
      out[key] = sortKeys((value as Record<string, unknown>)[key]);
    }
    return out;
  }
  return value;
}
