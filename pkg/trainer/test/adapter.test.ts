import { execFileSync, spawnSync } from "child_process";
import * as fs from "fs";
import * as os from "os";
import * as path from "path";

import { afterAll, beforeAll, describe, expect, it } from "vitest";

const CLI = path.resolve(__dirname, "..", "dist", "cli.js");

interface Spec {
  [key: string]: unknown;
}

function writeRecords(file: string, n: number, maker?: (i: number) => [string, string]) {
  const lines: string[] = [];
  for (let i = 0; i < n; i++) {
    const [instruction, response] = maker
      ? maker(i)
      : [`say token t${i % 3}`, `t${i % 3} t${i % 3} t${i % 3}`];
    lines.push(JSON.stringify({
      cycle: 0, id: `p${String(i).padStart(3, "0")}`, instruction,
      origin: "coverage_train", response, task: "other",
    }));
  }
  fs.writeFileSync(file, lines.map((l) => l + "\n").join(""));
}

function trainManifest(dir: string, overrides: Spec = {}, specOverrides: Spec = {}) {
  const manifest = {
    cycle: 0,
    dataset_refs: ["train"],
    output_dir: "model",
    seed: 3,
    total_samples: 10,
    spec: {
      base_model: "toy", precision: "bf16", scheduler: "cosine",
      max_tokens: 1024, adapter_method: "qlora", lora_rank: 8, lora_alpha: 16,
      lora_dropout: 0.05, epochs: 2, learning_rate: 0.005, batch_size: 4,
      ...specOverrides,
    },
    ...overrides,
  };
  const file = path.join(dir, "manifest.json");
  fs.writeFileSync(file, JSON.stringify(manifest));
  return file;
}

function run(args: string[], cwd: string) {
  return spawnSync("node", [CLI, ...args], { cwd, encoding: "utf-8" });
}

let dir: string;

beforeAll(() => {
  dir = fs.mkdtempSync(path.join(os.tmpdir(), "trainer-test-"));
});

afterAll(() => {
  fs.rmSync(dir, { recursive: true, force: true });
});

describe("train protocol", () => {
  it("produces a schema-valid result on a 10-pair manifest", () => {
    const work = fs.mkdtempSync(path.join(dir, "t1-"));
    writeRecords(path.join(work, "train"), 10);
    const manifest = trainManifest(work);
    const proc = run(["train", manifest], work);
    expect(proc.status).toBe(0);
    const result = JSON.parse(
      fs.readFileSync(path.join(work, "model", "result"), "utf-8"));
    expect(typeof result.handle_id).toBe("string");
    expect(result.handle_id.length).toBeGreaterThan(0);
    expect(fs.existsSync(path.join(work, result.artifact_uri))).toBe(true);
    expect(Number.isFinite(result.final_loss)).toBe(true);
    expect(result.steps).toBeGreaterThanOrEqual(1);
    expect(result.adapter.lora_rank).toBe(8);
    expect(result.adapter.lora_alpha).toBe(16);
  });

  it("echoes manifest adapter shape into result metadata", () => {
    const work = fs.mkdtempSync(path.join(dir, "t2-"));
    writeRecords(path.join(work, "train"), 6);
    const manifest = trainManifest(work, {}, { lora_rank: 4, lora_alpha: 32 });
    expect(run(["train", manifest], work).status).toBe(0);
    const result = JSON.parse(
      fs.readFileSync(path.join(work, "model", "result"), "utf-8"));
    expect(result.adapter.lora_rank).toBe(4);
    expect(result.adapter.lora_alpha).toBe(32);
  });

  it("decreases loss on a 100-pair overfit fixture", () => {
    const work = fs.mkdtempSync(path.join(dir, "t3-"));
    writeRecords(path.join(work, "train"), 100,
                 (i) => [`repeat after me ${i % 5}`, `after me ${i % 5}`]);
    const manifest = trainManifest(work, { total_samples: 100 },
                                   { epochs: 3, learning_rate: 0.01, batch_size: 8 });
    const proc = run(["train", manifest], work);
    expect(proc.status).toBe(0);
    const result = JSON.parse(
      fs.readFileSync(path.join(work, "model", "result"), "utf-8"));
    expect(result.final_loss).toBeLessThan(result.adapter.initial_loss);
  }, 120_000);

  it("is deterministic for a fixed manifest and seed", () => {
    const work = fs.mkdtempSync(path.join(dir, "t4-"));
    writeRecords(path.join(work, "train"), 8);
    const manifest = trainManifest(work);
    expect(run(["train", manifest], work).status).toBe(0);
    const first = fs.readFileSync(path.join(work, "model", "result"), "utf-8");
    const firstArtifact = fs.readFileSync(path.join(work, "model", "artifact.json"), "utf-8");
    expect(run(["train", manifest], work).status).toBe(0);
    expect(fs.readFileSync(path.join(work, "model", "result"), "utf-8")).toBe(first);
    expect(fs.readFileSync(path.join(work, "model", "artifact.json"), "utf-8"))
      .toBe(firstArtifact);
  });

  it("exits 2 on a manifest referencing a missing file", () => {
    const work = fs.mkdtempSync(path.join(dir, "t5-"));
    const manifest = trainManifest(work, { dataset_refs: ["nope"] });
    const proc = run(["train", manifest], work);
    expect(proc.status).toBe(2);
    expect(proc.stderr).toContain("bad manifest");
  });

  it("exits 2 on malformed manifest JSON and bad usage", () => {
    const work = fs.mkdtempSync(path.join(dir, "t6-"));
    const file = path.join(work, "manifest.json");
    fs.writeFileSync(file, "{broken");
    expect(run(["train", file], work).status).toBe(2);
    expect(run(["dance", file], work).status).toBe(2);
    expect(run(["train"], work).status).toBe(2);
  });

  it("honors --dry-run without an accelerator and still validates", () => {
    const work = fs.mkdtempSync(path.join(dir, "t7-"));
    writeRecords(path.join(work, "train"), 10);
    const manifest = trainManifest(work, {}, { epochs: 5 });
    const proc = run(["train", manifest, "--dry-run"], work);
    expect(proc.status).toBe(0);
    const result = JSON.parse(
      fs.readFileSync(path.join(work, "model", "result"), "utf-8"));
    expect(result.steps).toBeGreaterThanOrEqual(1);
    expect(result.steps).toBeLessThanOrEqual(8);
  });
});

describe("infer protocol", () => {
  function trained(work: string) {
    writeRecords(path.join(work, "train"), 10);
    const manifest = trainManifest(work);
    expect(run(["train", manifest], work).status).toBe(0);
    return JSON.parse(fs.readFileSync(path.join(work, "model", "result"), "utf-8"));
  }

  function inferManifest(work: string, result: { handle_id: string; artifact_uri: string },
                         overrides: Spec = {}) {
    const prompts = path.join(work, "prompts");
    const lines = [0, 1, 2].map((i) => JSON.stringify({
      cycle: 0, id: `q${i}`, instruction: `say token t${i}`,
      origin: "coverage_test", response: "x y z", task: "other",
    }));
    fs.writeFileSync(prompts, lines.map((l) => l + "\n").join(""));
    const doc = {
      artifact_uri: result.artifact_uri, prompts_ref: "prompts",
      output_ref: "generations", k: 2, seed: 9, model: result.handle_id,
      decoding: { temperature: 0.7, top_p: 0.95, max_new_tokens: 12 },
      ...overrides,
    };
    const file = path.join(work, "infer.json");
    fs.writeFileSync(file, JSON.stringify(doc));
    return file;
  }

  it("emits k records per prompt in the rollout schema", () => {
    const work = fs.mkdtempSync(path.join(dir, "i1-"));
    const result = trained(work);
    const manifest = inferManifest(work, result);
    const proc = run(["infer", manifest], work);
    expect(proc.status).toBe(0);
    const lines = fs.readFileSync(path.join(work, "generations"), "utf-8")
      .trim().split("\n");
    expect(lines.length).toBe(6);
    const seen = new Set<string>();
    for (const line of lines) {
      const rec = JSON.parse(line);
      expect(typeof rec.test_id).toBe("string");
      expect(rec.k_index).toBeGreaterThanOrEqual(1);
      expect(rec.k_index).toBeLessThanOrEqual(2);
      expect(rec.model).toBe(result.handle_id);
      expect(rec.response.length).toBeGreaterThan(0);
      expect(rec.decoding.max_new_tokens).toBe(12);
      seen.add(`${rec.test_id}#${rec.k_index}`);
    }
    expect(seen.size).toBe(6);
  });

  it("is identical across reruns with fixed seeds", () => {
    const work = fs.mkdtempSync(path.join(dir, "i2-"));
    const result = trained(work);
    const manifest = inferManifest(work, result);
    expect(run(["infer", manifest], work).status).toBe(0);
    const first = fs.readFileSync(path.join(work, "generations"), "utf-8");
    expect(run(["infer", manifest], work).status).toBe(0);
    expect(fs.readFileSync(path.join(work, "generations"), "utf-8")).toBe(first);
  });

  it("records a truncated-input warning but still generates", () => {
    const work = fs.mkdtempSync(path.join(dir, "i3-"));
    const result = trained(work);
    const prompts = path.join(work, "prompts");
    const big = JSON.stringify({
      cycle: 0, id: "huge", instruction: "very long prompt ".repeat(100),
      origin: "coverage_test", response: "x", task: "other",
    });
    fs.writeFileSync(prompts, big + "\n");
    const file = path.join(work, "infer.json");
    fs.writeFileSync(file, JSON.stringify({
      artifact_uri: result.artifact_uri, prompts_ref: "prompts",
      output_ref: "generations", k: 1, seed: 1, model: result.handle_id,
      decoding: { temperature: 0.7, top_p: 0.95, max_new_tokens: 8 },
    }));
    const proc = run(["infer", file], work);
    expect(proc.status).toBe(0);
    expect(proc.stderr).toContain("truncated");
    expect(fs.existsSync(path.join(work, "generations.warnings"))).toBe(true);
    const lines = fs.readFileSync(path.join(work, "generations"), "utf-8")
      .trim().split("\n");
    expect(lines.length).toBe(1);
  });

  it("exits 2 when the artifact is missing", () => {
    const work = fs.mkdtempSync(path.join(dir, "i4-"));
    const prompts = path.join(work, "prompts");
    fs.writeFileSync(prompts, JSON.stringify({
      cycle: 0, id: "q0", instruction: "hello", origin: "coverage_test",
      response: "x", task: "other",
    }) + "\n");
    const file = path.join(work, "infer.json");
    fs.writeFileSync(file, JSON.stringify({
      artifact_uri: "model/artifact.json", prompts_ref: "prompts",
      output_ref: "generations", k: 1, seed: 1, model: "toy",
      decoding: { temperature: 0.7, top_p: 0.95, max_new_tokens: 8 },
    }));
    expect(run(["infer", file], work).status).toBe(2);
  });
});
