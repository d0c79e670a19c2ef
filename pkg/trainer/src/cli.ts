#!/usr/bin/env node
/** Executor-protocol entrypoint.
 *
 *   node dist/cli.js train <manifest-path> [--dry-run]
 *   node dist/cli.js infer <manifest-path> [--dry-run]
 *
 * Exit codes: 0 success, 2 bad manifest, 3 resource failure, 1 other error.
 * CPU-only; --dry-run (or RT_TRAINER_DRY_RUN=1) caps steps and generation
 * budgets so smoke runs stay fast on any machine.
 */

import { ManifestError, ResourceError } from "./manifest";
import { DEFAULT_CONFIG, ModelConfig } from "./model";

function main(argv: string[]): number {
  const args = argv.filter((a) => a !== "--dry-run");
  const dryRun = argv.includes("--dry-run") || process.env.RT_TRAINER_DRY_RUN === "1";
  const [command, manifestPath] = args;
  if (!command || !manifestPath || !["train", "infer"].includes(command)) {
    process.stderr.write(
      "usage: cli.js (train|infer) <manifest-path> [--dry-run]\n");
    return 2;
  }
  const config: ModelConfig = { ...DEFAULT_CONFIG, dryRun };
  try {
    if (command === "train") {
      const { trainFromManifest } = require("./train");
      const result = trainFromManifest(manifestPath, config);
      process.stderr.write(
        `trained ${result.handle_id}: loss ${result.adapter.initial_loss} -> ` +
        `${result.final_loss} over ${result.steps} steps\n`);
    } else {
      const { inferFromManifest } = require("./infer");
      const stats = inferFromManifest(manifestPath, config);
      process.stderr.write(
        `generated ${stats.records} records` +
        (stats.truncated_prompts ? ` (${stats.truncated_prompts} prompts truncated)` : "") +
        "\n");
    }
    return 0;
  } catch (err) {
    if (err instanceof ManifestError) {
      process.stderr.write(`bad manifest: ${err.message}\n`);
      return 2;
    }
    if (err instanceof ResourceError) {
      process.stderr.write(`resource failure: ${err.message}\n`);
      return 3;
    }
    process.stderr.write(`error: ${err instanceof Error ? err.stack : err}\n`);
    return 1;
  }
}

process.exit(main(process.argv.slice(2)));
