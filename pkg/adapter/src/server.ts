/** Stdio entry point: NDJSON in, NDJSON out, one reply per line.
 *
 *   node dist/server.js [--config path.json] [--seed N]
 *
 * The optional config file overrides model hyperparameters: rank, dim,
 * lr, seed, temperature, clip_eps, kl_beta. Unknown keys are rejected so
 * a typo cannot silently fall back to defaults. Diagnostics go to stderr;
 * stdout carries protocol replies only.
 */

import { readFileSync } from "node:fs";
import readline from "node:readline";
import process from "node:process";

import { DEFAULT_CONFIG, ModelConfig } from "./model.js";
import { AdapterService, handleLine } from "./protocol.js";

const CONFIG_KEYS: Record<string, keyof ModelConfig> = {
  rank: "rank",
  dim: "dim",
  lr: "lr",
  seed: "seed",
  temperature: "temperature",
  clip_eps: "clipEps",
  kl_beta: "klBeta",
};

export function loadConfig(path: string | null, seedOverride: number | null): ModelConfig {
  const cfg: ModelConfig = { ...DEFAULT_CONFIG };
  if (path !== null) {
    const raw = JSON.parse(readFileSync(path, "utf-8"));
    if (typeof raw !== "object" || raw === null || Array.isArray(raw)) {
      throw new Error(`config file ${path} must hold a JSON object`);
    }
    for (const [key, value] of Object.entries(raw as Record<string, unknown>)) {
      const field = CONFIG_KEYS[key];
      if (field === undefined) {
        throw new Error(`unknown config key ${JSON.stringify(key)}`);
      }
      if (typeof value !== "number" || !Number.isFinite(value)) {
        throw new Error(`config key ${JSON.stringify(key)} must be a finite number`);
      }
      cfg[field] = value;
    }
  }
  if (seedOverride !== null) cfg.seed = seedOverride;
  return cfg;
}

function parseArgs(argv: string[]): { config: string | null; seed: number | null } {
  let config: string | null = null;
  let seed: number | null = null;
  for (let i = 0; i < argv.length; i++) {
    if (argv[i] === "--config" && i + 1 < argv.length) {
      config = argv[++i];
    } else if (argv[i] === "--seed" && i + 1 < argv.length) {
      seed = Number(argv[++i]);
    } else {
      throw new Error(`unknown argument ${JSON.stringify(argv[i])}`);
    }
  }
  return { config, seed };
}

export function main(argv: string[]): void {
  const { config, seed } = parseArgs(argv);
  const service = new AdapterService(loadConfig(config, seed));
  const rl = readline.createInterface({ input: process.stdin, crlfDelay: Infinity });
  rl.on("line", (line) => {
    const reply = handleLine(service, line);
    if (reply !== null) {
      process.stdout.write(`${JSON.stringify(reply)}\n`);
    }
  });
  rl.on("close", () => process.exit(0));
}

const entry = process.argv[1] ?? "";
if (entry.endsWith("server.js") || entry.endsWith("server.ts")) {
  try {
    main(process.argv.slice(2));
  } catch (exc) {
    process.stderr.write(`${exc instanceof Error ? exc.message : String(exc)}\n`);
    process.exit(2);
  }
}
