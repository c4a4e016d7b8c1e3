import { mkdtempSync, readFileSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";

import { Automaton, parseAutomatonSpec, tokenize } from "../src/grammar.js";
import { DEFAULT_CONFIG } from "../src/model.js";
import { AdapterService, PROTOCOL, handleLine } from "../src/protocol.js";
import { loadConfig } from "../src/server.js";

const constraints = JSON.parse(
  readFileSync(fileURLToPath(new URL("../fixtures/automaton.json", import.meta.url)), "utf-8"),
);

const context = {
  bucket: "-",
  elites: [
    { program: "c0*x", reward: 1.0 },
    { program: "c0*sin(x) + c1", reward: 0.5 },
  ],
};

function service(): AdapterService {
  return new AdapterService(DEFAULT_CONFIG);
}

function generate(svc: AdapterService, extra: Record<string, unknown> = {}): Record<string, unknown> {
  return svc.handle({
    type: "generate_request",
    protocol: PROTOCOL,
    request_id: "req-1",
    group_size: 4,
    context,
    constraints,
    ...extra,
  }) as Record<string, unknown>;
}

interface ProgramEntry {
  text: string;
  tokens: string[];
  logprobs: number[];
}

describe("adapter protocol", () => {
  it("answers generate_request with a correlated, full-size group", () => {
    const reply = generate(service());
    expect(reply.type).toBe("generate_response");
    expect(reply.protocol).toBe(PROTOCOL);
    expect(reply.request_id).toBe("req-1");
    expect((reply.programs as ProgramEntry[]).length).toBe(4);
  });

  it("emits programs that walk the published automaton", () => {
    const automaton = new Automaton(parseAutomatonSpec(constraints));
    const programs = generate(service()).programs as ProgramEntry[];
    for (const entry of programs) {
      const replay = automaton.forceText("-", entry.text);
      expect(entry.tokens).toEqual(replay.tokens);
      expect(entry.tokens).toEqual(tokenize(entry.text));
      expect(entry.logprobs.length).toBe(entry.tokens.length);
    }
  });

  it("acknowledges updates built from its own generation", () => {
    const svc = service();
    const programs = generate(svc).programs as ProgramEntry[];
    const reply = svc.handle({
      type: "update",
      protocol: PROTOCOL,
      request_id: "req-2",
      groups: [
        {
          context,
          programs: programs.map((p) => p.text),
          advantages: programs.map((p) => p.tokens.map(() => 0)),
          penalties: programs.map((p) => p.tokens.map(() => 0)),
          rewards: programs.map(() => 0),
        },
      ],
    }) as Record<string, unknown>;
    expect(reply.type).toBe("ack");
    expect(reply.request_id).toBe("req-2");
    expect(reply.skipped_programs).toBe(0);
    expect(reply.trained_tokens).toBe(programs.reduce((s, p) => s + p.tokens.length, 0));
  });

  it("ignores unknown request fields", () => {
    const reply = generate(service(), { x_conformance_probe: true, iteration: 3 });
    expect(reply.type).toBe("generate_response");
  });

  it("rejects bad group sizes, missing constraints, and foreign formats", () => {
    const svc = service();
    const bad = svc.handle({ type: "generate_request", request_id: "r", group_size: 0, constraints }) as Record<string, unknown>;
    expect(bad.type).toBe("error");
    const none = svc.handle({ type: "generate_request", request_id: "r", group_size: 2 }) as Record<string, unknown>;
    expect(none.type).toBe("error");
    expect(none.message).toMatch(/constraints/);
    const foreign = svc.handle({
      type: "generate_request",
      request_id: "r",
      group_size: 2,
      constraints: { ...constraints, format: "other/1" },
    }) as Record<string, unknown>;
    expect(foreign.type).toBe("error");
  });

  it("answers unknown types and malformed lines with protocol errors", () => {
    const svc = service();
    const unknown = svc.handle({ type: "mystery", request_id: "r9" }) as Record<string, unknown>;
    expect(unknown.type).toBe("error");
    expect(unknown.request_id).toBe("r9");
    const malformed = handleLine(svc, "{oops") as Record<string, unknown>;
    expect(malformed.type).toBe("error");
    expect(malformed.message).toMatch(/malformed/);
    const scalar = handleLine(svc, "42") as Record<string, unknown>;
    expect(scalar.type).toBe("error");
    expect(handleLine(svc, "   ")).toBeNull();
  });

  it("acknowledges updates that arrive before any generate", () => {
    const reply = service().handle({ type: "update", request_id: "r0", groups: [] }) as Record<string, unknown>;
    expect(reply.type).toBe("ack");
    expect(reply.trained_tokens).toBe(0);
  });

  it("counts unusable update programs instead of failing", () => {
    const svc = service();
    generate(svc);
    const reply = svc.handle({
      type: "update",
      request_id: "r3",
      groups: [{ context, programs: ["not a program ("], advantages: [[0.0]] }],
    }) as Record<string, unknown>;
    expect(reply.type).toBe("ack");
    expect(reply.skipped_programs).toBe(1);
  });
});

describe("config loading", () => {
  it("applies file overrides and the seed flag", () => {
    const dir = mkdtempSync(join(tmpdir(), "adapter-cfg-"));
    const path = join(dir, "config.json");
    writeFileSync(path, JSON.stringify({ rank: 8, lr: 0.001, kl_beta: 0.5 }));
    const cfg = loadConfig(path, 42);
    expect(cfg.rank).toBe(8);
    expect(cfg.lr).toBe(0.001);
    expect(cfg.klBeta).toBe(0.5);
    expect(cfg.seed).toBe(42);
    expect(cfg.dim).toBe(DEFAULT_CONFIG.dim);
  });

  it("rejects unknown keys and non-numeric values", () => {
    const dir = mkdtempSync(join(tmpdir(), "adapter-cfg-"));
    const bad = join(dir, "bad.json");
    writeFileSync(bad, JSON.stringify({ rankk: 8 }));
    expect(() => loadConfig(bad, null)).toThrow(/unknown config key/);
    const worse = join(dir, "worse.json");
    writeFileSync(worse, JSON.stringify({ lr: "fast" }));
    expect(() => loadConfig(worse, null)).toThrow(/finite number/);
  });

  it("ships defaults matching the repository config file", () => {
    const repoCfg = loadConfig(fileURLToPath(new URL("../config.json", import.meta.url)), null);
    expect(repoCfg).toEqual(DEFAULT_CONFIG);
  });
});
