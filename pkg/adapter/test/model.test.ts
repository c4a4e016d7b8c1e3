import { readFileSync } from "node:fs";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";

import { Automaton, Step, parseAutomatonSpec } from "../src/grammar.js";
import { DEFAULT_CONFIG, LowRankModel } from "../src/model.js";
import { Rng } from "../src/rng.js";

const spec = parseAutomatonSpec(
  JSON.parse(readFileSync(fileURLToPath(new URL("../fixtures/automaton.json", import.meta.url)), "utf-8")),
);

function freshModel(overrides: Partial<typeof DEFAULT_CONFIG> = {}): LowRankModel {
  return new LowRankModel(new Automaton(spec), { ...DEFAULT_CONFIG, ...overrides });
}

function klToReference(model: LowRankModel, steps: Step[]): number {
  let total = 0;
  for (const step of steps) {
    const cur = model.maskedLogprobs(step, "current");
    const ref = model.maskedLogprobs(step, "reference");
    for (let m = 0; m < cur.length; m++) {
      total += Math.exp(cur[m]) * (cur[m] - ref[m]);
    }
  }
  return total;
}

describe("low-rank model", () => {
  it("starts identical to the reference weights", () => {
    const model = freshModel();
    const automaton = model.automaton;
    const { steps } = automaton.forceText("-", "c0*sin(x) + c1");
    expect(model.tokenLogprobs(steps, "current")).toEqual(model.tokenLogprobs(steps, "reference"));
    expect(klToReference(model, steps)).toBeCloseTo(0, 14);
  });

  it("raises the logprob of a single positive-advantage token after one update", () => {
    const model = freshModel();
    const { steps } = model.automaton.forceText("-", "x");
    expect(steps.length).toBe(1);
    const before = model.tokenLogprobs(steps, "current")[0];
    const refBefore = model.tokenLogprobs(steps, "reference")[0];

    model.takeSnapshot();
    const report = model.update([{ bucket: "-", programs: ["x"], advantages: [[1.0]] }]);
    expect(report.tokens).toBe(1);
    expect(report.skipped).toBe(0);

    const after = model.tokenLogprobs(steps, "current")[0];
    expect(after).toBeGreaterThan(before);
    // The reference view never moves.
    expect(model.tokenLogprobs(steps, "reference")[0]).toBe(refBefore);
  });

  it("lowers the logprob of a single negative-advantage token", () => {
    const model = freshModel();
    const { steps } = model.automaton.forceText("-", "v");
    const before = model.tokenLogprobs(steps, "current")[0];
    model.takeSnapshot();
    model.update([{ bucket: "-", programs: ["v"], advantages: [[-1.0]] }]);
    expect(model.tokenLogprobs(steps, "current")[0]).toBeLessThan(before);
  });

  it("reduces KL to the reference under a KL-only step", () => {
    const model = freshModel({ lr: 0.05, klBeta: 0.5 });
    const programs = ["x + v", "sin(x)"];
    const drift = [
      [1.0, -0.8, 0.5],
      [-0.6, 0.4, 0.9, -0.3],
    ];
    // Walk the weights away from the reference with advantage-driven steps.
    for (let i = 0; i < 5; i++) {
      model.takeSnapshot();
      model.update([{ bucket: "-", programs, advantages: drift }]);
    }
    const steps = programs.flatMap((text) => model.automaton.forceText("-", text).steps);
    const before = klToReference(model, steps);
    expect(before).toBeGreaterThan(0);

    model.takeSnapshot();
    const zeros = drift.map((adv) => adv.map(() => 0));
    model.update([{ bucket: "-", programs, advantages: zeros }]);
    const after = klToReference(model, steps);
    expect(after).toBeLessThan(before);
  });

  it("scores ratios against the sampling snapshot, not live weights", () => {
    const model = freshModel({ lr: 0.05 });
    const { steps } = model.automaton.forceText("-", "x");
    model.takeSnapshot();
    model.update([{ bucket: "-", programs: ["x"], advantages: [[1.0]] }]);
    // Snapshot still holds the pre-update weights.
    const snap = model.tokenLogprobs(steps, "snapshot")[0];
    const cur = model.tokenLogprobs(steps, "current")[0];
    expect(cur).not.toBe(snap);
    model.takeSnapshot();
    expect(model.tokenLogprobs(steps, "snapshot")[0]).toBe(model.tokenLogprobs(steps, "current")[0]);
  });

  it("skips programs that do not replay or whose advantages mismatch", () => {
    const model = freshModel();
    model.takeSnapshot();
    const report = model.update([
      {
        bucket: "-",
        programs: ["x + w", "x", "v"],
        advantages: [[0.0, 0.0, 0.0], [1.0, 2.0], [0.5]],
      },
    ]);
    // "x + w" has no walk, "x" has one token but two advantages.
    expect(report.skipped).toBe(2);
    expect(report.tokens).toBe(1);
  });

  it("samples deterministically under a fixed seed", () => {
    const a = freshModel({ seed: 11 });
    const b = freshModel({ seed: 11 });
    const rngA = new Rng(3);
    const rngB = new Rng(3);
    for (let i = 0; i < 20; i++) {
      expect(a.sample("-", () => rngA.next()).text).toBe(b.sample("-", () => rngB.next()).text);
    }
  });

  it("sample records the logprobs of its own tokens", () => {
    const model = freshModel({ seed: 5 });
    const rng = new Rng(1);
    for (let i = 0; i < 50; i++) {
      const walk = model.sample("-", () => rng.next());
      expect(walk.logprobs.length).toBe(walk.tokens.length);
      const replay = model.automaton.forceTokens("-", walk.tokens);
      const rescored = model.tokenLogprobs(replay.steps, "current");
      walk.logprobs.forEach((lp, k) => expect(lp).toBeCloseTo(rescored[k], 12));
      for (const lp of walk.logprobs) expect(lp).toBeLessThanOrEqual(0);
    }
  });
});
