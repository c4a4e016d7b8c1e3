import { readFileSync } from "node:fs";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";

import { LossConfig, LossToken, pitpoLoss } from "../src/loss.js";

interface FixtureToken {
  cur: number[];
  ref: number[];
  pos: number;
  old_lp: number;
  adv: number;
}

interface Fixture {
  clip_eps: number;
  kl_beta: number;
  temperature: number;
  group_size: number;
  loss: number;
  samples: { text: string; tokens: FixtureToken[] }[];
}

const fixture: Fixture = JSON.parse(
  readFileSync(fileURLToPath(new URL("../fixtures/loss_fixture.json", import.meta.url)), "utf-8"),
);

function fixtureBatch(): { samples: LossToken[][]; cfg: LossConfig } {
  const samples = fixture.samples.map((s) =>
    s.tokens.map((t) => ({ cur: t.cur, ref: t.ref, pos: t.pos, oldLp: t.old_lp, adv: t.adv })),
  );
  const cfg = { clipEps: fixture.clip_eps, klBeta: fixture.kl_beta, temperature: fixture.temperature };
  return { samples, cfg };
}

describe("pitpoLoss", () => {
  it("matches the engine loss on the frozen fixture within 1e-5", () => {
    const { samples, cfg } = fixtureBatch();
    expect(samples.length).toBe(fixture.group_size);
    const { loss } = pitpoLoss(samples, cfg);
    expect(Math.abs(loss - fixture.loss)).toBeLessThan(1e-5);
  });

  it("returns the analytic gradient of itself (finite differences)", () => {
    const { samples, cfg } = fixtureBatch();
    const { gradZ } = pitpoLoss(samples, cfg);
    const h = 1e-6;
    let checked = 0;
    for (const [i, k] of [
      [0, 0],
      [0, 2],
      [1, 1],
      [2, 0],
    ] as const) {
      const token = samples[i][k];
      for (let m = 0; m < token.cur.length; m++) {
        const bump = (delta: number) => {
          const copy = samples.map((s, si) =>
            s.map((t, ti) =>
              si === i && ti === k ? { ...t, cur: t.cur.map((v, vi) => (vi === m ? v + delta : v)) } : t,
            ),
          );
          return pitpoLoss(copy, cfg).loss;
        };
        const numeric = (bump(h) - bump(-h)) / (2 * h);
        expect(Math.abs(numeric - gradZ[i][k][m])).toBeLessThan(1e-6);
        checked++;
      }
    }
    expect(checked).toBeGreaterThan(10);
  });

  it("is zero for empty batches and zero-advantage on-policy tokens", () => {
    expect(pitpoLoss([], { clipEps: 0.2, klBeta: 0.01, temperature: 1 }).loss).toBe(0);
    const cur = [0.3, -0.2, 1.1];
    const lp = cur[1] - Math.log(cur.reduce((s, v) => s + Math.exp(v), 0));
    const tokens: LossToken[] = [{ cur, ref: cur.slice(), pos: 1, oldLp: lp, adv: 0 }];
    const { loss } = pitpoLoss([tokens], { clipEps: 0.2, klBeta: 0.5, temperature: 1 });
    expect(loss).toBeCloseTo(0, 12);
  });

  it("clips large ratios: loss flattens once the ratio leaves the band", () => {
    const cfg = { clipEps: 0.2, klBeta: 0, temperature: 1 };
    const make = (boost: number): LossToken[][] => [
      [{ cur: [boost, 0], ref: [0, 0], pos: 0, oldLp: Math.log(0.1), adv: 1 }],
    ];
    // With a positive advantage and a ratio above 1 + eps the surrogate
    // takes the clipped branch, so pushing the logit further changes
    // nothing and the gradient vanishes.
    const at = (boost: number) => pitpoLoss(make(boost), cfg).loss;
    expect(at(6)).toBeCloseTo(-1.2, 3);
    expect(at(6)).toBeCloseTo(at(10), 12);
    expect(pitpoLoss(make(6), cfg).gradZ[0][0].every((v) => v === 0)).toBe(true);
  });
});
