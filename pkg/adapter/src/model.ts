/** Desk-scale token model with low-rank adapters.
 *
 * Logits for a walk state are (W0 + B A) phi(key): a frozen random base
 * matrix W0 plus a trainable rank-r update, applied to a deterministic
 * hashed embedding of the state key. B starts at zero, so the initial
 * model coincides with the frozen reference (W0 alone), exactly the
 * relationship a LoRA-adapted language model has to its base weights.
 * Only A and B receive gradient; one update message applies one SGD step.
 *
 * Three weight views matter during training: "current" (W0 + B A),
 * "snapshot" (the adapters frozen at the last generate, giving the stored
 * log-probabilities that form the importance ratio), and "reference"
 * (W0 alone, the KL anchor).
 */

import { Automaton, Expect, Step, Walk } from "./grammar.js";
import { LossToken, logSoftmax, pitpoLoss } from "./loss.js";
import { Rng, fnv1a, hashedFeatures } from "./rng.js";

export interface ModelConfig {
  rank: number;
  dim: number;
  lr: number;
  seed: number;
  temperature: number;
  clipEps: number;
  klBeta: number;
}

export const DEFAULT_CONFIG: ModelConfig = {
  rank: 16,
  dim: 32,
  lr: 1e-6,
  seed: 0,
  temperature: 1.0,
  clipEps: 0.2,
  klBeta: 0.01,
};

export type WeightView = "current" | "snapshot" | "reference";

export interface ScoredWalk extends Walk {
  /** Per-token log-probabilities at sample time (stop excluded). */
  logprobs: number[];
}

export interface UpdateGroup {
  bucket: string;
  programs: string[];
  advantages: number[][];
}

export interface UpdateReport {
  loss: number;
  tokens: number;
  skipped: number;
}

interface ForcedSample {
  steps: Step[];
  advantages: number[];
}

export class LowRankModel {
  readonly cfg: ModelConfig;
  readonly automaton: Automaton;
  /** Frozen base weights, one row per action, dim columns. */
  private readonly w0: Float64Array[];
  /** Trainable adapters: a is rank x dim, b is rows x rank. */
  private a: Float64Array[];
  private b: Float64Array[];
  private aSnap: Float64Array[];
  private bSnap: Float64Array[];
  /** Global row offset of each expectation's action block. */
  private readonly offsets: Record<Expect, number>;
  private readonly features = new Map<string, Float64Array>();
  private readonly rng: Rng;

  constructor(automaton: Automaton, cfg: ModelConfig) {
    this.automaton = automaton;
    this.cfg = cfg;
    this.rng = new Rng(fnv1a("pitpo-adapter") ^ cfg.seed);

    const expects: Expect[] = ["atom", "post", "exponent", "forced_lparen"];
    this.offsets = { atom: 0, post: 0, exponent: 0, forced_lparen: 0 };
    let rows = 0;
    for (const expect of expects) {
      this.offsets[expect] = rows;
      rows += automaton.actionsFor(expect).length;
    }
    const init = new Rng(cfg.seed ^ 0x5eed);
    this.w0 = matrix(rows, cfg.dim, () => 0.1 * init.normal());
    this.a = matrix(cfg.rank, cfg.dim, () => init.normal() / Math.sqrt(cfg.dim));
    this.b = matrix(rows, cfg.rank, () => 0);
    this.aSnap = this.a.map((row) => row.slice());
    this.bSnap = this.b.map((row) => row.slice());
  }

  private phi(key: string): Float64Array {
    let vec = this.features.get(key);
    if (vec === undefined) {
      vec = hashedFeatures(key, this.cfg.dim, this.cfg.seed);
      this.features.set(key, vec);
    }
    return vec;
  }

  /** Raw logits for one state under the chosen weight view. */
  logitsFor(key: string, expect: Expect, view: WeightView): Float64Array {
    const x = this.phi(key);
    const offset = this.offsets[expect];
    const n = this.automaton.actionsFor(expect).length;
    const out = new Float64Array(n);
    for (let r = 0; r < n; r++) out[r] = dot(this.w0[offset + r], x);
    if (view === "reference") return out;
    const [a, b] = view === "current" ? [this.a, this.b] : [this.aSnap, this.bSnap];
    const u = new Float64Array(this.cfg.rank);
    for (let j = 0; j < this.cfg.rank; j++) u[j] = dot(a[j], x);
    for (let r = 0; r < n; r++) out[r] += dot(b[offset + r], u);
    return out;
  }

  /** Log-probabilities over a masked action subset, in mask order. */
  maskedLogprobs(step: Step, view: WeightView): number[] {
    const z = this.logitsFor(step.key, step.expect, view);
    return logSoftmax(step.mask.map((idx) => z[idx]), this.cfg.temperature);
  }

  /** Per-token log-probabilities of a forced or sampled walk. */
  tokenLogprobs(steps: Step[], view: WeightView): number[] {
    return steps.map((step) => this.maskedLogprobs(step, view)[step.pos]);
  }

  /** Freeze the adapters as the importance-sampling anchor. Called after
   * every generate so the next update scores its ratios against the
   * weights the programs were actually drawn from. */
  takeSnapshot(): void {
    this.aSnap = this.a.map((row) => row.slice());
    this.bSnap = this.b.map((row) => row.slice());
  }

  /** Draw one program under current weights, recording its logprobs. */
  sample(bucket: string, uniform: () => number): ScoredWalk {
    const logged: number[] = [];
    const walk = this.automaton.sample(
      bucket,
      (key, expect, mask) => {
        const z = this.logitsFor(key, expect, "current");
        return logSoftmax(mask.map((idx) => z[idx]), this.cfg.temperature);
      },
      uniform,
    );
    for (const step of walk.steps) {
      logged.push(this.maskedLogprobs(step, "current")[step.pos]);
    }
    return { ...walk, logprobs: logged };
  }

  /** One optimizer step on the clipped surrogate plus KL penalty.
   *
   * Programs that do not replay on the automaton, or whose advantage
   * vector does not match their token count, are skipped; they carry no
   * usable credit signal. Loss sums over groups while gradients average,
   * matching the engine's multi-group update.
   */
  update(groups: UpdateGroup[]): UpdateReport {
    let skipped = 0;
    const forcedGroups: ForcedSample[][] = [];
    for (const group of groups) {
      const forced: ForcedSample[] = [];
      for (let i = 0; i < group.programs.length; i++) {
        const adv = group.advantages[i];
        if (!Array.isArray(adv)) {
          skipped++;
          continue;
        }
        try {
          const { steps } = this.automaton.forceText(group.bucket, group.programs[i]);
          if (steps.length !== adv.length) {
            skipped++;
            continue;
          }
          forced.push({ steps, advantages: adv });
        } catch {
          skipped++;
        }
      }
      forcedGroups.push(forced);
    }

    const gA = matrix(this.cfg.rank, this.cfg.dim, () => 0);
    const gB = this.b.map((row) => new Float64Array(row.length));
    let loss = 0;
    let tokens = 0;

    for (const forced of forcedGroups) {
      const batch: LossToken[][] = forced.map((sample) =>
        sample.steps.map((step, k) => {
          const cur = this.logitsFor(step.key, step.expect, "current");
          const ref = this.logitsFor(step.key, step.expect, "reference");
          return {
            cur: step.mask.map((idx) => cur[idx]),
            ref: step.mask.map((idx) => ref[idx]),
            pos: step.pos,
            oldLp: this.maskedLogprobs(step, "snapshot")[step.pos],
            adv: sample.advantages[k],
          };
        }),
      );
      const { loss: groupLoss, gradZ } = pitpoLoss(batch, this.cfg);
      loss += groupLoss;
      for (let i = 0; i < forced.length; i++) {
        for (let k = 0; k < forced[i].steps.length; k++) {
          tokens++;
          this.accumulate(forced[i].steps[k], gradZ[i][k], gA, gB);
        }
      }
    }

    const scale = this.cfg.lr / Math.max(forcedGroups.length, 1);
    let finite = true;
    for (const row of gA) for (const v of row) finite = finite && Number.isFinite(v);
    for (const row of gB) for (const v of row) finite = finite && Number.isFinite(v);
    if (!finite) {
      return { loss, tokens, skipped };
    }
    for (let j = 0; j < this.cfg.rank; j++) {
      for (let d = 0; d < this.cfg.dim; d++) this.a[j][d] -= scale * gA[j][d];
    }
    for (let r = 0; r < this.b.length; r++) {
      for (let j = 0; j < this.cfg.rank; j++) this.b[r][j] -= scale * gB[r][j];
    }
    return { loss, tokens, skipped };
  }

  /** Backpropagate one token's masked-logit gradient into the adapters:
   * z = W0 phi + B (A phi), so dL/dB = g u^T and dL/dA = (B^T g) phi^T. */
  private accumulate(step: Step, gz: number[], gA: Float64Array[], gB: Float64Array[]): void {
    const x = this.phi(step.key);
    const offset = this.offsets[step.expect];
    const u = new Float64Array(this.cfg.rank);
    for (let j = 0; j < this.cfg.rank; j++) u[j] = dot(this.a[j], x);
    const v = new Float64Array(this.cfg.rank);
    for (let m = 0; m < step.mask.length; m++) {
      const g = gz[m];
      if (g === 0) continue;
      const row = offset + step.mask[m];
      for (let j = 0; j < this.cfg.rank; j++) {
        gB[row][j] += g * u[j];
        v[j] += g * this.b[row][j];
      }
    }
    for (let j = 0; j < this.cfg.rank; j++) {
      for (let d = 0; d < this.cfg.dim; d++) gA[j][d] += v[j] * x[d];
    }
  }
}

function matrix(rows: number, cols: number, fill: () => number): Float64Array[] {
  return Array.from({ length: rows }, () => {
    const row = new Float64Array(cols);
    for (let i = 0; i < cols; i++) row[i] = fill();
    return row;
  });
}

function dot(a: Float64Array, b: Float64Array): number {
  let s = 0;
  for (let i = 0; i < a.length; i++) s += a[i] * b[i];
  return s;
}
