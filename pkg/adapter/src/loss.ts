/** Token-level training objective.
 *
 * Mirrors the engine's published objective exactly:
 *
 *   loss = -(1/G) sum_i (1/L_i) sum_k min(r A, clip(r) A)
 *          + kl_beta * mean over batch tokens of KL(pi_theta || pi_ref)
 *
 * where r = exp(lp_current - lp_stored), the clip band is [1-eps, 1+eps],
 * ties between the clipped and unclipped branch take the unclipped one,
 * and the KL is the exact categorical divergence over the masked action
 * set. The function is pure over plain arrays so it can be checked against
 * engine-produced fixtures and reused by the model's backward pass.
 */

export interface LossToken {
  /** Masked current logits, in mask order. */
  cur: number[];
  /** Masked reference logits, in mask order. */
  ref: number[];
  /** Position of the taken action inside the mask. */
  pos: number;
  /** Log-probability stored when the token was sampled. */
  oldLp: number;
  /** Advantage assigned to this token. */
  adv: number;
}

export interface LossConfig {
  clipEps: number;
  klBeta: number;
  temperature: number;
}

export interface LossResult {
  loss: number;
  /** d loss / d (masked current logits), aligned with the inputs. */
  gradZ: number[][][];
}

export function logSoftmax(logits: number[], temperature: number): number[] {
  const z = logits.map((v) => v / temperature);
  const top = Math.max(...z);
  let sum = 0;
  for (const v of z) sum += Math.exp(v - top);
  const logZ = top + Math.log(sum);
  return z.map((v) => v - logZ);
}

export function pitpoLoss(samples: LossToken[][], cfg: LossConfig): LossResult {
  const g = samples.length;
  const t = cfg.temperature;
  let totalTokens = 0;
  for (const sample of samples) totalTokens += sample.length;

  let loss = 0;
  const gradZ: number[][][] = samples.map((sample) => sample.map((tok) => tok.cur.map(() => 0)));

  for (let i = 0; i < samples.length; i++) {
    const sample = samples[i];
    const L = sample.length;
    if (L === 0) continue;
    for (let k = 0; k < L; k++) {
      const tok = sample[k];
      const lps = logSoftmax(tok.cur, t);
      const probs = lps.map(Math.exp);
      const ratio = Math.exp(lps[tok.pos] - tok.oldLp);
      const a = tok.adv;
      const unclipped = ratio * a;
      const clipped = Math.min(Math.max(ratio, 1 - cfg.clipEps), 1 + cfg.clipEps) * a;
      const takeUnclipped = unclipped <= clipped;
      loss += -(takeUnclipped ? unclipped : clipped) / (g * L);
      const gz = gradZ[i][k];
      if (takeUnclipped) {
        const coeff = (-a * ratio) / (g * L * t);
        for (let m = 0; m < gz.length; m++) {
          gz[m] += coeff * ((m === tok.pos ? 1 : 0) - probs[m]);
        }
      }
      if (cfg.klBeta !== 0 && totalTokens > 0) {
        const refLps = logSoftmax(tok.ref, t);
        let kl = 0;
        for (let m = 0; m < lps.length; m++) kl += probs[m] * (lps[m] - refLps[m]);
        loss += (cfg.klBeta * kl) / totalTokens;
        const scale = cfg.klBeta / (totalTokens * t);
        for (let m = 0; m < gz.length; m++) {
          gz[m] += scale * probs[m] * (lps[m] - refLps[m] - kl);
        }
      }
    }
  }
  return { loss, gradZ };
}
