/** Token automaton for the engine's expression DSL.
 *
 * The engine publishes its grammar as a "pitpo-automaton/1" JSON document
 * (also sent inline as the `constraints` field of every generate_request).
 * This module replicates the walk exactly: the same four expectation
 * states, the same action lists in the same order, and the same token
 * budget arithmetic, so every program emitted here parses on the engine
 * side and token streams line up one-to-one.
 */

export type Expect = "atom" | "post" | "exponent" | "forced_lparen";

export interface AutomatonSpec {
  format: string;
  variables: string[];
  functions: string[];
  exponents: number[];
  max_coeffs: number;
  max_depth: number;
  max_tokens: number;
  states: Record<string, string[]>;
}

export const AUTOMATON_FORMAT = "pitpo-automaton/1";
const DEPTH_CLAMP = 2;

/** One decision of a walk: enough to re-score the token later. */
export interface Step {
  key: string;
  expect: Expect;
  /** Legal action indices into actionsFor(expect), in engine order. */
  mask: number[];
  /** Chosen action, as an index into actionsFor(expect). */
  action: number;
  /** Position of the chosen action inside the mask. */
  pos: number;
}

export interface Walk {
  text: string;
  tokens: string[];
  /** Aligned with tokens; the final stop decision is kept separately. */
  steps: Step[];
  eosStep: Step;
}

/** Scores one masked decision; returns log-probabilities in mask order. */
export type StepScorer = (key: string, expect: Expect, mask: number[]) => number[];

export function parseAutomatonSpec(raw: unknown): AutomatonSpec {
  if (typeof raw !== "object" || raw === null) {
    throw new Error("constraints must be a JSON object");
  }
  const spec = raw as Record<string, unknown>;
  if (spec.format !== AUTOMATON_FORMAT) {
    throw new Error(`unsupported constraints format ${JSON.stringify(spec.format)}`);
  }
  const states = spec.states as Record<string, string[]> | undefined;
  for (const expect of ["atom", "post", "exponent", "forced_lparen"]) {
    if (!states || !Array.isArray(states[expect]) || states[expect].length === 0) {
      throw new Error(`constraints missing action list for state ${expect}`);
    }
  }
  for (const field of ["max_coeffs", "max_depth", "max_tokens"]) {
    if (typeof spec[field] !== "number") {
      throw new Error(`constraints missing numeric ${field}`);
    }
  }
  if (!Array.isArray(spec.variables) || spec.variables.length === 0) {
    throw new Error("constraints missing variables");
  }
  return spec as unknown as AutomatonSpec;
}

/** '+'/'-' get surrounding spaces except directly after an operator or '('
 * (the unary position); everything else is juxtaposed. */
export function render(tokens: string[]): string {
  const out: string[] = [];
  let prev: string | null = null;
  for (const t of tokens) {
    if ((t === "+" || t === "-") && prev !== null && !["+", "-", "*", "/", "^", "("].includes(prev)) {
      out.push(` ${t} `);
    } else {
      out.push(t);
    }
    prev = t;
  }
  return out.join("");
}

/** Split program text into grammar tokens (names, coefficients, digits,
 * single-character operators). Whitespace separates but never appears. */
export function tokenize(text: string): string[] {
  const tokens: string[] = [];
  let i = 0;
  while (i < text.length) {
    const ch = text[i];
    if (ch === " " || ch === "\t") {
      i++;
      continue;
    }
    if (/[A-Za-z_]/.test(ch)) {
      let j = i + 1;
      while (j < text.length && /[A-Za-z0-9_]/.test(text[j])) j++;
      tokens.push(text.slice(i, j));
      i = j;
      continue;
    }
    if (/[0-9]/.test(ch)) {
      let j = i + 1;
      while (j < text.length && /[0-9.]/.test(text[j])) j++;
      tokens.push(text.slice(i, j));
      i = j;
      continue;
    }
    if ("()+-*/^".includes(ch)) {
      tokens.push(ch);
      i++;
      continue;
    }
    throw new Error(`unexpected character ${JSON.stringify(ch)} in program text`);
  }
  return tokens;
}

interface WalkState {
  expect: Expect;
  depth: number;
  coeffsUsed: number;
  canPow: boolean;
}

export class Automaton {
  readonly spec: AutomatonSpec;

  constructor(spec: AutomatonSpec) {
    this.spec = spec;
  }

  actionsFor(expect: Expect): string[] {
    return this.spec.states[expect];
  }

  stateKey(bucket: string, expect: Expect, depth: number): string {
    return `${bucket}${expect}${Math.min(depth, DEPTH_CLAMP)}`;
  }

  /** Indices of the legal actions given the remaining token budget. Every
   * bound reserves room for the closing tokens an action commits to, which
   * is what guarantees termination inside max_tokens. */
  legalMask(expect: Expect, depth: number, remaining: number, coeffsUsed: number, canPow: boolean): number[] {
    const actions = this.actionsFor(expect);
    const legal: number[] = [];
    if (expect === "atom") {
      for (let idx = 0; idx < actions.length; idx++) {
        const action = actions[idx];
        let ok: boolean;
        if (action.startsWith("var:")) {
          ok = 1 + depth <= remaining;
        } else if (action === "coeff") {
          ok = coeffsUsed < this.spec.max_coeffs && 1 + depth <= remaining;
        } else if (action.startsWith("func:")) {
          ok = depth < this.spec.max_depth && 4 + depth <= remaining;
        } else {
          ok = depth < this.spec.max_depth && 3 + depth <= remaining;
        }
        if (ok) legal.push(idx);
      }
    } else if (expect === "post") {
      for (let idx = 0; idx < actions.length; idx++) {
        const action = actions[idx];
        let ok: boolean;
        if (action.startsWith("op:")) {
          ok = 2 + depth <= remaining;
        } else if (action === "pow") {
          ok = canPow && 2 + depth <= remaining;
        } else if (action === "rparen") {
          ok = depth > 0 && depth <= remaining;
        } else {
          ok = depth === 0;
        }
        if (ok) legal.push(idx);
      }
    } else if (expect === "exponent") {
      for (let idx = 0; idx < actions.length; idx++) legal.push(idx);
    } else {
      legal.push(0);
    }
    if (legal.length === 0) {
      throw new Error("empty action mask; budget invariant broken");
    }
    return legal;
  }

  /** Apply one action to the walk state and return the emitted token. */
  private advance(state: WalkState, action: string): string {
    if (action.startsWith("var:")) {
      state.expect = "post";
      state.canPow = true;
      return action.slice(4);
    }
    if (action === "coeff") {
      const token = `c${state.coeffsUsed}`;
      state.coeffsUsed++;
      state.expect = "post";
      state.canPow = true;
      return token;
    }
    if (action.startsWith("func:")) {
      state.expect = "forced_lparen";
      return action.slice(5);
    }
    if (action === "lparen") {
      state.depth++;
      state.expect = "atom";
      state.canPow = false;
      return "(";
    }
    if (action.startsWith("op:")) {
      state.expect = "atom";
      state.canPow = false;
      return action.slice(3);
    }
    if (action === "pow") {
      state.expect = "exponent";
      return "^";
    }
    if (action.startsWith("exp:")) {
      state.expect = "post";
      state.canPow = false;
      return action.slice(4);
    }
    if (action === "rparen") {
      state.depth--;
      state.expect = "post";
      state.canPow = true;
      return ")";
    }
    throw new Error(`unhandled action ${action}`);
  }

  /** Draw one program under a scorer. Always parses, always terminates. */
  sample(bucket: string, scorer: StepScorer, uniform: () => number): Walk {
    const state: WalkState = { expect: "atom", depth: 0, coeffsUsed: 0, canPow: false };
    const tokens: string[] = [];
    const steps: Step[] = [];
    for (;;) {
      const remaining = this.spec.max_tokens - tokens.length;
      const mask = this.legalMask(state.expect, state.depth, remaining, state.coeffsUsed, state.canPow);
      const key = this.stateKey(bucket, state.expect, state.depth);
      const lps = scorer(key, state.expect, mask);
      const pos = samplePosition(lps, uniform());
      const actionIdx = mask[pos];
      const action = this.actionsFor(state.expect)[actionIdx];
      const step: Step = { key, expect: state.expect, mask, action: actionIdx, pos };
      if (action === "stop") {
        return { text: render(tokens), tokens, steps, eosStep: step };
      }
      steps.push(step);
      tokens.push(this.advance(state, action));
    }
  }

  /** Replay an existing token stream, recovering the decision at each
   * position. Throws when the stream is not a walk of this automaton, so
   * callers can reject foreign programs before scoring them. */
  forceTokens(bucket: string, tokens: string[]): { steps: Step[]; eosStep: Step } {
    const state: WalkState = { expect: "atom", depth: 0, coeffsUsed: 0, canPow: false };
    const steps: Step[] = [];
    for (let i = 0; i <= tokens.length; i++) {
      const remaining = this.spec.max_tokens - i;
      const mask = this.legalMask(state.expect, state.depth, remaining, state.coeffsUsed, state.canPow);
      const key = this.stateKey(bucket, state.expect, state.depth);
      const wanted = i < tokens.length ? this.actionForToken(state, tokens[i]) : "stop";
      const actionIdx = this.actionsFor(state.expect).indexOf(wanted);
      const pos = mask.indexOf(actionIdx);
      if (actionIdx < 0 || pos < 0) {
        throw new Error(`token ${JSON.stringify(tokens[i] ?? "<stop>")} illegal at position ${i}`);
      }
      const step: Step = { key, expect: state.expect, mask, action: actionIdx, pos };
      if (wanted === "stop") {
        return { steps, eosStep: step };
      }
      steps.push(step);
      this.advance(state, wanted);
    }
    throw new Error("token stream ended without reaching the stop state");
  }

  forceText(bucket: string, text: string): { tokens: string[]; steps: Step[]; eosStep: Step } {
    const tokens = tokenize(text);
    return { tokens, ...this.forceTokens(bucket, tokens) };
  }

  /** Name the action that emits `token` in the current state. */
  private actionForToken(state: WalkState, token: string): string {
    if (state.expect === "atom") {
      if (this.spec.variables.includes(token)) return `var:${token}`;
      if (/^c\d+$/.test(token)) {
        if (token !== `c${state.coeffsUsed}`) {
          throw new Error(`coefficient ${token} out of order (expected c${state.coeffsUsed})`);
        }
        return "coeff";
      }
      if (this.spec.functions.includes(token)) return `func:${token}`;
      if (token === "(") return "lparen";
    } else if (state.expect === "post") {
      if (["+", "-", "*", "/"].includes(token)) return `op:${token}`;
      if (token === "^") return "pow";
      if (token === ")") return "rparen";
    } else if (state.expect === "exponent") {
      return `exp:${token}`;
    } else if (state.expect === "forced_lparen") {
      if (token === "(") return "lparen";
    }
    throw new Error(`token ${JSON.stringify(token)} does not fit state ${state.expect}`);
  }
}

/** Inverse-CDF draw over log-probabilities, in mask order. */
function samplePosition(lps: number[], u: number): number {
  let acc = 0;
  for (let i = 0; i < lps.length; i++) {
    acc += Math.exp(lps[i]);
    if (u < acc) return i;
  }
  return lps.length - 1;
}
