/** Message handling for protocol "pitpo/1".
 *
 * The engine drives the adapter over newline-delimited JSON: a
 * generate_request asks for a group of programs under the constraints it
 * carries, an update ships per-token advantages back for one optimizer
 * step, and anything the adapter cannot act on is answered with an error
 * message that names the problem. Requests are handled strictly one at a
 * time; replies echo the request_id so the engine can correlate them.
 */

import { Automaton, parseAutomatonSpec } from "./grammar.js";
import { LowRankModel, ModelConfig, UpdateGroup } from "./model.js";
import { Rng, fnv1a } from "./rng.js";

export const PROTOCOL = "pitpo/1";
const COLD_BUCKET = "-";

interface GeneratedProgram {
  text: string;
  tokens: string[];
  logprobs: number[];
}

type Reply = Record<string, unknown>;

function errorReply(requestId: unknown, message: string): Reply {
  return {
    type: "error",
    protocol: PROTOCOL,
    request_id: requestId ?? null,
    message,
  };
}

export class AdapterService {
  private readonly cfg: ModelConfig;
  private readonly rng: Rng;
  /** One model per constraints payload; the engine keeps its grammar
   * fixed over a run, so in practice this holds a single entry. */
  private readonly models = new Map<string, LowRankModel>();
  private active: LowRankModel | null = null;

  constructor(cfg: ModelConfig) {
    this.cfg = cfg;
    this.rng = new Rng(fnv1a("pitpo-adapter-sampler") ^ cfg.seed);
  }

  /** Map one decoded line to one reply. Never throws. */
  handle(msg: unknown): Reply {
    if (typeof msg !== "object" || msg === null || Array.isArray(msg)) {
      return errorReply(null, "message must be a JSON object");
    }
    const m = msg as Record<string, unknown>;
    const requestId = m.request_id;
    try {
      if (m.type === "generate_request") return this.onGenerate(m, requestId);
      if (m.type === "update") return this.onUpdate(m, requestId);
      return errorReply(requestId, `unsupported message type ${JSON.stringify(m.type)}`);
    } catch (exc) {
      return errorReply(requestId, exc instanceof Error ? exc.message : String(exc));
    }
  }

  private modelFor(constraints: unknown): LowRankModel {
    const spec = parseAutomatonSpec(constraints);
    const signature = JSON.stringify(spec, Object.keys(spec as unknown as Record<string, unknown>).sort());
    let model = this.models.get(signature);
    if (model === undefined) {
      model = new LowRankModel(new Automaton(spec), this.cfg);
      this.models.set(signature, model);
    }
    this.active = model;
    return model;
  }

  private onGenerate(m: Record<string, unknown>, requestId: unknown): Reply {
    const group = m.group_size;
    if (typeof group !== "number" || !Number.isInteger(group) || group < 1) {
      return errorReply(requestId, "group_size must be a positive integer");
    }
    if (!("constraints" in m)) {
      return errorReply(requestId, "generate_request carries no constraints");
    }
    const model = this.modelFor(m.constraints);
    const bucket = bucketOf(m.context);
    const programs: GeneratedProgram[] = [];
    for (let i = 0; i < group; i++) {
      const walk = model.sample(bucket, () => this.rng.next());
      programs.push({ text: walk.text, tokens: walk.tokens, logprobs: walk.logprobs });
    }
    model.takeSnapshot();
    return {
      type: "generate_response",
      protocol: PROTOCOL,
      request_id: requestId,
      programs,
    };
  }

  private onUpdate(m: Record<string, unknown>, requestId: unknown): Reply {
    const rawGroups = m.groups;
    if (!Array.isArray(rawGroups)) {
      return errorReply(requestId, "update carries no groups list");
    }
    const groups: UpdateGroup[] = [];
    for (const raw of rawGroups) {
      if (typeof raw !== "object" || raw === null) continue;
      const g = raw as Record<string, unknown>;
      const programs = Array.isArray(g.programs) ? g.programs.filter((p): p is string => typeof p === "string") : [];
      const advantages = Array.isArray(g.advantages) ? (g.advantages as number[][]) : [];
      groups.push({ bucket: bucketOf(g.context), programs, advantages });
    }
    // An update that arrives before any generate has nothing to train;
    // acknowledge it as a no-op rather than failing the exchange.
    if (this.active === null) {
      return { type: "ack", protocol: PROTOCOL, request_id: requestId, trained_tokens: 0 };
    }
    const report = this.active.update(groups);
    return {
      type: "ack",
      protocol: PROTOCOL,
      request_id: requestId,
      loss: report.loss,
      trained_tokens: report.tokens,
      skipped_programs: report.skipped,
    };
  }
}

function bucketOf(context: unknown): string {
  if (typeof context === "object" && context !== null) {
    const bucket = (context as Record<string, unknown>).bucket;
    if (typeof bucket === "string" && bucket.length > 0) return bucket;
  }
  return COLD_BUCKET;
}

/** Decode one NDJSON line into its reply. */
export function handleLine(service: AdapterService, line: string): Reply | null {
  const trimmed = line.trim();
  if (trimmed === "") return null;
  let msg: unknown;
  try {
    msg = JSON.parse(trimmed);
  } catch {
    return errorReply(null, "malformed JSON line");
  }
  return service.handle(msg);
}
