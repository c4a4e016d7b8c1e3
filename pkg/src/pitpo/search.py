"""Island search loop: sample, fit, analyze redundancy, shape rewards,
update the policy, repeat.

Each iteration runs one group of samples per island. Candidates are fitted
and scored with the dual-penalty reward (fit quality minus complexity minus
gated physical penalties); redundancy analysis over the candidate's terms
plus a fixed external basis library yields per-term penalties that are
subtracted from the group-standardized advantage on exactly the tokens of
the flagged terms. Groups either come from the built-in grammar policy or
from a bridge adapter; a bridge timeout falls back to the built-in policy
for that iteration only.

Pure per-program quantities (fit, complexity, redundancy flags, raw
penalties) are cached by program text for the lifetime of a run; anything
depending on the gate threshold is recomputed on every evaluation. The
fit seed is crc32(text) xor the run seed, so refitting a cached program is
bit-identical and two programs in one run never share restart noise.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import math
import os
import re
import threading
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bridge import (
    BridgeClient,
    BridgeError,
    BridgeTimeout,
    open_transport,
    validate_program_entry,
)
from .constraints import (
    ConstraintConfig,
    ConstraintReport,
    apply_domain_constraints,
    diff_penalty,
    elite_schedule,
    gate_open,
)
from .exclusion import ExclusionConfig, build_analysis, detect_redundant, token_penalty
from .expr import (
    FUNCTIONS,
    ExprSyntaxError,
    Neg,
    check_dimensions,
    complexity,
    eval_node,
    parse,
    to_text,
)
from .fitter import Dataset, FitBudget, fit, predict_on
from .policy import (
    GrammarPolicy,
    GroupBatch,
    SampledProgram,
    UpdateConfig,
    context_bucket,
    export_automaton,
    force_steps,
    imitation_update,
    program_from_text,
    sample_group,
    save_policy,
    standardize_advantages,
    token_aware_advantages,
    update_from_groups,
)
from .reward import RewardBreakdown, RewardConfig, complexity_penalty, fit_reward, global_reward

log = logging.getLogger(__name__)

EXTERNAL_BASIS_TEMPLATES = (
    "{v}",
    "{v}^2",
    "{v}^3",
    "1/{v}",
    "sqrt({v})",
    "sin({v})",
    "cos({v})",
    "tanh({v})",
    "exp({v})",
    "log({v})",
    "{v}*sin({v})",
    "{v}*exp({v})",
)


@dataclass
class SearchConfig:
    iters: int = 2500
    islands: int = 4
    group: int = 4
    seed: int = 0
    policy_spec: str = "grammar"
    exclusion_mode: str = "ratio"
    out_dir: str | None = None

    max_tokens: int = 24
    max_depth: int = 2
    max_coeffs: int = 8
    temperature: float = 1.0

    buffer_cap: int = 32
    context_k: int = 2
    mutate_p: float = 0.35
    reset_period: int = 100
    stop_nmse: float | None = None

    seed_elites: tuple[str, ...] = ()
    warmup_rounds: int = 0
    warmup_lr: float = 0.2

    alpha: float = 1.0
    lambda_len: float = 5e-3
    gate_factor: float = 1e-3
    w_dim: float = 1.0
    w_diff: float = 0.5
    w_domain: float = 0.5

    rho: float = 1e-2
    token_penalty_scale: float = 0.5
    token_reg: bool = True
    a_min: float | None = None
    b_max: float | None = None
    max_support: int | None = None

    restarts: int = 8
    fit_iters: int = 200

    lr: float = 0.05
    clip_eps: float = 0.2
    kl_beta: float = 0.01
    epochs_per_batch: int = 1
    bridge_timeout: float = 120.0

    @classmethod
    def from_dict(cls, data: dict) -> "SearchConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class PureParts:
    """Program-intrinsic evaluation results, cacheable by program text."""

    coeffs: tuple[float, ...]
    mse: float
    nmse: float
    complexity: int
    r_fit: float
    p_cplx: float
    p_dim: float
    p_diff: float
    p_domain: dict[str, float]
    flags: tuple[bool, ...]
    token_penalties: dict[int, float]
    support: tuple[int, ...]
    support_texts: tuple[str, ...]


@dataclass
class FittedCandidate:
    program: SampledProgram | None
    text: str
    pure: PureParts
    gate_open: bool
    p_phy: float
    breakdown: RewardBreakdown
    reward: float
    stage: str = "A"


@dataclass
class SearchResult:
    best: FittedCandidate | None
    iterations_run: int
    evals: int
    elapsed: float
    trajectory: list[dict]
    bridge_fallbacks: int
    cache_hits: int
    out_dir: str | None

    @property
    def best_text(self) -> str | None:
        return self.best.text if self.best else None

    @property
    def best_mse(self) -> float:
        return self.best.pure.mse if self.best else float("inf")

    @property
    def best_nmse(self) -> float:
        return self.best.pure.nmse if self.best else float("inf")

    @property
    def best_reward(self) -> float:
        return self.best.reward if self.best else float("-inf")


class Island:
    """Elite buffer: top programs by reward, deduplicated by text."""

    def __init__(self, cap: int):
        self.cap = cap
        self.buffer: list[tuple[float, str]] = []

    def add(self, reward: float, text: str) -> None:
        if not math.isfinite(reward):
            return
        for idx, (r, t) in enumerate(self.buffer):
            if t == text:
                if reward > r:
                    self.buffer[idx] = (reward, text)
                break
        else:
            self.buffer.append((reward, text))
        self.buffer.sort(key=lambda rt: (-rt[0], rt[1]))
        del self.buffer[self.cap :]

    def elites(self, k: int) -> list[tuple[float, str]]:
        return self.buffer[:k]

    def elite_texts(self, k: int) -> list[str]:
        return [t for _, t in self.buffer[:k]]

    @property
    def best_reward(self) -> float:
        return self.buffer[0][0] if self.buffer else float("-inf")

    def reset_with(self, reward: float, text: str) -> None:
        self.buffer = [(reward, text)]


def build_external_library(variables: tuple[str, ...]) -> list[tuple[str, object]]:
    """Fixed per-variable basis library used as the redundancy context."""
    out: list[tuple[str, object]] = []
    seen: set[str] = set()
    for v in variables:
        for template in EXTERNAL_BASIS_TEMPLATES:
            skeleton = parse(template.format(v=v), variables=variables)
            text = to_text(skeleton.ast)
            if text not in seen:
                seen.add(text)
                out.append((text, skeleton.ast))
    return out


# Elite mutation: term-level edits of buffer programs. The coarse context
# bucket cannot carry elite structure into the sampler, so recombination is
# done explicitly here and each mutant is replayed through the policy
# (teacher forcing) to get the per-step logprobs a fresh sample would carry.

MUTATION_PARENTS = 8
_COEFF_TOKEN = re.compile(r"\bc\d+\b")


def _renumber_coeffs(text: str) -> str:
    """Rewrite placeholder ordinals left to right so they are gap-free."""
    counter = itertools.count()
    return _COEFF_TOKEN.sub(lambda _: f"c{next(counter)}", text)


def _strip_outer_negs(node) -> tuple[int, object]:
    sign = 1
    while isinstance(node, Neg):
        sign = -sign
        node = node.child
    return sign, node


def _summand_pieces(text: str, variables: tuple[str, ...]) -> list[tuple[int, str]]:
    """Split a program into (sign, fragment) summands for term surgery.

    Support-coefficient terms come back normalized to a leading placeholder
    (``c0*base``) with the sign peeled off, so reassembled programs stay
    inside the sampler's DSL subset (no unary minus, no literals).
    """
    skeleton = parse(text, variables=variables)
    pieces: list[tuple[int, str]] = []
    for term in skeleton.terms:
        sign, core = _strip_outer_negs(term.phi)
        base = to_text(core)
        if term.coeff_ordinal is None:
            pieces.append((sign, base))
        elif base == "1":
            pieces.append((sign, "c0"))
        else:
            pieces.append((sign, f"c0*{base}"))
    return pieces


def _assemble_pieces(pieces: list[tuple[int, str]]) -> str:
    """Join summands with binary +/- and renumber placeholders.

    The DSL has no unary minus, so a positive summand must lead; raises
    ValueError when every piece is negative and the caller falls back.
    """
    ordered = list(pieces)
    lead = next((i for i, (s, _) in enumerate(ordered) if s > 0), None)
    if lead is None:
        raise ValueError("no positive summand to lead the program")
    ordered.insert(0, ordered.pop(lead))
    out = ordered[0][1]
    for sign, fragment in ordered[1:]:
        out += (" + " if sign > 0 else " - ") + fragment
    return _renumber_coeffs(out)


def mutation_pool(variables: tuple[str, ...]) -> list[str]:
    """Coefficient-led basis terms available to add/replace mutations."""
    out: list[str] = []
    for v in variables:
        out.append(f"c0*{v}")
        out.append(f"c0*{v}^2")
        out.append(f"c0*{v}^3")
        for fn in FUNCTIONS:
            out.append(f"c0*{fn}({v})")
    return out


def mutate_text(
    parents: list[str],
    variables: tuple[str, ...],
    rng: np.random.Generator,
) -> str:
    """One term-level edit of a random parent program.

    Edits are add/drop/replace of a summand, or a crossover that grafts a
    summand from a second parent. The result is a full program text with
    gap-free placeholders; it may still exceed the policy budget, which the
    caller detects by replaying it.
    """
    pool = mutation_pool(variables)
    parent = parents[int(rng.integers(len(parents)))]
    pieces = _summand_pieces(parent, variables)
    ops = ["add", "replace"]
    if len(pieces) >= 2:
        ops.append("drop")
    if len(parents) >= 2:
        ops.append("cross")
    op = ops[int(rng.integers(len(ops)))]
    if op == "cross":
        donor_pieces = _summand_pieces(
            parents[int(rng.integers(len(parents)))], variables
        )
        piece = donor_pieces[int(rng.integers(len(donor_pieces)))]
    else:
        piece = (1, pool[int(rng.integers(len(pool)))])
    if op == "drop":
        del pieces[int(rng.integers(len(pieces)))]
    elif op == "replace":
        pieces[int(rng.integers(len(pieces)))] = piece
    else:
        pieces.append(piece)
    return _assemble_pieces(pieces)


def propose_group(
    policy: GrammarPolicy,
    bucket: str,
    island: "Island",
    config: SearchConfig,
    rng: np.random.Generator,
) -> list[SampledProgram]:
    """Group proposal: fresh samples mixed with elite mutations.

    Each slot is an elite mutation with probability ``config.mutate_p``
    (once the island buffer is non-empty) and a fresh policy sample
    otherwise. Mutants that the automaton cannot express within budget
    fall back to fresh samples, so the group size is always met.
    """
    parents = island.elite_texts(MUTATION_PARENTS)
    out: list[SampledProgram] = []
    for _ in range(config.group):
        program: SampledProgram | None = None
        if parents and config.mutate_p > 0 and rng.random() < config.mutate_p:
            for _ in range(3):
                try:
                    child = mutate_text(parents, policy.variables, rng)
                    program = force_steps(policy, child, bucket)
                    break
                except (ExprSyntaxError, ValueError):
                    continue
        if program is None:
            program = policy.sample(bucket, rng=rng)
        out.append(program)
    return out


class _Runtime:
    """Run-scoped immutable context plus the pure-parts cache."""

    def __init__(self, dataset: Dataset, config: SearchConfig, domain_constraints, domain_context_builder):
        self.dataset = dataset
        self.config = config
        self.reward_cfg = RewardConfig(alpha=config.alpha, lambda_len=config.lambda_len)
        self.constraint_cfg = ConstraintConfig(
            w_dim=config.w_dim, w_diff=config.w_diff, w_domain=config.w_domain
        )
        self.exclusion_cfg = ExclusionConfig(
            rho=config.rho,
            penalty_scale=config.token_penalty_scale,
            a_min=config.a_min,
            b_max=config.b_max,
            max_support=config.max_support,
        )
        self.budget = FitBudget(restarts=config.restarts, max_iters=config.fit_iters)
        self.external = build_external_library(dataset.variables)
        self.domain_constraints = list(domain_constraints)
        self.domain_context_builder = domain_context_builder
        self.train_var = float(dataset.train_y.var())
        self.cache: dict[str, PureParts] = {}
        self.cache_hits = 0
        self.lock = threading.Lock()

    def nmse_of(self, mse_value: float) -> float:
        if self.train_var == 0.0:
            return 0.0 if mse_value == 0.0 else float("inf")
        return mse_value / self.train_var


def _json_safe(value):
    """Replace non-finite floats with None so the artifacts stay strict JSON."""
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def _dead_parts(floor: float) -> PureParts:
    return PureParts(
        coeffs=(),
        mse=float("inf"),
        nmse=float("inf"),
        complexity=0,
        r_fit=floor,
        p_cplx=0.0,
        p_dim=0.0,
        p_diff=0.0,
        p_domain={},
        flags=(),
        token_penalties={},
        support=(),
        support_texts=(),
    )


def _compute_pure(program: SampledProgram, rt: _Runtime) -> PureParts:
    skeleton = program.skeleton
    fit_seed = (zlib.crc32(program.text.encode("utf-8")) ^ rt.config.seed) & 0xFFFFFFFF
    result = fit(skeleton, rt.dataset, rt.budget, seed=fit_seed)
    coeffs = np.asarray(result.coeffs, dtype=float)
    n_nodes = complexity(skeleton)
    r_fit = fit_reward(result.mse, rt.reward_cfg)
    p_cplx = complexity_penalty(n_nodes, rt.reward_cfg)

    p_dim = 0.0
    if rt.dataset.units is not None and rt.dataset.target_unit is not None:
        p_dim = float(check_dimensions(skeleton, rt.dataset.units, rt.dataset.target_unit))

    p_diff = 0.0
    p_domain: dict[str, float] = {}
    flags: tuple[bool, ...] = tuple(False for _ in skeleton.terms)
    penalties: dict[int, float] = {}
    support = tuple(range(len(skeleton.terms)))
    support_texts = tuple(to_text(t.phi) for t in skeleton.terms)

    if np.isfinite(result.mse):
        p_diff = diff_penalty(
            lambda pts: predict_on(skeleton, coeffs, pts, rt.dataset.variables),
            rt.dataset.train_X,
        )
        if rt.domain_constraints:
            ctx = {}
            if rt.domain_context_builder is not None:
                ctx = rt.domain_context_builder(skeleton, coeffs, rt.dataset)
            p_domain = apply_domain_constraints(rt.domain_constraints, ctx)

        env = rt.dataset.env_for(rt.dataset.train_X)
        n = rt.dataset.train_X.shape[0]
        term_cols = [
            np.broadcast_to(eval_node(term.phi, env, coeffs), (n,)) for term in skeleton.terms
        ]
        b = np.array(
            [
                coeffs[t.coeff_ordinal] if t.coeff_ordinal is not None else 1.0
                for t in skeleton.terms
            ]
        )
        implicit = np.array([t.coeff_ordinal is None for t in skeleton.terms])
        term_texts = set(support_texts)
        ext_cols = [
            np.broadcast_to(eval_node(ast, env, coeffs), (n,))
            for text, ast in rt.external
            if text not in term_texts
        ]
        analysis = build_analysis(term_cols + ext_cols, X=None, n_support=len(term_cols))
        flag_arr = detect_redundant(
            b, analysis, rt.exclusion_cfg, mode=rt.config.exclusion_mode, implicit_mask=implicit
        )
        flags = tuple(bool(v) for v in flag_arr)
        penalties = {
            i: token_penalty(float(b[i]), rt.exclusion_cfg) for i, f in enumerate(flags) if f
        }
        support = tuple(i for i, f in enumerate(flags) if not f)
        support_texts = tuple(to_text(skeleton.terms[i].phi) for i in support)

    return PureParts(
        coeffs=tuple(float(c) for c in coeffs),
        mse=float(result.mse),
        nmse=rt.nmse_of(float(result.mse)),
        complexity=n_nodes,
        r_fit=r_fit,
        p_cplx=p_cplx,
        p_dim=p_dim,
        p_diff=p_diff,
        p_domain=p_domain,
        flags=flags,
        token_penalties=penalties,
        support=support,
        support_texts=support_texts,
    )


def evaluate_candidate(
    program: SampledProgram | None, rt: _Runtime, delta_gate: float | None
) -> FittedCandidate:
    """Full candidate evaluation; pure parts are cached by program text."""
    floor = rt.reward_cfg.floor
    if program is None or program.skeleton is None:
        text = program.text if program is not None else "<invalid>"
        pure = _dead_parts(floor)
        breakdown = global_reward(pure.r_fit, pure.p_cplx, 0.0)
        return FittedCandidate(program, text, pure, False, 0.0, breakdown, floor)

    with rt.lock:
        pure = rt.cache.get(program.text)
        if pure is not None:
            rt.cache_hits += 1
    if pure is None:
        pure = _compute_pure(program, rt)
        with rt.lock:
            rt.cache.setdefault(program.text, pure)

    gate = gate_open(pure.mse, dataclasses.replace(rt.constraint_cfg, delta_gate=delta_gate))
    report = ConstraintReport(
        p_dim=pure.p_dim, p_diff=pure.p_diff, p_domain=pure.p_domain, gate_open=gate
    )
    p_phy = report.total(rt.constraint_cfg)
    breakdown = global_reward(pure.r_fit, pure.p_cplx, p_phy)
    reward = max(breakdown.r_global, floor)
    return FittedCandidate(program, program.text, pure, gate, p_phy, breakdown, reward)


def build_group_batch(
    bucket: str, candidates: list[FittedCandidate], token_reg: bool = True
) -> GroupBatch:
    """Group-standardized advantages with term-local penalties subtracted."""
    rewards = np.array([c.reward for c in candidates], dtype=float)
    advantages = standardize_advantages(rewards)
    adv_list: list[np.ndarray] = []
    pen_list: list[np.ndarray] = []
    samples: list[SampledProgram] = []
    for cand, adv in zip(candidates, advantages):
        if cand.program is None:
            samples.append(
                SampledProgram(
                    text=cand.text,
                    tokens=(),
                    logprobs=np.zeros(0),
                    steps=(),
                    eos_step=None,
                    skeleton=None,
                    term_token_map=None,
                )
            )
            adv_list.append(np.zeros(0))
            pen_list.append(np.zeros(0))
            continue
        penalties = cand.pure.token_penalties if token_reg else {}
        token_adv, token_pen = token_aware_advantages(float(adv), cand.program, penalties)
        samples.append(cand.program)
        adv_list.append(token_adv)
        pen_list.append(token_pen)
    return GroupBatch(
        context_bucket=bucket,
        samples=samples,
        rewards=rewards,
        advantages=adv_list,
        token_penalties=pen_list,
    )


def _worker_count() -> int:
    raw = os.environ.get("PITPO_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        log.warning("PITPO_THREADS=%r is not an integer; using 1", raw)
        return 1


def run_search(
    dataset: Dataset,
    config: SearchConfig,
    domain_constraints=(),
    domain_context_builder=None,
    progress=None,
    inspect_iteration=None,
) -> SearchResult:
    """Run the full search loop and (optionally) write run artifacts.

    With ``config.out_dir`` set, writes trajectory.jsonl (one line per
    iteration), run.json, best.json and policy.ckpt into that directory.
    ``progress`` is an optional callable(iteration, summary_dict);
    ``inspect_iteration`` is an optional callable(iteration, candidates)
    that sees every evaluated candidate and stops the run by returning True.
    ``config.seed_elites`` pre-loads programs into every island buffer (and,
    with ``warmup_rounds`` > 0, pre-trains the policy toward them) so runs
    can start from a converged state instead of a cold one.
    """
    t0 = time.monotonic()
    rt = _Runtime(dataset, config, domain_constraints, domain_context_builder)
    rng = np.random.default_rng(config.seed)
    policy = GrammarPolicy(
        dataset.variables,
        max_coeffs=config.max_coeffs,
        max_depth=config.max_depth,
        max_tokens=config.max_tokens,
        temperature=config.temperature,
        seed=config.seed,
    )
    if config.seed_elites and config.warmup_rounds > 0:
        warm_bucket = context_bucket(list(config.seed_elites)[: config.context_k])
        for text in config.seed_elites:
            imitation_update(policy, text, warm_bucket, config.warmup_rounds, config.warmup_lr)
    ref_policy = policy.clone()
    update_cfg = UpdateConfig(
        lr=config.lr,
        clip_eps=config.clip_eps,
        kl_beta=config.kl_beta,
        epochs_per_batch=config.epochs_per_batch,
    )

    bridge = None
    constraints_payload = None
    if config.policy_spec.startswith("bridge:"):
        endpoint = config.policy_spec.split(":", 1)[1]
        bridge = BridgeClient(open_transport(endpoint), timeout=config.bridge_timeout)
        constraints_payload = export_automaton(policy)
    elif config.policy_spec != "grammar":
        raise ValueError(f"unknown policy spec {config.policy_spec!r}")

    islands = [Island(config.buffer_cap) for _ in range(config.islands)]
    workers = _worker_count()
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    delta_gate: float | None = None
    best: FittedCandidate | None = None
    best_mse_running = float("inf")
    trajectory: list[dict] = []
    evals = 0
    fallbacks = 0
    iterations_run = 0

    for text in config.seed_elites:
        cand = evaluate_candidate(program_from_text(text, dataset.variables), rt, None)
        evals += 1
        for isl in islands:
            isl.add(cand.reward, cand.text)
        if np.isfinite(cand.pure.mse):
            best_mse_running = min(best_mse_running, cand.pure.mse)
        if best is None or cand.reward > best.reward:
            best = cand

    out_dir = Path(config.out_dir) if config.out_dir else None
    traj_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        traj_fh = open(out_dir / "trajectory.jsonl", "w")

    def evaluate_all(programs: list[SampledProgram | None], gate: float | None):
        if pool is not None:
            return list(pool.map(lambda p: evaluate_candidate(p, rt, gate), programs))
        return [evaluate_candidate(p, rt, gate) for p in programs]

    try:
        for iteration in range(1, config.iters + 1):
            iterations_run = iteration
            bridge_down = False
            island_programs: list[list[SampledProgram | None]] = []
            island_buckets: list[str] = []
            island_native: list[bool] = []

            for isl in islands:
                bucket = context_bucket(isl.elite_texts(config.context_k))
                island_buckets.append(bucket)
                programs: list[SampledProgram | None] | None = None
                if bridge is not None and not bridge_down:
                    context = {
                        "bucket": bucket,
                        "elites": [
                            {"program": t, "reward": r}
                            for r, t in isl.elites(config.context_k)
                        ],
                    }
                    try:
                        entries = bridge.request_programs(
                            config.group, context, constraints_payload, iteration=iteration
                        )
                        programs = [
                            validate_program_entry(e, dataset.variables)
                            for e in entries[: config.group]
                        ]
                        programs += [None] * (config.group - len(programs))
                    except BridgeError as exc:
                        log.warning(
                            "bridge failed (%s); built-in policy takes iteration %d",
                            exc,
                            iteration,
                        )
                        fallbacks += 1
                        bridge_down = True
                        programs = None
                if programs is None:
                    programs = list(propose_group(policy, bucket, isl, config, rng))
                    island_native.append(True)
                else:
                    island_native.append(False)
                island_programs.append(programs)

            island_candidates = [
                evaluate_all(programs, delta_gate) for programs in island_programs
            ]
            evals += sum(len(c) for c in island_candidates)

            if delta_gate is None:
                first_mse = next(
                    (
                        c.pure.mse
                        for cands in island_candidates
                        for c in cands
                        if np.isfinite(c.pure.mse)
                    ),
                    None,
                )
                if first_mse is not None:
                    delta_gate = config.gate_factor * first_mse
                    island_candidates = [
                        evaluate_all(programs, delta_gate) for programs in island_programs
                    ]

            batches: list[tuple[GroupBatch, bool]] = []
            for isl, bucket, native, cands in zip(
                islands, island_buckets, island_native, island_candidates
            ):
                stages, best_mse_running = elite_schedule(
                    [c.pure.mse for c in cands], best_mse_running
                )
                for cand, stage in zip(cands, stages):
                    cand.stage = stage
                    if np.isfinite(cand.pure.mse):
                        isl.add(cand.reward, cand.text)
                    if best is None or cand.reward > best.reward:
                        best = cand
                batches.append((build_group_batch(bucket, cands, config.token_reg), native))

            native_batches = [b for b, native in batches if native]
            if native_batches:
                update_from_groups(policy, ref_policy, native_batches, update_cfg)
            if bridge is not None and not bridge_down:
                groups_payload = [
                    {
                        "context": {"bucket": b.context_bucket},
                        "programs": [s.text for s in b.samples],
                        "advantages": [a.tolist() for a in b.advantages],
                        "penalties": [p.tolist() for p in b.token_penalties],
                        "rewards": _json_safe(b.rewards.tolist()),
                    }
                    for b, native in batches
                    if not native
                ]
                if groups_payload:
                    bridge.send_update(groups_payload)

            gate_now = (
                delta_gate is not None and best is not None and best.pure.mse < delta_gate
            )
            record = {
                "iter": iteration,
                "best_mse": best.pure.mse if best else float("inf"),
                "best_nmse": best.pure.nmse if best else float("inf"),
                "best_reward": best.reward if best else float("-inf"),
                "gate_open": gate_now,
                "evals": evals,
            }
            trajectory.append(record)
            if traj_fh is not None:
                traj_fh.write(json.dumps(_json_safe(record)) + "\n")
                traj_fh.flush()
            if progress is not None:
                progress(iteration, record)
            if inspect_iteration is not None:
                flat = [c for cands in island_candidates for c in cands]
                if inspect_iteration(iteration, flat):
                    break

            if config.reset_period > 0 and iteration % config.reset_period == 0 and best is not None:
                ranked = sorted(range(len(islands)), key=lambda i: islands[i].best_reward)
                for idx in ranked[: len(islands) // 2]:
                    islands[idx].reset_with(best.reward, best.text)

            if config.stop_nmse is not None and best is not None:
                if best.pure.nmse < config.stop_nmse:
                    break
    finally:
        if pool is not None:
            pool.shutdown(wait=False)
        if bridge is not None:
            bridge.close()
        if traj_fh is not None:
            traj_fh.close()

    elapsed = time.monotonic() - t0
    result = SearchResult(
        best=best,
        iterations_run=iterations_run,
        evals=evals,
        elapsed=elapsed,
        trajectory=trajectory,
        bridge_fallbacks=fallbacks,
        cache_hits=rt.cache_hits,
        out_dir=str(out_dir) if out_dir is not None else None,
    )
    if out_dir is not None:
        _write_artifacts(out_dir, config, result, policy)
    return result


def _best_payload(result: SearchResult) -> dict:
    if result.best is None:
        return {}
    cand = result.best
    return {
        "text": cand.text,
        "coeffs": list(cand.pure.coeffs),
        "mse": cand.pure.mse,
        "nmse": cand.pure.nmse,
        "reward": cand.reward,
        "complexity": cand.pure.complexity,
        "support_terms": list(cand.pure.support_texts),
        "gate_open": cand.gate_open,
        "stage": cand.stage,
    }


def _write_artifacts(out_dir: Path, config: SearchConfig, result: SearchResult, policy) -> None:
    best_payload = _json_safe(_best_payload(result))
    with open(out_dir / "best.json", "w") as fh:
        json.dump(best_payload, fh, indent=2)
    run_payload = {
        "config": config.to_dict(),
        "iterations_run": result.iterations_run,
        "evals": result.evals,
        "elapsed_seconds": result.elapsed,
        "bridge_fallbacks": result.bridge_fallbacks,
        "cache_hits": result.cache_hits,
        "best": best_payload,
    }
    with open(out_dir / "run.json", "w") as fh:
        json.dump(_json_safe(run_payload), fh, indent=2)
    save_policy(policy, str(out_dir / "policy.ckpt"))
