"""Built-in grammar policy and the token-regularized policy update.

Sampling walks a token-level automaton of the DSL grammar: at every step a
masked softmax over the legal next tokens is drawn, so every finished sample
parses by construction and generation always terminates inside the token
budget (closing tokens are forced when the budget runs low). The policy is
tabular: logits are keyed by a small abstract state (conditioning bucket,
expectation kind, clamped depth), which is enough context for the update to
shape operator and function preferences without a neural model.

The update implements a clipped surrogate with token-level advantages (the
group-standardized global reward minus per-token redundancy penalties) plus
an exact categorical KL to a frozen reference policy, averaged over batch
tokens. Gradients are analytic; `pitpo_loss` is a pure function of the
logits so it can be finite-difference checked.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .expr import EquationSkeleton, parse, render
from .expr.tokens import FUNCTIONS

log = logging.getLogger(__name__)

EXPECT_ATOM = "atom"
EXPECT_POST = "post"
EXPECT_EXPONENT = "exponent"
EXPECT_FORCED_LPAREN = "forced_lparen"

_EXPONENT_CHOICES = (2, 3)
_DEPTH_CLAMP = 2
COLD_BUCKET = "-"


def atom_actions(variables: tuple[str, ...]) -> tuple[str, ...]:
    return tuple(f"var:{v}" for v in variables) + ("coeff",) + tuple(
        f"func:{f}" for f in FUNCTIONS
    ) + ("lparen",)


POST_ACTIONS = ("op:+", "op:-", "op:*", "op:/", "pow", "rparen", "stop")
EXPONENT_ACTIONS = tuple(f"exp:{e}" for e in _EXPONENT_CHOICES)
FORCED_ACTIONS = ("lparen",)


@dataclass(frozen=True)
class UpdateConfig:
    lr: float = 0.05
    clip_eps: float = 0.2
    kl_beta: float = 0.01
    epochs_per_batch: int = 1


@dataclass(frozen=True)
class Step:
    """One sampling decision: enough to re-score under fresh logits."""

    key: tuple[str, str, int]
    mask: tuple[int, ...]  # indices into the state's action list
    action: int  # index into the state's action list
    logprob: float


@dataclass
class SampledProgram:
    text: str
    tokens: tuple[str, ...]
    logprobs: np.ndarray  # one per token
    steps: tuple[Step, ...]  # aligned with tokens
    eos_step: Step | None
    skeleton: EquationSkeleton | None
    term_token_map: tuple[int, ...] | None  # term index per token

    @property
    def sequence_logprob(self) -> float:
        return float(self.logprobs.sum())


@dataclass
class GroupBatch:
    """One island's group for a single update."""

    context_bucket: str
    samples: list[SampledProgram]
    rewards: np.ndarray
    advantages: list[np.ndarray]  # per-sample per-token
    token_penalties: list[np.ndarray]  # zero outside redundant spans


def context_bucket(elite_texts: list[str]) -> str:
    """Conditioning feature: the dominant operator/function among elites."""
    counts: Counter[str] = Counter()
    for text in elite_texts:
        for fn in FUNCTIONS:
            counts[fn] += text.count(f"{fn}(")
        for op in "+-*/^":
            counts[op] += text.count(op)
    if not counts:
        return COLD_BUCKET
    top = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if top[1] == 0:
        return COLD_BUCKET
    return top[0]


class GrammarPolicy:
    """Tabular masked-softmax policy over the DSL token automaton."""

    def __init__(
        self,
        variables: tuple[str, ...] | list[str],
        max_coeffs: int = 8,
        max_depth: int = 2,
        max_tokens: int = 24,
        temperature: float = 1.0,
        seed: int = 0,
    ):
        if not variables:
            raise ValueError("policy needs at least one variable")
        self.variables = tuple(variables)
        self.max_coeffs = max_coeffs
        self.max_depth = max_depth
        self.max_tokens = max_tokens
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.temperature = temperature
        self.logits: dict[tuple[str, str, int], np.ndarray] = {}
        self.rng = np.random.default_rng(seed)
        self._atom_actions = atom_actions(self.variables)

    # -- state plumbing ----------------------------------------------------

    def actions_for(self, expect: str) -> tuple[str, ...]:
        if expect == EXPECT_ATOM:
            return self._atom_actions
        if expect == EXPECT_POST:
            return POST_ACTIONS
        if expect == EXPECT_EXPONENT:
            return EXPONENT_ACTIONS
        if expect == EXPECT_FORCED_LPAREN:
            return FORCED_ACTIONS
        raise ValueError(f"unknown expectation {expect!r}")

    def state_key(self, bucket: str, expect: str, depth: int) -> tuple[str, str, int]:
        return (bucket, expect, min(depth, _DEPTH_CLAMP))

    def logits_for(self, key: tuple[str, str, int]) -> np.ndarray:
        vec = self.logits.get(key)
        if vec is None:
            vec = np.zeros(len(self.actions_for(key[1])))
            self.logits[key] = vec
        return vec

    def masked_logprobs(self, key: tuple[str, str, int], mask: tuple[int, ...]) -> np.ndarray:
        """Log-probabilities over the masked action subset, in mask order."""
        z = self.logits_for(key)[list(mask)] / self.temperature
        z = z - z.max()
        return z - np.log(np.exp(z).sum())

    def clone(self) -> "GrammarPolicy":
        other = GrammarPolicy(
            self.variables,
            self.max_coeffs,
            self.max_depth,
            self.max_tokens,
            self.temperature,
        )
        other.logits = {k: v.copy() for k, v in self.logits.items()}
        other.rng = np.random.default_rng()
        other.rng.bit_generator.state = self.rng.bit_generator.state
        return other

    # -- grammar automaton -------------------------------------------------

    def _legal_mask(
        self,
        expect: str,
        depth: int,
        remaining: int,
        coeffs_used: int,
        can_pow: bool,
    ) -> tuple[int, ...]:
        actions = self.actions_for(expect)
        legal: list[int] = []
        if expect == EXPECT_ATOM:
            for idx, action in enumerate(actions):
                if action.startswith("var:"):
                    ok = 1 + depth <= remaining
                elif action == "coeff":
                    ok = coeffs_used < self.max_coeffs and 1 + depth <= remaining
                elif action.startswith("func:"):
                    ok = depth < self.max_depth and 4 + depth <= remaining
                else:  # lparen
                    ok = depth < self.max_depth and 3 + depth <= remaining
                if ok:
                    legal.append(idx)
        elif expect == EXPECT_POST:
            for idx, action in enumerate(actions):
                if action.startswith("op:"):
                    ok = 2 + depth <= remaining
                elif action == "pow":
                    ok = can_pow and 2 + depth <= remaining
                elif action == "rparen":
                    ok = depth > 0 and depth <= remaining
                else:  # stop
                    ok = depth == 0
                if ok:
                    legal.append(idx)
        elif expect == EXPECT_EXPONENT:
            legal = list(range(len(actions)))
        else:  # forced lparen
            legal = [0]
        if not legal:
            raise AssertionError("empty action mask; budget invariant broken")
        return tuple(legal)

    def sample(self, bucket: str = COLD_BUCKET, rng: np.random.Generator | None = None) -> SampledProgram:
        """Draw one program. Always parses; always fits max_tokens."""
        rng = rng or self.rng
        tokens: list[str] = []
        logprobs: list[float] = []
        steps: list[Step] = []
        expect = EXPECT_ATOM
        depth = 0
        coeffs_used = 0
        can_pow = False
        eos: Step | None = None

        while True:
            remaining = self.max_tokens - len(tokens)
            mask = self._legal_mask(expect, depth, remaining, coeffs_used, can_pow)
            key = self.state_key(bucket, expect, depth)
            lps = self.masked_logprobs(key, mask)
            pick = int(rng.choice(len(mask), p=np.exp(lps)))
            action = self.actions_for(expect)[mask[pick]]
            step = Step(key=key, mask=mask, action=mask[pick], logprob=float(lps[pick]))

            if action == "stop":
                eos = step
                break
            steps.append(step)
            logprobs.append(step.logprob)

            if action.startswith("var:"):
                tokens.append(action.split(":", 1)[1])
                expect, can_pow = EXPECT_POST, True
            elif action == "coeff":
                tokens.append(f"c{coeffs_used}")
                coeffs_used += 1
                expect, can_pow = EXPECT_POST, True
            elif action.startswith("func:"):
                tokens.append(action.split(":", 1)[1])
                expect = EXPECT_FORCED_LPAREN
            elif action == "lparen":
                tokens.append("(")
                depth += 1
                expect, can_pow = EXPECT_ATOM, False
            elif action.startswith("op:"):
                tokens.append(action.split(":", 1)[1])
                expect, can_pow = EXPECT_ATOM, False
            elif action == "pow":
                tokens.append("^")
                expect = EXPECT_EXPONENT
            elif action.startswith("exp:"):
                tokens.append(action.split(":", 1)[1])
                expect, can_pow = EXPECT_POST, False
            elif action == "rparen":
                tokens.append(")")
                depth -= 1
                expect, can_pow = EXPECT_POST, True
            else:
                raise AssertionError(f"unhandled action {action}")

        text = render(tokens)
        skeleton = parse(text, variables=self.variables)
        term_map = _term_token_map(skeleton)
        return SampledProgram(
            text=text,
            tokens=tuple(tokens),
            logprobs=np.asarray(logprobs),
            steps=tuple(steps),
            eos_step=eos,
            skeleton=skeleton,
            term_token_map=term_map,
        )


def _term_token_map(skeleton: EquationSkeleton) -> tuple[int, ...]:
    mapping = [0] * len(skeleton.tokens)
    for term_idx, span in enumerate(skeleton.term_spans):
        for tok_idx in span:
            mapping[tok_idx] = term_idx
    return tuple(mapping)


def program_from_text(text: str, variables: tuple[str, ...] | None = None) -> SampledProgram:
    """Wrap an externally produced program (bridge reply, CLI input) so it
    carries the same token/term bookkeeping as a native sample. Carries no
    sampling steps, so it cannot be re-scored; logprobs are zero."""
    skeleton = parse(text, variables=variables)
    tokens = tuple(t.text for t in skeleton.tokens)
    return SampledProgram(
        text=skeleton.text,
        tokens=tokens,
        logprobs=np.zeros(len(tokens)),
        steps=(),
        eos_step=None,
        skeleton=skeleton,
        term_token_map=_term_token_map(skeleton),
    )


def sample_group(
    policy: GrammarPolicy,
    bucket: str,
    group_size: int,
    rng: np.random.Generator | None = None,
) -> list[SampledProgram]:
    """G independent samples from the policy (deterministic given rng)."""
    return [policy.sample(bucket, rng=rng) for _ in range(group_size)]


def force_steps(policy: GrammarPolicy, text: str, bucket: str = COLD_BUCKET) -> SampledProgram:
    """Teacher-forced walk: the action sequence that emits ``text``.

    Replays the automaton choosing at every state the action whose token
    matches the target stream, recording the same per-step bookkeeping as
    sampling. Raises ValueError when the text cannot be produced under the
    policy's limits (budget, depth, placeholder count, vocabulary).
    """
    skeleton = parse(text, variables=policy.variables)
    target = [t.text for t in skeleton.tokens]
    if len(target) > policy.max_tokens:
        raise ValueError("text exceeds the policy token budget")

    tokens: list[str] = []
    logprobs: list[float] = []
    steps: list[Step] = []
    expect = EXPECT_ATOM
    depth = 0
    coeffs_used = 0
    can_pow = False
    eos: Step | None = None

    def action_for(tok: str | None) -> str:
        if tok is None:
            return "stop"
        if expect in (EXPECT_ATOM, EXPECT_FORCED_LPAREN):
            if tok == "(":
                return "lparen"
            if tok in FUNCTIONS:
                return f"func:{tok}"
            if tok == f"c{coeffs_used}":
                return "coeff"
            return f"var:{tok}"
        if expect == EXPECT_POST:
            if tok in "+-*/":
                return f"op:{tok}"
            if tok == "^":
                return "pow"
            return "rparen"
        return f"exp:{tok}"

    pos = 0
    while True:
        remaining = policy.max_tokens - len(tokens)
        mask = policy._legal_mask(expect, depth, remaining, coeffs_used, can_pow)
        key = policy.state_key(bucket, expect, depth)
        actions = policy.actions_for(expect)
        tok = target[pos] if pos < len(target) else None
        action = action_for(tok)
        if action not in actions or actions.index(action) not in mask:
            raise ValueError(f"token {tok!r} not reachable at step {pos}")
        idx = actions.index(action)
        lps = policy.masked_logprobs(key, mask)
        step = Step(key=key, mask=mask, action=idx, logprob=float(lps[mask.index(idx)]))

        if action == "stop":
            eos = step
            break
        steps.append(step)
        logprobs.append(step.logprob)
        tokens.append(tok)
        pos += 1

        if action.startswith("var:") or action == "coeff":
            if action == "coeff":
                coeffs_used += 1
            expect, can_pow = EXPECT_POST, True
        elif action.startswith("func:"):
            expect = EXPECT_FORCED_LPAREN
        elif action == "lparen":
            depth += 1
            expect, can_pow = EXPECT_ATOM, False
        elif action.startswith("op:"):
            expect, can_pow = EXPECT_ATOM, False
        elif action == "pow":
            expect = EXPECT_EXPONENT
        elif action.startswith("exp:"):
            expect, can_pow = EXPECT_POST, False
        else:  # rparen
            depth -= 1
            expect, can_pow = EXPECT_POST, True

    return SampledProgram(
        text=render(tokens),
        tokens=tuple(tokens),
        logprobs=np.asarray(logprobs),
        steps=tuple(steps),
        eos_step=eos,
        skeleton=skeleton,
        term_token_map=_term_token_map(skeleton),
    )


def imitation_update(
    policy: GrammarPolicy,
    text: str,
    bucket: str,
    rounds: int,
    lr: float,
    include_eos: bool = True,
) -> None:
    """Bias the policy toward one program by cross-entropy ascent.

    Each round re-forces the action sequence under the current logits and
    raises every visited decision's log-likelihood by one plain softmax
    gradient step of size ``lr``. Used to pre-train toward an elite before
    a run; unlike the search update there is no clipping, grouping or
    length normalisation, so ``rounds * lr`` directly controls how strongly
    the program dominates sampling. With ``include_eos=False`` the final
    stop decision is left untrained, which biases the policy toward the
    program's constructions without also teaching it where to end."""
    for _ in range(rounds):
        program = force_steps(policy, text, bucket)
        steps = list(program.steps) + ([program.eos_step] if include_eos else [])
        for step in steps:
            logits = policy.logits_for(step.key)
            probs = np.exp(policy.masked_logprobs(step.key, step.mask))
            for slot, action in enumerate(step.mask):
                target = 1.0 if action == step.action else 0.0
                logits[action] += lr * (target - probs[slot])


def standardize_advantages(rewards: np.ndarray) -> np.ndarray:
    """(R - mean) / population std; all-zero when the group is degenerate."""
    rewards = np.asarray(rewards, dtype=float)
    std = float(rewards.std())
    if std < 1e-12:
        return np.zeros_like(rewards)
    return (rewards - rewards.mean()) / std


def token_aware_advantages(
    advantage: float,
    sample: SampledProgram,
    term_penalties: dict[int, float],
) -> tuple[np.ndarray, np.ndarray]:
    """Per-token advantages A_hat - P_token and the penalty vector itself.

    ``term_penalties`` maps term index -> penalty applied to every token in
    that term's span (zero elsewhere).
    """
    n = len(sample.tokens)
    penalties = np.zeros(n)
    if sample.term_token_map is not None:
        for idx, term in enumerate(sample.term_token_map):
            penalties[idx] = term_penalties.get(term, 0.0)
    return advantage - penalties, penalties


def pitpo_loss(
    policy: GrammarPolicy,
    ref_policy: GrammarPolicy,
    batch: GroupBatch,
    cfg: UpdateConfig,
    old_logprobs: list[np.ndarray] | None = None,
) -> tuple[float, dict[tuple[str, str, int], np.ndarray]]:
    """Clipped token-level surrogate plus KL to the reference.

    loss = -(1/G) sum_i (1/L_i) sum_k min(r A, clip(r) A)
           + kl_beta * mean over batch tokens of KL(pi_theta || pi_ref)

    Returns the loss and its exact gradient with respect to the policy
    logits (a dict keyed like the logits table). Samples that failed to
    parse or carry no tokens contribute nothing.
    """
    grads: dict[tuple[str, str, int], np.ndarray] = {}
    t = policy.temperature

    def grad_vec(key):
        vec = grads.get(key)
        if vec is None:
            vec = np.zeros_like(policy.logits_for(key))
            grads[key] = vec
        return vec

    g = len(batch.samples)
    total_tokens = sum(len(s.tokens) for s in batch.samples if s.steps)
    loss = 0.0

    for i, sample in enumerate(batch.samples):
        if not sample.steps:
            continue
        stored = old_logprobs[i] if old_logprobs is not None else sample.logprobs
        adv = np.asarray(batch.advantages[i], dtype=float)
        L = len(sample.steps)
        for k, step in enumerate(sample.steps):
            lps = policy.masked_logprobs(step.key, step.mask)
            pos = step.mask.index(step.action)
            ratio = float(np.exp(lps[pos] - stored[k]))
            a = float(adv[k])
            unclipped = ratio * a
            clipped = float(np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)) * a
            take_unclipped = unclipped <= clipped
            loss += -(unclipped if take_unclipped else clipped) / (g * L)
            if take_unclipped:
                # d/dz of -r*a/(G L): r * dlogpi/dz, masked softmax gradient
                probs = np.exp(lps)
                coeff = -a * ratio / (g * L * t)
                vec = grad_vec(step.key)
                for m_pos, m_idx in enumerate(step.mask):
                    indicator = 1.0 if m_pos == pos else 0.0
                    vec[m_idx] += coeff * (indicator - probs[m_pos])

            if cfg.kl_beta != 0.0 and total_tokens:
                cur = lps
                ref = ref_policy.masked_logprobs(step.key, step.mask)
                probs = np.exp(cur)
                kl = float(np.sum(probs * (cur - ref)))
                loss += cfg.kl_beta * kl / total_tokens
                vec = grad_vec(step.key)
                scale = cfg.kl_beta / (total_tokens * t)
                for m_pos, m_idx in enumerate(step.mask):
                    vec[m_idx] += scale * probs[m_pos] * (cur[m_pos] - ref[m_pos] - kl)

    return loss, grads


def pitpo_loss_multi(
    policy: GrammarPolicy,
    ref_policy: GrammarPolicy,
    batches: list[GroupBatch],
    cfg: UpdateConfig,
) -> tuple[float, dict[tuple[str, str, int], np.ndarray]]:
    """Average the per-group loss over the islands of one iteration."""
    if not batches:
        return 0.0, {}
    total = 0.0
    acc: dict[tuple[str, str, int], np.ndarray] = {}
    for batch in batches:
        value, grads = pitpo_loss(policy, ref_policy, batch, cfg)
        total += value
        for key, vec in grads.items():
            if key in acc:
                acc[key] += vec
            else:
                acc[key] = vec.copy()
    n = len(batches)
    for key in acc:
        acc[key] /= n
    return total / n, acc


def update_from_groups(
    policy: GrammarPolicy,
    ref_policy: GrammarPolicy,
    batches: list[GroupBatch],
    cfg: UpdateConfig,
) -> tuple[float, bool]:
    """Run the configured number of epochs over one iteration's groups."""
    loss = 0.0
    applied = False
    for _ in range(max(1, cfg.epochs_per_batch)):
        loss, grads = pitpo_loss_multi(policy, ref_policy, batches, cfg)
        applied = apply_update(policy, grads, cfg) or applied
    return loss, applied


def apply_update(
    policy: GrammarPolicy,
    grads: dict[tuple[str, str, int], np.ndarray],
    cfg: UpdateConfig,
) -> bool:
    """One SGD step on the logits; refused (False) on non-finite gradients."""
    for vec in grads.values():
        if not np.all(np.isfinite(vec)):
            log.warning("non-finite policy gradient; update skipped")
            return False
    for key, vec in grads.items():
        policy.logits_for(key)
        policy.logits[key] = policy.logits[key] - cfg.lr * vec
    return True


# -- checkpointing ----------------------------------------------------------


def save_policy(policy: GrammarPolicy, path: str) -> None:
    payload = {
        "format": "pitpo-policy/1",
        "variables": list(policy.variables),
        "max_coeffs": policy.max_coeffs,
        "max_depth": policy.max_depth,
        "max_tokens": policy.max_tokens,
        "temperature": policy.temperature,
        "logits": {"|".join(map(str, k)): v.tolist() for k, v in policy.logits.items()},
        "rng_state": _encode_rng(policy.rng),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_policy(path: str) -> GrammarPolicy:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != "pitpo-policy/1":
        raise ValueError("not a policy checkpoint")
    policy = GrammarPolicy(
        variables=tuple(payload["variables"]),
        max_coeffs=payload["max_coeffs"],
        max_depth=payload["max_depth"],
        max_tokens=payload["max_tokens"],
        temperature=payload["temperature"],
    )
    for key_text, values in payload["logits"].items():
        bucket, expect, depth = key_text.split("|")
        policy.logits[(bucket, expect, int(depth))] = np.asarray(values, dtype=float)
    policy.rng = _decode_rng(payload["rng_state"])
    return policy


def _encode_rng(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def _decode_rng(payload: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    state = dict(payload)
    rng.bit_generator.state = state
    return rng


def export_automaton(policy: GrammarPolicy) -> dict:
    """Machine-readable description of the token automaton for external
    samplers (the bridge adapter's constrained decoding)."""
    return {
        "format": "pitpo-automaton/1",
        "variables": list(policy.variables),
        "functions": list(FUNCTIONS),
        "exponents": list(_EXPONENT_CHOICES),
        "max_coeffs": policy.max_coeffs,
        "max_depth": policy.max_depth,
        "max_tokens": policy.max_tokens,
        "states": {
            EXPECT_ATOM: list(atom_actions(policy.variables)),
            EXPECT_POST: list(POST_ACTIONS),
            EXPECT_EXPONENT: list(EXPONENT_ACTIONS),
            EXPECT_FORCED_LPAREN: list(FORCED_ACTIONS),
        },
    }
