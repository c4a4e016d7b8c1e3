"""Regenerate loss_fixture.json from the engine's own objective.

The adapter promises to reproduce the engine's training loss to 1e-5 on a
frozen batch. This script builds that batch: a small toy policy, decorrelated
current and reference weights, three sampled programs with noisy stored
logprobs and random advantages, and the engine-computed loss value. Run it
from the repository root with the engine installed:

    python3 adapter/fixtures/make_loss_fixture.py
"""

import json
import pathlib

import numpy as np

from pitpo.policy import GrammarPolicy, GroupBatch, UpdateConfig, pitpo_loss

OUT = pathlib.Path(__file__).with_name("loss_fixture.json")


def main() -> None:
    rng = np.random.default_rng(42)
    policy = GrammarPolicy(("x",), max_tokens=10, seed=3)
    bucket = "toy"

    for _ in range(8):  # touch a spread of state keys before perturbing
        policy.sample(bucket, rng=rng)
    for key in list(policy.logits):
        policy.logits[key] += rng.normal(scale=0.7, size=policy.logits[key].shape)
    ref = policy.clone()
    for key in list(policy.logits):
        policy.logits[key] += rng.normal(scale=0.3, size=policy.logits[key].shape)

    samples = [policy.sample(bucket, rng=rng) for _ in range(3)]
    advantages = [rng.normal(size=len(s.tokens)) for s in samples]
    olds = [s.logprobs + rng.normal(scale=0.15, size=len(s.tokens)) for s in samples]
    cfg = UpdateConfig(clip_eps=0.2, kl_beta=0.05)
    batch = GroupBatch(
        context_bucket=bucket,
        samples=samples,
        rewards=np.zeros(len(samples)),
        advantages=[np.asarray(a) for a in advantages],
        token_penalties=[np.zeros(len(s.tokens)) for s in samples],
    )
    loss, _ = pitpo_loss(policy, ref, batch, cfg, old_logprobs=olds)

    fixture = {
        "clip_eps": cfg.clip_eps,
        "kl_beta": cfg.kl_beta,
        "temperature": policy.temperature,
        "group_size": len(samples),
        "loss": loss,
        "samples": [],
    }
    for s, adv, old in zip(samples, advantages, olds):
        toks = []
        for k, step in enumerate(s.steps):
            cur = policy.logits_for(step.key)[list(step.mask)]
            rf = ref.logits_for(step.key)[list(step.mask)]
            toks.append(
                {
                    "cur": [float(v) for v in cur],
                    "ref": [float(v) for v in rf],
                    "pos": step.mask.index(step.action),
                    "old_lp": float(old[k]),
                    "adv": float(adv[k]),
                }
            )
        fixture["samples"].append({"text": s.text, "tokens": toks})

    OUT.write_text(json.dumps(fixture, indent=1) + "\n")
    print(f"wrote {OUT} (loss {loss:.12f})")


if __name__ == "__main__":
    main()
