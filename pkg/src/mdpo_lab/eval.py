"""Probes for conditional vs. unconditional preference and a hallucination proxy."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import EOS, PAD, QTYPES, encode_responses, is_true_statement, model_images
from .model import MultimodalLM, SequenceBatch, batch_log_probs, forward
from .objectives import stack_batches
from .rng import SeededRng
from .tensor import no_grad


class ProbeMode(str, enum.Enum):
    TRUE_IMAGE = "true"
    BLANK_IMAGE = "blank"
    MISMATCHED_IMAGE = "mismatched"


def derangement(n: int, seed: int) -> np.ndarray:
    """Seeded permutation with no fixed points (rejection sampling; n >= 2)."""
    if n < 2:
        raise ValueError("a derangement needs at least two elements")
    rng = SeededRng(seed).split("derangement", n)
    while True:
        p = rng.permutation(n)
        if not np.any(p == np.arange(n)):
            return p


def probe_images(records, mode: ProbeMode, grid: int, seed: int = 0) -> np.ndarray:
    mode = ProbeMode(mode)
    if mode is ProbeMode.BLANK_IMAGE:
        return model_images(records, grid, no_image=True)
    imgs = model_images(records, grid)
    if mode is ProbeMode.MISMATCHED_IMAGE:
        imgs = imgs[derangement(len(records), seed)]
    return imgs


def reward_margins(policy: MultimodalLM, reference: MultimodalLM, records, mode=ProbeMode.TRUE_IMAGE,
                   seed: int = 0, chunk: int = 256) -> np.ndarray:
    """Per-record (lr_w - lr_l) under the probe's image substitution."""
    imgs = probe_images(records, mode, policy.config.image_grid, seed)
    out = []
    with no_grad():
        for s in range(0, len(records), chunk):
            part, im = records[s: s + chunk], imgs[s: s + chunk]
            both = stack_batches([encode_responses(part, "chosen_tokens", im),
                                  encode_responses(part, "rejected_tokens", im)])
            ratio = batch_log_probs(policy, both).data - batch_log_probs(reference, both).data
            out.append(ratio[: len(part)] - ratio[len(part):])
    return np.concatenate(out)


def _accuracy(margins: np.ndarray) -> float:
    return float(((margins > 0) + 0.5 * (margins == 0)).mean())


def preference_accuracy(policy, reference, records, mode=ProbeMode.TRUE_IMAGE, seed: int = 0,
                        beta: float = 1.0) -> float:
    """Fraction of records whose chosen reward beats the rejected one; ties count 1/2.

    Rewards are ``beta * log-ratio``; any positive ``beta`` gives the same answer.
    """
    if not records:
        raise ValueError("preference_accuracy: no records")
    if beta <= 0:
        raise ValueError("beta must be positive")
    return _accuracy(beta * reward_margins(policy, reference, records, mode, seed))


def chosen_likelihood_delta(metrics, key: str = "heldout_chosen_logp") -> float:
    """Final minus initial held-out mean chosen log-prob from the eval rows of a metrics log."""
    points = [m[key] for m in metrics if m.get("kind") == "eval" and m.get(key) is not None]
    if len(points) < 2:
        raise ValueError("metrics log needs at least two evaluation points")
    return float(points[-1] - points[0])


# ---------------------------------------------------------------- hallucination proxy

def greedy_answers(policy: MultimodalLM, records, max_new: int = 3, images=None) -> list[list[int]]:
    """Greedy-decode up to ``max_new`` response tokens per record, stopping at EOS."""
    n = len(records)
    grid = policy.config.image_grid
    imgs = model_images(records, grid) if images is None else images
    q = encode_responses(records, "chosen_tokens", imgs).question_tokens
    generated = np.zeros((n, 0), dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    with no_grad():
        for t in range(max_new):
            # one scratch slot at the end is the position being predicted
            resp = np.concatenate([generated, np.full((n, 1), PAD)], axis=1)
            batch = SequenceBatch(imgs, q, resp, np.ones_like(resp, dtype=bool))
            logits = forward(policy, batch).data[:, t]
            nxt = np.where(done, PAD, logits.argmax(axis=-1))
            generated = np.concatenate([generated, nxt[:, None]], axis=1)
            done |= nxt == EOS
    out = []
    for row in generated:
        toks = []
        for t in row:
            if t == PAD:
                break
            toks.append(int(t))
            if t == EOS:
                break
        out.append(toks)
    return out


def hallucination_rate(records, answers) -> float:
    """Fraction of answers that assert something false about the scene.

    Undecodable answers (no answer token of the right kind) count as hallucinated.
    """
    if not records:
        raise ValueError("hallucination_rate: no records")
    bad = sum(not is_true_statement(r.scene, r.question_tokens, a) for r, a in zip(records, answers))
    return bad / len(records)


def hallucination_proxy(policy: MultimodalLM, records) -> float:
    return hallucination_rate(records, greedy_answers(policy, records))


# ---------------------------------------------------------------- report

@dataclass
class EvalReport:
    n: int
    accuracy: dict                  # ProbeMode value -> accuracy
    image_sensitivity_gap: float
    mean_chosen_logp: float
    hallucination_rate: float
    by_qtype: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def evaluate(policy, reference, records, seed: int = 0) -> EvalReport:
    """All probes on one record set, plus a per-question-type breakdown."""
    margins = {m.value: reward_margins(policy, reference, records, m, seed) for m in ProbeMode}
    answers = greedy_answers(policy, records)
    with no_grad():
        imgs = model_images(records, policy.config.image_grid)
        chosen_lp = batch_log_probs(policy, encode_responses(records, "chosen_tokens", imgs)).data
    correct = np.array([is_true_statement(r.scene, r.question_tokens, a) for r, a in zip(records, answers)])
    by_qtype = {}
    for qt in QTYPES:
        sel = np.array([r.qtype == qt for r in records])
        if sel.any():
            by_qtype[qt] = {
                "n": int(sel.sum()),
                "accuracy_true": _accuracy(margins["true"][sel]),
                "hallucination_rate": float(1.0 - correct[sel].mean()),
            }
    acc = {k: _accuracy(v) for k, v in margins.items()}
    return EvalReport(
        n=len(records),
        accuracy=acc,
        image_sensitivity_gap=acc["true"] - acc["mismatched"],
        mean_chosen_logp=float(chosen_lp.mean()),
        hallucination_rate=float(1.0 - correct.mean()),
        by_qtype=by_qtype,
    )


def evaluate_splits(policy, reference, records, seed: int = 0) -> dict:
    """Reports for all records and for the confounded / clean subsets."""
    splits = {
        "all": list(records),
        "confounded": [r for r in records if r.confounded],
        "clean": [r for r in records if not r.confounded],
    }
    return {k: evaluate(policy, reference, v, seed).to_dict() for k, v in splits.items() if len(v) >= 2}


def record_verdicts(policy, reference, records, seed: int = 0) -> list[dict]:
    """One row per record for JSON Lines inspection."""
    m = {mode.value: reward_margins(policy, reference, records, mode, seed) for mode in ProbeMode}
    answers = greedy_answers(policy, records)
    rows = []
    for i, r in enumerate(records):
        rows.append({
            "index": r.index,
            "qtype": r.qtype,
            "confounded": r.confounded,
            "margin_true": float(m["true"][i]),
            "margin_blank": float(m["blank"][i]),
            "margin_mismatched": float(m["mismatched"][i]),
            "answer": answers[i],
            "answer_true": bool(is_true_statement(r.scene, r.question_tokens, answers[i])),
        })
    return rows
