"""Preference-optimization losses on policy/reference log-ratios.

All losses are written as ``-log_sigmoid(z)`` for some margin ``z``, which the
tensor core evaluates as ``softplus(-z)``:

    dpo     z = beta * (lr_w - lr_l)             response preference
    copo    z = beta * (lr_w - lr_img)           image preference, same response
    ancpo   z = beta * lr_w - delta              chosen reward above the anchor
            (+ delta - beta * lr_l, + delta - beta * lr_img for wider anchors)

``lr_w``, ``lr_l`` and ``lr_img`` are log pi/pi_ref of (y_w | m_w), (y_l | m_w)
and (y_w | m_l). Inputs may be scalars or per-record vectors; vectors are
averaged over the batch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .model import MultimodalLM, SequenceBatch, batch_log_probs, reference_log_probs
from .tensor import Tensor

ANCHOR_VARIANTS = ("chosen", "chosen+rejected", "chosen+rejected+image")


class ObjectiveError(ValueError):
    pass


@dataclass
class ObjectiveConfig:
    beta: float = 0.1
    delta: float = 0.0
    dpo: bool = True
    copo: bool = True
    ancpo: bool = True
    anchor: str = "chosen"
    no_image: bool = False
    dpo_weight: float = 1.0
    copo_weight: float = 1.0
    ancpo_weight: float = 1.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ObjectiveError(f"beta must be positive, got {self.beta}")
        if not (self.dpo or self.copo or self.ancpo):
            raise ObjectiveError("at least one loss component must be enabled")
        if self.anchor not in ANCHOR_VARIANTS:
            raise ObjectiveError(f"anchor must be one of {ANCHOR_VARIANTS}, got {self.anchor!r}")

    @property
    def needs_rejected_image(self) -> bool:
        return self.copo or (self.ancpo and self.anchor == "chosen+rejected+image")

    @property
    def n_sigma_terms(self) -> int:
        n = int(self.dpo) + int(self.copo)
        if self.ancpo:
            n += ANCHOR_VARIANTS.index(self.anchor) + 1
        return n

    @classmethod
    def preset(cls, name: str, **overrides) -> "ObjectiveConfig":
        """``mdpo`` (all components), ``dpo`` (response preference only)."""
        if name == "mdpo":
            base = {}
        elif name == "dpo":
            base = {"copo": False, "ancpo": False}
        else:
            raise ObjectiveError(f"unknown objective preset {name!r}")
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ObjectiveError(f"unknown ObjectiveConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LogRatioBundle:
    lr_w: Tensor
    lr_l: Tensor
    lr_img: Tensor | None
    chosen_logp: Tensor


def _as_loss(z: Tensor) -> Tensor:
    loss = -T.log_sigmoid(z)
    return loss.mean() if loss.ndim else loss


def dpo_loss(b: LogRatioBundle, cfg: ObjectiveConfig) -> Tensor:
    return _as_loss(cfg.beta * (b.lr_w - b.lr_l))


def copo_loss(b: LogRatioBundle, cfg: ObjectiveConfig) -> Tensor:
    if b.lr_img is None:
        raise ObjectiveError("copo_loss needs the rejected-image log-ratio (no m_l was provided)")
    return _as_loss(cfg.beta * (b.lr_w - b.lr_img))


def ancpo_loss(b: LogRatioBundle, cfg: ObjectiveConfig) -> Tensor:
    loss = _as_loss(cfg.beta * b.lr_w - cfg.delta)
    if cfg.anchor in ("chosen+rejected", "chosen+rejected+image"):
        loss = loss + _as_loss(cfg.delta - cfg.beta * b.lr_l)
    if cfg.anchor == "chosen+rejected+image":
        if b.lr_img is None:
            raise ObjectiveError("rejected-image anchor needs the rejected-image log-ratio")
        loss = loss + _as_loss(cfg.delta - cfg.beta * b.lr_img)
    return loss


def mdpo_loss(b: LogRatioBundle, cfg: ObjectiveConfig) -> tuple[Tensor, dict[str, float]]:
    """Sum of the enabled components and a ``{component: value}`` breakdown.

    With unit weights (the default) this is exactly dpo + copo + ancpo.
    """
    parts = []
    if cfg.dpo:
        parts.append(("dpo", cfg.dpo_weight, dpo_loss(b, cfg)))
    if cfg.copo:
        parts.append(("copo", cfg.copo_weight, copo_loss(b, cfg)))
    if cfg.ancpo:
        parts.append(("ancpo", cfg.ancpo_weight, ancpo_loss(b, cfg)))
    total = None
    breakdown = {}
    for name, w, loss in parts:
        term = loss if w == 1.0 else loss * w
        breakdown[name] = term.item()
        total = term if total is None else total + term
    return total, breakdown


# ---------------------------------------------------------------- log-ratios

def _check_pair(policy: MultimodalLM, reference: MultimodalLM):
    if policy.config != reference.config:
        raise ObjectiveError("policy and reference have different ModelConfigs")


def batch_log_ratios(policy: MultimodalLM, reference: MultimodalLM, chosen: SequenceBatch,
                     rejected: SequenceBatch, rejected_image: SequenceBatch | None = None,
                     ref_cache: np.ndarray | None = None) -> LogRatioBundle:
    """Log-ratios for a batch of records in one stacked forward pass per model.

    ``chosen`` holds (m_w, q, y_w), ``rejected`` (m_w, q, y_l) and
    ``rejected_image`` (m_l, q, y_w). Rows must share question/response widths.
    ``ref_cache`` optionally supplies reference log-probs for the stacked
    batch so a frozen reference need not be re-run.
    """
    _check_pair(policy, reference)
    parts = [chosen, rejected] + ([rejected_image] if rejected_image is not None else [])
    stacked = stack_batches(parts)
    pol = batch_log_probs(policy, stacked)
    ref = ref_cache if ref_cache is not None else reference_log_probs(reference, stacked)
    ratio = pol - ref
    b = len(chosen)
    return LogRatioBundle(
        lr_w=ratio[:b],
        lr_l=ratio[b:2 * b],
        lr_img=ratio[2 * b:] if rejected_image is not None else None,
        chosen_logp=pol[:b],
    )


def stack_batches(parts) -> SequenceBatch:
    return SequenceBatch(
        images=np.concatenate([p.images for p in parts]),
        question_tokens=np.concatenate([p.question_tokens for p in parts]),
        response_tokens=np.concatenate([p.response_tokens for p in parts]),
        response_mask=np.concatenate([p.response_mask for p in parts]),
    )


def _single(image, question, response) -> SequenceBatch:
    response = np.asarray(response, dtype=np.int64)
    return SequenceBatch(np.asarray(image, dtype=np.float64)[None],
                         np.asarray(question, dtype=np.int64)[None],
                         response[None], np.ones((1, response.size), dtype=bool))


def _pad_pair(a, b, pad: int = 0):
    n = max(len(a), len(b))
    pa = np.full(n, pad, dtype=np.int64)
    pb = np.full(n, pad, dtype=np.int64)
    pa[: len(a)] = a
    pb[: len(b)] = b
    return pa, pb, np.arange(n) < len(a), np.arange(n) < len(b)


def compute_log_ratios(policy: MultimodalLM, reference: MultimodalLM, record, m_l=None) -> LogRatioBundle:
    """Scalar log-ratios for one record (``record.image`` is m_w, ``m_l`` the rejected image)."""
    _check_pair(policy, reference)
    yw, yl, mw, ml = _pad_pair(record.chosen_tokens, record.rejected_tokens)
    img = record.model_image(policy.config)
    q = np.asarray(record.question_tokens, dtype=np.int64)
    chosen = SequenceBatch(img[None], q[None], yw[None], mw[None])
    rejected = SequenceBatch(img[None], q[None], yl[None], ml[None])
    rej_img = None
    if m_l is not None:
        rej_img = chosen.with_images(np.asarray(m_l, dtype=np.float64)[None])
    b = batch_log_ratios(policy, reference, chosen, rejected, rej_img)
    return LogRatioBundle(b.lr_w[0], b.lr_l[0], b.lr_img[0] if rej_img is not None else None, b.chosen_logp[0])


def dpo_no_image_loss(policy: MultimodalLM, reference: MultimodalLM, record, cfg: ObjectiveConfig) -> Tensor:
    """DPO with the image replaced by all zeros for both policy and reference."""
    if not cfg.no_image:
        raise ObjectiveError("dpo_no_image_loss requires ObjectiveConfig.no_image=True")
    blank = np.zeros_like(record.model_image(policy.config))
    b = compute_log_ratios(policy, reference, record.with_image(blank))
    return dpo_loss(b, cfg)
