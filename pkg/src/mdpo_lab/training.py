"""Preference-optimization training loop.

Reference snapshot before step 0, AdamW, linear warmup into a cosine decay,
global-norm clipping and one JSON metrics row per optimizer step.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import ImagePool, PerturbStrategy, encode_batch, encode_responses, generate_warmstart_set, model_images
from .model import ModelConfig, MultimodalLM, batch_log_probs, save_checkpoint, snapshot_reference
from .objectives import LogRatioBundle, ObjectiveConfig, mdpo_loss, stack_batches
from .rng import SeededRng
from .tensor import backward, no_grad

log = logging.getLogger(__name__)

LORA_PEAK_LR = 1e-5


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 32
    peak_lr: float = 3e-4
    warmup_ratio: float = 0.1
    weight_decay: float = 0.0
    grad_clip_norm: float = 1.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    perturb: PerturbStrategy = field(default_factory=lambda: PerturbStrategy("crop", 0.0, 0.2))
    eval_every_epoch: bool = True

    def __post_init__(self):
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    @classmethod
    def lora_preset(cls, **kw) -> "TrainConfig":
        """Peak lr suited to LoRA fine-tuning of 3B-7B models."""
        return cls(peak_lr=LORA_PEAK_LR, **kw)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["adam_betas"] = list(self.adam_betas)
        d["model"] = asdict(self.model)
        d["objective"] = self.objective.to_dict()
        d["perturb"] = self.perturb.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "objective" in d:
            d["objective"] = ObjectiveConfig.from_dict(d["objective"])
        if "perturb" in d:
            d["perturb"] = PerturbStrategy.from_dict(d["perturb"])
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    return int(round(warmup_ratio * total_steps))


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to ``peak_lr``, then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    peak = config.peak_lr
    warm = warmup_steps(total_steps, config.warmup_ratio)
    if step < warm:
        return peak * step / warm
    if total_steps == warm:
        return peak
    progress = (step - warm) / (total_steps - warm)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled weight decay Adam over a list of parameter tensors."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def global_grad_norm(params) -> float:
    return math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))


@dataclass
class TrainResult:
    policy: MultimodalLM
    reference: MultimodalLM
    metrics: list[dict]
    total_steps: int


def _chunks(seq, n):
    for i in range(0, len(seq), n):
        yield seq[i: i + n]


def reference_table(reference: MultimodalLM, records, no_image: bool = False, chunk: int = 256) -> dict:
    """Reference log-probs of (m_w, y_w) and (m_w, y_l) for each record index."""
    grid = reference.config.image_grid
    out = {}
    with no_grad():
        for part in _chunks(records, chunk):
            imgs = model_images(part, grid, no_image)
            both = stack_batches([encode_responses(part, "chosen_tokens", imgs),
                                  encode_responses(part, "rejected_tokens", imgs)])
            lp = batch_log_probs(reference, both).data
            for i, r in enumerate(part):
                out[r.index] = (lp[i], lp[len(part) + i])
    return out


def heldout_chosen_logp(policy: MultimodalLM, records, chunk: int = 256) -> float:
    """Mean log pi(y_w | m_w, q) over ``records``."""
    if not records:
        return float("nan")
    total = 0.0
    with no_grad():
        for part in _chunks(records, chunk):
            batch = encode_responses(part, "chosen_tokens", model_images(part, policy.config.image_grid))
            total += float(batch_log_probs(policy, batch).data.sum())
    return total / len(records)


def _eval_event(policy, heldout, step, epoch) -> dict:
    clean = [r for r in heldout if not r.confounded]
    return {
        "kind": "eval",
        "step": step,
        "epoch": epoch,
        "heldout_chosen_logp": heldout_chosen_logp(policy, heldout),
        "heldout_chosen_logp_clean": heldout_chosen_logp(policy, clean),
    }


def _param_norms(model: MultimodalLM) -> dict:
    return {k: float(np.linalg.norm(v.data)) for k, v in model.params.items()}


def train(config: TrainConfig, dataset, heldout=None, out_dir=None, policy: MultimodalLM | None = None,
          on_event=None) -> TrainResult:
    """Optimise ``config.objective`` on ``dataset``.

    Deterministic given ``config.seed``: per-epoch shuffles and rejected images
    come from seeded streams keyed by (epoch, record index). When ``out_dir``
    is given, ``metrics.jsonl`` and ``ckpt-epoch{N}.bin`` are written there.
    ``heldout`` records, if given, are scored at step 0 and after every epoch.
    """
    if not dataset:
        raise ValueError("train: empty dataset")
    if config.batch_size > len(dataset):
        raise ValueError(f"batch_size {config.batch_size} exceeds dataset size {len(dataset)}")
    obj = config.objective
    cfg = config.model
    policy = policy if policy is not None else MultimodalLM(cfg)
    reference = snapshot_reference(policy)
    ref_tab = reference_table(reference, dataset, no_image=obj.no_image)

    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    opt = AdamW(policy.parameters(), config.adam_betas, config.adam_eps, config.weight_decay)
    root_rng = SeededRng(config.seed)
    pool = ImagePool(dataset)
    need_ml = obj.needs_rejected_image

    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w")
    metrics: list[dict] = []

    def emit(ev):
        metrics.append(ev)
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(ev, sort_keys=True) + "\n")
        if on_event is not None:
            on_event(ev)

    try:
        if heldout:
            emit(_eval_event(policy, heldout, 0, 0))
        step = 0
        for epoch in range(config.epochs):
            order = root_rng.split("shuffle", epoch).permutation(len(dataset))
            perturb_rng = root_rng.split("perturb", epoch)
            for idx in _chunks(order, config.batch_size):
                recs = [dataset[i] for i in idx]
                pb = encode_batch(recs, config.perturb if need_ml else None, perturb_rng, pool,
                                  no_image=obj.no_image, grid=cfg.image_grid)
                parts = [pb.chosen, pb.rejected] + ([pb.rejected_image] if need_ml else [])
                ref = np.concatenate([
                    np.array([ref_tab[r.index][0] for r in recs]),
                    np.array([ref_tab[r.index][1] for r in recs]),
                ])
                if need_ml:
                    with no_grad():
                        ref = np.concatenate([ref, batch_log_probs(reference, pb.rejected_image).data])
                pol = batch_log_probs(policy, stack_batches(parts))
                ratio = pol - ref
                b = len(recs)
                bundle = LogRatioBundle(ratio[:b], ratio[b:2 * b], ratio[2 * b:] if need_ml else None, pol[:b])
                loss, parts_val = mdpo_loss(bundle, obj)
                lval = loss.item()
                if not math.isfinite(lval):
                    raise TrainingDiverged(
                        f"non-finite loss {lval} at step {step} (epoch {epoch}); "
                        f"records {[r.index for r in recs]}; parameter norms {_param_norms(policy)}"
                    )
                opt.zero_grad()
                backward(loss)
                clip_grad_norm(opt.params, config.grad_clip_norm)
                lr = lr_at(step, total_steps, config)
                opt.step(lr)

                lr_w, lr_l = bundle.lr_w.data, bundle.lr_l.data
                emit({
                    "kind": "step",
                    "step": step,
                    "epoch": epoch,
                    "lr": lr,
                    "loss": lval,
                    "loss_dpo": parts_val.get("dpo"),
                    "loss_copo": parts_val.get("copo"),
                    "loss_ancpo": parts_val.get("ancpo"),
                    "lr_w": float(lr_w.mean()),
                    "lr_l": float(lr_l.mean()),
                    "lr_img": float(bundle.lr_img.data.mean()) if need_ml else None,
                    "chosen_logp": float(bundle.chosen_logp.data.mean()),
                    "reward_acc": float((lr_w > lr_l).mean()),
                })
                step += 1
            if out is not None:
                save_checkpoint(policy, out / f"ckpt-epoch{epoch + 1}.bin")
            if heldout and config.eval_every_epoch:
                emit(_eval_event(policy, heldout, step, epoch + 1))
            log.info("epoch %d done, last loss %.4f", epoch + 1, metrics[-1].get("loss", float("nan")))
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return TrainResult(policy, reference, metrics, total_steps)


@dataclass
class WarmStartConfig:
    """Supervised fine-tuning on chosen responses, used to build the starting policy."""

    steps: int = 800
    batch_size: int = 32
    peak_lr: float = 1e-3
    warmup_ratio: float = 0.1
    grad_clip_norm: float = 1.0
    n_records: int = 6000
    confound_rate: float = 0.0      # the base never sees the marker token
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = asdict(self.model)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WarmStartConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown WarmStartConfig keys: {sorted(unknown)}")
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


def warm_start(config: WarmStartConfig, records=None, on_event=None) -> MultimodalLM:
    """Maximise log pi(y_w | m_w, q) on unconfounded records with AdamW and the usual schedule.

    Batches are drawn with replacement from a seeded stream, so the result is a
    pure function of ``config`` (and ``records`` if given).
    """
    if records is None:
        records = generate_warmstart_set(config.seed, config.n_records, config.confound_rate, config.model.image_grid)
    model = MultimodalLM(config.model)
    opt = AdamW(model.parameters())
    rng = SeededRng(config.seed).split("warm-start")
    sched = TrainConfig(peak_lr=config.peak_lr, warmup_ratio=config.warmup_ratio)
    grid = config.model.image_grid
    for step in range(config.steps):
        recs = [records[i] for i in rng.integers(0, len(records), config.batch_size)]
        batch = encode_responses(recs, "chosen_tokens", model_images(recs, grid))
        loss = -batch_log_probs(model, batch).mean()
        opt.zero_grad()
        backward(loss)
        clip_grad_norm(opt.params, config.grad_clip_norm)
        opt.step(lr_at(step, config.steps, sched))
        if on_event is not None:
            on_event({"kind": "warm_start", "step": step, "loss": loss.item()})
    return model


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
