"""The seeded benchmark: dataset, warm-started base policy, arms and sweeps.

Every arm of every sweep starts from the same warm-started base and trains
with the same recipe; only the objective, rejected-image strategy or data
prefix differs. Results are plain dicts so they serialise straight to JSON.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import CropKeep, NoiseAug, PerturbStrategy, RandomImage, generate_dataset, generate_eval_set
from .eval import chosen_likelihood_delta, evaluate_splits
from .model import MultimodalLM, clone, load_checkpoint, save_checkpoint
from .objectives import ObjectiveConfig
from .training import TrainConfig, WarmStartConfig, train, warm_start

log = logging.getLogger(__name__)

SWEEPS = ("components", "crop-strategy", "anchor-variant", "data-scale")
SWEEP_ALIASES = {"crop": "crop-strategy", "anchor": "anchor-variant", "scale": "data-scale"}


@dataclass
class DataConfig:
    seed: int = 7
    n: int = 2000
    confound_rate: float = 0.7
    eval_n: int = 600

    def __post_init__(self):
        if self.n < 1 or self.eval_n < 2:
            raise ValueError("data.n must be >= 1 and data.eval_n >= 2")
        if not 0.0 <= self.confound_rate <= 1.0:
            raise ValueError("data.confound_rate must be in [0, 1]")


def _strict(cls, d: dict, section: str):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown keys in '{section}': {sorted(unknown)}")
    return cls(**d)


@dataclass
class ExperimentConfig:
    """One JSON document describing a benchmark run.

    ``warm_start`` may be ``None`` to train from a fresh initialisation.
    """

    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    warm_start: WarmStartConfig | None = field(default_factory=WarmStartConfig)
    eval_seed: int = 0

    def __post_init__(self):
        if self.warm_start is not None and self.warm_start.model != self.train.model:
            raise ValueError("warm_start.model and train.model must be identical")

    def to_dict(self) -> dict:
        return {
            "data": asdict(self.data),
            "train": self.train.to_dict(),
            "warm_start": None if self.warm_start is None else self.warm_start.to_dict(),
            "eval_seed": self.eval_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {"data", "train", "warm_start", "eval_seed"}
        if unknown:
            raise ValueError(f"unknown top-level config keys: {sorted(unknown)}")
        data = _strict(DataConfig, d.get("data", {}), "data")
        tr = TrainConfig.from_dict(d.get("train", {}))
        if "warm_start" in d and d["warm_start"] is None:
            ws = None
        else:
            ws_d = dict(d.get("warm_start", {}))
            ws_d.setdefault("model", asdict(tr.model))
            ws = WarmStartConfig.from_dict(ws_d)
        return cls(data, tr, ws, int(d.get("eval_seed", 0)))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------- base policy

def cache_dir() -> Path:
    return Path(os.environ.get("MDPO_LAB_CACHE", Path.home() / ".cache" / "mdpo_lab"))


def warm_start_key(cfg: WarmStartConfig) -> str:
    text = json.dumps(cfg.to_dict(), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def base_policy(exp: ExperimentConfig, use_cache: bool = True) -> MultimodalLM:
    """The starting policy shared by every arm.

    Warm starts are cached by config hash under ``$MDPO_LAB_CACHE`` since
    they cost more than a single arm; the cache holds a plain checkpoint.
    """
    if exp.warm_start is None:
        return MultimodalLM(exp.train.model)
    path = cache_dir() / f"warm-{warm_start_key(exp.warm_start)}.bin"
    if use_cache and path.exists():
        return load_checkpoint(path)
    t0 = time.time()
    model = warm_start(exp.warm_start)
    log.info("warm start done in %.1fs", time.time() - t0)
    if use_cache:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".tmp{os.getpid()}")
        save_checkpoint(model, tmp)
        os.replace(tmp, path)
    return model


# ---------------------------------------------------------------- arms

@dataclass(frozen=True)
class Arm:
    name: str
    objective: ObjectiveConfig
    perturb: PerturbStrategy = CropKeep(0.0, 0.2)
    data_fraction: float = 1.0

    def to_dict(self) -> dict:
        return {"name": self.name, "objective": self.objective.to_dict(),
                "perturb": self.perturb.to_dict(), "data_fraction": self.data_fraction}


def sweep_arms(name: str, objective: ObjectiveConfig | None = None) -> list[Arm]:
    """Arms of a named sweep; ``objective`` is the full-mDPO baseline they vary."""
    name = SWEEP_ALIASES.get(name, name)
    full = objective or ObjectiveConfig.preset("mdpo")
    if name == "components":
        return [Arm("mdpo", full),
                Arm("-conditional", replace(full, copo=False)),
                Arm("-anchored", replace(full, ancpo=False)),
                Arm("-both (dpo)", replace(full, copo=False, ancpo=False))]
    if name == "crop-strategy":
        return [Arm(s.label, full, s) for s in (CropKeep(0.0, 0.2), CropKeep(0.2, 0.5), RandomImage(), NoiseAug())]
    if name == "anchor-variant":
        return [Arm(f"anchor={a}", replace(full, anchor=a))
                for a in ("chosen", "chosen+rejected", "chosen+rejected+image")]
    if name == "data-scale":
        return [Arm(f"{frac:g}x", full, data_fraction=frac) for frac in (0.25, 0.5, 1.0)]
    raise ValueError(f"unknown sweep {name!r}; valid sweeps: {', '.join(SWEEPS)}")


def canonical_sweep(name: str) -> str:
    name = SWEEP_ALIASES.get(name, name)
    if name not in SWEEPS:
        raise ValueError(f"unknown sweep {name!r}; valid sweeps: {', '.join(SWEEPS)}")
    return name


def load_data(exp: ExperimentConfig):
    d = exp.data
    grid = exp.train.model.image_grid
    return (generate_dataset(d.seed, d.n, d.confound_rate, grid),
            generate_eval_set(d.seed, d.eval_n, d.confound_rate, grid))


def run_arm(exp: ExperimentConfig, arm: Arm, out_dir=None, base: MultimodalLM | None = None,
            data=None, on_event=None) -> dict:
    """Train one arm from the shared base and evaluate it on the held-out set.

    ``data`` is an optional ``(train_records, heldout_records)`` pair; by
    default it is regenerated from ``exp.data``. The data-scale sweep uses
    nested prefixes of the same training set.
    """
    t0 = time.time()
    records, heldout = data if data is not None else load_data(exp)
    if arm.data_fraction != 1.0:
        records = records[: max(exp.train.batch_size, round(arm.data_fraction * len(records)))]
    base = base if base is not None else base_policy(exp)
    cfg = replace(exp.train, objective=arm.objective, perturb=arm.perturb)
    res = train(cfg, records, heldout=heldout, out_dir=out_dir, policy=clone(base),
                on_event=on_event)
    splits = evaluate_splits(res.policy, res.reference, heldout, exp.eval_seed)
    step0 = res.metrics[1] if res.metrics[0]["kind"] == "eval" else res.metrics[0]
    result = {
        "arm": arm.name,
        "config": arm.to_dict(),
        "n_train": len(records),
        "total_steps": res.total_steps,
        "step0_loss": step0["loss"],
        "chosen_likelihood_delta": chosen_likelihood_delta(res.metrics),
        "chosen_likelihood_delta_clean": chosen_likelihood_delta(res.metrics, "heldout_chosen_logp_clean"),
        "hallucination_rate": splits["all"]["hallucination_rate"],
        "image_sensitivity_gap": splits["all"]["image_sensitivity_gap"],
        "image_sensitivity_gap_clean": splits["clean"]["image_sensitivity_gap"] if "clean" in splits else None,
        "splits": splits,
    }
    log.info("arm %s done in %.1fs", arm.name, time.time() - t0)
    if out_dir is not None:
        save_checkpoint(res.reference, Path(out_dir) / "reference.bin")
        Path(out_dir, "report.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    return result


# ---------------------------------------------------------------- ranking

RANK_KEYS = {
    "components": ("hallucination_rate", False),
    "crop-strategy": ("image_sensitivity_gap", True),
    "anchor-variant": ("hallucination_rate", False),
    "data-scale": ("hallucination_rate", False),
}

TABLE_COLUMNS = (("arm", "arm", "{}"), ("halluc", "hallucination_rate", "{:.3f}"),
                 ("gap", "image_sensitivity_gap", "{:.3f}"), ("acc_true", None, "{:.3f}"),
                 ("acc_blank", None, "{:.3f}"), ("d_chosen", "chosen_likelihood_delta", "{:+.3f}"),
                 ("steps", "total_steps", "{}"))


def rank(results: list[dict], sweep: str) -> list[dict]:
    key, descending = RANK_KEYS[canonical_sweep(sweep)]
    return sorted(results, key=lambda r: r[key], reverse=descending)


def format_table(results: list[dict], sweep: str) -> str:
    """Aligned text table, best arm first by the sweep's ranking metric."""
    rows = []
    for i, r in enumerate(rank(results, sweep), 1):
        acc = r["splits"]["all"]["accuracy"]
        row = [str(i)]
        for head, key, fmt in TABLE_COLUMNS:
            if head == "acc_true":
                row.append(fmt.format(acc["true"]))
            elif head == "acc_blank":
                row.append(fmt.format(acc["blank"]))
            else:
                row.append(fmt.format(r[key]))
        rows.append(row)
    header = ["rank"] + [h for h, _, _ in TABLE_COLUMNS]
    widths = [max(len(x) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(x.ljust(w) if j == 1 else x.rjust(w) for j, (x, w) in enumerate(zip(line, widths)))
             for line in [header] + rows]
    key = RANK_KEYS[canonical_sweep(sweep)][0]
    return "\n".join(lines) + f"\n(ranked by {key}; metrics over the full held-out set)\n"
