"""``mdpo-lab`` command line: data generation, warm start, training, evaluation, sweeps, gradient checks."""

from __future__ import annotations

import os

# BLAS reads these at import time, so they must be set before numpy loads
if os.environ.get("MDPO_LAB_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["MDPO_LAB_THREADS"])

import argparse
import json
import logging
import multiprocessing
import sys
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .data import QUESTION_LEN, RESPONSE_LEN, generate_dataset, generate_eval_set, load_dataset, save_dataset
from .eval import evaluate, evaluate_splits, record_verdicts
from .experiment import (Arm, ExperimentConfig, base_policy, canonical_sweep, format_table, load_data, rank,
                         run_arm, sweep_arms, SWEEPS)
from .model import MultimodalLM, load_checkpoint, save_checkpoint
from .objectives import ObjectiveConfig
from .suites import SUITES, corrupted_check, run_grad_suites
from .training import warm_start

log = logging.getLogger("mdpo_lab")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def load_config(args) -> ExperimentConfig:
    exp = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        exp = replace(exp, train=replace(exp.train, seed=args.seed))
    return exp


def check_compatible(model: MultimodalLM, records, what: str = "dataset"):
    """Vocabulary, grid and length checks so a mismatch fails before any optimisation."""
    cfg = model.config
    grids = {r.scene.grid for r in records}
    if grids != {cfg.image_grid}:
        raise UsageError(f"{what} grid {sorted(grids)} does not match model image_grid {cfg.image_grid}")
    top = max(max(r.question_tokens + r.chosen_tokens + r.rejected_tokens) for r in records)
    if top >= cfg.vocab_size:
        raise UsageError(f"{what} uses token id {top} but model vocab_size is {cfg.vocab_size}")
    if cfg.patch_count + QUESTION_LEN + RESPONSE_LEN > cfg.max_seq_len:
        raise UsageError(f"model max_seq_len {cfg.max_seq_len} too short for "
                         f"{cfg.patch_count} patches plus {QUESTION_LEN + RESPONSE_LEN} tokens")


def write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _objective(args, exp: ExperimentConfig) -> ObjectiveConfig:
    if args.objective == "custom":
        obj = exp.train.objective
    else:
        obj = ObjectiveConfig.preset(args.objective, beta=exp.train.objective.beta, delta=exp.train.objective.delta)
    if args.no_image:
        obj = replace(obj, no_image=True)
    return obj


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    manifest_path = out.with_suffix(".manifest.json")
    if (out.exists() or manifest_path.exists()) and not args.force:
        raise UsageError(f"{out} exists; pass --force to overwrite")
    gen = generate_eval_set if args.split == "eval" else generate_dataset
    records = gen(args.seed, args.n, args.confound)
    out.parent.mkdir(parents=True, exist_ok=True)
    digest = save_dataset(records, out)
    n_conf = sum(r.confounded for r in records)
    manifest = {
        "file": out.name,
        "split": args.split,
        "seed": args.seed,
        "n": len(records),
        "confound_rate": args.confound,
        "counts": {"confounded": n_conf, "clean": len(records) - n_conf,
                   "by_qtype": {q: c for q, c in sorted(Counter(r.qtype for r in records).items())}},
        "sha256": digest,
    }
    write_json(manifest_path, manifest)
    print(f"wrote {len(records)} records ({n_conf} confounded) to {out}")
    print(f"sha256 {digest}")
    return 0


def cmd_warm_start(args) -> int:
    exp = load_config(args)
    if exp.warm_start is None:
        raise UsageError("config has warm_start: null")
    ws = exp.warm_start if args.seed is None else replace(exp.warm_start, seed=args.seed)
    every = max(1, ws.steps // 10)
    model = warm_start(ws, on_event=lambda e: print(f"step {e['step']:5d}  loss {e['loss']:.4f}")
                       if e["step"] % every == 0 else None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out)
    print(f"saved {out}")
    return 0


def cmd_train(args) -> int:
    exp = load_config(args)
    obj = _objective(args, exp)
    if args.data:
        records = load_dataset(args.data)
        heldout = load_dataset(args.heldout) if args.heldout else generate_eval_set(
            exp.data.seed, exp.data.eval_n, exp.data.confound_rate, exp.train.model.image_grid)
    else:
        records, heldout = load_data(exp)
    if args.init:
        policy = load_checkpoint(args.init)
    elif args.from_scratch:
        policy = MultimodalLM(exp.train.model)
    else:
        check_compatible(MultimodalLM(exp.train.model), records)
        policy = base_policy(exp)
    check_compatible(policy, records)
    check_compatible(policy, heldout, "held-out set")
    custom_start = bool(args.init or args.from_scratch)
    exp = replace(exp, train=replace(exp.train, objective=obj, model=policy.config),
                  warm_start=None if custom_start else exp.warm_start)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", exp.to_dict())

    def show(ev):
        if ev["kind"] == "step" and ev["step"] == 0:
            print(f"step 0 loss {ev['loss']:.6f}", flush=True)
        elif ev["kind"] == "step" and args.verbose_steps and ev["step"] % 20 == 0:
            print(f"step {ev['step']} loss {ev['loss']:.6f} lr {ev['lr']:.2e}", flush=True)
        elif ev["kind"] == "eval" and ev["step"] > 0:
            print(f"epoch {ev['epoch']} held-out chosen logp {ev['heldout_chosen_logp']:.4f}", flush=True)

    arm = Arm(args.objective + ("-no-image" if args.no_image else ""), obj, exp.train.perturb)
    result = run_arm(exp, arm, out_dir=out, base=policy, data=(records, heldout), on_event=show)
    print(summary_line(result))
    return 0


def summary_line(result: dict) -> str:
    acc = result["splits"]["all"]["accuracy"]
    return (f"{result['arm']}: acc true {acc['true']:.3f} blank {acc['blank']:.3f} "
            f"mismatched {acc['mismatched']:.3f} | gap {result['image_sensitivity_gap']:.3f} | "
            f"hallucination {result['hallucination_rate']:.3f} | "
            f"chosen-logp delta {result['chosen_likelihood_delta']:+.3f}")


def cmd_evaluate(args) -> int:
    policy = load_checkpoint(args.checkpoint)
    reference = load_checkpoint(args.reference)
    if args.data:
        records = load_dataset(args.data)
    else:
        exp = load_config(args)
        records = generate_eval_set(exp.data.seed, exp.data.eval_n, exp.data.confound_rate, policy.config.image_grid)
    check_compatible(policy, records)
    report = evaluate_splits(policy, reference, records) if args.splits else evaluate(policy, reference, records).to_dict()
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    if args.verdicts:
        with open(args.verdicts, "w") as fh:
            for row in record_verdicts(policy, reference, records):
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return 0


def _run_arm_job(job):
    exp_dict, arm, out_dir = job
    logging.basicConfig(level=logging.WARNING)
    return run_arm(ExperimentConfig.from_dict(exp_dict), arm, out_dir=out_dir)


def cmd_ablate(args) -> int:
    sweep = canonical_sweep(args.sweep)
    exp = load_config(args)
    arms = sweep_arms(sweep, exp.train.objective)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", exp.to_dict())
    base_policy(exp)        # build (or load) the cached warm start once, before any worker starts
    jobs = [(exp.to_dict(), arm, str(out / _slug(arm.name))) for arm in arms]
    if args.parallel > 1:
        os.environ.setdefault("MDPO_LAB_THREADS", "1")
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, os.environ["MDPO_LAB_THREADS"])
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(args.parallel, mp_context=ctx) as pool:
            results = list(pool.map(_run_arm_job, jobs))
    else:
        results = []
        for job in jobs:
            print(f"running arm {job[1].name}", flush=True)
            results.append(_run_arm_job(job))
    doc = {"sweep": sweep, "config": exp.to_dict(), "arms": results,
           "ranking": [r["arm"] for r in rank(results, sweep)]}
    write_json(out / f"{sweep}.json", doc)
    table = format_table(results, sweep)
    (out / f"{sweep}.txt").write_text(table)
    print(table, end="")
    return 0


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in ".-" else "_" for c in name).strip("_")


def cmd_grad_check(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",")]
    suites = SUITES if args.suite == "all" else (args.suite,)
    reports = run_grad_suites(seeds, tol=args.tol, h=args.h, suites=suites)
    if args.corrupt:
        reports["negative-control(corrupted)"] = corrupted_check(seeds[0], tol=args.tol, h=args.h)
    ok = True
    for name, rep in reports.items():
        worst = rep.worst
        status = "PASS" if rep.passed else "FAIL"
        print(f"{status}  {name:<28} {len(rep.checks):4d} checks  worst {worst.rel_error:.2e} ({worst.name})")
        if not rep.passed:
            ok = False
            bad = sorted(rep.failures(), key=lambda c: -c.rel_error)
            print(f"      {len(bad)} failing; worst offenders:")
            for c in bad[: args.top]:
                print(f"        {c.name:<40} rel {c.rel_error:.3e}  max|a-n| {c.max_abs_error:.3e}")
    if args.json:
        write_json(Path(args.json), {k: {"passed": r.passed, "tol": r.tol, "h": r.h,
                                         "checks": [vars(c) for c in r.checks]} for k, r in reports.items()})
    print("all gradient checks passed" if ok else "gradient check FAILED")
    return 0 if ok else 1


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdpo-lab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a seeded preference dataset as JSON Lines plus a manifest")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--confound", type=float, default=0.7, help="fraction of records carrying the text marker")
    g.add_argument("--split", choices=["train", "eval"], default="train")
    g.add_argument("--out", default="data/train.jsonl")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    w = sub.add_parser("warm-start", help="supervised warm start of the base policy")
    w.add_argument("--config")
    w.add_argument("--seed", type=int)
    w.add_argument("--out", default="runs/base.bin")
    w.set_defaults(func=cmd_warm_start)

    t = sub.add_parser("train", help="preference-train one policy from the base")
    t.add_argument("--config")
    t.add_argument("--seed", type=int, help="overrides train.seed")
    t.add_argument("--out", default="runs/train")
    t.add_argument("--objective", choices=["dpo", "mdpo", "custom"], default="mdpo",
                   help="custom uses train.objective from the config")
    t.add_argument("--no-image", action="store_true", help="zero every image for policy and reference")
    t.add_argument("--data", help="JSONL training set (default: generate from config)")
    t.add_argument("--heldout", help="JSONL held-out set")
    t.add_argument("--init", help="start from this checkpoint instead of the warm-started base")
    t.add_argument("--from-scratch", action="store_true", help="start from a fresh initialisation")
    t.add_argument("--log-steps", dest="verbose_steps", action="store_true", help="print every 20th step")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a policy checkpoint against a reference checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--reference", required=True)
    e.add_argument("--config")
    e.add_argument("--seed", type=int)
    e.add_argument("--data")
    e.add_argument("--splits", action="store_true", help="also report confounded and clean subsets")
    e.add_argument("--out")
    e.add_argument("--verdicts", help="write per-record JSON Lines here")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="run a sweep and print a ranked table")
    a.add_argument("--sweep", required=True, help=f"one of {', '.join(SWEEPS)}")
    a.add_argument("--config")
    a.add_argument("--seed", type=int)
    a.add_argument("--out", default="runs/ablate")
    a.add_argument("--parallel", type=int, default=1)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("grad-check", help="finite-difference checks of the tensor ops and all losses")
    c.add_argument("--tol", type=float, default=1e-5)
    c.add_argument("--h", type=float, default=1e-5)
    c.add_argument("--seeds", default="0", help="comma-separated seeds")
    c.add_argument("--suite", choices=("all",) + SUITES, default="all")
    c.add_argument("--top", type=int, default=10, help="worst offenders to list on failure")
    c.add_argument("--corrupt", action="store_true", help="add a negative control with a corrupted gradient")
    c.add_argument("--json")
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
