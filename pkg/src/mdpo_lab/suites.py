"""Gradient-check suites shared by the ``grad-check`` command and the test suite.

The tensor suite differentiates each core op on random inputs; the objective
suite differentiates all four losses through a tiny model (V=8, d=16, one
layer), which is small enough for finite differences over every parameter.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .gradcheck import GradCheckReport, grad_check
from .model import ModelConfig, MultimodalLM, SequenceBatch, reference_log_probs, snapshot_reference
from .objectives import ObjectiveConfig, ancpo_loss, batch_log_ratios, copo_loss, dpo_loss, mdpo_loss, stack_batches
from .rng import SeededRng
from .tensor import Tensor

TINY = dict(vocab_size=8, d_model=16, n_layers=1, n_heads=2, image_grid=3, max_seq_len=16,
            init_std=0.2, zero_head=False)


def _leaf(rng, *shape, lo=None):
    x = rng.normal(size=shape)
    if lo is not None:
        x = np.abs(x) + lo
    return Tensor(x, requires_grad=True)


def tensor_cases(seed: int = 0) -> list:
    """``(name, f, params)`` triples; each ``f`` maps its leaves to a scalar."""
    rng = SeededRng(seed).split("tensor-suite")
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    pos = _leaf(rng, 3, 4, lo=0.5)
    w = Tensor(rng.normal(size=(3, 4)))
    m1, m2 = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    g, beta = _leaf(rng, 4), _leaf(rng, 4)
    table = _leaf(rng, 5, 4)
    ids = rng.integers(0, 5, size=(2, 3))
    idx = rng.integers(0, 4, size=(3,))

    def weighted(x):
        return (x * w).sum()

    return [
        ("add", lambda: weighted(a + b), [a, b]),
        ("mul", lambda: weighted(a * b), [a, b]),
        ("div", lambda: weighted(a / pos), [a, pos]),
        ("exp", lambda: weighted(T.exp(a * 0.5)), [a]),
        ("log", lambda: weighted(T.log(pos)), [pos]),
        ("power", lambda: weighted(T.power(pos, 1.5)), [pos]),
        ("softplus", lambda: weighted(T.softplus(a)), [a]),
        ("log_sigmoid", lambda: weighted(T.log_sigmoid(a)), [a]),
        ("gelu", lambda: weighted(T.gelu(a)), [a]),
        ("softmax", lambda: weighted(T.softmax(a)), [a]),
        ("log_softmax", lambda: weighted(T.log_softmax(a)), [a]),
        ("layer_norm", lambda: weighted(T.layer_norm(a, g, beta)), [a, g, beta]),
        ("matmul", lambda: (m1 @ m2).sum() + T.power(m1 @ m2 * 0.1, 2).sum(), [m1, m2]),
        ("gather", lambda: T.gather(T.log_softmax(a), idx).sum(), [a]),
        ("take_rows", lambda: T.power(T.take_rows(table, ids), 2).sum(), [table]),
        ("concat_getitem", lambda: weighted(T.concatenate([a[:1], b[1:]], axis=0)), [a, b]),
    ]


def objective_case(seed: int = 0, objective: ObjectiveConfig | None = None, n: int = 2):
    """``(f, params, names)`` where ``f()`` returns all four losses from one policy forward."""
    cfg = ModelConfig(seed=seed, **TINY)
    rng = SeededRng(seed).split("objective-suite")
    policy = MultimodalLM(cfg)
    reference = snapshot_reference(policy)
    for p in policy.params.values():      # move the policy away from the reference
        p.data = p.data + rng.normal(0.0, 0.1, size=p.shape)
    g = cfg.image_grid

    def batch(lq, lr):
        return SequenceBatch(rng.uniform(size=(n, g, g, cfg.channels)),
                             rng.integers(0, cfg.vocab_size, size=(n, lq)),
                             rng.integers(0, cfg.vocab_size, size=(n, lr)),
                             np.ones((n, lr), dtype=bool))

    chosen = batch(3, 3)
    rejected = batch(3, 3).with_images(chosen.images)
    rejected = SequenceBatch(chosen.images, chosen.question_tokens, rejected.response_tokens, rejected.response_mask)
    rejected_image = chosen.with_images(rng.uniform(size=chosen.images.shape))
    ocfg = objective or ObjectiveConfig(beta=0.5, delta=0.1, anchor="chosen+rejected+image")
    ref_lp = reference_log_probs(reference, stack_batches([chosen, rejected, rejected_image]))

    def f():
        b = batch_log_ratios(policy, reference, chosen, rejected, rejected_image, ref_cache=ref_lp)
        return {"dpo": dpo_loss(b, ocfg), "copo": copo_loss(b, ocfg), "ancpo": ancpo_loss(b, ocfg),
                "mdpo": mdpo_loss(b, ocfg)[0]}

    return f, policy.parameters(), list(policy.params)


def corrupted_check(seed: int = 0, tol: float = 1e-5, h: float = 1e-5) -> GradCheckReport:
    """Negative control: the mDPO gradient of one parameter is nudged before comparison."""
    f, params, names = objective_case(seed)

    def total():
        return f()["mdpo"]

    for p in params:
        p.grad = None
    T.backward(total())
    analytic = {p: p.grad.copy() for p in params}
    target = params[0]
    analytic[target] = analytic[target] * 1.01 + 1e-3
    return grad_check(total, params, h=h, tol=tol, names=names, analytic=analytic)


SUITES = ("tensor", "objectives")


def run_grad_suites(seeds=(0,), tol: float = 1e-5, h: float = 1e-5, suites=SUITES) -> dict[str, GradCheckReport]:
    """One report per (suite, seed): ``{"tensor/seed0": ..., "objectives/seed0": ...}``."""
    unknown = set(suites) - set(SUITES)
    if unknown:
        raise ValueError(f"unknown gradient suites {sorted(unknown)}; valid: {', '.join(SUITES)}")
    reports = {}
    for seed in seeds:
        if "tensor" in suites:
            rep = GradCheckReport(tol=tol, h=h)
            for name, f, params in tensor_cases(seed):
                sub = grad_check(f, params, h=h, tol=tol, names=[f"{name}[{i}]" for i in range(len(params))])
                rep.checks.extend(sub.checks)
            reports[f"tensor/seed{seed}"] = rep
        if "objectives" in suites:
            f, params, names = objective_case(seed)
            reports[f"objectives/seed{seed}"] = grad_check(f, params, h=h, tol=tol, names=names)
    return reports
