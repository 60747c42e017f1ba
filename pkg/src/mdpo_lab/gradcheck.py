"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class ParamCheck:
    name: str
    rel_error: float
    max_abs_error: float
    analytic_norm: float
    numeric_norm: float
    passed: bool


@dataclass
class GradCheckReport:
    tol: float
    h: float
    checks: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def worst(self) -> ParamCheck | None:
        return max(self.checks, key=lambda c: c.rel_error, default=None)

    def failures(self) -> list[ParamCheck]:
        return [c for c in self.checks if not c.passed]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``; the floor keeps all-zero gradients comparable."""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def _outputs(value) -> dict:
    """``{name: float}`` for a scalar Tensor or a dict of them."""
    if isinstance(value, dict):
        return {k: v.item() for k, v in value.items()}
    return {None: value.item()}


def numeric_grad(f, param: Tensor, h: float):
    """Central differences of ``f`` w.r.t. ``param``.

    Returns an array shaped like ``param``, or a dict of them when ``f``
    returns a dict of scalar Tensors (one forward pass serves every output).
    """
    flat = param.data.reshape(-1)
    grads: dict = {}
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _outputs(f())
            flat[i] = orig - h
            fm = _outputs(f())
            flat[i] = orig
            for k in fp:
                grads.setdefault(k, np.zeros(flat.size))[i] = (fp[k] - fm[k]) / (2 * h)
    shaped = {k: g.reshape(param.shape) for k, g in grads.items()}
    return shaped[None] if list(shaped) == [None] else shaped


def _analytic(f, params) -> dict:
    out = f()
    outputs = out if isinstance(out, dict) else {None: out}
    result = {}
    for k, root in outputs.items():
        for p in params:
            p.grad = None
        if k is not None:
            root = f()[k]      # fresh graph per output; backward overwrites leaf grads
        backward(root)
        result[k] = {p: (p.grad if p.grad is not None else np.zeros_like(p.data)) for p in params}
    return result


def grad_check(f, params, h: float = 1e-5, tol: float = 1e-5, names=None,
               analytic=None) -> GradCheckReport:
    """Compare ``backward(f())`` against central differences for each tensor in ``params``.

    ``f`` takes no arguments and returns a scalar Tensor built from ``params``,
    which are perturbed in place, or a dict of such scalars; each output is
    then checked separately and checks are named ``"output/param"``.
    ``analytic`` may supply precomputed gradients (``{param: array}``) instead
    of calling ``backward``, which is how the negative-control fixtures inject
    a wrong gradient.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"finite-difference step h={h} outside [1e-6, 1e-4]")
    params = list(params)
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    grads = _analytic(f, params) if analytic is None else {None: analytic}
    report = GradCheckReport(tol=tol, h=h)
    for name, p in zip(names, params):
        numeric = numeric_grad(f, p, h)
        if not isinstance(numeric, dict):
            numeric = {None: numeric}
        for k, n in numeric.items():
            a = np.asarray(grads[k][p], dtype=np.float64)
            err = relative_error(a, n)
            report.checks.append(ParamCheck(
                name=name if k is None else f"{k}/{name}",
                rel_error=err,
                max_abs_error=float(np.max(np.abs(a - n))) if a.size else 0.0,
                analytic_norm=float(np.linalg.norm(a)),
                numeric_norm=float(np.linalg.norm(n)),
                passed=err < tol,
            ))
    return report
