"""Central-difference gradient oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tensor, ValidationError, no_grad


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    passed: bool
    n_coords: int
    per_param: dict[str, float] = field(default_factory=dict)
    message: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.message}" if self.message else ""
        return f"{status}  {self.name:<40s} max_rel_err={self.max_rel_error:.3e}  coords={self.n_coords}{extra}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    name: str = "f",
    names: Sequence[str] | None = None,
    floor: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` against central differences.

    ``f`` must read the current ``.data`` of ``params`` on every call. With
    ``max_coords`` set, a random subset of coordinates per parameter is probed.
    """
    params = list(params)
    names = list(names) if names is not None else [getattr(p, "name", "") or f"p{i}" for i, p in enumerate(params)]
    for p, n in zip(params, names):
        if p.dtype != np.float64:
            raise ValidationError(f"grad_check requires float64 parameters ({n} is {p.dtype})")

    for p in params:
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        p.grad = np.zeros_like(p.data) if isinstance(p, Parameter) else None
        p.requires_grad = True
    out = f()
    if not np.all(np.isfinite(out.data)):
        return GradCheckReport(name, float("inf"), False, 0, message="oracle failure: non-finite f")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    per_param: dict[str, float] = {}
    worst = 0.0
    total = 0
    with no_grad():
        for p, n, ga in zip(params, names, analytic):
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
            numeric = np.empty(len(coords))
            for j, c in enumerate(coords):
                orig = flat[c]
                flat[c] = orig + step
                fp = float(f().data)
                flat[c] = orig - step
                fm = float(f().data)
                flat[c] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    return GradCheckReport(name, float("inf"), False, total, per_param, f"oracle failure: non-finite f near {n}[{c}]")
                numeric[j] = (fp - fm) / (2 * step)
            err = relative_error(ga.reshape(-1)[coords], numeric, floor)
            per_param[n] = float(err.max()) if err.size else 0.0
            worst = max(worst, per_param[n])
            total += len(coords)
    return GradCheckReport(name, worst, worst <= tol, total, per_param)
