"""Central finite-difference check of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch


class GradCheckError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    tolerance: float
    passed: bool
    # (tensor index, flat coordinate, analytic, numeric, relative error)
    probes: list[tuple[int, int, float, float, float]] = field(default_factory=list)

    @property
    def failures(self) -> list[tuple[int, int, float, float, float]]:
        return [p for p in self.probes if p[4] >= self.tolerance]


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def autograd_gradients(fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor]):
    out = fn()
    grads = torch.autograd.grad(out, list(params), allow_unused=True)
    return [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]


def grad_check(
    fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    probe_count: int = 20,
    tolerance: float = 1e-4,
    *,
    step: float = 1e-5,
    seed: int = 0,
    grad_fn: Callable[[], Sequence[torch.Tensor]] | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``fn()`` against central differences.

    ``params`` are tensors that ``fn`` reads (leaf tensors requiring grad, or
    plain inputs). ``probe_count`` coordinates are drawn uniformly over all of
    them. ``grad_fn`` overrides autograd as the source of analytic gradients.
    """
    params = list(params)
    with torch.no_grad():
        base = fn()
    if not torch.isfinite(base).all():
        raise GradCheckError(f"non-finite output at probe point: {base}")
    analytic = grad_fn() if grad_fn is not None else autograd_gradients(fn, params)

    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    picks = rng.choice(int(sizes.sum()), size=min(probe_count, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    probes = []
    with torch.no_grad():
        for flat in sorted(picks):
            ti = int(np.searchsorted(offsets, flat, side="right") - 1)
            ci = int(flat - offsets[ti])
            view = params[ti].view(-1)
            orig = view[ci].item()
            view[ci] = orig + step
            up = fn().item()
            view[ci] = orig - step
            down = fn().item()
            view[ci] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise GradCheckError(f"non-finite output when perturbing tensor {ti}[{ci}]")
            numeric = (up - down) / (2 * step)
            a = float(analytic[ti].reshape(-1)[ci])
            probes.append((ti, ci, a, numeric, relative_error(a, numeric, floor)))
    errs = np.array([p[4] for p in probes])
    return GradCheckReport(
        max_rel_error=float(errs.max()), mean_rel_error=float(errs.mean()),
        tolerance=tolerance, passed=bool(errs.max() < tolerance), probes=probes,
    )
