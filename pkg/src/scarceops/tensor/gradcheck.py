"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .functional import mul, sum as tsum
from .tensor import Tape, Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_input: int
    worst_index: tuple[int, ...]
    fraction_within: float
    coordinates: int
    nonfinite: int

    def passed(self, min_fraction: float = 0.99) -> bool:
        return self.nonfinite == 0 and self.fraction_within >= min_fraction


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-3,
    tol: float = 1e-2,
    dtype=np.float32,
    seed: int = 0,
    wrt: Sequence[int] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``fn`` against central differences.

    The scalar probed is ``sum(fn(*inputs) * R)`` for a fixed random ``R``,
    so every output coordinate contributes. The projection is accumulated in
    float64 on the numeric side to keep round-off below the step size.

    Coordinates whose gradient is tiny are judged on an absolute scale: the
    denominator is floored at ``tol`` times the largest numeric gradient of
    that input, and at ``roundoff / tol`` where ``roundoff`` is the
    finite-difference noise implied by the working precision.
    """
    arrays = [np.array(a, dtype=dtype) for a in inputs]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)

    tensors = [Tensor(a.copy(), requires_grad=(i in wrt), dtype=dtype) for i, a in enumerate(arrays)]
    with Tape() as tape:
        out = fn(*tensors)
    proj = np.random.default_rng(seed).standard_normal(out.shape).astype(dtype)
    with tape:
        loss = tsum(mul(out, Tensor(proj, dtype=dtype)))
    backward(loss, tape)
    proj64 = proj.astype(np.float64)
    scale = float(np.sqrt(np.sum((out.data.astype(np.float64) * proj64) ** 2)))
    roundoff = float(np.finfo(dtype).eps) * max(scale, 1.0) / h

    def probe(values: list[np.ndarray]) -> float:
        result = fn(*[Tensor(v, dtype=dtype) for v in values])
        return float(np.sum(result.data.astype(np.float64) * proj64))

    worst = (0.0, -1, ())
    total = within = nonfinite = 0
    for i in wrt:
        analytic = tensors[i].grad
        if analytic is None:
            analytic = np.zeros_like(arrays[i])
        numeric = np.zeros(arrays[i].shape, dtype=np.float64)
        work = [a.copy() for a in arrays]
        for idx in np.ndindex(arrays[i].shape):
            orig = work[i][idx]
            work[i][idx] = orig + h
            f_plus = probe(work)
            work[i][idx] = orig - h
            f_minus = probe(work)
            work[i][idx] = orig
            numeric[idx] = (f_plus - f_minus) / (2 * h)
        nonfinite += int(np.count_nonzero(~np.isfinite(analytic)))
        floor = max(tol * float(np.max(np.abs(numeric), initial=0.0)), roundoff / tol, np.finfo(np.float64).tiny)
        rel = relative_errors(analytic.astype(np.float64), numeric, floor)
        total += rel.size
        within += int(np.count_nonzero(rel < tol))
        j = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
        if rel.size and rel[j] > worst[0]:
            worst = (float(rel[j]), i, tuple(int(t) for t in j))

    return GradCheckReport(
        max_rel_error=worst[0],
        worst_input=worst[1],
        worst_index=worst[2],
        fraction_within=within / total if total else 1.0,
        coordinates=total,
        nonfinite=nonfinite,
    )
