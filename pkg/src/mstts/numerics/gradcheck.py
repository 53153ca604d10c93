"""Central finite-difference gradient verification.

Checks run in 64-bit: float32 round-off swamps the O(eps^2) truncation error
of central differences, so callers must build their model with float64
parameters before handing it here.

Piecewise-linear ops (relu, clamping, max) make finite differences invalid
for any coordinate whose perturbation crosses a kink; there the two-sided
secant measures a blend of both linear pieces while the analytic gradient
reports one side.  Each coordinate is therefore estimated at two step sizes;
when the estimates disagree the coordinate straddles a kink and is excluded.
A cap on the excluded fraction keeps the check from going vacuous.

Blind spot: a kink sitting exactly at the evaluation point (zero-init bias
fed zero input, say) yields scale-independent secants that evade detection
while the subgradient stays on one piece.  Callers should evaluate at a
generic point, e.g. jitter freshly initialized parameters first.
"""

from __future__ import annotations

import numpy as np

from .tensor import backward


def finite_difference_check(
    build_loss,
    params: dict,
    eps: float = 1e-4,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    max_skip_fraction: float = 0.3,
) -> float:
    """Compare analytic gradients to central differences; returns the max
    relative error over used coordinates.

    ``build_loss`` is a zero-argument callable evaluating the scalar loss
    from current parameter values.  ``max_coords_per_param`` caps coordinates
    probed per tensor (random subset) to keep big models affordable; None
    checks every coordinate.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ValueError(f"parameter {name!r} is {p.data.dtype}; gradient check needs float64")
    grads = backward(build_loss(), params=params)
    worst = 0.0
    checked = skipped = 0
    for name, p in params.items():
        flat = p.data.ravel()
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            if rng is None:
                raise ValueError("rng required when subsampling coordinates")
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        ga = np.asarray(grads[name]).ravel()
        for i in coords:
            fd_full = _secant(build_loss, flat, i, eps)
            fd_half = _secant(build_loss, flat, i, eps / 2)
            checked += 1
            if abs(fd_full - fd_half) > 1e-3 * max(1.0, abs(fd_full)):
                skipped += 1
                continue
            err = abs(ga[i] - fd_half) / max(1e-3, abs(ga[i]) + abs(fd_half))
            worst = max(worst, err)
    if checked and skipped > max_skip_fraction * checked:
        raise ValueError(
            f"{skipped}/{checked} coordinates sat on activation kinks; check is not meaningful"
        )
    return worst


def _secant(build_loss, flat: np.ndarray, i: int, eps: float) -> float:
    orig = flat[i]
    flat[i] = orig + eps
    lp = float(build_loss().data)
    flat[i] = orig - eps
    lm = float(build_loss().data)
    flat[i] = orig
    return (lp - lm) / (2.0 * eps)
