"""Finite-difference verification of tape gradients.

The analytic gradient of a scalar-valued function is compared against central
differences, coordinate by coordinate.  This is the package's independent
oracle for the tape: it exercises whatever composition of primitives the
function builds, with no knowledge of the VJPs.

Checks must run in float64; in float32 the difference quotient loses most of
its digits and the comparison is meaningless.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ditlab import rng as rngmod
from ditlab.diffcore.tensor import Tensor

Coord = tuple[int, int]  # (parameter index, flat element index)


def grad_check(
    fn: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    coords: Optional[Sequence[Coord]] = None,
    floor: float = 1e-8,
) -> float:
    """Max relative error between tape and central-difference gradients.

    fn is called as fn(params) and must return a scalar Tensor.  params are
    perturbed in place and restored.  When coords is given, only those
    coordinates are differenced (the analytic pass still covers everything);
    otherwise every coordinate of every parameter is checked.

    Relative error per coordinate: |a - f| / max(|a|, |f|, floor).  floor is
    the gradient magnitude below which agreement is judged on an absolute
    scale; difference quotients on an O(1) loss carry ~1e-11 of rounding
    noise, so coordinates with gradients near that level would otherwise
    report large relative errors that mean nothing.
    """
    for i, p in enumerate(params):
        if p.dtype != np.float64:
            raise TypeError(
                f"grad_check requires float64 parameters, params[{i}] is {p.dtype}"
            )
        if not p.requires_grad:
            raise ValueError(f"params[{i}] does not require grad")
        p.zero_grad()

    out = fn(params)
    if out.size != 1:
        raise ValueError(f"fn must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    if coords is None:
        coords = [
            (i, j) for i, p in enumerate(params) for j in range(p.size)
        ]

    worst = 0.0
    for i, j in coords:
        # index without reshape: a flat view does not exist for every layout
        idx = np.unravel_index(j, params[i].shape)
        x0 = params[i].data[idx]
        h = step * max(1.0, abs(x0))
        params[i].data[idx] = x0 + h
        f_plus = fn(params).item()
        params[i].data[idx] = x0 - h
        f_minus = fn(params).item()
        params[i].data[idx] = x0
        fd = (f_plus - f_minus) / (2.0 * h)
        a = analytic[i].reshape(-1)[j]
        err = abs(a - fd) / max(abs(a), abs(fd), floor)
        worst = max(worst, err)
    return worst


def stratified_coords(
    params: Sequence[Tensor], per_tensor: int, seed: int
) -> list[Coord]:
    """A deterministic coordinate sample that touches every parameter tensor.

    Used to keep whole-model checks fast: per_tensor coordinates (or all of
    them, for small tensors) are drawn without replacement from each
    parameter.
    """
    coords: list[Coord] = []
    for i, p in enumerate(params):
        if p.size <= per_tensor:
            coords.extend((i, j) for j in range(p.size))
        else:
            gen = rngmod.keyed_generator(seed, rngmod.INIT, i)
            picks = gen.choice(p.size, size=per_tensor, replace=False)
            coords.extend((i, int(j)) for j in sorted(picks))
    return coords
