"""Helpers to move between parameter collections and a single flat vector.

Both directions are differentiable, which is what lets a whole-model gradient
check treat the network as one function of one vector.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ditlab.diffcore import ops
from ditlab.diffcore.tensor import Tensor


def pack_arrays(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate raw arrays into one 1-D vector (no tape)."""
    if not arrays:
        return np.zeros(0)
    return np.concatenate([np.asarray(a).reshape(-1) for a in arrays])


def pack_tensors(tensors: Sequence[Tensor]) -> Tensor:
    """Differentiably flatten tensors into one 1-D tensor."""
    flat = [ops.reshape(t, (-1,)) for t in tensors]
    if len(flat) == 1:
        return flat[0]
    return ops.concat(flat, axis=0)


def unpack_flat(flat: Tensor, shapes: Sequence[tuple]) -> list[Tensor]:
    """Differentiably split a 1-D tensor back into the given shapes."""
    sizes = [int(np.prod(s, dtype=np.int64)) for s in shapes]
    total = sum(sizes)
    if flat.ndim != 1 or flat.size != total:
        raise ValueError(
            f"flat vector of size {flat.size} cannot fill shapes totalling {total}"
        )
    pieces = ops.split(flat, 0, sizes)
    return [ops.reshape(p, tuple(s)) for p, s in zip(pieces, shapes)]
