"""Numpy-backed tensors with reverse-mode autodiff, plus serialization.

The tape records only the primitives the transformer actually needs; each op
lives in ``ops`` with its hand-written vector-Jacobian product, and
``gradcheck`` verifies any composition of them against central differences.
``io`` provides the named-tensor container used for checkpoints and cached
statistics.
"""

from ditlab.diffcore.tensor import (
    Tensor,
    TapeNode,
    backward,
    no_grad,
    grad_enabled,
    debug_checks,
    set_debug_checks,
)
from ditlab.diffcore import ops
from ditlab.diffcore.gradcheck import grad_check, stratified_coords
from ditlab.diffcore.io import save_tensors, load_tensors
from ditlab.diffcore.flatten import pack_tensors, unpack_flat, pack_arrays

__all__ = [
    "Tensor",
    "TapeNode",
    "backward",
    "no_grad",
    "grad_enabled",
    "debug_checks",
    "set_debug_checks",
    "ops",
    "grad_check",
    "stratified_coords",
    "save_tensors",
    "load_tensors",
    "pack_tensors",
    "unpack_flat",
    "pack_arrays",
]
