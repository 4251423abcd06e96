"""Fixed (non-learned) embeddings: 2-D positions and the timestep sinusoid.

Both use the same geometric frequency ladder with maximum period 10^4 and
interleave sin/cos per frequency.  Values are computed in float64 and cast at
the point of use.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from ditlab.errors import ConfigError

MAX_PERIOD = 10_000.0


def _frequency_ladder(num: int) -> np.ndarray:
    """num angular frequencies decaying geometrically from 1 to 1/MAX_PERIOD."""
    return np.exp(-np.log(MAX_PERIOD) * np.arange(num, dtype=np.float64) / num)


def _sincos(positions: np.ndarray, num_pairs: int) -> np.ndarray:
    """Interleaved [sin, cos] pairs per frequency: shape (*positions, 2*num_pairs)."""
    angles = positions[..., None] * _frequency_ladder(num_pairs)
    out = np.empty(angles.shape[:-1] + (2 * num_pairs,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


@lru_cache(maxsize=32)
def pos_embed_2d(grid: int, dim: int) -> np.ndarray:
    """Fixed embedding for a grid x grid token layout, shape (grid^2, dim).

    The first dim/2 channels encode the row index, the rest the column,
    following raster order (row-major) over the grid.
    """
    if dim % 4 != 0:
        raise ConfigError(f"pos_embed_2d needs dim divisible by 4, got {dim}")
    rows, cols = np.meshgrid(
        np.arange(grid, dtype=np.float64),
        np.arange(grid, dtype=np.float64),
        indexing="ij",
    )
    quarter = dim // 4
    emb = np.concatenate(
        [_sincos(rows.reshape(-1), quarter), _sincos(cols.reshape(-1), quarter)],
        axis=-1,
    )
    emb.flags.writeable = False
    return emb


def timestep_frequency(t: np.ndarray, dim: int) -> np.ndarray:
    """Raw sinusoidal timestep features, shape (len(t), dim).

    t holds nonnegative step values (fed as-is, so respaced sampling can pass
    original-schedule steps).  At t=0 the sin channels are 0 and cos are 1.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 1:
        t = t.reshape(-1)
    if t.size and t.min() < 0:
        raise ValueError(f"timesteps must be nonnegative, got min {t.min()}")
    if dim % 2 != 0:
        raise ConfigError(f"timestep embedding dim must be even, got {dim}")
    return _sincos(t, dim // 2)
