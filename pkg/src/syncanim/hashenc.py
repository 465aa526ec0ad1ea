"""Multiresolution 2-D hash encoding and the tri-plane composition.

Each level owns a table of trainable feature entries; a query point is
scaled to the level's grid, its four surrounding vertices are hashed into
the table, and the entries are bilinearly blended.  Gradients flow to
exactly the four touched entries per level.  Levels are processed in a
Python loop on purpose: the per-level index tensors stay small enough to
be cache-resident, which is much faster on CPU than one fused gather.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

# Large odd multipliers for the coordinate hash (one per axis).
HASH_PRIME_X = 2654435761
HASH_PRIME_Y = 805459861

DEFAULT_LEVELS = 14
DEFAULT_FEATS_PER_LEVEL = 1
DEFAULT_TABLE_SIZE = 2**14
DEFAULT_BASE_RES = 16
DEFAULT_MAX_RES = 512


def level_resolutions(levels: int, base_res: int, max_res: int) -> list[int]:
    """Geometric ladder from base_res to max_res inclusive."""
    if levels == 1:
        return [base_res]
    growth = (max_res / base_res) ** (1.0 / (levels - 1))
    return [int(math.floor(base_res * growth**l)) for l in range(levels)]


class HashGrid2D(nn.Module):
    def __init__(
        self,
        levels: int = DEFAULT_LEVELS,
        feats_per_level: int = DEFAULT_FEATS_PER_LEVEL,
        table_size: int = DEFAULT_TABLE_SIZE,
        base_res: int = DEFAULT_BASE_RES,
        max_res: int = DEFAULT_MAX_RES,
        init_scale: float = 1e-4,
        dtype: torch.dtype = torch.float32,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if table_size & (table_size - 1):
            raise ValueError("table_size must be a power of two")
        self.levels = levels
        self.feats_per_level = feats_per_level
        self.table_size = table_size
        self.resolutions = level_resolutions(levels, base_res, max_res)
        init = torch.empty((levels, table_size, feats_per_level), dtype=dtype)
        init.uniform_(-init_scale, init_scale, generator=generator)
        self.tables = nn.Parameter(init)

    @property
    def out_dim(self) -> int:
        return self.levels * self.feats_per_level

    def forward(self, p: torch.Tensor) -> torch.Tensor:
        """Encode (N, 2) points in [0,1]^2 to (N, levels * feats) features."""
        p = p.clamp(0.0, 1.0)
        mask = self.table_size - 1
        cols = []
        for l, res in enumerate(self.resolutions):
            xy = p * res
            xi = xy.floor().long()
            frac = xy - xi.to(p.dtype)
            x0, y0 = xi[:, 0], xi[:, 1]
            fx, fy = frac[:, 0], frac[:, 1]
            hx0, hx1 = x0 * HASH_PRIME_X, (x0 + 1) * HASH_PRIME_X
            hy0, hy1 = y0 * HASH_PRIME_Y, (y0 + 1) * HASH_PRIME_Y
            row = self.tables[l]
            v00 = row[(hx0 ^ hy0) & mask]
            v10 = row[(hx1 ^ hy0) & mask]
            v01 = row[(hx0 ^ hy1) & mask]
            v11 = row[(hx1 ^ hy1) & mask]
            wx0, wy0 = (1.0 - fx).unsqueeze(1), (1.0 - fy).unsqueeze(1)
            wx1, wy1 = fx.unsqueeze(1), fy.unsqueeze(1)
            cols.append(v00 * wx0 * wy0 + v10 * wx1 * wy0 + v01 * wx0 * wy1 + v11 * wx1 * wy1)
        return torch.cat(cols, dim=1)

    def vertex_entry(self, level: int, ix: int, iy: int) -> torch.Tensor:
        """Stored entry for an integer vertex (used by interpolation tests)."""
        idx = ((ix * HASH_PRIME_X) ^ (iy * HASH_PRIME_Y)) & (self.table_size - 1)
        return self.tables[level, idx]


def hash_encode_2d(p: torch.Tensor, grid: HashGrid2D) -> torch.Tensor:
    return grid(p)


class TriPlaneEncoder(nn.Module):
    """Three 2-D hash grids over the XY, YZ and XZ projections of a 3-D point."""

    def __init__(self, dtype: torch.dtype = torch.float32,
                 generator: torch.Generator | None = None, **grid_kwargs):
        super().__init__()
        self.grid_xy = HashGrid2D(dtype=dtype, generator=generator, **grid_kwargs)
        self.grid_yz = HashGrid2D(dtype=dtype, generator=generator, **grid_kwargs)
        self.grid_xz = HashGrid2D(dtype=dtype, generator=generator, **grid_kwargs)

    @property
    def out_dim(self) -> int:
        return 3 * self.grid_xy.out_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Encode (N, 3) points in the unit cube; plane order XY, YZ, XZ."""
        return torch.cat(
            [
                self.grid_xy(x[:, (0, 1)]),
                self.grid_yz(x[:, (1, 2)]),
                self.grid_xz(x[:, (0, 2)]),
            ],
            dim=1,
        )


def triplane_encode(x: torch.Tensor, enc: TriPlaneEncoder) -> torch.Tensor:
    return enc(x)
