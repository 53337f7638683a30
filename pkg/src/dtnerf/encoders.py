"""Multiresolution 2-D hash grids, triplane composition and frequency encoding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import EncoderConfig

PLANES = ("XY", "YZ", "XZ")
PLANE_AXES = {"XY": (0, 1), "YZ": (1, 2), "XZ": (0, 2)}
PRIME_U = 1
PRIME_V = 2654435761


def level_resolutions(cfg: EncoderConfig) -> list[int]:
    """Vertices per side for each level, floor(N_min * b**l)."""
    if min(cfg.n_levels, cfg.features_per_level, cfg.base_resolution, cfg.log2_table_size) <= 0:
        raise ValueError("encoder sizes must be positive")
    if cfg.per_level_scale <= 1.0 and cfg.n_levels > 1:
        raise ValueError("per_level_scale must exceed 1")
    res = [int(math.floor(cfg.base_resolution * cfg.per_level_scale ** l)) for l in range(cfg.n_levels)]
    if min(res) < 2:
        raise ValueError("every level needs at least 2 vertices per side")
    return res


def hash_index(u, v, resolution: int, table_size: int):
    """Row of corner (u, v): dense ``v * res + u`` when the grid fits, else the XOR-prime hash.

    Works on python ints and on integer tensors / arrays.
    """
    if resolution * resolution <= table_size:
        return v * resolution + u
    return ((u * PRIME_U) ^ (v * PRIME_V)) % table_size


@dataclass
class HashGrid2D:
    """Static layout of one plane's levels inside a single stacked parameter table."""

    config: EncoderConfig

    def __post_init__(self):
        self.resolutions = level_resolutions(self.config)
        self.table_size = 1 << self.config.log2_table_size
        self.rows = [min(r * r, self.table_size) for r in self.resolutions]
        self.dense = [r * r <= self.table_size for r in self.resolutions]
        self.offsets = np.concatenate([[0], np.cumsum(self.rows)]).astype(np.int64)
        # vertex -> table row for every level, so the hash is evaluated once here, not per query
        luts, vert_off = [], [0]
        for l, r in enumerate(self.resolutions):
            v, u = np.divmod(np.arange(r * r, dtype=np.int64), r)
            luts.append(hash_index(u, v, r, self.table_size) + self.offsets[l])
            vert_off.append(vert_off[-1] + r * r)
        self._lut = torch.from_numpy(np.concatenate(luts))
        self._vert_off = torch.tensor(vert_off[:-1], dtype=torch.int64)
        self._res_t = torch.tensor(self.resolutions, dtype=torch.int64)
        self._corner_delta = torch.stack([torch.zeros_like(self._res_t), torch.ones_like(self._res_t),
                                          self._res_t, self._res_t + 1], dim=-1)   # (L, 4)

    @property
    def n_rows(self) -> int:
        return int(self.offsets[-1])

    @property
    def out_dim(self) -> int:
        return self.config.n_levels * self.config.features_per_level

    def init_table(self, generator: torch.Generator | None = None, dtype=torch.float32) -> torch.Tensor:
        s = self.config.init_scale
        t = torch.rand(self.n_rows, self.config.features_per_level, generator=generator, dtype=torch.float64)
        return ((t * 2 - 1) * s).to(dtype)

    def corners(self, uv: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Row indices (P, L, 4) into the stacked table and bilinear weights (P, L, 4).

        Corner order is (0,0), (1,0), (0,1), (1,1).
        """
        uv = uv.clamp(0.0, 1.0)
        res = self._res_t
        pos = uv[:, None, :] * (res - 1).to(uv.dtype)[None, :, None]          # (P, L, 2)
        # u == 1 lands in the last cell with frac 1, not past the grid
        cell = torch.minimum(pos.detach().floor(), (res - 2).to(uv.dtype)[None, :, None])
        frac = pos - cell
        ci = cell.long()
        base = self._vert_off + ci[..., 1] * res + ci[..., 0]                 # (P, L)
        idx = self._lut[base[..., None] + self._corner_delta]                 # (P, L, 4)
        fu, fv = frac[..., 0], frac[..., 1]
        gu, gv = 1 - fu, 1 - fv
        w = torch.stack([gu * gv, fu * gv, gu * fv, fu * fv], dim=-1)
        return idx, w


def plane_encode(table: torch.Tensor, grid: HashGrid2D, uv: torch.Tensor) -> torch.Tensor:
    """Bilinearly interpolated features of every level, concatenated: (P, 2) -> (P, L*C)."""
    idx, w = grid.corners(uv)
    P, L, _ = idx.shape
    feats = table.index_select(0, idx.reshape(-1)).reshape(P, L, 4, -1)
    out = (feats * w[..., None]).sum(dim=2)
    return out.reshape(P, -1)


def clamp_unit(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Clamp points into the unit cube; also return which ones were outside."""
    outside = ((x < 0) | (x > 1)).any(dim=-1)
    return x.clamp(0.0, 1.0), outside


def triplane_encode(tables: dict[str, torch.Tensor] | nn.ParameterDict, grid: HashGrid2D,
                    x: torch.Tensor) -> torch.Tensor:
    """Concatenate XY, YZ and XZ plane features of points x in [0,1]^3 -> (P, 3*L*C)."""
    x, _ = clamp_unit(x)
    parts = []
    for plane in PLANES:
        a, b = PLANE_AXES[plane]
        parts.append(plane_encode(tables[plane], grid, x[:, [a, b]]))
    return torch.cat(parts, dim=-1)


class TriplaneHashEncoder(nn.Module):
    def __init__(self, config: EncoderConfig, generator: torch.Generator | None = None,
                 dtype=torch.float32):
        super().__init__()
        self.grid = HashGrid2D(config)
        self.tables = nn.ParameterDict(
            {p: nn.Parameter(self.grid.init_table(generator, dtype)) for p in PLANES})

    @property
    def out_dim(self) -> int:
        return 3 * self.grid.out_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return triplane_encode(self.tables, self.grid, x)


def frequency_encode(s: torch.Tensor, n_freqs: int) -> torch.Tensor:
    """Per component: [sin(2^k pi s), cos(2^k pi s)] for k < n_freqs, pairs interleaved.

    (..., K) -> (..., K * 2 * n_freqs)
    """
    if n_freqs < 1:
        raise ValueError("n_freqs must be >= 1")
    freqs = (2.0 ** torch.arange(n_freqs, dtype=s.dtype)) * math.pi
    ang = s[..., :, None] * freqs                                  # (..., K, F)
    out = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)    # (..., K, F, 2)
    return out.reshape(*s.shape[:-1], -1)
