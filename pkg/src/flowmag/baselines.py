"""
Heuristic baselines: Mean partition and Historical Average (HA).

Both distribute every superregion's flow over its subregions with a fixed
per-block distribution, so the structural constraint holds up to rounding.
"""

# Copyright 2025 Flowmag Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import numpy.typing as npt

from . import grid
from .data import read_grids, write_grids
from .errors import DomainError, ParseError, ShapeError

_MODULE = "baselines"


# Upper bound on corner corrections; a handful is typical.
_MAX_REFINE = 64


def mean_partition(coarse: npt.ArrayLike, scale: int) -> grid.FlowMap:
    """
    Give every subregion 1/N^2 of its superregion's flow.

    The bottom-right cell of each block absorbs the rounding error, so the
    block sums reproduce `coarse` exactly in floating point.
    """
    scale = grid.check_scale(scale)
    coarse = grid.as_flow_map(coarse, "coarse map")
    fine = grid.nn_upsample(coarse, scale) / scale**2
    corner = (slice(scale - 1, None, scale), slice(scale - 1, None, scale))
    for _ in range(_MAX_REFINE):
        residual = coarse - grid.block_sum(fine, scale)
        if not residual.any():
            break
        current = fine[corner]
        moved = current + residual
        # Residual below half an ulp of the cell: step one ulp toward it.
        stuck = (moved == current) & (residual != 0)
        moved[stuck] = np.nextafter(current[stuck], np.copysign(np.inf, residual[stuck]))
        fine[corner] = moved
    return fine


@dataclass(frozen=True)
class MeanPartition:
    scale: int
    name: str = "mean"

    def infer_batch(self, raw_coarse: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
        return np.stack([mean_partition(c, self.scale) for c in raw_coarse])


@dataclass(frozen=True)
class HAModel:
    """Per-block historical fractions; every block of `dist` sums to 1."""

    dist: grid.DistributionMap
    scale: int
    name: str = "ha"

    def infer(self, coarse: npt.ArrayLike) -> grid.FlowMap:
        return ha_infer(self, coarse)

    def infer_batch(self, raw_coarse: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
        return np.stack([ha_infer(self, c) for c in raw_coarse])

    def save(self, path: Union[str, Path]) -> None:
        """Store the distribution as a one-block grid file."""
        write_grids(path, self.dist[None])

    @classmethod
    def load(cls, path: Union[str, Path], scale: int) -> "HAModel":
        maps = read_grids(path)
        if maps.shape[0] != 1:
            raise ParseError(_MODULE, f"expected one distribution block, found {maps.shape[0]}", path, 1)
        dist = maps[0]
        sums = grid.block_sum(dist, grid.check_scale(scale))
        if not np.allclose(sums, 1.0, atol=1e-9):
            raise DomainError(_MODULE, f"{path} is not a proper distribution for scale {scale}")
        return cls(dist=dist, scale=scale)


def ha_fit(train_fine: Sequence[npt.ArrayLike], scale: int) -> HAModel:
    """
    Ratio-of-sums historical fractions.

    fraction(i', j') = sum_t fine_t(i', j') / sum_t blocksum_t; blocks that
    never carried flow fall back to the uniform 1/N^2.
    """
    scale = grid.check_scale(scale)
    if len(train_fine) == 0:
        raise DomainError(_MODULE, "HA needs at least one training map")
    maps = [grid.as_flow_map(f, "training map") for f in train_fine]
    shape = maps[0].shape
    for m in maps:
        if m.shape != shape:
            raise ShapeError(_MODULE, f"training maps differ in shape: {shape} vs {m.shape}")
    total = np.sum(np.stack(maps), axis=0)
    if shape[0] % scale or shape[1] % scale:
        raise ShapeError(_MODULE, f"training map shape {shape} not divisible by scale {scale}")

    denom = grid.replicate(grid.block_sum(total, scale), scale)
    dist = np.full(shape, 1.0 / scale**2)
    np.divide(total, denom, out=dist, where=denom > 0)
    empty = int(np.count_nonzero(grid.block_sum(total, scale) == 0))
    if empty:
        warnings.warn(f"HA: {empty} block(s) with zero historical flow use the uniform distribution", UserWarning)
    return HAModel(dist=dist, scale=scale)


def ha_infer(model: HAModel, coarse: npt.ArrayLike) -> grid.FlowMap:
    return grid.distribute(coarse, model.dist, model.scale)
