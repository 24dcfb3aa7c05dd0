"""
Flow-grid algebra.

Pure, differentiation-free operations on 2-D flow maps held as float64 numpy
arrays: coarsening, nearest-neighbour upsampling, per-block normalization,
redistribution and structural-constraint checking. Blocks are 0-based:
superregion (i, j) owns fine rows [i*N, (i+1)*N) and columns [j*N, (j+1)*N).
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

import numpy as np
import numpy.typing as npt

from .errors import DomainError, ShapeError

FlowMap = npt.NDArray[np.float64]
DistributionMap = npt.NDArray[np.float64]

DEFAULT_EPS = 1e-7

_MODULE = "flow-grid"


def check_scale(scale: int) -> int:
    """Validate an upscaling factor N (integer >= 2)."""
    if isinstance(scale, bool) or int(scale) != scale or scale < 2:
        raise DomainError(_MODULE, f"scale factor must be an integer >= 2, got {scale!r}")
    return int(scale)


def as_flow_map(values: npt.ArrayLike, name: str = "flow map") -> FlowMap:
    """Convert to a float64 2-D array and check the FlowMap invariants."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(_MODULE, f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(_MODULE, f"{name} must be at least 1x1, got shape {arr.shape}")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise DomainError(_MODULE, f"{name} entries must be finite and >= 0")
    return arr


def _check_divisible(shape: tuple, scale: int, name: str) -> None:
    for axis, size in zip(("height", "width"), shape[-2:]):
        if size % scale:
            raise ShapeError(
                _MODULE, f"{name} {axis} {size} is not divisible by scale {scale}", axis=axis
            )


def block_sum(values: npt.NDArray[np.floating], scale: int) -> npt.NDArray[np.floating]:
    """Sum-pool the last two axes over non-overlapping scale x scale blocks."""
    *lead, h, w = values.shape
    blocks = values.reshape(*lead, h // scale, scale, w // scale, scale)
    # Along each block row first, then down the rows: with N=2 four equal
    # quarters sum back to their total exactly.
    return blocks.sum(axis=-1).sum(axis=-2)


def replicate(values: npt.NDArray[np.floating], scale: int) -> npt.NDArray[np.floating]:
    """Nearest-neighbour upsample the last two axes by scale."""
    return np.repeat(np.repeat(values, scale, axis=-2), scale, axis=-1)


def coarsen(fine: npt.ArrayLike, scale: int) -> FlowMap:
    """
    Aggregate a fine map into superregion totals.

    Entry (i, j) of the result is the sum of the N x N block of fine entries
    it owns, so a (N*I, N*J) map becomes (I, J).
    """
    scale = check_scale(scale)
    fine = as_flow_map(fine, "fine map")
    _check_divisible(fine.shape, scale, "fine map")
    return block_sum(fine, scale)


def nn_upsample(coarse: npt.ArrayLike, scale: int) -> FlowMap:
    """Replicate every coarse entry over its N x N block."""
    scale = check_scale(scale)
    return replicate(as_flow_map(coarse, "coarse map"), scale)


def n2_normalize(raw: npt.ArrayLike, scale: int, eps: float = DEFAULT_EPS) -> DistributionMap:
    """
    Divide each entry by its N x N block sum plus eps.

    Sum-pool, nearest-neighbour upsample the sums, element-wise divide.
    Inputs must be nonnegative; the network guarantees this with a ReLU.
    """
    scale = check_scale(scale)
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(_MODULE, f"raw map must be 2-D, got shape {arr.shape}")
    if np.any(arr < 0):
        raise DomainError(_MODULE, "n2_normalize input has negative entries")
    if eps < 0:
        raise DomainError(_MODULE, f"eps must be >= 0, got {eps}")
    _check_divisible(arr.shape, scale, "raw map")
    denom = replicate(block_sum(arr, scale), scale) + eps
    # eps == 0 over an all-zero block would be 0/0; such blocks stay zero.
    out = np.zeros_like(arr)
    np.divide(arr, denom, out=out, where=denom > 0)
    return out


def distribute(coarse: npt.ArrayLike, dist: npt.ArrayLike, scale: int) -> FlowMap:
    """Allocate each superregion total over its block: upsample(coarse) * dist."""
    scale = check_scale(scale)
    coarse = as_flow_map(coarse, "coarse map")
    dist = np.asarray(dist, dtype=np.float64)
    expected = (coarse.shape[0] * scale, coarse.shape[1] * scale)
    if dist.shape != expected:
        raise ShapeError(
            _MODULE, f"distribution shape {dist.shape} does not match expected {expected}"
        )
    if np.any(dist < 0):
        raise DomainError(_MODULE, "distribution map has negative entries")
    return replicate(coarse, scale) * dist


def structural_violation(coarse: npt.ArrayLike, fine: npt.ArrayLike, scale: int) -> float:
    """Max over superregions of |coarse - block sum of fine|; 0 iff every block sums to its superregion."""
    scale = check_scale(scale)
    coarse = np.asarray(coarse, dtype=np.float64)
    fine = np.asarray(fine, dtype=np.float64)
    if coarse.ndim != 2 or fine.shape != (coarse.shape[0] * scale, coarse.shape[1] * scale):
        raise ShapeError(
            _MODULE,
            f"fine shape {fine.shape} is not scale {scale} times coarse shape {coarse.shape}",
        )
    return float(np.max(np.abs(coarse - block_sum(fine, scale))))


def relative_violation(coarse: npt.ArrayLike, fine: npt.ArrayLike, scale: int) -> FlowMap:
    """Per-superregion |coarse - block sum| / max(1, coarse)."""
    coarse = np.asarray(coarse, dtype=np.float64)
    residual = np.abs(coarse - block_sum(np.asarray(fine, dtype=np.float64), scale))
    return residual / np.maximum(1.0, coarse)


def uniform_distribution(height: int, width: int, scale: int) -> DistributionMap:
    """Proper distribution assigning 1/N^2 to every subregion of an (I, J) grid."""
    scale = check_scale(scale)
    return np.full((height * scale, width * scale), 1.0 / scale**2)
