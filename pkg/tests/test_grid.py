"""
Tests for the flow-grid algebra: coarsening, upsampling, normalization,
redistribution and the structural constraint.
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
import pytest

from flowmag import grid
from flowmag.errors import DomainError, ShapeError


class TestCoarsen:
    """Block-sum aggregation of fine maps."""

    def test_two_by_two_example(self):
        fine = np.array(
            [
                [1.0, 2.0, 0.0, 0.0],
                [3.0, 4.0, 0.0, 5.0],
                [1.0, 1.0, 2.0, 2.0],
                [1.0, 1.0, 2.0, 2.0],
            ]
        )
        np.testing.assert_array_equal(grid.coarsen(fine, 2), [[10.0, 5.0], [4.0, 8.0]])

    def test_scale_three_preserves_total(self, rng):
        fine = rng.uniform(0, 10, size=(6, 9))
        coarse = grid.coarsen(fine, 3)
        assert coarse.shape == (2, 3)
        assert coarse.sum() == pytest.approx(fine.sum())

    def test_not_divisible_raises_shape_error(self):
        with pytest.raises(ShapeError) as exc_info:
            grid.coarsen(np.ones((5, 4)), 2)
        assert exc_info.value.axis == "height"
        assert "[flow-grid]" in str(exc_info.value)

    def test_negative_entries_rejected(self):
        with pytest.raises(DomainError):
            grid.coarsen(-np.ones((2, 2)), 2)

    @pytest.mark.parametrize("scale", [1, 0, 2.5, True])
    def test_invalid_scale(self, scale):
        with pytest.raises(DomainError):
            grid.coarsen(np.ones((4, 4)), scale)


class TestUpsampleAndNormalize:
    """Nearest-neighbour upsampling and per-block normalization."""

    def test_nn_upsample_replicates_blocks(self):
        up = grid.nn_upsample([[1.0, 2.0]], 2)
        np.testing.assert_array_equal(up, [[1.0, 1.0, 2.0, 2.0], [1.0, 1.0, 2.0, 2.0]])

    def test_coarsen_of_upsample_is_n_squared_times(self, rng):
        coarse = rng.uniform(0, 5, size=(3, 2))
        np.testing.assert_allclose(grid.coarsen(grid.nn_upsample(coarse, 4), 4), 16 * coarse)

    def test_n2_normalize_blocks_sum_to_one(self, rng):
        raw = rng.uniform(0.1, 3.0, size=(8, 8))
        dist = grid.n2_normalize(raw, 2)
        sums = grid.coarsen(dist, 2)
        # eps shrinks each block sum by eps / block total
        assert np.all(np.abs(sums - 1.0) <= 1e-6)

    def test_n2_normalize_matches_blockwise_loop(self, rng):
        for _ in range(1000):
            n = int(rng.integers(2, 5))
            raw = rng.uniform(0.0, 10.0, size=(n * rng.integers(1, 4), n * rng.integers(1, 4)))
            expected = np.empty_like(raw)
            for i in range(0, raw.shape[0], n):
                for j in range(0, raw.shape[1], n):
                    block = raw[i : i + n, j : j + n]
                    expected[i : i + n, j : j + n] = block / (sum(block.ravel()) + 1e-7)
            np.testing.assert_allclose(grid.n2_normalize(raw, n, eps=1e-7), expected, rtol=0, atol=1e-6)

    def test_n2_normalize_zero_block_stays_zero(self):
        raw = np.zeros((2, 2))
        np.testing.assert_array_equal(grid.n2_normalize(raw, 2), np.zeros((2, 2)))
        np.testing.assert_array_equal(grid.n2_normalize(raw, 2, eps=0.0), np.zeros((2, 2)))

    def test_n2_normalize_rejects_negative(self):
        with pytest.raises(DomainError):
            grid.n2_normalize(np.array([[1.0, -1.0], [0.0, 0.0]]), 2)

    def test_uniform_distribution(self):
        dist = grid.uniform_distribution(2, 3, 2)
        assert dist.shape == (4, 6)
        np.testing.assert_allclose(grid.coarsen(dist, 2), np.ones((2, 3)))


class TestDistribute:
    """Redistribution keeps every superregion total."""

    def test_distribute_reproduces_coarse(self, rng):
        coarse = rng.uniform(0, 1000, size=(4, 4))
        dist = grid.n2_normalize(rng.uniform(0.01, 1.0, size=(16, 16)), 4, eps=0.0)
        fine = grid.distribute(coarse, dist, 4)
        s = 1e-7
        violation = np.abs(coarse - grid.coarsen(fine, 4))
        assert np.all(violation <= 1e-5 + s * coarse)

    def test_uniform_distribution_gives_mean_partition(self):
        coarse = np.array([[8.0, 4.0]])
        fine = grid.distribute(coarse, grid.uniform_distribution(1, 2, 2), 2)
        np.testing.assert_array_equal(fine, [[2.0, 2.0, 1.0, 1.0], [2.0, 2.0, 1.0, 1.0]])
        assert grid.structural_violation(coarse, fine, 2) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            grid.distribute(np.ones((2, 2)), np.ones((3, 4)), 2)

    def test_negative_distribution(self):
        dist = grid.uniform_distribution(1, 1, 2)
        dist[0, 0] = -0.25
        with pytest.raises(DomainError):
            grid.distribute(np.ones((1, 1)), dist, 2)


class TestStructuralViolation:
    def test_zero_for_aggregated_map(self, rng):
        fine = rng.uniform(0, 3, size=(4, 6))
        assert grid.structural_violation(grid.coarsen(fine, 2), fine, 2) == 0.0

    def test_reports_max_absolute_gap(self):
        coarse = np.array([[10.0, 5.0]])
        fine = np.array([[2.5, 2.5, 1.0, 1.0], [2.5, 2.5, 1.0, 1.0]])
        assert grid.structural_violation(coarse, fine, 2) == pytest.approx(1.0)

    def test_relative_violation_uses_unit_floor(self):
        coarse = np.array([[0.5, 100.0]])
        fine = np.zeros((2, 4))
        np.testing.assert_allclose(grid.relative_violation(coarse, fine, 2), [[0.5, 1.0]])

    def test_shape_checked(self):
        with pytest.raises(ShapeError):
            grid.structural_violation(np.ones((2, 2)), np.ones((4, 6)), 2)
