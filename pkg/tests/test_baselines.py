"""
Tests for the Mean-partition and historical-average baselines.
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
from flowmag.baselines import HAModel, MeanPartition, ha_fit, ha_infer, mean_partition
from flowmag.data import write_grids
from flowmag.errors import DomainError, ParseError, ShapeError
from flowmag.eval import evaluate


class TestMeanPartition:
    """Uniform split of every superregion."""

    def test_example(self):
        np.testing.assert_array_equal(
            mean_partition([[8.0]], 2), [[2.0, 2.0], [2.0, 2.0]]
        )

    @pytest.mark.parametrize("scale", [2, 3, 4, 5, 6])
    def test_residual_is_exactly_zero(self, rng, scale):
        for _ in range(20):
            coarse = rng.uniform(0, 1e4, size=(6, 5)) * 10.0 ** rng.integers(-3, 4)
            assert grid.structural_violation(coarse, mean_partition(coarse, scale), scale) == 0.0

    def test_cells_stay_uniform(self, rng):
        coarse = rng.uniform(0, 1e4, size=(4, 4))
        np.testing.assert_allclose(mean_partition(coarse, 5), grid.nn_upsample(coarse, 5) / 25, rtol=1e-12)

    def test_batch(self, rng):
        coarse = rng.uniform(0, 10, size=(3, 2, 2))
        out = MeanPartition(2).infer_batch(coarse)
        assert out.shape == (3, 4, 4)
        np.testing.assert_array_equal(out[1], mean_partition(coarse[1], 2))


class TestHistoricalAverage:
    """Ratio-of-sums fractions fitted on training maps."""

    def test_stationary_allocation_is_recovered(self, rng):
        dist = grid.n2_normalize(rng.uniform(0.1, 1.0, size=(4, 4)), 2, eps=0.0)
        train = [grid.distribute(c, dist, 2) for c in rng.uniform(10, 100, size=(5, 2, 2))]
        model = ha_fit(train, 2)
        np.testing.assert_allclose(model.dist, dist, atol=1e-12)
        coarse = np.array([[40.0, 10.0], [0.0, 7.0]])
        np.testing.assert_allclose(ha_infer(model, coarse), grid.distribute(coarse, dist, 2), atol=1e-9)

    def test_ratio_of_sums(self):
        a = np.array([[1.0, 3.0], [0.0, 0.0]])
        b = np.array([[3.0, 1.0], [2.0, 2.0]])
        model = ha_fit([a, b], 2)
        np.testing.assert_allclose(model.dist, [[4 / 12, 4 / 12], [2 / 12, 2 / 12]])

    def test_zero_mass_block_falls_back_to_uniform(self):
        maps = [np.zeros((2, 4)) for _ in range(2)]
        maps[0][:, :2] = 1.0
        with pytest.warns(UserWarning, match="zero historical flow"):
            model = ha_fit(maps, 2)
        np.testing.assert_allclose(model.dist[:, 2:], 0.25)

    def test_empty_training_set(self):
        with pytest.raises(DomainError):
            ha_fit([], 2)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ha_fit([np.ones((4, 4)), np.ones((4, 2))], 2)

    def test_save_and_load(self, tmp_path, rng):
        model = ha_fit([rng.uniform(0, 5, size=(4, 6))], 2)
        path = tmp_path / "ha.txt"
        model.save(path)
        loaded = HAModel.load(path, 2)
        np.testing.assert_array_equal(loaded.dist, model.dist)

    def test_load_rejects_improper_distribution(self, tmp_path):
        path = tmp_path / "ha.txt"
        write_grids(path, np.ones((1, 2, 2)))
        with pytest.raises(DomainError):
            HAModel.load(path, 2)

    def test_load_rejects_several_blocks(self, tmp_path):
        path = tmp_path / "ha.txt"
        write_grids(path, np.full((2, 2, 2), 0.25))
        with pytest.raises(ParseError):
            HAModel.load(path, 2)

    def test_stationary_dataset_rmse(self, stationary_dataset):
        from flowmag.data import split_filter

        train, _, test = split_filter(stationary_dataset)
        report = evaluate(ha_fit(list(train.fine), 2), test)
        assert report.rmse <= 1e-6
        mean_report = evaluate(MeanPartition(2), test)
        assert mean_report.structural_residual == 0.0
