"""
Tests for external-factor encoding, the fusion subnet and CSV ingest.
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

from flowmag._nn import Tensor
from flowmag.config import ExternalConfig
from flowmag.errors import DomainError, ParseError, ShapeError
from flowmag.external import (
    ExternalEncoder,
    ExternalRecord,
    ExternalSubnet,
    check_record,
    continuous_matrix,
    encode_external,
    external_forward,
    read_externals_csv,
    write_externals_csv,
)


def _record(**overrides):
    values = dict(
        temperature=20.0,
        wind_speed=3.0,
        weather=2,
        holiday=0,
        weekend=1,
        day_of_week=5,
        hour_of_day=14,
    )
    values.update(overrides)
    return ExternalRecord(**values)


@pytest.fixture
def taxibj():
    return ExternalConfig.preset("taxibj", 4, 4, 2)


@pytest.fixture
def happyvalley():
    return ExternalConfig.preset("happyvalley", 4, 4, 2)


class TestSchema:
    """Schema presets and record validation."""

    def test_input_widths(self, taxibj, happyvalley):
        assert taxibj.input_width == 2 + 3 + 1 + 1 + 2 + 3
        assert happyvalley.input_width == taxibj.input_width + 1

    def test_weather_out_of_vocabulary(self, happyvalley):
        with pytest.raises(DomainError) as exc_info:
            check_record(_record(weather=8, ticket_price=100.0), happyvalley)
        assert "weather" in str(exc_info.value)

    def test_ticket_price_required_for_happyvalley(self, happyvalley):
        with pytest.raises(DomainError) as exc_info:
            check_record(_record(), happyvalley)
        assert "ticket_price" in str(exc_info.value)

    def test_temperature_outside_bounds(self, taxibj):
        with pytest.raises(DomainError):
            check_record(_record(temperature=60.0), taxibj)

    def test_continuous_features_min_max_scaled(self, taxibj):
        low, high = taxibj.temperature_bounds
        rows = continuous_matrix([_record(temperature=low), _record(temperature=high)], taxibj)
        np.testing.assert_allclose(rows[:, 0], [0.0, 1.0])


class TestEncoder:
    def test_encode_external_width(self, taxibj, rng):
        encoder = ExternalEncoder(taxibj, rng)
        e = encode_external(_record(), taxibj, encoder)
        assert e.shape == (taxibj.input_width,)

    def test_same_record_encodes_identically(self, taxibj, rng):
        encoder = ExternalEncoder(taxibj, rng)
        batch = encoder([_record(), _record()]).data
        np.testing.assert_array_equal(batch[0], batch[1])

    def test_empty_batch_rejected(self, taxibj, rng):
        with pytest.raises(DomainError):
            ExternalEncoder(taxibj, rng)([])


class TestFusionSubnet:
    """The subnet maps factors to coarse- and fine-resolution feature maps."""

    def test_output_shapes(self, taxibj, rng):
        subnet = ExternalSubnet(taxibj, rng)
        subnet.eval()
        coarse, fine = subnet([_record(), _record(hour_of_day=3)])
        assert coarse.shape == (2, 1, 4, 4)
        assert fine.shape == (2, 1, 8, 8)
        assert np.all(coarse.data >= 0) and np.all(fine.data >= 0)

    def test_eval_mode_is_deterministic(self, taxibj, rng):
        subnet = ExternalSubnet(taxibj, rng)
        e = subnet.encoder([_record(), _record()])
        a = external_forward(e, subnet, training=False)[0].data
        b = external_forward(e, subnet, training=False)[0].data
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("start_training", [True, False])
    def test_forward_leaves_mode_unchanged(self, taxibj, rng, start_training):
        subnet = ExternalSubnet(taxibj, rng)
        subnet.train(start_training)
        e = subnet.encoder([_record(), _record()])
        external_forward(e, subnet, training=not start_training)
        assert subnet.training is start_training
        assert subnet.dropout.training is start_training

    def test_zero_parameters_give_zero_maps(self, taxibj, rng):
        subnet = ExternalSubnet(taxibj, rng)
        for param in subnet.parameters():
            param.data = np.zeros_like(param.data)
        e = subnet.encoder([_record(), _record(hour_of_day=17, weekend=1)])
        coarse, fine = external_forward(e, subnet, training=False)
        np.testing.assert_array_equal(coarse.data, 0.0)
        np.testing.assert_array_equal(fine.data, 0.0)

    def test_width_mismatch(self, taxibj, rng):
        subnet = ExternalSubnet(taxibj, rng)
        with pytest.raises(ShapeError):
            subnet.fuse(Tensor(np.zeros((2, taxibj.input_width + 1), dtype=np.float32)))

    def test_single_vector_is_batched(self, taxibj, rng):
        subnet = ExternalSubnet(taxibj, rng)
        e = encode_external(_record(), taxibj, subnet.encoder)
        coarse, fine = external_forward(e, subnet, training=False)
        assert coarse.shape == (1, 1, 4, 4)
        assert fine.shape == (1, 1, 8, 8)


class TestCsv:
    """External-factor CSV files."""

    def test_write_then_read(self, tmp_path, happyvalley):
        rows = [
            ("2016-01-01T00:00:00", _record(weather=1, ticket_price=120.5)),
            ("2016-01-01T00:30:00", _record(temperature=-3.25, ticket_price=99.0)),
        ]
        path = tmp_path / "ext.csv"
        write_externals_csv(path, rows, with_ticket_price=True)
        assert read_externals_csv(path, happyvalley) == rows

    def test_missing_column(self, tmp_path):
        path = tmp_path / "ext.csv"
        path.write_text("timestamp,temperature\n2016-01-01,3.0\n")
        with pytest.raises(ParseError) as exc_info:
            read_externals_csv(path)
        assert exc_info.value.line == 1

    def test_bad_value_names_line(self, tmp_path, taxibj):
        path = tmp_path / "ext.csv"
        write_externals_csv(path, [("t0", _record()), ("t1", _record())])
        lines = path.read_text().splitlines()
        lines[2] = lines[2].replace(",14", ",99")
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError) as exc_info:
            read_externals_csv(path, taxibj)
        assert exc_info.value.line == 3
        assert str(path) in str(exc_info.value)
