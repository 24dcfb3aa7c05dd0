"""
Tests for the inference network: construction, forward shapes, the
structural identity, parameter counts, persistence and gradients.
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
from flowmag._nn import TOLERANCE, Tensor
from flowmag.config import ExternalConfig, UrbanFMConfig
from flowmag.errors import ConfigError, ShapeError
from flowmag.model import (
    build,
    end_to_end_gradcheck,
    load_model,
    param_count,
    param_count_closed_form,
    predict,
    random_record,
    save_model,
)


def _cfg(variant="ne", m=1, f=8, size=4, scale=2, **kw):
    external = ExternalConfig.preset("taxibj", size, size, scale).model_copy(update={"hidden": 16})
    return UrbanFMConfig(
        m=m,
        f=f,
        scale=scale,
        height=size,
        width=size,
        variant=variant,
        external=external if variant == "full" else None,
        **kw,
    )


def _table4_cfg(m, f):
    return UrbanFMConfig(m=m, f=f, scale=4, height=32, width=32, external=ExternalConfig.preset("taxibj", 32, 32, 4))


class TestBuild:
    """Construction from (config, seed)."""

    def test_scale_four_has_two_subpixel_blocks(self):
        model = build(_cfg(scale=4))
        assert [block.factor for block in model.upsample] == [2, 2]

    def test_scale_six_factors_in_order(self):
        model = build(_cfg(size=2, scale=6))
        assert [block.factor for block in model.upsample] == [2, 3]

    def test_scale_two_has_one_block(self):
        assert len(build(_cfg()).upsample) == 1

    def test_scale_one_rejected(self):
        with pytest.raises(ConfigError):
            build(_cfg(scale=1))

    def test_full_requires_external(self):
        with pytest.raises(ConfigError):
            build(UrbanFMConfig(m=1, f=4, scale=2, height=4, width=4, variant="full"))

    def test_same_seed_identical_parameters(self):
        a, b = build(_cfg(), seed=3), build(_cfg(), seed=3)
        for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data, err_msg=name)

    def test_full_and_ne_differ_by_external_names(self):
        full = {n for n, _ in build(_cfg("full")).named_parameters()}
        ne = {n for n, _ in build(_cfg("ne")).named_parameters()}
        extra = full - ne
        assert extra and all(n.startswith("external.") for n in extra)
        # the two fusion points widen the input and output convolutions
        assert ne - full == set()


class TestForward:
    def test_output_shapes(self, rng):
        cfg = _cfg(size=8)
        model = build(cfg).eval()
        raw = rng.uniform(0, 500, size=(1, 8, 8))
        out = model(Tensor((raw / 1500.0)[:, None].astype(np.float32)), raw_coarse=raw)
        assert out.out.shape == (1, 1, 16, 16)
        assert out.dist.shape == (1, 16, 16)
        assert out.fine.shape == (1, 16, 16)

    def test_full_needs_externals(self, rng):
        model = build(_cfg("full")).eval()
        with pytest.raises(ConfigError):
            model(Tensor(np.zeros((2, 1, 4, 4), dtype=np.float32)))

    def test_external_batch_size_checked(self, rng):
        cfg = _cfg("full")
        model = build(cfg).eval()
        with pytest.raises(ShapeError):
            model(Tensor(np.zeros((2, 1, 4, 4), dtype=np.float32)), [random_record(cfg.external, rng)])

    def test_wrong_grid_rejected(self):
        with pytest.raises(ShapeError):
            build(_cfg()).eval()(Tensor(np.zeros((1, 1, 5, 4), dtype=np.float32)))

    def test_sl_predicts_fine_directly(self, rng):
        cfg = _cfg("sl")
        model = build(cfg)
        raw = rng.uniform(0, 500, size=(3, 4, 4))
        dist, fine = predict(model, raw, None, 1500.0, 100.0)
        assert dist is None
        assert fine.shape == (3, 8, 8)
        assert np.all(fine >= 0)

    def test_full_predict_with_externals(self, rng):
        cfg = _cfg("full")
        model = build(cfg, seed=2)
        raw = rng.uniform(0, 500, size=(3, 4, 4))
        records = [random_record(cfg.external, rng) for _ in range(3)]
        dist, fine = predict(model, raw, records, 1500.0, 100.0, batch_size=2)
        assert dist.shape == fine.shape == (3, 8, 8)


class TestStructuralIdentity:
    """Inferred fine maps always aggregate back to the coarse input."""

    def test_fresh_ne_model_obeys_constraint(self, rng):
        cfg = UrbanFMConfig(m=4, f=32, scale=2, height=8, width=8, variant="ne")
        model = build(cfg, seed=11)
        raw = rng.uniform(0, 1500, size=(20, 8, 8))
        dist, fine = predict(model, raw, None, 1500.0, 100.0)
        assert np.all(fine >= 0)
        for c, d, f in zip(raw, dist, fine):
            mass = grid.block_sum(d, 2)
            # block sum of dist is S/(S+eps); S >= 1e-6 exactly when it is >= 1/1.1
            kept = mass >= 1.0 / 1.1
            slack = (1.0 - mass) / np.maximum(mass, 1e-12)
            rel = grid.relative_violation(c, f, 2)
            assert np.all(rel[kept] <= 1e-5 + slack[kept])

    def test_scaling_normalization_input_leaves_dist_unchanged(self, rng):
        x = rng.uniform(0.0, 3.0, size=(8, 8))
        np.testing.assert_allclose(grid.n2_normalize(7.5 * x, 2, eps=0.0), grid.n2_normalize(x, 2, eps=0.0), atol=1e-12)

    @pytest.mark.slow
    def test_hundred_random_inputs(self):
        rng = np.random.default_rng(0)
        cfg = UrbanFMConfig(m=4, f=32, scale=2, height=8, width=8, variant="ne")
        model = build(cfg, seed=0)
        raw = rng.uniform(0, 1500, size=(100, 8, 8))
        dist, fine = predict(model, raw, None, 1500.0, 100.0)
        mass = grid.block_sum(dist, 2)
        rel = np.stack([grid.relative_violation(c, f, 2) for c, f in zip(raw, fine)])
        kept = mass >= 1.0 / 1.1
        assert np.all(rel[kept] <= 1e-5 + (1.0 - mass[kept]) / mass[kept])


class TestParamCount:
    """Enumerated counts against the closed form and the published sizes."""

    @pytest.mark.parametrize("variant", ["full", "ne", "sl"])
    def test_closed_form_matches_enumeration(self, variant):
        cfg = _cfg(variant, m=2, f=6, scale=4)
        assert param_count(build(cfg)) == param_count_closed_form(cfg)

    def test_16_64_is_about_1_7m(self):
        cfg = _table4_cfg(16, 64)
        count = param_count(build(cfg))
        assert count == param_count_closed_form(cfg)
        assert abs(count - 1.7e6) <= 0.05 * 1.7e6

    def test_20_64_is_about_1_9m(self):
        count = param_count_closed_form(_table4_cfg(20, 64))
        assert abs(count - 1.9e6) <= 0.05 * 1.9e6

    def test_16_256_is_about_24_4m(self):
        count = param_count_closed_form(_table4_cfg(16, 256))
        assert abs(count - 24.4e6) <= 0.05 * 24.4e6

    def test_each_residual_block_adds_fixed_count(self):
        f = 8
        delta = param_count_closed_form(_cfg(m=3, f=f)) - param_count_closed_form(_cfg(m=2, f=f))
        assert delta == 2 * (9 * f * f + f) + 4 * f

    @pytest.mark.slow
    def test_16_256_enumerated(self):
        cfg = _table4_cfg(16, 256)
        assert param_count(build(cfg)) == param_count_closed_form(cfg)


class TestPersistence:
    def test_save_load_reproduces_predictions(self, tmp_path, rng):
        cfg = _cfg("full")
        model = build(cfg, seed=4)
        raw = rng.uniform(0, 500, size=(2, 4, 4))
        records = [random_record(cfg.external, rng) for _ in range(2)]
        _, before = predict(model, raw, records, 1500.0, 100.0)

        path = tmp_path / "model.ckpt"
        save_model(path, model, train={"coarse_scaler": 1500.0})
        loaded, ckpt = load_model(path)
        _, after = predict(loaded, raw, records, 1500.0, 100.0)
        np.testing.assert_array_equal(before, after)
        assert loaded.cfg == cfg
        assert ckpt.header.train == {"coarse_scaler": 1500.0}


class TestEndToEndGradient:
    @pytest.mark.parametrize("variant", ["ne", "full", "sl"])
    def test_tiny_model(self, variant):
        assert end_to_end_gradcheck(seed=0, variant=variant) <= TOLERANCE
