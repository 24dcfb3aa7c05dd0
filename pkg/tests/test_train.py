"""
Tests for scaling, losses, the optimizer, the learning-rate schedule and
the training loop.
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

import csv

import numpy as np
import pytest

from flowmag._nn import OptimizerState, Parameter, Tensor, load_checkpoint
from flowmag.config import TrainConfig, UrbanFMConfig
from flowmag.data import split_filter
from flowmag.errors import ConfigError, DomainError, NonFiniteLossError
from flowmag.model import build
from flowmag.train import (
    HISTORY_COLUMNS,
    adam_update,
    lr_at,
    minmax_descale,
    minmax_scale,
    mse_loss,
    structural_loss,
    train_loop,
)


def _model(dataset, variant="ne", seed=0):
    m = dataset.manifest
    external = m.external_config().model_copy(update={"hidden": 8}) if variant == "full" else None
    cfg = UrbanFMConfig(m=1, f=4, scale=m.scale, height=m.height, width=m.width, variant=variant, external=external)
    return build(cfg, seed)


def _train_cfg(variant="ne", **kw):
    values = dict(lr=1e-3, batch=4, epochs=3, halve_every=2, variant=variant, seed=5)
    values.update(kw)
    return TrainConfig(**values)


class TestScaling:
    def test_round_trip(self, rng):
        x = rng.uniform(0, 3000, size=(5, 5))
        np.testing.assert_allclose(minmax_descale(minmax_scale(x, 1500.0), 1500.0), x, rtol=1e-7)

    def test_values_above_scaler_are_not_clipped(self):
        assert minmax_scale([3000.0], 1500.0)[0] == 2.0

    @pytest.mark.parametrize("scaler", [0.0, -1.0])
    def test_invalid_scaler(self, scaler):
        with pytest.raises(DomainError):
            minmax_scale([1.0], scaler)


class TestLosses:
    def test_mse(self):
        loss = mse_loss(Tensor(np.array([1.0, 3.0])), np.array([0.0, 0.0]))
        assert float(loss.data) == pytest.approx(5.0)

    def test_structural_loss_zero_for_consistent_prediction(self, rng):
        fine = rng.uniform(0, 1, size=(2, 1, 4, 4))
        coarse = fine[:, 0].reshape(2, 2, 2, 2, 2).sum(axis=(2, 4))
        assert float(structural_loss(coarse, Tensor(fine), 2).data) == pytest.approx(0.0, abs=1e-12)

    def test_structural_loss_value(self):
        pred = Tensor(np.zeros((1, 1, 2, 2)))
        assert float(structural_loss(np.array([[4.0]]), pred, 2).data) == pytest.approx(4.0)


class TestOptimizer:
    """Bias-corrected Adam and the staircase schedule."""

    def test_single_step_moves_by_lr(self):
        w = Parameter(np.array([1.0]), dtype=np.float64)
        w.grad = np.array([2.0])
        adam_update({"w": w}, OptimizerState(), lr=0.1)
        assert w.data[0] == pytest.approx(0.9, abs=1e-6)

    def test_parameters_without_grad_are_skipped(self):
        w = Parameter(np.array([1.0]), dtype=np.float64)
        state = OptimizerState()
        adam_update({"w": w}, state, lr=0.1)
        assert w.data[0] == 1.0
        assert state.step == 1

    def test_lr_staircase(self):
        trace = [lr_at(e, 1e-4, 20) for e in range(60)]
        assert trace[0] == trace[19] == 1e-4
        assert trace[20] == 5e-5
        assert trace[40] == 2.5e-5
        for epoch, lr in enumerate(trace):
            assert lr == 1e-4 * 2.0 ** -(epoch // 20)


class TestTrainLoop:
    """Short runs on a tiny synthetic dataset."""

    def test_history_checkpoints_and_spans(self, small_dataset, tmp_path, span_exporter):
        train, valid, _ = split_filter(small_dataset)
        model, history = train_loop(_model(small_dataset), train, valid, _train_cfg(), out_dir=tmp_path)

        assert len(history) == 3
        assert history.lr_trace == [1e-3, 1e-3, 5e-4]
        assert 0 <= history.best_epoch < 3
        assert not model.training
        for name in ("best.ckpt", "last.ckpt", "history.csv"):
            assert (tmp_path / name).exists()
        with (tmp_path / "history.csv").open() as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == HISTORY_COLUMNS
        assert len(rows) == 4

        last = load_checkpoint(tmp_path / "last.ckpt")
        assert last.header.has_moments
        assert last.header.train["variant"] == "ne"

        spans = span_exporter.get_finished_spans()
        epochs = [s for s in spans if s.name == "train.epoch"]
        runs = [s for s in spans if s.name == "train.run"]
        assert len(epochs) == 3 and len(runs) == 1
        assert [s.attributes["train.epoch"] for s in epochs] == [0, 1, 2]
        assert all("eval.rmse" in s.attributes for s in epochs)
        assert all("train.structural_residual" in s.attributes for s in epochs)
        ids = {s.attributes["run.correlation_id"] for s in epochs + runs}
        assert len(ids) == 1

    def test_returns_best_validation_state(self, small_dataset):
        from flowmag.eval import evaluate

        train, valid, _ = split_filter(small_dataset)
        model, history = train_loop(_model(small_dataset), train, valid, _train_cfg(epochs=2))
        best = history.records[history.best_epoch]
        assert evaluate(model, valid).rmse == pytest.approx(best.val_rmse, rel=1e-5)

    def test_same_seed_is_deterministic(self, small_dataset, tmp_path):
        from flowmag.eval import evaluate, write_reports

        train, valid, test = split_filter(small_dataset)
        for run in ("a", "b"):
            model, _ = train_loop(
                _model(small_dataset, "full"), train, valid, _train_cfg("full", epochs=2), out_dir=tmp_path / run
            )
            write_reports([evaluate(model, test)], tmp_path / run / "reports")
        for name in ("best.ckpt", "last.ckpt", "history.csv", "reports/report.txt", "reports/metrics.kv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

    def test_validation_every_few_epochs(self, small_dataset, span_exporter):
        train, valid, _ = split_filter(small_dataset)
        _, history = train_loop(_model(small_dataset), train, valid, _train_cfg(epochs=5, val_every=2))
        validated = [r.epoch for r in history.records if not np.isnan(r.val_rmse)]
        assert validated == [1, 3, 4]
        assert history.best_epoch in validated
        epochs = [s for s in span_exporter.get_finished_spans() if s.name == "train.epoch"]
        assert ["eval.rmse" in s.attributes for s in epochs] == [False, True, False, True, True]

    def test_validation_limit_uses_spread_subset(self, small_dataset):
        from flowmag.eval import evaluate

        train, valid, _ = split_filter(small_dataset)
        model, history = train_loop(_model(small_dataset), train, valid, _train_cfg(epochs=1, val_limit=3))
        assert evaluate(model, valid.spread(3)).rmse == pytest.approx(history.records[0].val_rmse, rel=1e-5)

    def test_never_finite_validation_is_an_error(self, small_dataset, tmp_path, monkeypatch):
        from flowmag import train as train_module
        from flowmag.eval import MetricsReport

        def nan_metrics(preds, targets, *args, **kwargs):
            return MetricsReport(rmse=float("nan"), mae=float("nan"), mape=None, mape_excluded=0, samples=len(preds))

        monkeypatch.setattr(train_module, "compute_metrics", nan_metrics)
        train, valid, _ = split_filter(small_dataset)
        with pytest.raises(DomainError, match="never finite"):
            train_loop(_model(small_dataset), train, valid, _train_cfg(epochs=2), out_dir=tmp_path)
        assert (tmp_path / "history.csv").exists()
        assert not (tmp_path / "best.ckpt").exists()

    def test_full_variant_with_externals(self, small_dataset):
        train, valid, _ = split_filter(small_dataset)
        _, history = train_loop(_model(small_dataset, "full"), train, valid, _train_cfg("full", epochs=1))
        assert len(history) == 1

    def test_sl_variant(self, small_dataset):
        train, valid, _ = split_filter(small_dataset)
        _, history = train_loop(_model(small_dataset, "sl"), train, valid, _train_cfg("sl", epochs=1, structural_weight=0.5))
        assert np.isfinite(history.records[0].train_loss)

    def test_fraction_limits_training_samples(self, small_dataset, span_exporter):
        train, valid, _ = split_filter(small_dataset)
        train_loop(_model(small_dataset), train, valid, _train_cfg(epochs=1, fraction=0.5))
        run = next(s for s in span_exporter.get_finished_spans() if s.name == "train.run")
        assert run.attributes["train.samples"] == len(train) // 2

    def test_variant_mismatch(self, small_dataset):
        train, valid, _ = split_filter(small_dataset)
        with pytest.raises(ConfigError):
            train_loop(_model(small_dataset), train, valid, _train_cfg("sl"))

    def test_single_training_sample_rejected(self, small_dataset):
        train, valid, _ = split_filter(small_dataset)
        with pytest.raises(DomainError):
            train_loop(_model(small_dataset), train.subset(train.samples[:1]), valid, _train_cfg())

    def test_empty_validation_rejected(self, small_dataset):
        train, valid, _ = split_filter(small_dataset)
        with pytest.raises(DomainError):
            train_loop(_model(small_dataset), train, valid.subset([]), _train_cfg())

    def test_non_finite_loss_aborts(self, small_dataset):
        train, valid, _ = split_filter(small_dataset)
        # targets overflow float32
        with pytest.raises(NonFiniteLossError) as exc_info:
            train_loop(_model(small_dataset), train, valid, _train_cfg(fine_scaler=1e-300))
        assert exc_info.value.epoch == 0
