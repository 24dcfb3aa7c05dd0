"""
Metrics and evaluation of inferencers (the network or a baseline) on a
dataset split.

Every evaluation opens an `eval.<method>` span carrying the metric values;
`check_threshold` turns a report into a pass/fail gate.
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

import math
import time
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict

from . import grid
from ._telemetry import run_span
from .baselines import HAModel, MeanPartition
from .data import Dataset, write_grids
from .errors import ConfigError, FlowmagError, ShapeError
from .model import UrbanFM, predict

Inferencer = Union[UrbanFM, MeanPartition, HAModel]

MAPE_MIN_TARGET = 1e-6

_MODULE = "eval"


class EvaluationError(FlowmagError):
    """Raised when a metric exceeds its allowed threshold."""

    def __init__(self, score: float, threshold: float, metric: str):
        self.score = score
        self.threshold = threshold
        self.metric = metric
        super().__init__(_MODULE, f"{metric} {score:.6g} exceeds threshold {threshold:.6g}")


class MetricsReport(BaseModel):
    """
    Per-pixel-mean error metrics over z samples.

    `mape` is None when every target cell fell below the exclusion threshold;
    `structural_residual` is the max relative violation of the
    sum-to-superregion constraint, None when no coarse maps were supplied.
    """

    model_config = ConfigDict(frozen=True)

    method: str = "unnamed"
    rmse: float
    mae: float
    mape: Optional[float]
    mape_excluded: int
    structural_residual: Optional[float] = None
    samples: int

    def to_text(self) -> str:
        mape = "undefined" if self.mape is None else f"{self.mape:.6f}"
        residual = "n/a" if self.structural_residual is None else f"{self.structural_residual:.3e}"
        return (
            f"{self.method:<10} RMSE {self.rmse:.6f}  MAE {self.mae:.6f}  MAPE {mape}"
            f"  (excluded {self.mape_excluded})  residual {residual}  z={self.samples}"
        )

    def to_kv(self) -> str:
        lines = []
        for key, value in self.model_dump(exclude={"method"}).items():
            text = "nan" if value is None else repr(value)
            lines.append(f"{self.method}.{key} = {text}")
        return "\n".join(lines)


def compute_metrics(
    preds: npt.ArrayLike,
    targets: npt.ArrayLike,
    coarse: Optional[npt.ArrayLike] = None,
    scale: Optional[int] = None,
    method: str = "unnamed",
) -> MetricsReport:
    """
    RMSE, MAE and MAPE with per-pixel means over a batch of fine maps.

    MAPE averages only over cells whose target is >= 1e-6; the number of
    excluded cells is reported. When `coarse` and `scale` are given the
    structural residual of `preds` is filled in as well.
    """
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(_MODULE, f"predictions {p.shape} and targets {t.shape} differ")
    if p.ndim == 2:
        p, t = p[None], t[None]
    if p.shape[0] < 1:
        raise ShapeError(_MODULE, "cannot compute metrics over zero samples", axis="samples")

    err = p - t
    rmse = math.sqrt(float(np.mean(err * err)))
    mae = float(np.mean(np.abs(err)))
    valid = t >= MAPE_MIN_TARGET
    excluded = int(t.size - np.count_nonzero(valid))
    mape = float(np.mean(np.abs(err[valid]) / t[valid])) if excluded < t.size else None

    residual = None
    if coarse is not None and scale is not None:
        residual = structural_residual(coarse, p, scale)
    return MetricsReport(
        method=method,
        rmse=rmse,
        mae=mae,
        mape=mape,
        mape_excluded=excluded,
        structural_residual=residual,
        samples=int(p.shape[0]),
    )


def structural_residual(coarse: npt.ArrayLike, fine: npt.ArrayLike, scale: int) -> float:
    """Max over samples and superregions of |x^c - block sum| / max(1, x^c)."""
    c = np.asarray(coarse, dtype=np.float64)
    f = np.asarray(fine, dtype=np.float64)
    if c.ndim == 2:
        c, f = c[None], f[None]
    worst = 0.0
    for ci, fi in zip(c, f):
        worst = max(worst, float(grid.relative_violation(ci, fi, scale).max()))
    return worst


def mean_abs_error_grid(preds: npt.ArrayLike, targets: npt.ArrayLike) -> npt.NDArray[np.float64]:
    """Per-cell absolute error averaged over samples, (NI, NJ)."""
    return np.mean(np.abs(np.asarray(preds, dtype=np.float64) - np.asarray(targets, dtype=np.float64)), axis=0)


def _check_compatible(inferencer: Inferencer, dataset: Dataset) -> None:
    m = dataset.manifest
    if isinstance(inferencer, UrbanFM):
        cfg = inferencer.cfg
        if (cfg.height, cfg.width, cfg.scale) != (m.height, m.width, m.scale):
            raise ConfigError(
                _MODULE,
                f"model grid {(cfg.height, cfg.width, cfg.scale)} does not match dataset "
                f"grid {(m.height, m.width, m.scale)}",
            )
        if cfg.external is not None:
            ext, data_ext = cfg.external, m.external_config()
            ours = (ext.schema_name, ext.weather_classes, ext.has_ticket_price)
            theirs = (data_ext.schema_name, data_ext.weather_classes, data_ext.has_ticket_price)
            if ours != theirs:
                raise ConfigError(_MODULE, f"model external schema {ours} does not match dataset schema {theirs}")
    elif inferencer.scale != m.scale:
        raise ConfigError(_MODULE, f"{inferencer.name} baseline scale {inferencer.scale} != dataset scale {m.scale}")
    elif isinstance(inferencer, HAModel) and inferencer.dist.shape != m.fine_shape:
        raise ConfigError(_MODULE, f"HA distribution {inferencer.dist.shape} does not match fine grid {m.fine_shape}")


def infer_split(
    inferencer: Inferencer,
    dataset: Dataset,
    coarse_scaler: Optional[float] = None,
    fine_scaler: Optional[float] = None,
    batch_size: int = 16,
) -> npt.NDArray[np.float64]:
    """Fine-map predictions (T, NI, NJ) for every sample of `dataset`."""
    _check_compatible(inferencer, dataset)
    coarse = dataset.coarse
    if isinstance(inferencer, UrbanFM):
        m = dataset.manifest
        _, fine = predict(
            inferencer,
            coarse,
            dataset.externals if inferencer.external is not None else None,
            coarse_scaler or m.coarse_scaler,
            fine_scaler or m.fine_scaler,
            batch_size=batch_size,
        )
        return fine
    return inferencer.infer_batch(coarse)


def evaluate(
    inferencer: Inferencer,
    dataset: Dataset,
    coarse_scaler: Optional[float] = None,
    fine_scaler: Optional[float] = None,
    batch_size: int = 16,
    method: Optional[str] = None,
) -> MetricsReport:
    """Run eval-mode inference over a split and score it against the fine maps."""
    name = method or ("urbanfm" if isinstance(inferencer, UrbanFM) else inferencer.name)
    with run_span(f"eval.{name}", "eval", eval__method=name, eval__samples=len(dataset)) as span:
        start = time.time()
        preds = infer_split(inferencer, dataset, coarse_scaler, fine_scaler, batch_size)
        report = compute_metrics(preds, dataset.fine, dataset.coarse, dataset.manifest.scale, method=name)
        span.set_attribute("eval.rmse", report.rmse)
        span.set_attribute("eval.mae", report.mae)
        if report.mape is not None:
            span.set_attribute("eval.mape", report.mape)
        if report.structural_residual is not None:
            span.set_attribute("eval.structural_residual", report.structural_residual)
        span.set_attribute("eval.duration_ms", (time.time() - start) * 1000)
    return report


def check_threshold(report: MetricsReport, max_rmse: float) -> None:
    """Raise EvaluationError when RMSE exceeds `max_rmse`."""
    if report.rmse > max_rmse:
        raise EvaluationError(report.rmse, max_rmse, f"{report.method}.rmse")


def write_reports(
    reports: Sequence[MetricsReport],
    out_dir: Union[str, Path],
    error_grids: Optional[Sequence[npt.NDArray[np.float64]]] = None,
) -> None:
    """
    Write report.txt (human-readable) and metrics.kv (key = value), plus one
    `<method>_errors.txt` grid file per report when error grids are given.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text("\n".join(r.to_text() for r in reports) + "\n")
    (out / "metrics.kv").write_text("\n".join(r.to_kv() for r in reports) + "\n")
    if error_grids is not None:
        for report, errors in zip(reports, error_grids):
            write_grids(out / f"{report.method}_errors.txt", errors[None])
