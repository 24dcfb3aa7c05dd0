"""
Scaling, losses, Adam and the training loop.

Flows are scaled by fixed max-scalers (coarse 1500, fine 100 by default)
without clipping. Variants full/ne are fit with pixel-wise MSE between
dist * upsample(raw coarse) / fine_scaler and the scaled target; variant sl
adds a weighted structural loss. The learning rate halves every
`halve_every` epochs and the best validation RMSE is checkpointed.
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
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from . import grid
from ._nn import OptimizerState, Parameter, Tensor
from ._nn import functional as F
from ._telemetry import run_span
from .config import TrainConfig
from .data import Dataset
from .errors import ConfigError, DomainError, NonFiniteLossError, ShapeError
from .eval import compute_metrics, infer_split
from .external import ExternalRecord
from .model import UrbanFM, save_model

_MODULE = "train"

HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "val_rmse", "val_mae", "val_mape")


def minmax_scale(values: npt.ArrayLike, scaler: float) -> npt.NDArray[np.float64]:
    """Divide by the max-scaler; values above it map above 1 (no clipping)."""
    if scaler <= 0:
        raise DomainError(_MODULE, f"scaler must be > 0, got {scaler}")
    return np.asarray(values, dtype=np.float64) / scaler


def minmax_descale(values: npt.ArrayLike, scaler: float) -> npt.NDArray[np.float64]:
    if scaler <= 0:
        raise DomainError(_MODULE, f"scaler must be > 0, got {scaler}")
    return np.asarray(values, dtype=np.float64) * scaler


mse_loss = F.mse_loss


def structural_loss(coarse: npt.ArrayLike, pred_fine: Tensor, scale: int) -> Tensor:
    """
    Mean over superregions of |x^c - block sum of the prediction|.

    `coarse` (B, I, J) must be in the same units as `pred_fine` (B, 1, NI, NJ).
    """
    c = np.asarray(coarse, dtype=pred_fine.dtype)
    if c.ndim == 2:
        c = c[None]
    expected = (c.shape[0], 1, c.shape[1] * scale, c.shape[2] * scale)
    if pred_fine.shape != expected:
        raise ShapeError(_MODULE, f"prediction {pred_fine.shape} does not match coarse {c.shape} at scale {scale}")
    sums = F.sum_pool2d(pred_fine, scale)
    return F.mean(F.absolute(F.sub(sums, c[:, None])))


def lr_at(epoch: int, lr0: float, halve_every: int) -> float:
    """Staircase schedule lr0 * 2^(-floor(epoch / halve_every)), 0-based epochs."""
    return lr0 * 2.0 ** -(epoch // halve_every)


def adam_update(
    params: Dict[str, Parameter],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam step over every parameter holding a gradient."""
    state.step += 1
    t = state.step
    correction1 = 1.0 - beta1**t
    correction2 = 1.0 - beta2**t
    for name, param in params.items():
        if param.grad is None:
            continue
        g = param.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or v is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        if m.shape != param.shape:
            raise ShapeError(_MODULE, f"optimizer state for {name} has shape {m.shape}, parameter {param.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name] = m.astype(param.dtype)
        state.v[name] = v.astype(param.dtype)
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        param.data = (param.data - update).astype(param.dtype)


class Adam:
    def __init__(self, params: Dict[str, Parameter], cfg: TrainConfig, state: Optional[OptimizerState] = None):
        self.params = params
        self.cfg = cfg
        self.state = state or OptimizerState()

    def step(self, lr: float) -> None:
        adam_update(self.params, self.state, lr, self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_rmse: float
    val_mae: float
    val_mape: Optional[float]


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self) -> int:
        return len(self.records)

    @property
    def lr_trace(self) -> List[float]:
        return [r.lr for r in self.records]

    def write_csv(self, path: Union[str, Path]) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(HISTORY_COLUMNS)
            for r in self.records:
                mape = "nan" if r.val_mape is None else repr(r.val_mape)
                writer.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.val_rmse), repr(r.val_mae), mape])


def _batches(n: int, batch: int, rng: np.random.Generator) -> List[npt.NDArray[np.int64]]:
    order = rng.permutation(n)
    chunks = [order[i : i + batch] for i in range(0, n, batch)]
    # Batch norm needs two samples; a trailing singleton is dropped this epoch.
    return [c for c in chunks if len(c) >= 2]


def _snapshot(model: UrbanFM) -> Tuple[Dict[str, npt.NDArray[np.floating]], Dict[str, npt.NDArray[np.floating]]]:
    params = {n: p.data.copy() for n, p in model.named_parameters()}
    buffers = {n: b.copy() for n, b in model.named_buffers()}
    return params, buffers


def _restore(model: UrbanFM, snapshot: Tuple[Dict[str, npt.NDArray[np.floating]], Dict[str, npt.NDArray[np.floating]]]) -> None:
    params, buffers = snapshot
    for name, param in model.named_parameters():
        param.data = params[name].copy()
    for name, value in buffers.items():
        model.set_buffer(name, value)


def batch_loss(
    model: UrbanFM,
    raw_coarse: npt.NDArray[np.float64],
    fine: npt.NDArray[np.float64],
    externals: Optional[Sequence[ExternalRecord]],
    cfg: TrainConfig,
) -> Tuple[Tensor, Optional[float]]:
    """
    Training loss of one batch, and for variants full/ne the max relative
    structural residual of the batch's fine predictions.
    """
    dtype = model.conv_in.weight.dtype
    scale = model.cfg.scale
    coarse_norm = Tensor(minmax_scale(raw_coarse, cfg.coarse_scaler)[:, None].astype(dtype))
    target = minmax_scale(fine, cfg.fine_scaler)[:, None].astype(dtype)
    out = model(coarse_norm, externals, raw_coarse=raw_coarse if model.normalizes else None)

    if model.normalizes:
        upsampled = (grid.replicate(raw_coarse, scale) / cfg.fine_scaler)[:, None].astype(dtype)
        loss = mse_loss(F.mul(out.out, upsampled), target)
        residual = None
        if out.fine is not None:
            residual = max(float(grid.relative_violation(c, f, scale).max()) for c, f in zip(raw_coarse, out.fine))
        return loss, residual

    loss = mse_loss(out.out, target)
    if cfg.structural_weight > 0:
        structural = structural_loss(minmax_scale(raw_coarse, cfg.fine_scaler), out.out, scale)
        loss = F.add(loss, F.mul(structural, cfg.structural_weight))
    return loss, None


def train_loop(
    model: UrbanFM,
    train: Dataset,
    valid: Dataset,
    cfg: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> Tuple[UrbanFM, TrainHistory]:
    """
    Train `model` and return it restored to its best-validation state.

    With `out_dir`, writes best.ckpt, last.ckpt and history.csv there.
    Validation runs every `cfg.val_every` epochs and after the last one, on
    at most `cfg.val_limit` evenly spaced validation samples.

    Raises:
        DomainError: empty training or validation split, or no validation
            pass produced a finite RMSE.
        NonFiniteLossError: the loss became NaN or infinite.
    """
    if cfg.variant != model.cfg.variant:
        raise ConfigError(_MODULE, f"train variant {cfg.variant!r} does not match model variant {model.cfg.variant!r}")
    train = train.head(cfg.fraction) if len(train) else train
    if len(train) < 2:
        raise DomainError(_MODULE, f"training split has {len(train)} sample(s); batch norm needs at least 2")
    if len(valid) == 0:
        raise DomainError(_MODULE, "validation split is empty")

    rng = np.random.default_rng(cfg.seed)
    params = dict(model.named_parameters())
    optimizer = Adam(params, cfg)
    history = TrainHistory()
    best_rmse = math.inf
    best_state = _snapshot(model)
    coarse, fine = train.coarse, train.fine
    externals = train.externals if model.external is not None else None
    monitor = valid.spread(cfg.val_limit) if cfg.val_limit is not None else valid
    monitor_fine = monitor.fine
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    with run_span(
        "train.run",
        "train",
        train__variant=cfg.variant,
        train__epochs=cfg.epochs,
        train__samples=len(train),
        model__m=model.cfg.m,
        model__f=model.cfg.f,
    ) as run:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg.lr, cfg.halve_every)
            with run_span("train.epoch", "epoch", train__epoch=epoch, train__lr=lr) as span:
                model.train()
                losses: List[float] = []
                worst_residual = 0.0
                for step, idx in enumerate(_batches(len(train), cfg.batch, rng)):
                    batch_ext = [externals[i] for i in idx] if externals is not None else None
                    loss, residual = batch_loss(model, coarse[idx], fine[idx], batch_ext, cfg)
                    value = float(loss.data)
                    if not math.isfinite(value):
                        raise NonFiniteLossError(epoch, step, value)
                    optimizer.zero_grad()
                    loss.backward()
                    optimizer.step(lr)
                    losses.append(value)
                    if residual is not None:
                        worst_residual = max(worst_residual, residual)

                record = EpochRecord(
                    epoch=epoch,
                    lr=lr,
                    train_loss=float(np.mean(losses)) if losses else math.nan,
                    val_rmse=math.nan,
                    val_mae=math.nan,
                    val_mape=None,
                )
                history.records.append(record)
                span.set_attribute("train.loss", record.train_loss)
                if model.normalizes:
                    span.set_attribute("train.structural_residual", worst_residual)
                if (epoch + 1) % cfg.val_every and epoch != cfg.epochs - 1:
                    if on_epoch is not None:
                        on_epoch(record)
                    continue

                preds = infer_split(model, monitor, cfg.coarse_scaler, cfg.fine_scaler, batch_size=cfg.eval_batch)
                report = compute_metrics(preds, monitor_fine)
                record.val_rmse, record.val_mae, record.val_mape = report.rmse, report.mae, report.mape
                span.set_attribute("eval.rmse", report.rmse)
                span.set_attribute("eval.mae", report.mae)
                if report.mape is not None:
                    span.set_attribute("eval.mape", report.mape)

                if report.rmse < best_rmse:
                    best_rmse = report.rmse
                    history.best_epoch = epoch
                    best_state = _snapshot(model)
                    if out is not None:
                        save_model(
                            out / "best.ckpt",
                            model,
                            train=cfg.model_dump(mode="json"),
                            optimizer=optimizer.state,
                            extra={"epoch": epoch, "val_rmse": report.rmse},
                        )
                if on_epoch is not None:
                    on_epoch(record)

        run.set_attribute("train.best_epoch", history.best_epoch)
        run.set_attribute("eval.rmse", best_rmse)

    if out is not None:
        save_model(
            out / "last.ckpt",
            model,
            train=cfg.model_dump(mode="json"),
            optimizer=optimizer.state,
            extra={"epoch": cfg.epochs - 1},
        )
        history.write_csv(out / "history.csv")
    if history.best_epoch < 0:
        raise DomainError(_MODULE, "validation RMSE was never finite; there is no best state to restore")
    _restore(model, best_state)
    model.eval()
    return model, history
