"""
The UrbanFM inference network and its variants.

    coarse_norm (B,1,I,J) [+ H^c_e]          early fusion
      -> conv 9x9 (F) -> ReLU                  low-level features
      -> M residual blocks
      -> conv 3x3 -> BN, + low-level features   skip connection
      -> sub-pixel chain (one block per prime factor of N)
      [+ H^f_e]                                 late fusion
      -> conv 9x9 (1) -> ReLU
      -> N^2-Normalization                      (full, ne)
      -> dist; fine = nn_upsample(raw coarse) * dist

Variant "sl" skips the normalization and predicts normalized fine flows
directly; it is trained with an added structural loss.
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

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from . import grid
from ._nn import (
    BatchNorm2d,
    Checkpoint,
    Conv2d,
    Module,
    OptimizerState,
    ResidualBlock,
    Sequential,
    Tensor,
    apply_checkpoint,
    grad_check_leaves,
    load_checkpoint,
    no_grad,
    prime_factors,
    save_checkpoint,
    upsampling_chain,
)
from ._nn import functional as F
from .config import ExternalConfig, UrbanFMConfig
from .errors import ConfigError, ShapeError
from .external import ExternalRecord, ExternalSubnet

_MODULE = "model"


@dataclass
class ModelOutput:
    """
    Result of one forward pass.

    Attributes:
        out: Differentiable network output: the distribution map for
            variants full/ne, the normalized fine prediction for sl.
        dist: Distribution map as float64 numpy (full/ne only).
        fine: Fine-grained flows in physical units (B, NI, NJ), float64,
            when the raw coarse maps (full/ne) or the fine scaler (sl) were given.
    """

    out: Tensor
    dist: Optional[npt.NDArray[np.float64]]
    fine: Optional[npt.NDArray[np.float64]]


class UrbanFM(Module):
    """The inference network; the parameter name set depends only on the config."""

    def __init__(self, cfg: UrbanFMConfig, seed: int = 0):
        super().__init__()
        cfg.check()
        if cfg.out_channels != 1:
            raise ConfigError(_MODULE, f"the output head predicts one channel, got {cfg.out_channels}")
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        nn = cfg.nn
        fused = 1 if cfg.has_external else 0

        self.conv_in = self.add_module("conv_in", Conv2d(1 + fused, cfg.f, 9, rng))
        self.resblocks = self.add_module(
            "resblocks",
            Sequential(*(ResidualBlock(cfg.f, rng, nn.bn_eps, nn.bn_momentum) for _ in range(cfg.m))),
        )
        self.conv_mid = self.add_module("conv_mid", Conv2d(cfg.f, cfg.f, 3, rng))
        self.bn_mid = self.add_module("bn_mid", BatchNorm2d(cfg.f, nn.bn_eps, nn.bn_momentum))
        self.upsample = self.add_module(
            "upsample", upsampling_chain(cfg.f, cfg.scale, rng, nn.bn_eps, nn.bn_momentum)
        )
        self.conv_out = self.add_module(
            "conv_out", Conv2d(cfg.f + fused, cfg.out_channels, 9, rng, gain=nn.out_gain, bias=nn.out_bias)
        )
        self.external: Optional[ExternalSubnet] = None
        if cfg.external is not None:
            self.external = self.add_module("external", ExternalSubnet(cfg.external, rng, nn))  # type: ignore[assignment]

    @property
    def normalizes(self) -> bool:
        return self.cfg.variant in ("full", "ne")

    def forward(
        self,
        coarse_norm: Tensor,
        externals: Optional[Sequence[ExternalRecord]] = None,
        raw_coarse: Optional[npt.ArrayLike] = None,
        fine_scaler: Optional[float] = None,
    ) -> ModelOutput:
        """
        Args:
            coarse_norm: Min-max scaled coarse maps (B, 1, I, J).
            externals: One record per sample; required when the model has
                an external subnet, ignored otherwise.
            raw_coarse: Unscaled coarse maps (B, I, J) used by the output head.
            fine_scaler: Denormalizes the sl prediction into physical units.
        """
        cfg = self.cfg
        expected = (1, cfg.height, cfg.width)
        if coarse_norm.ndim != 4 or coarse_norm.shape[1:] != expected:
            raise ShapeError(_MODULE, f"coarse input has shape {coarse_norm.shape}, expected (B, *{expected})")
        batch = coarse_norm.shape[0]

        x = coarse_norm
        fine_ext = None
        if self.external is not None:
            if externals is None:
                raise ConfigError(_MODULE, f"variant {cfg.variant!r} with an external subnet needs external records")
            if len(externals) != batch:
                raise ShapeError(_MODULE, f"{len(externals)} external records for a batch of {batch}", axis="batch")
            coarse_ext, fine_ext = self.external(externals)
            x = F.concat([coarse_ext, x], axis=1)

        low = F.relu(self.conv_in(x))
        h = self.bn_mid(self.conv_mid(self.resblocks(low)))
        h = self.upsample(F.add(h, low))
        if fine_ext is not None:
            h = F.concat([h, fine_ext], axis=1)
        h = F.relu(self.conv_out(h))

        if not self.normalizes:
            fine = None
            if fine_scaler is not None:
                fine = h.data[:, 0].astype(np.float64) * fine_scaler
            return ModelOutput(out=h, dist=None, fine=fine)

        dist_t = F.n2_normalize(h, cfg.scale, cfg.eps)
        dist = dist_t.data[:, 0].astype(np.float64)
        fine = None
        if raw_coarse is not None:
            raw = np.asarray(raw_coarse, dtype=np.float64)
            if raw.shape != (batch, cfg.height, cfg.width):
                raise ShapeError(_MODULE, f"raw coarse maps have shape {raw.shape}, expected {(batch, cfg.height, cfg.width)}")
            fine = np.stack([grid.distribute(raw[b], dist[b], cfg.scale) for b in range(batch)])
        return ModelOutput(out=dist_t, dist=dist, fine=fine)


def build(cfg: UrbanFMConfig, seed: int = 0) -> UrbanFM:
    """Construct and initialize a model deterministically from (cfg, seed)."""
    return UrbanFM(cfg, seed)


def predict(
    model: UrbanFM,
    raw_coarse: npt.ArrayLike,
    externals: Optional[Sequence[ExternalRecord]],
    coarse_scaler: float,
    fine_scaler: float,
    batch_size: int = 16,
) -> Tuple[Optional[npt.NDArray[np.float64]], npt.NDArray[np.float64]]:
    """
    Eval-mode inference over (T, I, J) raw coarse maps.

    Returns:
        (dist, fine): dist is (T, NI, NJ) for full/ne and None for sl; fine
        is always (T, NI, NJ) in physical units.
    """
    raw = np.asarray(raw_coarse, dtype=np.float64)
    if raw.ndim == 2:
        raw = raw[None]
    model.eval()
    dists, fines = [], []
    dtype = model.conv_in.weight.dtype
    with no_grad():
        for start in range(0, raw.shape[0], batch_size):
            chunk = raw[start : start + batch_size]
            ext = None if externals is None else list(externals[start : start + batch_size])
            coarse_norm = Tensor((chunk / coarse_scaler)[:, None].astype(dtype))
            out = model(coarse_norm, ext, raw_coarse=chunk, fine_scaler=fine_scaler)
            assert out.fine is not None
            fines.append(out.fine)
            if out.dist is not None:
                dists.append(out.dist)
    return (np.concatenate(dists) if dists else None), np.concatenate(fines)


def param_count(model: Module) -> int:
    """Enumerated count of every scalar parameter (batch-norm running stats excluded)."""
    return int(sum(p.data.size for p in model.parameters()))


def _conv(cin: int, cout: int, k: int) -> int:
    return cin * cout * k * k + cout


def param_count_closed_form(cfg: UrbanFMConfig) -> int:
    """Parameter count from the layer table, independent of any built model."""
    f = cfg.f
    fused = 1 if cfg.has_external else 0
    total = _conv(1 + fused, f, 9)
    total += cfg.m * (2 * _conv(f, f, 3) + 2 * 2 * f)
    total += _conv(f, f, 3) + 2 * f
    for r in prime_factors(cfg.scale):
        total += _conv(f, f * r * r, 3) + 2 * f * r * r
    total += _conv(f + fused, cfg.out_channels, 9)
    if cfg.external is not None:
        total += _external_count(cfg.external)
    return total


def _external_count(ext: ExternalConfig) -> int:
    total = sum(vocab * width for _, vocab, width in ext.categorical_features)
    total += ext.input_width * ext.hidden + ext.hidden
    total += ext.hidden * ext.height * ext.width + ext.height * ext.width
    for r in prime_factors(ext.scale):
        total += _conv(1, r * r, 3) + 2 * r * r
    return total


# -- persistence ------------------------------------------------------------


def save_model(
    path: Union[str, Path],
    model: UrbanFM,
    train: Optional[Dict[str, Any]] = None,
    optimizer: Optional[OptimizerState] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> None:
    save_checkpoint(
        path,
        model,
        config=model.cfg.model_dump(mode="json"),
        train=train,
        optimizer=optimizer,
        extra={"seed": model.seed, **(extra or {})},
    )


def load_model(path: Union[str, Path]) -> Tuple[UrbanFM, Checkpoint]:
    """Rebuild a model from a checkpoint's config and copy its state in."""
    ckpt = load_checkpoint(path)
    if ckpt.header.kind != "urbanfm":
        raise ConfigError(_MODULE, f"{path} holds a {ckpt.header.kind!r} checkpoint, not a model")
    cfg = UrbanFMConfig.model_validate(ckpt.header.config)
    model = UrbanFM(cfg, seed=int(ckpt.header.extra.get("seed", 0)))
    apply_checkpoint(model, ckpt)
    model.eval()
    return model, ckpt


# -- end-to-end gradient check ----------------------------------------------


def tiny_config(variant: str = "ne") -> UrbanFMConfig:
    """M=1, F=4, I=J=4, N=2: small enough for an exhaustive-ish gradient check."""
    external = ExternalConfig.preset("taxibj", 4, 4, 2).model_copy(update={"hidden": 8})
    return UrbanFMConfig(
        m=1,
        f=4,
        scale=2,
        height=4,
        width=4,
        variant=variant,  # type: ignore[arg-type]
        external=external if variant == "full" else None,
    )


def end_to_end_gradcheck(
    seed: int = 0,
    variant: str = "ne",
    h: float = 1e-6,
    max_coords: Optional[int] = 3,
) -> float:
    """
    Gradient check of the whole tiny network in train mode at float64.

    Coordinates are sampled per parameter tensor and the step is kept small
    so perturbations rarely cross a ReLU kink.
    """
    cfg = tiny_config(variant)
    model = UrbanFM(cfg, seed).astype(np.float64)
    model.train()
    rng = np.random.default_rng(seed + 1)
    coarse = Tensor(rng.uniform(0.1, 1.0, size=(2, 1, cfg.height, cfg.width)), requires_grad=True)
    externals = None
    if model.external is not None:
        externals = [random_record(cfg.external, rng) for _ in range(2)]  # type: ignore[arg-type]

    def fn() -> Tensor:
        if model.external is not None:
            model.external.dropout.rng = np.random.default_rng(seed)
        return model(coarse, externals).out

    return grad_check_leaves(fn, [coarse] + model.parameters(), h=h, seed=seed, max_coords=max_coords)


def random_record(cfg: ExternalConfig, rng: np.random.Generator) -> ExternalRecord:
    """A record drawn uniformly from the schema's vocabularies and bounds."""
    t_low, t_high = cfg.temperature_bounds
    w_low, w_high = cfg.wind_bounds
    p_low, p_high = cfg.ticket_bounds
    return ExternalRecord(
        temperature=float(rng.uniform(t_low, t_high)),
        wind_speed=float(rng.uniform(w_low, w_high)),
        weather=int(rng.integers(cfg.weather_classes)),
        holiday=int(rng.integers(2)),
        weekend=int(rng.integers(2)),
        day_of_week=int(rng.integers(7)),
        hour_of_day=int(rng.integers(24)),
        ticket_price=float(rng.uniform(p_low, p_high)) if cfg.has_ticket_price else None,
    )
