"""
Configuration models for flowmag.

All models are frozen pydantic models. Field constraints cover types and
ranges; cross-field invariants (variant vs. external subnet, grid geometry)
are checked by `check()` methods raising ConfigError.
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

from typing import Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

Variant = Literal["full", "ne", "sl"]
Schema = Literal["taxibj", "happyvalley"]

# Categorical vocabularies in embedding order (weather size comes from the schema).
DAY_OF_WEEK_CLASSES = 7
HOUR_OF_DAY_CLASSES = 24
BINARY_CLASSES = 2


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class NNConfig(_Frozen):
    """Numerical defaults of the tensor engine: batch-norm constants and init scales."""

    bn_eps: float = Field(1e-5, gt=0)
    bn_momentum: float = Field(0.1, gt=0, le=1)
    init: Literal["fan_in_gaussian"] = "fan_in_gaussian"
    embedding_range: float = Field(0.1, gt=0)
    # Output head starts near a constant map, so the normalized variants begin
    # at the uniform split.
    out_gain: float = Field(0.1, gt=0)
    out_bias: float = 1.0


class ExternalConfig(_Frozen):
    """External-factor schema, embedding widths and subnet sizes."""

    schema_name: Schema = "taxibj"
    weather_classes: int = Field(16, ge=1)
    has_ticket_price: bool = False
    temperature_bounds: Tuple[float, float] = (-24.6, 41.0)
    wind_bounds: Tuple[float, float] = (0.0, 48.6)
    ticket_bounds: Tuple[float, float] = (29.9, 260.0)

    day_of_week_width: int = Field(2, ge=1)
    hour_of_day_width: int = Field(3, ge=1)
    weather_width: int = Field(3, ge=1)
    holiday_width: int = Field(1, ge=1)
    weekend_width: int = Field(1, ge=1)

    hidden: int = Field(128, ge=1)
    dropout: float = Field(0.3, ge=0.0, lt=1.0)

    height: int = Field(32, ge=1)
    width: int = Field(32, ge=1)
    scale: int = Field(4, ge=1)

    @model_validator(mode="after")
    def _bounds_ordered(self) -> "ExternalConfig":
        for name in ("temperature_bounds", "wind_bounds", "ticket_bounds"):
            low, high = getattr(self, name)
            if not high > low:
                raise ValueError(f"{name} must satisfy low < high, got {(low, high)}")
        return self

    @property
    def continuous_features(self) -> Tuple[str, ...]:
        """Continuous features in table order."""
        if self.has_ticket_price:
            return ("temperature", "wind_speed", "ticket_price")
        return ("temperature", "wind_speed")

    @property
    def categorical_features(self) -> Tuple[Tuple[str, int, int], ...]:
        """(name, vocabulary size, embedding width) in table order."""
        return (
            ("weather", self.weather_classes, self.weather_width),
            ("holiday", BINARY_CLASSES, self.holiday_width),
            ("weekend", BINARY_CLASSES, self.weekend_width),
            ("day_of_week", DAY_OF_WEEK_CLASSES, self.day_of_week_width),
            ("hour_of_day", HOUR_OF_DAY_CLASSES, self.hour_of_day_width),
        )

    @property
    def input_width(self) -> int:
        """Length of the encoded vector e."""
        return len(self.continuous_features) + sum(w for _, _, w in self.categorical_features)

    def bounds(self, feature: str) -> Tuple[float, float]:
        return {
            "temperature": self.temperature_bounds,
            "wind_speed": self.wind_bounds,
            "ticket_price": self.ticket_bounds,
        }[feature]

    @classmethod
    def preset(cls, schema: Schema, height: int, width: int, scale: int) -> "ExternalConfig":
        """Schema presets following the two reference datasets."""
        if schema == "taxibj":
            return cls(schema_name="taxibj", height=height, width=width, scale=scale)
        return cls(
            schema_name="happyvalley",
            weather_classes=8,
            has_ticket_price=True,
            temperature_bounds=(-15.0, 39.0),
            wind_bounds=(0.1, 15.5),
            ticket_bounds=(29.9, 260.0),
            height=height,
            width=width,
            scale=scale,
        )


class UrbanFMConfig(_Frozen):
    """Architecture hyperparameters of the inference network."""

    m: int = Field(16, ge=0)
    f: int = Field(128, ge=1)
    scale: int = 4
    height: int = Field(32, ge=1)
    width: int = Field(32, ge=1)
    variant: Variant = "full"
    out_channels: int = Field(1, ge=1)
    eps: float = Field(1e-7, ge=0.0)
    external: Optional[ExternalConfig] = None
    nn: NNConfig = NNConfig()

    @property
    def has_external(self) -> bool:
        return self.external is not None

    def check(self) -> None:
        """Raise ConfigError when cross-field invariants do not hold."""
        if self.scale < 2:
            raise ConfigError("model", f"scale factor N must be >= 2, got {self.scale}")
        if self.variant == "full" and self.external is None:
            raise ConfigError("model", "variant 'full' requires an external config")
        if self.variant == "ne" and self.external is not None:
            raise ConfigError("model", "variant 'ne' must not carry an external config")
        if self.external is not None:
            ext = self.external
            if (ext.height, ext.width, ext.scale) != (self.height, self.width, self.scale):
                raise ConfigError(
                    "model",
                    f"external grid {(ext.height, ext.width, ext.scale)} does not match "
                    f"model grid {(self.height, self.width, self.scale)}",
                )


class TrainConfig(_Frozen):
    """Optimization settings."""

    lr: float = Field(1e-4, gt=0)
    batch: int = Field(16, ge=2)
    epochs: int = Field(100, ge=1)
    halve_every: int = Field(20, ge=1)
    coarse_scaler: float = Field(1500.0, gt=0)
    fine_scaler: float = Field(100.0, gt=0)
    variant: Variant = "full"
    seed: int = 0
    structural_weight: float = Field(1.0, ge=0.0)
    fraction: float = Field(1.0, gt=0.0, le=1.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0)
    val_every: int = Field(1, ge=1)
    val_limit: Optional[int] = Field(None, ge=1)
    eval_batch: int = Field(64, ge=1)


class SynthConfig(_Frozen):
    """Synthetic dataset generator settings."""

    height: int = Field(8, ge=1)
    width: int = Field(8, ge=1)
    scale: int = Field(2, ge=2)
    steps: int = Field(600, ge=1)
    seed: int = 0
    stationary: bool = False
    noise: float = Field(0.05, ge=0.0)
    schema_name: Schema = "taxibj"
    interval_minutes: int = Field(60, ge=1)
    start: str = "2013-07-01T00:00:00"
    base_flow: float = Field(400.0, gt=0)
    semantics: Tuple[str, ...] = ("office", "residence", "park")
    hour_amplitude: float = Field(1.2, ge=0.0)
    weekend_amplitude: float = Field(0.8, ge=0.0)
    weather_amplitude: float = Field(1.0, ge=0.0)
    smoothing: float = Field(3.0, ge=0.0)
    mask_blur: float = Field(1.5, ge=0.0)
    relief: float = Field(0.7, ge=0.0)
    texture: float = Field(0.08, ge=0.0)


def validation_message(error: ValidationError) -> str:
    """Flatten a pydantic ValidationError into one line for CLI diagnostics."""
    parts = []
    for item in error.errors():
        loc = ".".join(str(p) for p in item.get("loc", ()))
        parts.append(f"{loc}: {item.get('msg')}" if loc else str(item.get("msg")))
    return "; ".join(parts)
