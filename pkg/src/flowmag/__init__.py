"""
flowmag - fine-grained urban flow inference.

Infers a fine-resolution crowd-flow map from a coarse one, keeping every
superregion total equal to the sum of its subregions.
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

__version__ = "0.1.0"

from .baselines import HAModel, MeanPartition, ha_fit, ha_infer, mean_partition
from .config import ExternalConfig, SynthConfig, TrainConfig, UrbanFMConfig
from .errors import (
    ConfigError,
    DomainError,
    FlowmagError,
    NonFiniteLossError,
    ParseError,
    ShapeError,
)
from .eval import MetricsReport, compute_metrics, evaluate
from .grid import coarsen, distribute, n2_normalize, nn_upsample, structural_violation
from .model import UrbanFM, build, load_model, predict, save_model
from .train import train_loop

__all__ = [
    "coarsen",
    "nn_upsample",
    "n2_normalize",
    "distribute",
    "structural_violation",
    "UrbanFM",
    "UrbanFMConfig",
    "ExternalConfig",
    "TrainConfig",
    "SynthConfig",
    "build",
    "predict",
    "save_model",
    "load_model",
    "train_loop",
    "mean_partition",
    "MeanPartition",
    "HAModel",
    "ha_fit",
    "ha_infer",
    "MetricsReport",
    "compute_metrics",
    "evaluate",
    "FlowmagError",
    "ShapeError",
    "DomainError",
    "ConfigError",
    "ParseError",
    "NonFiniteLossError",
]
