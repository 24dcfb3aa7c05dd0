"""
Minimal reverse-mode tensor engine: the operator and layer set the flow
inference network needs, on numpy.
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

from . import functional
from .checkpoint import (
    Checkpoint,
    OptimizerState,
    apply_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from .gradcheck import DEFAULT_STEP, TOLERANCE, grad_check, grad_check_leaves, op_checks
from .layers import (
    BatchNorm2d,
    Conv2d,
    Dense,
    Dropout,
    Embedding,
    Module,
    Parameter,
    ResidualBlock,
    Sequential,
    SubPixelBlock,
    prime_factors,
    upsampling_chain,
)
from .tensor import Tensor, is_grad_enabled, no_grad

__all__ = [
    "functional",
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "Parameter",
    "Module",
    "Conv2d",
    "BatchNorm2d",
    "Dense",
    "Embedding",
    "Dropout",
    "SubPixelBlock",
    "ResidualBlock",
    "Sequential",
    "prime_factors",
    "upsampling_chain",
    "grad_check",
    "grad_check_leaves",
    "op_checks",
    "DEFAULT_STEP",
    "TOLERANCE",
    "Checkpoint",
    "OptimizerState",
    "save_checkpoint",
    "load_checkpoint",
    "apply_checkpoint",
]
