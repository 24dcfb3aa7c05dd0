"""
Exception hierarchy for flowmag.

Every error raised by library code derives from FlowmagError and names the
module it came from, so the CLI can print module-qualified diagnostics.
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

from pathlib import Path
from typing import Optional, Union


class FlowmagError(Exception):
    """Base class for all flowmag errors."""

    def __init__(self, module: str, message: str):
        self.module = module
        self.message = message
        super().__init__(f"[{module}] {message}")


class ShapeError(FlowmagError):
    """Raised when array shapes are inconsistent or not divisible by the scale."""

    def __init__(self, module: str, message: str, axis: Optional[str] = None):
        self.axis = axis
        if axis is not None:
            message = f"{message} (axis: {axis})"
        super().__init__(module, message)


class DomainError(FlowmagError):
    """Raised when a value lies outside an operation's domain."""


class ConfigError(FlowmagError):
    """Raised when a configuration is invalid or inconsistent with its data."""


class ParseError(FlowmagError):
    """Raised when a file cannot be parsed; names the path and, for text files, the 1-based line."""

    def __init__(
        self, module: str, message: str, path: Union[str, Path], line: Optional[int] = None
    ):
        self.path = str(path)
        self.line = line
        where = self.path if line is None else f"{self.path}:{line}"
        super().__init__(module, f"{where}: {message}")


class NonFiniteLossError(FlowmagError):
    """Raised when the training loss stops being finite."""

    def __init__(self, epoch: int, step: int, value: float):
        self.epoch = epoch
        self.step = step
        self.value = value
        super().__init__(
            "train",
            f"non-finite loss {value!r} at epoch {epoch}, step {step}; aborting",
        )
