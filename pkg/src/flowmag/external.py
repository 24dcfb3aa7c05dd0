"""
External-factor fusion.

Records of meteorology, time and event factors are encoded into a vector e
(min-max scaled continuous features followed by categorical embeddings) and
mapped by a small subnet to a coarse feature map H^c_e (B, 1, I, J) and a
fine one H^f_e (B, 1, N*I, N*J).
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
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from ._nn import Dense, Dropout, Embedding, Module, Tensor, upsampling_chain
from ._nn import functional as F
from .config import ExternalConfig, NNConfig
from .errors import ConfigError, DomainError, ParseError, ShapeError

_MODULE = "external-fusion"

CSV_COLUMNS = (
    "timestamp",
    "temperature",
    "wind_speed",
    "weather",
    "holiday",
    "weekend",
    "day_of_week",
    "hour_of_day",
)
TICKET_COLUMN = "ticket_price"


class ExternalRecord(BaseModel):
    """External factors observed at one timestamp."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    temperature: float
    wind_speed: float
    weather: int = Field(ge=0)
    holiday: int = Field(ge=0, le=1)
    weekend: int = Field(ge=0, le=1)
    day_of_week: int = Field(ge=0, le=6)
    hour_of_day: int = Field(ge=0, le=23)
    ticket_price: Optional[float] = None


def check_record(record: ExternalRecord, cfg: ExternalConfig) -> None:
    """Raise DomainError when a record falls outside the schema's vocabularies or bounds."""
    for name, vocab, _ in cfg.categorical_features:
        value = getattr(record, name)
        if not 0 <= value < vocab:
            raise DomainError(_MODULE, f"{name}: category {value} outside vocabulary [0, {vocab})")
    if cfg.has_ticket_price and record.ticket_price is None:
        raise DomainError(_MODULE, f"schema {cfg.schema_name} requires ticket_price")
    for name in cfg.continuous_features:
        low, high = cfg.bounds(name)
        value = getattr(record, name)
        if not low <= value <= high:
            raise DomainError(_MODULE, f"{name} {value} outside sanity bounds [{low}, {high}]")


def continuous_matrix(records: Sequence[ExternalRecord], cfg: ExternalConfig) -> npt.NDArray[np.float64]:
    """(B, #continuous) min-max scaled to [0, 1] with the schema bounds."""
    rows = []
    for record in records:
        row = []
        for name in cfg.continuous_features:
            low, high = cfg.bounds(name)
            row.append((getattr(record, name) - low) / (high - low))
        rows.append(row)
    return np.asarray(rows, dtype=np.float64).reshape(len(records), len(cfg.continuous_features))


class ExternalEncoder(Module):
    """Embedding tables for the categorical factors, in schema order."""

    def __init__(self, cfg: ExternalConfig, rng: np.random.Generator, nn: NNConfig = NNConfig()):
        super().__init__()
        self.cfg = cfg
        self.tables: Dict[str, Embedding] = {}
        for name, vocab, width in cfg.categorical_features:
            self.tables[name] = self.add_module(  # type: ignore[assignment]
                name, Embedding(vocab, width, rng, feature=name, init_range=nn.embedding_range)
            )

    def forward(self, records: Sequence[ExternalRecord]) -> Tensor:
        """Encode a batch into e of shape (B, input_width)."""
        if not records:
            raise DomainError(_MODULE, "cannot encode an empty batch of external records")
        for record in records:
            check_record(record, self.cfg)
        dtype = next(iter(self.tables.values())).table.dtype
        parts = [Tensor(continuous_matrix(records, self.cfg).astype(dtype))]
        for name, table in self.tables.items():
            parts.append(table(np.array([getattr(r, name) for r in records], dtype=np.int64)))
        return F.concat(parts, axis=1)


def encode_external(record: ExternalRecord, cfg: ExternalConfig, encoder: ExternalEncoder) -> Tensor:
    """Encode one record into the vector e of length cfg.input_width."""
    if encoder.cfg != cfg:
        raise ConfigError(_MODULE, "encoder was built for a different external schema")
    return F.reshape(encoder([record]), (cfg.input_width,))


class ExternalSubnet(Module):
    """
    dense(hidden) -> dropout -> ReLU -> dense(I*J) -> ReLU -> reshape gives
    H^c_e; a one-channel sub-pixel chain then gives H^f_e.
    """

    def __init__(self, cfg: ExternalConfig, rng: np.random.Generator, nn: NNConfig = NNConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = self.add_module("embed", ExternalEncoder(cfg, rng, nn))
        self.fc1 = self.add_module("fc1", Dense(cfg.input_width, cfg.hidden, rng))
        self.dropout = self.add_module("dropout", Dropout(cfg.dropout, rng))
        self.fc2 = self.add_module("fc2", Dense(cfg.hidden, cfg.height * cfg.width, rng))
        self.upsample = self.add_module(
            "upsample", upsampling_chain(1, cfg.scale, rng, nn.bn_eps, nn.bn_momentum)
        )

    def fuse(self, e: Tensor) -> Tuple[Tensor, Tensor]:
        """Map an encoded batch e (B, input_width) to (H^c_e, H^f_e)."""
        if e.ndim != 2 or e.shape[1] != self.cfg.input_width:
            raise ShapeError(
                _MODULE,
                f"encoded externals have shape {e.shape}, expected (B, {self.cfg.input_width})",
                axis="features",
            )
        h = F.relu(self.dropout(self.fc1(e)))
        h = F.relu(self.fc2(h))
        coarse = F.reshape(h, (e.shape[0], 1, self.cfg.height, self.cfg.width))
        return coarse, self.upsample(coarse)

    def forward(self, records: Sequence[ExternalRecord]) -> Tuple[Tensor, Tensor]:
        return self.fuse(self.encoder(records))


def external_forward(
    e: Tensor, subnet: ExternalSubnet, training: bool = False
) -> Tuple[Tensor, Tensor]:
    """Run the fusion subnet on encoded vectors in the requested mode; the subnet keeps its own mode."""
    previous = subnet.training
    subnet.train(training)
    try:
        if e.ndim == 1:
            e = F.reshape(e, (1, e.shape[0]))
        return subnet.fuse(e)
    finally:
        subnet.train(previous)


# -- CSV ingest -------------------------------------------------------------


def read_externals_csv(
    path: Union[str, Path], cfg: Optional[ExternalConfig] = None
) -> List[Tuple[str, ExternalRecord]]:
    """
    Read (timestamp, record) rows from a CSV with a header naming the factors.

    The ticket_price column is optional. When `cfg` is given every record is
    checked against its vocabularies and bounds.
    """
    path = Path(path)
    rows: List[Tuple[str, ExternalRecord]] = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise ParseError(_MODULE, f"missing columns {missing}", path, 1)
        for row in reader:
            line = reader.line_num
            ticket = row.get(TICKET_COLUMN)
            try:
                record = ExternalRecord(
                    temperature=float(row["temperature"]),
                    wind_speed=float(row["wind_speed"]),
                    weather=int(row["weather"]),
                    holiday=int(row["holiday"]),
                    weekend=int(row["weekend"]),
                    day_of_week=int(row["day_of_week"]),
                    hour_of_day=int(row["hour_of_day"]),
                    ticket_price=float(ticket) if ticket not in (None, "") else None,
                )
            except (TypeError, ValueError, ValidationError) as e:
                raise ParseError(_MODULE, f"bad external record: {e}", path, line) from e
            if cfg is not None:
                try:
                    check_record(record, cfg)
                except DomainError as e:
                    raise ParseError(_MODULE, e.message, path, line) from e
            rows.append((row["timestamp"], record))
    return rows


def write_externals_csv(
    path: Union[str, Path],
    rows: Sequence[Tuple[str, ExternalRecord]],
    with_ticket_price: bool = False,
) -> None:
    columns = CSV_COLUMNS + ((TICKET_COLUMN,) if with_ticket_price else ())
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for timestamp, record in rows:
            values = [timestamp] + [_cell(getattr(record, c)) for c in columns[1:]]
            writer.writerow(values)


def _cell(value: Union[int, float, None]) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)
