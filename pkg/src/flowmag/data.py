"""
Datasets: on-disk format, ingest, chronological splitting and a synthetic
generator.

A dataset directory holds

    manifest.txt             key = value lines (DatasetManifest)
    <split>_coarse.txt       "T H W" header, then T blocks of H lines of W floats
    <split>_fine.txt         same layout at the fine resolution
    <split>_externals.csv    one row of external factors per timestamp

Floats are written with 17 significant digits so a read reproduces exactly
what was written.
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
from datetime import datetime, timedelta
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union, get_origin

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy import ndimage

from . import grid
from ._telemetry import traced
from .config import ExternalConfig, Schema, SynthConfig
from .errors import ConfigError, DomainError, ParseError, ShapeError
from .external import ExternalRecord, read_externals_csv, write_externals_csv

_MODULE = "data"

MANIFEST_FILE = "manifest.txt"
DEFAULT_SPLIT = "all"
FLOAT_FORMAT = "%.17g"
SAMPLE_TOLERANCE = 1e-6
# Fine-cell smoothing of the generator's stationary texture.
TEXTURE_SIGMA = 0.7


# -- grid text files --------------------------------------------------------


def write_grids(path: Union[str, Path], maps: npt.ArrayLike) -> None:
    """Write a (T, H, W) stack in the grid text format."""
    arr = np.asarray(maps, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(_MODULE, f"grid stacks must be (T, H, W), got {arr.shape}")
    t, h, w = arr.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write(f"{t} {h} {w}\n")
        np.savetxt(fh, arr.reshape(t * h, w), fmt=FLOAT_FORMAT, delimiter=" ")


def read_grids(path: Union[str, Path]) -> npt.NDArray[np.float64]:
    """
    Read a grid text file into a (T, H, W) float64 array.

    Raises:
        ParseError: naming the path and the 1-based line of the first problem
            (bad header, wrong value count, non-numeric value, short file,
            trailing data).
    """
    path = Path(path)
    with path.open() as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(_MODULE, "empty file, expected header 'T H W'", path, 1)
    try:
        t, h, w = (int(v) for v in lines[0].split())
    except ValueError:
        raise ParseError(_MODULE, f"bad header {lines[0]!r}, expected 'T H W'", path, 1)
    if t < 0 or h < 1 or w < 1:
        raise ParseError(_MODULE, f"bad header dimensions {(t, h, w)}", path, 1)

    out = np.empty((t * h, w), dtype=np.float64)
    row = 0
    lineno = 1
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split()
        if not fields:
            continue
        if row == t * h:
            raise ParseError(_MODULE, f"unexpected data after {t} blocks", path, lineno)
        if len(fields) != w:
            raise ParseError(_MODULE, f"expected {w} values, found {len(fields)}", path, lineno)
        try:
            out[row] = [float(v) for v in fields]
        except ValueError as e:
            raise ParseError(_MODULE, f"non-numeric value: {e}", path, lineno)
        row += 1
    if row != t * h:
        raise ParseError(
            _MODULE, f"file ends after {row} of {t * h} grid rows", path, lineno + 1
        )
    return out.reshape(t, h, w)


# -- manifest ---------------------------------------------------------------


class DatasetManifest(BaseModel):
    """Everything needed to interpret a dataset directory."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = "synthetic"
    height: int = Field(ge=1)
    width: int = Field(ge=1)
    scale: int = Field(ge=2)
    interval_minutes: int = Field(60, ge=1)
    coarse_scaler: float = Field(1500.0, gt=0)
    fine_scaler: float = Field(100.0, gt=0)
    schema_name: Schema = "taxibj"
    weather_classes: int = Field(16, ge=1)
    has_ticket_price: bool = False
    temperature_bounds: Tuple[float, float] = (-24.6, 41.0)
    wind_bounds: Tuple[float, float] = (0.0, 48.6)
    ticket_bounds: Tuple[float, float] = (29.9, 260.0)
    split_ratios: Tuple[float, float, float] = (0.5, 0.25, 0.25)
    zero_threshold: float = Field(0.9, ge=0.0, le=1.0)
    splits: Tuple[str, ...] = (DEFAULT_SPLIT,)

    @model_validator(mode="after")
    def _ratios_sum_to_one(self) -> "DatasetManifest":
        if any(r <= 0 for r in self.split_ratios):
            raise ValueError(f"split ratios must be positive, got {self.split_ratios}")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {self.split_ratios}")
        return self

    @property
    def fine_shape(self) -> Tuple[int, int]:
        return self.height * self.scale, self.width * self.scale

    def external_config(self) -> ExternalConfig:
        """The external-fusion config implied by this dataset's schema."""
        return ExternalConfig(
            schema_name=self.schema_name,
            weather_classes=self.weather_classes,
            has_ticket_price=self.has_ticket_price,
            temperature_bounds=self.temperature_bounds,
            wind_bounds=self.wind_bounds,
            ticket_bounds=self.ticket_bounds,
            height=self.height,
            width=self.width,
            scale=self.scale,
        )

    @classmethod
    def preset(cls, schema: Schema, height: int, width: int, scale: int, **overrides: object) -> "DatasetManifest":
        """Schema defaults: TaxiBJ-style splits 2:1:1, HappyValley-style 8:1:1."""
        ext = ExternalConfig.preset(schema, height, width, scale)
        values: Dict[str, object] = dict(
            height=height,
            width=width,
            scale=scale,
            schema_name=schema,
            weather_classes=ext.weather_classes,
            has_ticket_price=ext.has_ticket_price,
            temperature_bounds=ext.temperature_bounds,
            wind_bounds=ext.wind_bounds,
            ticket_bounds=ext.ticket_bounds,
            split_ratios=(0.5, 0.25, 0.25) if schema == "taxibj" else (0.8, 0.1, 0.1),
        )
        values.update(overrides)
        return cls.model_validate(values)

    def to_text(self) -> str:
        lines = []
        for key, value in self.model_dump().items():
            if isinstance(value, (tuple, list)):
                value = ", ".join(_fmt(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            else:
                value = _fmt(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, path: Union[str, Path] = MANIFEST_FILE) -> "DatasetManifest":
        raw: Dict[str, object] = {}
        where: Dict[str, int] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            key, sep, value = stripped.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise ParseError(_MODULE, f"expected 'key = value', got {line!r}", path, lineno)
            if key not in cls.model_fields:
                raise ParseError(_MODULE, f"unknown manifest key {key!r}", path, lineno)
            is_tuple = get_origin(cls.model_fields[key].annotation) is tuple
            raw[key] = [v.strip() for v in value.split(",")] if is_tuple else value
            where[key] = lineno
        try:
            return cls.model_validate(raw)
        except ValidationError as e:
            first = e.errors()[0]
            loc = first.get("loc", ())
            key = str(loc[0]) if loc else ""
            raise ParseError(_MODULE, f"{key}: {first.get('msg')}", path, where.get(key)) from e


def _fmt(value: object) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


# -- samples and datasets ---------------------------------------------------


@dataclass(frozen=True)
class Sample:
    timestamp: str
    coarse: grid.FlowMap
    fine: grid.FlowMap
    external: ExternalRecord


@dataclass(frozen=True)
class Dataset:
    manifest: DatasetManifest
    samples: Tuple[Sample, ...]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def coarse(self) -> npt.NDArray[np.float64]:
        return _stack([s.coarse for s in self.samples], (self.manifest.height, self.manifest.width))

    @property
    def fine(self) -> npt.NDArray[np.float64]:
        return _stack([s.fine for s in self.samples], self.manifest.fine_shape)

    @property
    def externals(self) -> List[ExternalRecord]:
        return [s.external for s in self.samples]

    @property
    def timestamps(self) -> List[str]:
        return [s.timestamp for s in self.samples]

    def subset(self, samples: Sequence[Sample]) -> "Dataset":
        return Dataset(manifest=self.manifest, samples=tuple(samples))

    def head(self, fraction: float) -> "Dataset":
        """The first `fraction` of samples (at least one)."""
        if not 0.0 < fraction <= 1.0:
            raise DomainError(_MODULE, f"fraction must lie in (0, 1], got {fraction}")
        keep = max(1, int(len(self.samples) * fraction + 1e-9))
        return self.subset(self.samples[:keep])

    def spread(self, limit: int) -> "Dataset":
        """At most `limit` samples, evenly spaced over the split."""
        if limit < 1:
            raise DomainError(_MODULE, f"limit must be >= 1, got {limit}")
        if limit >= len(self.samples):
            return self
        picks = np.linspace(0, len(self.samples) - 1, limit).round().astype(int)
        return self.subset([self.samples[i] for i in picks])


def _stack(maps: List[grid.FlowMap], shape: Tuple[int, int]) -> npt.NDArray[np.float64]:
    if not maps:
        return np.zeros((0, *shape))
    return np.stack(maps)


def check_sample(sample: Sample, scale: int) -> None:
    """Raise DomainError when coarsen(fine) does not reproduce coarse."""
    residual = grid.relative_violation(sample.coarse, sample.fine, scale)
    worst = float(residual.max()) if residual.size else 0.0
    if worst > SAMPLE_TOLERANCE:
        raise DomainError(
            _MODULE,
            f"sample {sample.timestamp}: coarse map is not the aggregate of the fine map "
            f"(relative residual {worst:.3g})",
        )


@traced("data.write", "data")
def write_dataset(dataset: Dataset, path: Union[str, Path], split: str = DEFAULT_SPLIT) -> None:
    """
    Write one split of samples into directory `path` and record it in the manifest.

    Splits already listed by a manifest on disk are kept; that manifest must
    otherwise describe the same dataset.

    Raises:
        ConfigError: the manifest on disk describes a different dataset.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    written: Tuple[str, ...] = ()
    if (root / MANIFEST_FILE).exists():
        existing = read_manifest(root)
        if existing.model_copy(update={"splits": ()}) != dataset.manifest.model_copy(update={"splits": ()}):
            raise ConfigError(_MODULE, f"{root} already holds a dataset with a different manifest")
        written = existing.splits
    manifest = dataset.manifest.model_copy(update={"splits": written + ((split,) if split not in written else ())})
    for sample in dataset.samples:
        if sample.coarse.shape != (manifest.height, manifest.width) or sample.fine.shape != manifest.fine_shape:
            raise ShapeError(_MODULE, f"sample {sample.timestamp} does not match the manifest grid")
    (root / MANIFEST_FILE).write_text(manifest.to_text())
    write_grids(root / f"{split}_coarse.txt", dataset.coarse)
    write_grids(root / f"{split}_fine.txt", dataset.fine)
    write_externals_csv(
        root / f"{split}_externals.csv",
        [(s.timestamp, s.external) for s in dataset.samples],
        with_ticket_price=manifest.has_ticket_price,
    )


def read_manifest(path: Union[str, Path]) -> DatasetManifest:
    file = Path(path) / MANIFEST_FILE
    return DatasetManifest.from_text(file.read_text(), file)


@traced("data.read", "data")
def read_dataset(path: Union[str, Path], split: str = DEFAULT_SPLIT) -> Dataset:
    """Read and validate one split of a dataset directory."""
    root = Path(path)
    manifest = read_manifest(root)
    if split not in manifest.splits:
        raise DomainError(_MODULE, f"{root} has no split {split!r} (available: {', '.join(manifest.splits)})")
    coarse_file = root / f"{split}_coarse.txt"
    fine_file = root / f"{split}_fine.txt"
    coarse = read_grids(coarse_file)
    fine = read_grids(fine_file)
    if coarse.shape[1:] != (manifest.height, manifest.width):
        raise ParseError(_MODULE, f"grid {coarse.shape[1:]} does not match manifest", coarse_file, 1)
    if fine.shape[1:] != manifest.fine_shape:
        raise ParseError(_MODULE, f"grid {fine.shape[1:]} does not match manifest", fine_file, 1)
    if fine.shape[0] != coarse.shape[0]:
        raise ParseError(_MODULE, f"{fine.shape[0]} fine maps for {coarse.shape[0]} coarse maps", fine_file, 1)

    ext_file = root / f"{split}_externals.csv"
    rows = read_externals_csv(ext_file, manifest.external_config())
    if len(rows) != coarse.shape[0]:
        raise ParseError(_MODULE, f"{len(rows)} external rows for {coarse.shape[0]} maps", ext_file)

    samples = []
    for (timestamp, record), c, f in zip(rows, coarse, fine):
        if np.any(c < 0) or np.any(f < 0):
            raise DomainError(_MODULE, f"sample {timestamp}: negative flow")
        sample = Sample(timestamp=timestamp, coarse=c, fine=f, external=record)
        check_sample(sample, manifest.scale)
        samples.append(sample)
    return Dataset(manifest=manifest, samples=tuple(samples))


def split_filter(
    dataset: Dataset,
    ratios: Optional[Tuple[float, float, float]] = None,
    zero_threshold: Optional[float] = None,
) -> Tuple[Dataset, Dataset, Dataset]:
    """
    Drop noisy samples, then split chronologically into (train, valid, test).

    A sample is noisy when more than `zero_threshold` of its coarse entries
    are zero. Ratios and threshold default to the manifest's.
    """
    ratios = ratios or dataset.manifest.split_ratios
    threshold = dataset.manifest.zero_threshold if zero_threshold is None else zero_threshold
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise DomainError(_MODULE, f"split ratios must be three positive numbers, got {ratios}")
    total = float(sum(ratios))
    kept = [s for s in dataset.samples if np.mean(s.coarse == 0) <= threshold]

    n = len(kept)
    n_train = int(n * ratios[0] / total + 1e-9)
    n_valid = int(n * ratios[1] / total + 1e-9)
    parts = (kept[:n_train], kept[n_train : n_train + n_valid], kept[n_train + n_valid :])
    for name, part in zip(("train", "valid", "test"), parts):
        if not part:
            raise DomainError(_MODULE, f"{name} split is empty ({n} samples after filtering)")
    return dataset.subset(parts[0]), dataset.subset(parts[1]), dataset.subset(parts[2])


# -- synthetic generator ----------------------------------------------------


def _smooth_field(rng: np.random.Generator, shape: Tuple[int, int], sigma: float) -> npt.NDArray[np.float64]:
    field = rng.standard_normal(shape)
    if sigma > 0:
        field = ndimage.gaussian_filter(field, sigma=sigma, mode="wrap")
    std = field.std()
    return field / std if std > 0 else field


def semantic_masks(cfg: SynthConfig, rng: np.random.Generator) -> npt.NDArray[np.float64]:
    """One-hot (S, H, W) masks partitioning the fine grid into region semantics."""
    shape = (cfg.height * cfg.scale, cfg.width * cfg.scale)
    fields = np.stack([_smooth_field(rng, shape, cfg.smoothing) for _ in cfg.semantics])
    labels = np.argmax(fields, axis=0)
    return np.stack([(labels == s).astype(np.float64) for s in range(len(cfg.semantics))])


def _response(semantic: str, cfg: SynthConfig, record: ExternalRecord, weather_classes: int) -> float:
    """Log-attractiveness shift of one region semantic under the given factors."""
    hour = record.hour_of_day
    bad_weather = record.weather >= weather_classes // 2
    working = 9 <= hour < 18 and not record.weekend and not record.holiday
    evening = hour >= 19 or hour < 7
    if semantic == "office":
        return cfg.hour_amplitude * (1.0 if working else -0.5) - cfg.weekend_amplitude * record.weekend
    if semantic == "residence":
        return cfg.hour_amplitude * (0.8 if evening else -0.3) + 0.5 * cfg.weather_amplitude * bad_weather
    if semantic == "park":
        daytime = 8 <= hour < 20
        return (
            cfg.weekend_amplitude * (record.weekend or record.holiday)
            + 0.5 * cfg.hour_amplitude * daytime
            - cfg.weather_amplitude * bad_weather
        )
    return 0.0


def _daily_profile(hour: int) -> float:
    return 1.0 + 0.6 * np.sin(2 * np.pi * (hour - 8) / 24.0) + 0.3 * np.exp(-((hour - 18) ** 2) / 4.0)


def _synth_externals(
    cfg: SynthConfig, ext: ExternalConfig, rng: np.random.Generator
) -> List[Tuple[str, ExternalRecord]]:
    start = datetime.fromisoformat(cfg.start)
    t_low, t_high = ext.temperature_bounds
    w_low, w_high = ext.wind_bounds
    p_low, p_high = ext.ticket_bounds
    holidays = rng.random(cfg.steps * cfg.interval_minutes // 1440 + 2) < 0.05
    weather = int(rng.integers(ext.weather_classes))
    rows = []
    for t in range(cfg.steps):
        when = start + timedelta(minutes=t * cfg.interval_minutes)
        day = (when - start).days
        if rng.random() < 0.1:
            weather = int(rng.integers(ext.weather_classes))
        mid = 0.5 * (t_low + t_high)
        temperature = mid + 0.25 * (t_high - t_low) * np.sin(2 * np.pi * (when.hour - 9) / 24.0)
        temperature += rng.normal(0.0, 1.0)
        wind = w_low + rng.gamma(2.0, 0.08 * (w_high - w_low))
        weekend = int(when.weekday() >= 5)
        holiday = int(holidays[day])
        price = None
        if ext.has_ticket_price:
            price = p_low + (p_high - p_low) * (0.3 + 0.4 * weekend + 0.3 * holiday) * rng.uniform(0.8, 1.0)
        rows.append(
            (
                when.strftime("%Y-%m-%dT%H:%M:%S"),
                ExternalRecord(
                    temperature=float(np.clip(temperature, t_low, t_high)),
                    wind_speed=float(np.clip(wind, w_low, w_high)),
                    weather=weather,
                    holiday=holiday,
                    weekend=weekend,
                    day_of_week=when.weekday(),
                    hour_of_day=when.hour,
                    ticket_price=None if price is None else float(np.clip(price, p_low, p_high)),
                ),
            )
        )
    return rows


@traced("data.synth", "data")
def synth_generate(cfg: SynthConfig) -> Dataset:
    """
    Generate a dataset whose fine maps follow a smooth, factor-dependent
    intensity surface.

    Per step the fine flow is

        base / N^2 * profile(hour) * relief * exp(sum_s mask_s * r_s(factors)) * lognormal(noise)

    where `relief` is a fixed smooth surface plus a little fine-scale texture
    and the semantic masks are blurred, so most of the allocation inside a block
    can be read off the surrounding coarse cells. The coarse map is the
    aggregate of the fine map. With `stationary` every r_s is 0 and the
    allocation is time-invariant up to the noise.
    """
    rng = np.random.default_rng(cfg.seed)
    manifest = DatasetManifest.preset(cfg.schema_name, cfg.height, cfg.width, cfg.scale, interval_minutes=cfg.interval_minutes)
    ext = manifest.external_config()
    scale = cfg.scale
    fine_shape = manifest.fine_shape

    # Blurred masks still sum to one; a region's response spills over its edges.
    masks = ndimage.gaussian_filter(semantic_masks(cfg, rng), sigma=(0, cfg.mask_blur, cfg.mask_blur), mode="wrap")
    relief = np.exp(
        cfg.relief * _smooth_field(rng, fine_shape, cfg.smoothing)
        + cfg.texture * _smooth_field(rng, fine_shape, TEXTURE_SIGMA)
    )
    externals = _synth_externals(cfg, ext, rng)

    samples = []
    for timestamp, record in externals:
        intensity = relief * (cfg.base_flow / scale**2 * _daily_profile(record.hour_of_day))
        if not cfg.stationary:
            shifts = [_response(s, cfg, record, ext.weather_classes) for s in cfg.semantics]
            intensity = intensity * np.exp(np.tensordot(np.asarray(shifts), masks, axes=1))
        fine = intensity
        if cfg.noise > 0:
            fine = intensity * rng.lognormal(0.0, cfg.noise, size=fine_shape)
        samples.append(
            Sample(timestamp=timestamp, coarse=grid.block_sum(fine, scale), fine=fine, external=record)
        )
    return Dataset(manifest=manifest, samples=tuple(samples))
