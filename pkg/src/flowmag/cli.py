"""
flowmag CLI - batch experiments for fine-grained flow inference.

Commands: generate, train, infer, evaluate, compare, gradcheck, params.
Exit codes: 0 success, 1 usage error, 2 data/model/runtime error.
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

import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import click
from pydantic import ValidationError

from . import __version__
from ._ids import get_correlation_id, new_correlation_id
from ._nn import TOLERANCE, op_checks
from ._telemetry import configure_tracing, run_span, shutdown_tracing
from .baselines import HAModel, MeanPartition, ha_fit
from .config import ExternalConfig, SynthConfig, TrainConfig, UrbanFMConfig, validation_message
from .data import Dataset, read_dataset, read_grids, split_filter, synth_generate, write_dataset, write_grids
from .errors import ConfigError, FlowmagError
from .eval import EvaluationError, Inferencer, MetricsReport, check_threshold, evaluate, infer_split, mean_abs_error_grid, write_reports
from .external import read_externals_csv
from .model import build, end_to_end_gradcheck, load_model, param_count, param_count_closed_form, predict
from .train import train_loop


# ANSI color codes for terminal output
class Colors:
    GREEN = "\033[92m"
    RED = "\033[91m"
    YELLOW = "\033[93m"
    BLUE = "\033[94m"
    CYAN = "\033[96m"
    BOLD = "\033[1m"
    END = "\033[0m"


def print_status(message: str, status: str, details: str = "") -> None:
    """Print a formatted status message with color coding."""
    if status == "OK":
        status_color = Colors.GREEN
        status_symbol = "✅"
    elif status == "WARN":
        status_color = Colors.YELLOW
        status_symbol = "⚠️ "
    elif status == "FAIL":
        status_color = Colors.RED
        status_symbol = "❌"
    else:
        status_color = Colors.BLUE
        status_symbol = "ℹ️ "

    click.echo(f"{status_symbol} {Colors.BOLD}{message}{Colors.END}: {status_color}{status}{Colors.END}")
    if details:
        click.echo(f"   {Colors.CYAN}{details}{Colors.END}")


def parse_geometry(value: str) -> Tuple[int, int]:
    """'8x8' -> (8, 8), rows first."""
    parts = value.lower().split("x")
    try:
        rows, cols = (int(p) for p in parts)
    except ValueError:
        raise click.BadParameter(f"expected ROWSxCOLS such as 8x8, got {value!r}")
    if rows < 1 or cols < 1:
        raise click.BadParameter(f"grid dimensions must be positive, got {value!r}")
    return rows, cols


def _print_correlation() -> None:
    print_status("Run", "INFO", f"correlation id {get_correlation_id()}")


def _geometry(ctx: click.Context, param: click.Parameter, value: Optional[str]) -> Optional[Tuple[int, int]]:
    return None if value is None else parse_geometry(value)


@click.group()
@click.version_option(version=__version__, prog_name="flowmag")
@click.option("--trace-console", is_flag=True, help="Print finished spans to stdout")
@click.option("--otlp-endpoint", default=None, metavar="URL", help="Export spans over OTLP/HTTP")
@click.pass_context
def cli(ctx: click.Context, trace_console: bool, otlp_endpoint: Optional[str]) -> None:
    """flowmag - infer fine-grained flow maps from coarse ones."""
    if configure_tracing(console=trace_console, otlp_endpoint=otlp_endpoint):
        ctx.call_on_close(shutdown_tracing)
    new_correlation_id()


@cli.command()
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--coarse", "geometry", default="8x8", show_default=True, callback=_geometry, help="Coarse grid ROWSxCOLS")
@click.option("--scale", default=2, show_default=True, type=int, help="Upscaling factor N")
@click.option("--steps", default=600, show_default=True, type=int, help="Number of time steps")
@click.option("--stationary", is_flag=True, help="Time-invariant allocation (HA-solvable)")
@click.option("--noise", default=0.05, show_default=True, type=float, help="Log-normal allocation noise")
@click.option("--schema", type=click.Choice(["taxibj", "happyvalley"]), default="taxibj", show_default=True)
@click.option("--interval", default=60, show_default=True, type=int, help="Minutes between samples")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def generate(
    seed: int,
    geometry: Tuple[int, int],
    scale: int,
    steps: int,
    stationary: bool,
    noise: float,
    schema: str,
    interval: int,
    out_dir: str,
) -> None:
    """Write a synthetic dataset directory."""
    with run_span("cli.generate", "cli", cli__command="generate", data__seed=seed):
        cfg = SynthConfig(
            height=geometry[0],
            width=geometry[1],
            scale=scale,
            steps=steps,
            seed=seed,
            stationary=stationary,
            noise=noise,
            schema_name=schema,  # type: ignore[arg-type]
            interval_minutes=interval,
        )
        dataset = synth_generate(cfg)
        write_dataset(dataset, out_dir)
    print_status("Generate", "OK", f"{len(dataset)} samples at {geometry[0]}x{geometry[1]} (N={scale}) -> {out_dir}")


@cli.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--variant", type=click.Choice(["full", "ne", "sl"]), default="full", show_default=True)
@click.option("--m", default=16, show_default=True, type=int, help="Residual blocks")
@click.option("--f", default=128, show_default=True, type=int, help="Filters")
@click.option("--epochs", default=100, show_default=True, type=int)
@click.option("--lr", default=1e-4, show_default=True, type=float)
@click.option("--batch", default=16, show_default=True, type=int)
@click.option("--halve-every", default=20, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--lambda", "structural_weight", default=1.0, show_default=True, type=float, help="Structural loss weight (sl)")
@click.option("--fraction", default=1.0, show_default=True, type=float, help="Share of the training split to use")
@click.option("--externals/--no-externals", "sl_externals", default=False, help="Give variant sl the external subnet")
@click.option("--val-every", default=1, show_default=True, type=int, help="Validate every this many epochs")
@click.option("--val-limit", default=None, type=int, help="Validate on at most this many evenly spaced samples")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def train(
    data_dir: str,
    variant: str,
    m: int,
    f: int,
    epochs: int,
    lr: float,
    batch: int,
    halve_every: int,
    seed: int,
    structural_weight: float,
    fraction: float,
    sl_externals: bool,
    val_every: int,
    val_limit: Optional[int],
    out_dir: str,
) -> None:
    """Train the inference network; writes best.ckpt, last.ckpt and history.csv."""
    with run_span("cli.train", "cli", cli__command="train", train__variant=variant):
        dataset = read_dataset(data_dir)
        manifest = dataset.manifest
        train_split, valid_split, _ = split_filter(dataset)
        with_external = variant == "full" or (variant == "sl" and sl_externals)
        model_cfg = UrbanFMConfig(
            m=m,
            f=f,
            scale=manifest.scale,
            height=manifest.height,
            width=manifest.width,
            variant=variant,  # type: ignore[arg-type]
            external=manifest.external_config() if with_external else None,
        )
        train_cfg = TrainConfig(
            lr=lr,
            batch=batch,
            epochs=epochs,
            halve_every=halve_every,
            coarse_scaler=manifest.coarse_scaler,
            fine_scaler=manifest.fine_scaler,
            variant=variant,  # type: ignore[arg-type]
            seed=seed,
            structural_weight=structural_weight,
            fraction=fraction,
            val_every=val_every,
            val_limit=val_limit,
        )
        model = build(model_cfg, seed)
        print_status("Model", "INFO", f"UrbanFM-{variant} M={m} F={f}: {param_count(model):,} parameters")

        def report(record) -> None:  # type: ignore[no-untyped-def]
            mape = "undefined" if record.val_mape is None else f"{record.val_mape:.4f}"
            click.echo(
                f"   epoch {record.epoch:>4}  lr {record.lr:.3e}  loss {record.train_loss:.6f}  "
                f"val RMSE {record.val_rmse:.4f}  MAE {record.val_mae:.4f}  MAPE {mape}"
            )

        start = time.time()
        _, history = train_loop(model, train_split, valid_split, train_cfg, out_dir=out_dir, on_epoch=report)
    best = history.records[history.best_epoch]
    print_status(
        "Train",
        "OK",
        f"best epoch {best.epoch} val RMSE {best.val_rmse:.4f} in {time.time() - start:.1f}s -> {out_dir}",
    )
    _print_correlation()


@cli.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--input", "input_path", required=True, type=click.Path(exists=True, dir_okay=False), help="Coarse maps in grid format")
@click.option("--externals", "externals_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def infer(ckpt: str, input_path: str, externals_path: Optional[str], out_dir: str) -> None:
    """Infer fine maps (and distributions) for raw coarse maps."""
    with run_span("cli.infer", "infer", cli__command="infer"):
        model, checkpoint = load_model(ckpt)
        coarse = read_grids(input_path)
        externals = None
        if model.external is not None:
            if externals_path is None:
                raise ConfigError("cli", f"this UrbanFM-{model.cfg.variant} checkpoint needs --externals")
            externals = [r for _, r in read_externals_csv(externals_path, model.cfg.external)]
            if len(externals) != coarse.shape[0]:
                raise ConfigError("cli", f"{len(externals)} external rows for {coarse.shape[0]} coarse maps")
        scalers = checkpoint.header.train or {}
        dist, fine = predict(
            model,
            coarse,
            externals,
            float(scalers.get("coarse_scaler", 1500.0)),
            float(scalers.get("fine_scaler", 100.0)),
        )
        out = Path(out_dir)
        write_grids(out / "fine.txt", fine)
        if dist is not None:
            write_grids(out / "dist.txt", dist)
    print_status("Infer", "OK", f"{fine.shape[0]} fine maps of {fine.shape[1]}x{fine.shape[2]} -> {out_dir}")


def _load_inferencer(
    name: str, ckpt: Optional[str], ha_path: Optional[str], train_split: Dataset
) -> Tuple[Inferencer, Optional[float], Optional[float]]:
    scale = train_split.manifest.scale
    if name == "urbanfm":
        assert ckpt is not None
        model, checkpoint = load_model(ckpt)
        scalers = checkpoint.header.train or {}
        return model, scalers.get("coarse_scaler"), scalers.get("fine_scaler")
    if name == "mean":
        return MeanPartition(scale), None, None
    if name == "ha":
        if ha_path is not None:
            return HAModel.load(ha_path, scale), None, None
        return ha_fit(list(train_split.fine), scale), None, None
    raise ConfigError("cli", f"unknown method {name!r}")


def _evaluate_all(
    methods: Sequence[str],
    data_dir: str,
    ckpt: Optional[str],
    ha_path: Optional[str],
    out_dir: str,
    dump_errors: bool,
) -> List[MetricsReport]:
    dataset = read_dataset(data_dir)
    train_split, _, test_split = split_filter(dataset)
    reports = []
    grids = []
    for name in methods:
        inferencer, coarse_scaler, fine_scaler = _load_inferencer(name, ckpt, ha_path, train_split)
        report = evaluate(inferencer, test_split, coarse_scaler, fine_scaler, method=name)
        reports.append(report)
        if dump_errors:
            preds = infer_split(inferencer, test_split, coarse_scaler, fine_scaler)
            grids.append(mean_abs_error_grid(preds, test_split.fine))
        if isinstance(inferencer, HAModel) and ha_path is None:
            inferencer.save(Path(out_dir) / "ha_dist.txt")
        print_status(name, "OK", report.to_text())
    write_reports(reports, out_dir, grids if dump_errors else None)
    _print_correlation()
    return reports


@cli.command("evaluate")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--ckpt", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--baseline", type=click.Choice(["mean", "ha"]), default=None)
@click.option("--ha-model", "ha_path", default=None, type=click.Path(exists=True, dir_okay=False), help="Stored HA distribution")
@click.option("--dump-errors", is_flag=True, help="Write per-cell mean absolute error grids")
@click.option("--max-rmse", default=None, type=float, help="Fail (exit 2) when test RMSE exceeds this")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def evaluate_cmd(
    data_dir: str,
    ckpt: Optional[str],
    baseline: Optional[str],
    ha_path: Optional[str],
    dump_errors: bool,
    max_rmse: Optional[float],
    out_dir: str,
) -> None:
    """Score a checkpoint or a baseline on the test split."""
    if (ckpt is None) == (baseline is None):
        raise click.UsageError("give exactly one of --ckpt or --baseline")
    method = baseline or "urbanfm"
    with run_span("cli.evaluate", "cli", cli__command="evaluate", eval__method=method):
        (report,) = _evaluate_all([method], data_dir, ckpt, ha_path, out_dir, dump_errors)
        if max_rmse is not None:
            check_threshold(report, max_rmse)


@cli.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--ckpt", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--baselines", default="mean,ha", show_default=True, help="Comma-separated baselines")
@click.option("--dump-errors", is_flag=True, help="Write per-cell mean absolute error grids")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def compare(data_dir: str, ckpt: Optional[str], baselines: str, dump_errors: bool, out_dir: str) -> None:
    """Score the checkpoint and every listed baseline on the test split."""
    names = [b.strip() for b in baselines.split(",") if b.strip()]
    unknown = [b for b in names if b not in ("mean", "ha")]
    if unknown:
        raise click.BadParameter(f"unknown baselines {unknown}", param_hint="--baselines")
    methods = (["urbanfm"] if ckpt is not None else []) + names
    if not methods:
        raise click.UsageError("nothing to compare: give --ckpt and/or --baselines")
    with run_span("cli.compare", "cli", cli__command="compare"):
        _evaluate_all(methods, data_dir, ckpt, None, out_dir, dump_errors)


@cli.command()
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--points", default=10, show_default=True, type=int, help="Random points per operation")
def gradcheck(seed: int, points: int) -> None:
    """Finite-difference check of every tensor operation and the tiny model."""
    with run_span("cli.gradcheck", "cli", cli__command="gradcheck"):
        results = op_checks(seed, points)
        results.append(("end-to-end UrbanFM-ne", end_to_end_gradcheck(seed, "ne")))
        results.append(("end-to-end UrbanFM", end_to_end_gradcheck(seed, "full")))
        worst_name, worst = max(results, key=lambda r: r[1])
        for name, error in results:
            print_status(name, "OK" if error <= TOLERANCE else "FAIL", f"max relative error {error:.3e}")
        if worst > TOLERANCE:
            raise EvaluationError(worst, TOLERANCE, f"gradcheck {worst_name}")


@cli.command()
@click.option("--m", default=16, show_default=True, type=int)
@click.option("--f", default=64, show_default=True, type=int)
@click.option("--scale", default=4, show_default=True, type=int)
@click.option("--coarse", "geometry", default="32x32", show_default=True, callback=_geometry)
@click.option("--schema", type=click.Choice(["taxibj", "happyvalley"]), default="taxibj", show_default=True)
@click.option("--variant", type=click.Choice(["full", "ne", "sl"]), default="full", show_default=True)
def params(m: int, f: int, scale: int, geometry: Tuple[int, int], schema: str, variant: str) -> None:
    """Print enumerated and closed-form parameter counts."""
    height, width = geometry
    external = ExternalConfig.preset(schema, height, width, scale) if variant == "full" else None  # type: ignore[arg-type]
    cfg = UrbanFMConfig(m=m, f=f, scale=scale, height=height, width=width, variant=variant, external=external)  # type: ignore[arg-type]
    enumerated = param_count(build(cfg, 0))
    closed = param_count_closed_form(cfg)
    status = "OK" if enumerated == closed else "FAIL"
    print_status(f"UrbanFM {m}-{f}", status, f"enumerated {enumerated:,}  closed form {closed:,}  ({enumerated / 1e6:.2f}M)")
    if enumerated != closed:
        raise ConfigError("model", f"closed-form count {closed} differs from enumerated {enumerated}")


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and map failures onto exit codes."""
    try:
        cli.main(args=list(argv) if argv is not None else None, prog_name="flowmag", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return 1
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.exceptions.Exit as e:
        return int(e.exit_code)
    except ValidationError as e:
        click.echo(f"{Colors.RED}error{Colors.END}: {ConfigError('config', validation_message(e))}", err=True)
        return 2
    except FlowmagError as e:
        click.echo(f"{Colors.RED}error{Colors.END}: {e}", err=True)
        return 2
    except OSError as e:
        click.echo(f"{Colors.RED}error{Colors.END}: [io] {e}", err=True)
        return 2
    except click.ClickException as e:
        e.show()
        return 2
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
