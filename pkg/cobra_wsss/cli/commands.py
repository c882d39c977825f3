"""
Command-line interface commands for the CoBra pipeline.
"""

import functools
import json
import traceback
from pathlib import Path
from typing import List, Optional, Sequence

import typer

try:  # newer typer vendors its own click; catch the exceptions it actually raises
    from typer import _click as click
except ImportError:
    import click
from pydantic import ValidationError
from rich.console import Console
from rich.panel import Panel
from rich.progress import BarColumn, Progress, TextColumn

from ..core.exceptions import CobraError, ConfigError, OverrideError
from ..core.losses import run_gradient_suite
from ..core.models import DatasetConfig, LossReport, MaskSource
from ..core.seeds import CRF_ENV, load_image
from ..core.settings import SNAPSHOT_NAME, load_config, save_config_snapshot
from ..services.ablation_service import AblationService
from ..services.dataset_service import DatasetService
from ..services.evaluation_service import EvaluationService
from ..services.mask_service import MaskService
from ..services.report_service import ReportService
from ..services.training_service import TrainingService
from ..utils.formatters import Formatters
from ..utils.logging import setup_logging

GRADIENT_TOLERANCE = 1e-3

console = Console()

app = typer.Typer(help="CoBra - dual-branch weakly-supervised semantic segmentation", no_args_is_help=True)

dataset_service = DatasetService()
training_service = TrainingService()
mask_service = MaskService()
evaluation_service = EvaluationService()
report_service = ReportService(mask_service, evaluation_service)
ablation_service = AblationService(training_service, evaluation_service)

VerboseOption = typer.Option(False, "--verbose", "-v", help="Debug logging")
SetOption = typer.Option(None, "--set", help="Config override key=value (repeatable)")


class CobraCLI:
    """CoBra CLI interface."""

    @staticmethod
    def run(argv: Optional[Sequence[str]] = None) -> int:
        return run(argv)


def handle_error(func):
    """Print pipeline errors and turn them into exit codes (1 usage, 2 runtime)."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (typer.Exit, click.exceptions.ClickException):
            raise
        except OverrideError as e:
            console.print(f"[red]Error: {e}[/red]")
            raise typer.Exit(1)
        except CobraError as e:
            console.print(f"[red]Error: {e}[/red]")
            raise typer.Exit(2)
        except Exception as e:
            console.print(f"[red]Error: {e}[/red]")
            console.print(f"[dim]Details: {traceback.format_exc()}[/dim]")
            raise typer.Exit(2)

    return wrapper


def parse_list(text: Optional[str], kind=float) -> Optional[List]:
    """Comma-separated values, or None for an empty option."""
    if not text:
        return None
    try:
        return [kind(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise typer.BadParameter(f"expected a comma-separated list, got '{text}'")


def _dataset_overrides(data_dir: Path) -> List[str]:
    meta = dataset_service.read_meta(data_dir)
    overrides = []
    if "num_classes" in meta:
        overrides += [f"data.num_classes={meta['num_classes']}", f"model.num_classes={meta['num_classes']}"]
    if "image_size" in meta:
        overrides += [f"data.image_size={meta['image_size']}", f"model.image_size={meta['image_size']}"]
    return overrides


def _load_run_config(config: Optional[Path], data_dir: Path, overrides: Optional[List[str]]):
    derived = _dataset_overrides(data_dir)
    cfg = load_config(config, derived + list(overrides or []))
    if cfg.train.crop > cfg.model.image_size:
        cfg = load_config(config, derived + [f"train.crop={cfg.model.image_size}"] + list(overrides or []))
    return cfg


# ============= DATA =============

@app.command()
@handle_error
def synth(
    out: Path = typer.Option(..., "--out", help="Output dataset directory"),
    classes: int = typer.Option(3, "--classes", help="Number of foreground classes"),
    n: int = typer.Option(500, "--n", help="Number of samples"),
    seed: int = typer.Option(0, "--seed", help="Generator seed"),
    image_size: int = typer.Option(64, "--image-size", help="Image side in pixels"),
    shapes: int = typer.Option(3, "--shapes", help="Maximum shapes per image (1-3)"),
    verbose: bool = VerboseOption,
):
    """Generate the synthetic shapes dataset."""
    setup_logging(verbose, console)
    try:
        cfg = DatasetConfig(
            num_classes=classes, image_size=image_size, samples=n, shapes_per_image=shapes, rng_seed=seed
        )
    except ValidationError as e:
        raise ConfigError(str(e))
    samples = dataset_service.generate_shapes(cfg)
    dataset_service.write_dataset(samples, out, cfg.num_classes)
    save_config_snapshot(cfg, out)
    console.print(f"[green]✅ Wrote {len(samples)} samples ({cfg.num_classes} classes) to {out}[/green]")


# ============= TRAINING AND SEEDS =============

@app.command()
@handle_error
def train(
    data: Path = typer.Option(..., "--data", help="Training dataset directory"),
    out: Path = typer.Option(..., "--out", help="Run directory"),
    config: Optional[Path] = typer.Option(None, "--config", help="JSON config file"),
    overrides: Optional[List[str]] = SetOption,
    verbose: bool = VerboseOption,
):
    """Train the dual-branch model."""
    setup_logging(verbose, console)
    cfg = _load_run_config(config, data, overrides)
    samples = dataset_service.load_voc_style(data, cfg.data.num_classes)

    with Progress(
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TextColumn("{task.completed}/{task.total} epochs"),
        console=console,
    ) as progress:
        task = progress.add_task("Training", total=cfg.train.epochs)

        def on_epoch(epoch: int, report: LossReport) -> None:
            progress.update(task, advance=1, description=f"Epoch {epoch + 1}: {Formatters.format_loss_report(report)}")

        result = training_service.train(cfg, samples, out, on_epoch=on_epoch)

    console.print(Formatters.history_table(result.history))
    console.print(f"[green]✅ Checkpoint: {result.checkpoint}[/green]")
    console.print(f"[dim]Metrics log: {result.metrics}[/dim]")


@app.command()
@handle_error
def seed(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Checkpoint file"),
    data: Path = typer.Option(..., "--data", help="Dataset directory"),
    out: Path = typer.Option(..., "--out", help="Run directory for seeds"),
    scales: Optional[str] = typer.Option(None, "--scales", help="Comma-separated inference scales"),
    export_attention: Optional[Path] = typer.Option(
        None, "--export-attention", help="Also write scale-1 attention, affinity and object attention per image here"
    ),
    verbose: bool = VerboseOption,
):
    """Compute multi-scale seeds for every image of a dataset."""
    setup_logging(verbose, console)
    scale_list = parse_list(scales)
    model, cfg = training_service.load_model(checkpoint)
    if scale_list:
        cfg = cfg.model_copy(update={"inference": cfg.inference.model_copy(update={"scales": scale_list})})
    samples = dataset_service.load_voc_style(data, cfg.model.num_classes)
    bundles = training_service.infer_model(model, samples, cfg.inference.scales)
    mask_service.write_seeds(
        bundles,
        out,
        cfg.inference.seed_threshold,
        cfg.inference.source,
        run_info={"data": str(data), "checkpoint": str(checkpoint)},
    )
    save_config_snapshot(cfg, out)
    console.print(f"[green]✅ Wrote {len(bundles)} seeds to {out}[/green]")
    if export_attention is not None:
        paths = training_service.export_attention(model, samples, export_attention)
        console.print(f"[dim]Attention of {len(paths)} images: {export_attention}[/dim]")


@app.command()
@handle_error
def mask(
    run_dir: Path = typer.Option(..., "--run", help="Run directory holding seeds"),
    source: Optional[MaskSource] = typer.Option(None, "--source", help="Seed variant to threshold"),
    crf_cmd: Optional[str] = typer.Option(
        None, "--crf-cmd", envvar=CRF_ENV, help="External CRF command, called as <cmd> image.png seed.cbt out.cbt"
    ),
    overrides: Optional[List[str]] = SetOption,
    verbose: bool = VerboseOption,
):
    """Turn seeds into trimaps."""
    setup_logging(verbose, console)
    snapshot = run_dir / SNAPSHOT_NAME
    cfg = load_config(snapshot if snapshot.exists() else None, list(overrides or []))
    if source is not None:
        cfg = cfg.model_copy(update={"inference": cfg.inference.model_copy(update={"source": source})})

    images = None
    data_dir = mask_service.read_run_info(run_dir).get("data")
    if crf_cmd and not data_dir:
        raise typer.BadParameter("the run records no dataset, so the CRF has no images", param_hint="--crf-cmd")
    if crf_cmd:
        images = {p.stem: load_image(p) for p in sorted((Path(data_dir) / "images").glob("*.png"))}
    count = mask_service.make_masks(run_dir, cfg.masks, cfg.inference.source, images, crf_cmd)
    save_config_snapshot(cfg, run_dir)
    console.print(f"[green]✅ Wrote {count} masks ({cfg.inference.source.value}) to {run_dir / 'masks'}[/green]")


# ============= EVALUATION =============

@app.command("eval")
@handle_error
def evaluate(
    pred: Path = typer.Option(..., "--pred", help="Predicted mask directory"),
    gt: Path = typer.Option(..., "--gt", help="Ground-truth mask directory"),
    out: Optional[Path] = typer.Option(None, "--out", help="Directory for the result tables"),
    verbose: bool = VerboseOption,
):
    """Compute per-class IoU and mIoU."""
    setup_logging(verbose, console)
    result = evaluation_service.evaluate_dirs(pred, gt)
    console.print(Formatters.iou_table(result))
    if out is not None:
        text_path, json_path = evaluation_service.write_tables(result, out)
        save_config_snapshot({"command": "eval", "pred": str(pred), "gt": str(gt)}, out)
        console.print(f"[dim]Tables: {text_path}, {json_path}[/dim]")


@app.command()
@handle_error
def gradcheck(
    tau: float = typer.Option(0.1, "--tau", help="Contrastive temperature"),
    instances: int = typer.Option(100, "--instances", help="Random instances per loss"),
    seed: int = typer.Option(0, "--seed", help="Generator seed"),
    out: Optional[Path] = typer.Option(None, "--out", help="Directory for gradcheck.json"),
    verbose: bool = VerboseOption,
):
    """Compare analytic and finite-difference gradients of every loss."""
    setup_logging(verbose, console)
    errors = run_gradient_suite(instances=instances, tau=tau, seed=seed)
    console.print(Formatters.gradient_table(errors, GRADIENT_TOLERANCE))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(json.dumps(errors, indent=2) + "\n", encoding="utf-8")
        save_config_snapshot({"command": "gradcheck", "tau": tau, "instances": instances, "seed": seed}, out)
    worst = max(errors.values())
    if worst > GRADIENT_TOLERANCE:
        raise CobraError(f"gradient check failed: max relative error {worst:.3e} > {GRADIENT_TOLERANCE:.0e}")


@app.command()
@handle_error
def report(
    run_dir: Path = typer.Option(..., "--run", help="Run directory holding seeds and masks"),
    data: Optional[Path] = typer.Option(None, "--data", help="Dataset directory (default: from run.json)"),
    verbose: bool = VerboseOption,
):
    """Write comparison panels and the per-class mIoU table."""
    setup_logging(verbose, console)
    result = report_service.report(run_dir, data)
    lines = [f"Panels: {len(result.panels)} in {result.panels[0].parent if result.panels else run_dir}"]
    if result.tables is not None:
        lines.append(f"mIoU: {Formatters.format_percentage(result.miou)}")
        lines.append(f"Table: {result.tables[0]}")
    else:
        lines.append("Ground truth incomplete; no mIoU table")
    console.print(Panel("\n".join(lines), title="📊 Report", title_align="left"))


@app.command()
@handle_error
def ablate(
    data: Path = typer.Option(..., "--data", help="Training dataset directory"),
    eval_data: Path = typer.Option(..., "--eval-data", help="Evaluation dataset directory (with masks)"),
    out: Path = typer.Option(..., "--out", help="Output directory"),
    seeds: str = typer.Option("0,1,2", "--seeds", help="Comma-separated training seeds"),
    config: Optional[Path] = typer.Option(None, "--config", help="JSON config file"),
    overrides: Optional[List[str]] = SetOption,
    verbose: bool = VerboseOption,
):
    """Train the loss-ablation rows and compare seeds, mask sources and diagnostics."""
    setup_logging(verbose, console)
    seed_list = parse_list(seeds, int) or [0]
    cfg = _load_run_config(config, data, overrides)
    train_samples = dataset_service.load_voc_style(data, cfg.data.num_classes)
    eval_samples = dataset_service.load_voc_style(eval_data, cfg.data.num_classes)

    result = ablation_service.run(
        cfg,
        train_samples,
        eval_samples,
        out,
        seed_list,
        on_row=lambda row, s, miou: console.print(f"  {row} (seed {s}): {Formatters.format_percentage(miou)}"),
    )
    console.print(Formatters.ranking_table(result.losses, "Loss ablation", "Row"))
    console.print(Formatters.ranking_table(result.sources, "Mask sources (full row)", "Source"))
    console.print(Formatters.diagnostics_table(result.diagnostics))


# ============= ENTRY POINT =============

def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one command.

    Returns:
        0 on success, 1 on a usage error, 2 on a runtime failure
    """
    command = typer.main.get_command(app)
    try:
        result = command.main(
            args=list(argv) if argv is not None else None,
            prog_name="cobra",
            standalone_mode=False,
        )
    except click.exceptions.UsageError as e:
        e.show()
        return 1
    except click.exceptions.Abort:
        console.print("[red]Aborted[/red]")
        return 1
    return result if isinstance(result, int) else 0
