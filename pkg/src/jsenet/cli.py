"""Command-line surface: `jsenet <subcommand>`.

Exit codes: 0 success, 1 contract violation or divergence, 2 bad input or usage.
"""

from __future__ import annotations

import functools
import logging
from pathlib import Path
from typing import Annotated, Callable, Optional

import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from jsenet.config import TrainConfig, load_config
from jsenet.errors import ContractError, InputError, TrainingDivergedError
from jsenet.labels import DEFAULT_EDGE_RADIUS
from jsenet.model import JSENet
from jsenet.settings import get_home_dir

app = typer.Typer(no_args_is_help=True, add_completion=False, help="Joint semantic segmentation and edge detection.")
console = Console()
err_console = Console(stderr=True)
logger = logging.getLogger("jsenet")


def _handle_errors(fn: Callable) -> Callable:
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except InputError as exc:
            err_console.print(f"[red]error:[/red] {exc}")
            raise typer.Exit(2) from None
        except TrainingDivergedError as exc:
            err_console.print(f"[red]diverged:[/red] {exc} (dump: {exc.dump_path})")
            raise typer.Exit(1) from None
        except ContractError as exc:
            err_console.print(f"[red]contract violated:[/red] {exc}")
            raise typer.Exit(1) from None

    return wrapper


@app.callback()
def _setup(verbose: Annotated[bool, typer.Option("--verbose", "-v", help="Debug logging.")] = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )


def _session(checkpoint: Optional[Path] = None, config: TrainConfig | None = None):
    from jsenet.session import JSENetSession

    return JSENetSession(config, checkpoint)


# --- Data ---

@app.command("prepare-edges")
@_handle_errors
def prepare_edges(
    cloud: Path,
    output: Path,
    radius: Annotated[float, typer.Option(help="Neighborhood radius in meters.")] = DEFAULT_EDGE_RADIUS,
    num_classes: Annotated[Optional[int], typer.Option(help="Class count K.")] = None,
    ignore_triggers: Annotated[bool, typer.Option(help="Ignore-labelled neighbors mark single-class edges.")] = False,
) -> None:
    """Labeled PLY cloud -> SEPM edge label file."""
    stats = _session().prepare_edges(cloud, output, radius, num_classes, ignore_triggers)
    logger.info("%d of %d points are edge points", stats.get("edge_points", 0), stats["points"])


@app.command("sample-mesh")
@_handle_errors
def sample_mesh(
    mesh: Path,
    output: Path,
    density: Annotated[float, typer.Option(help="Points per square meter.")] = 2500.0,
    seed: int = 0,
) -> None:
    """Labeled PLY mesh -> PLY cloud sampled uniformly on the faces."""
    stats = _session().sample_mesh(mesh, output, density, seed)
    logger.info("Sampled %d points on %d faces", stats["points"], stats["faces"])


# --- Training ---

def _train_config(config_file: Optional[Path], **overrides) -> TrainConfig:
    base = load_config(config_file) if config_file else TrainConfig()
    return base.replace(**overrides)


@app.command()
@_handle_errors
def train(
    scenes: Annotated[list[Path], typer.Argument(help="Labeled PLY scenes.")],
    out_dir: Annotated[Optional[Path], typer.Option("--out-dir", "-o", help="Default: JSENET_HOME/runs/<scene>.")] = None,
    config: Annotated[Optional[Path], typer.Option("--config", "-c", help="key = value config file.")] = None,
    edges: Annotated[Optional[list[Path]], typer.Option("--edges", help="SEPM files, one per scene.")] = None,
    resume: Annotated[Optional[Path], typer.Option(help="Stage-1 checkpoint; trains stage 2 only.")] = None,
    num_classes: Optional[int] = None,
    sphere_radius: Optional[float] = None,
    grid_cell: Optional[float] = None,
    lr: Optional[float] = None,
    momentum: Optional[float] = None,
    lr_drop: Optional[float] = None,
    lr_drop_every: Optional[int] = None,
    stage1_epochs: Optional[int] = None,
    stage2_epochs: Optional[int] = None,
    steps_per_epoch: Optional[int] = None,
    lambda_seg: Optional[float] = None,
    lambda_edge: Optional[float] = None,
    lambda_bce: Optional[float] = None,
    lambda_dual: Optional[float] = None,
    emg_radius: Optional[float] = None,
    edge_radius: Optional[float] = None,
    seed: Optional[int] = None,
    first_features_dim: Optional[int] = None,
    side_width: Optional[int] = None,
    fusion_width: Optional[int] = None,
    side_supervision: Optional[str] = None,
    streams: Annotated[Optional[str], typer.Option(help="both, ss_only or sed_only.")] = None,
    enhanced_features: Annotated[Optional[bool], typer.Option("--enhanced-features/--no-enhanced-features")] = None,
    use_jrm: Annotated[Optional[bool], typer.Option("--jrm/--no-jrm")] = None,
    use_dual_loss: Annotated[Optional[bool], typer.Option("--dual-loss/--no-dual-loss")] = None,
    augment: Annotated[Optional[bool], typer.Option("--augment/--no-augment")] = None,
    checkpoint_every: Optional[int] = None,
) -> None:
    """Two-stage training on labeled scenes; writes checkpoints and a CSV loss log."""
    from jsenet.checkpoint import load_checkpoint
    from jsenet.labels import read_sepm
    from jsenet.pipeline import prepare_scene, train as run_training
    from jsenet.ply import read_cloud
    from jsenet.session import validate_path

    cfg = _train_config(
        config, num_classes=num_classes, sphere_radius=sphere_radius, grid_cell=grid_cell, lr=lr,
        momentum=momentum, lr_drop=lr_drop, lr_drop_every=lr_drop_every, stage1_epochs=stage1_epochs,
        stage2_epochs=stage2_epochs, steps_per_epoch=steps_per_epoch, lambda_seg=lambda_seg,
        lambda_edge=lambda_edge, lambda_bce=lambda_bce, lambda_dual=lambda_dual, emg_radius=emg_radius,
        edge_radius=edge_radius, seed=seed, first_features_dim=first_features_dim, side_width=side_width,
        fusion_width=fusion_width, side_supervision=side_supervision, streams=streams,
        enhanced_features=enhanced_features, use_jrm=use_jrm, use_dual_loss=use_dual_loss, augment=augment,
        checkpoint_every=checkpoint_every,
    )
    if edges and len(edges) != len(scenes):
        raise InputError(f"{len(edges)} edge files for {len(scenes)} scenes")
    prepared = []
    for i, path in enumerate(scenes):
        labels = read_sepm(validate_path(edges[i])) if edges else None
        prepared.append(prepare_scene(read_cloud(validate_path(path)), cfg, path.stem, labels))
    model = load_checkpoint(validate_path(resume), cfg).train() if resume else None
    out_dir = out_dir or get_home_dir() / "runs" / scenes[0].stem
    result = run_training(cfg, prepared, out_dir, model=model, stages=(2,) if resume else (1, 2))
    for stage, best in result.best_loss.items():
        logger.info("Stage %d best total loss %.4f", stage, best)
    logger.info("Checkpoint written to %s after %d steps", result.checkpoint, result.steps)


@app.command()
@_handle_errors
def infer(
    checkpoint: Path,
    cloud: Path,
    output: Path,
    sepm: Annotated[Optional[Path], typer.Option(help="Also write edges thresholded at 0.5 as SEPM.")] = None,
) -> None:
    """Voting inference: PLY cloud -> prediction PLY (label, prob_k, edge_k)."""
    prediction = _session(checkpoint).infer(cloud, output, sepm)
    logger.info("Predicted %d points", len(prediction.cloud))


# --- Evaluation ---

@app.command("eval-seg")
@_handle_errors
def eval_seg(
    pred: Annotated[list[Path], typer.Option("--pred", help="Prediction PLY (repeatable).")],
    gt: Annotated[list[Path], typer.Option("--gt", help="Labeled ground-truth PLY (repeatable).")],
    num_classes: Annotated[int, typer.Option(help="Class count K.")],
    report: Annotated[Optional[Path], typer.Option(help="Write key = value report.")] = None,
) -> None:
    """mIoU, per-class IoU and accuracy over all given scenes."""
    result = _session().evaluate_segmentation([str(p) for p in pred], [str(g) for g in gt], num_classes)
    result.print(console)
    if report:
        result.write(report)


@app.command("eval-edge")
@_handle_errors
def eval_edge(
    pred: Annotated[list[Path], typer.Option("--pred", help="Prediction PLY (repeatable).")],
    gt: Annotated[list[Path], typer.Option("--gt", help="SEPM or labeled PLY (repeatable).")],
    radius: float = DEFAULT_EDGE_RADIUS,
    boundary: Annotated[bool, typer.Option(help="Add the boundary F-score (PLY ground truth).")] = False,
    report: Annotated[Optional[Path], typer.Option(help="Write key = value report.")] = None,
) -> None:
    """Per-class MF at the optimal dataset-scale threshold, and mean MF."""
    result = _session().evaluate_edges([str(p) for p in pred], [str(g) for g in gt], radius, boundary)
    result.print(console)
    if report:
        result.write(report)


# --- Checks ---

@app.command()
@_handle_errors
def gradcheck(
    seed: int = 0,
    bits: Annotated[int, typer.Option(help="Tape precision: 64 or 32.")] = 64,
) -> None:
    """Finite-difference checks of every differentiable operation."""
    from jsenet.gradcheck import run_suites

    if bits not in (32, 64):
        raise InputError(f"--bits must be 32 or 64, not {bits}")
    results = run_suites(seed, bits=bits)
    table = Table(title=f"Gradient checks ({bits}-bit)")
    for column in ("suite", "max rel. error", "seconds", "status"):
        table.add_column(column)
    for r in results:
        table.add_row(r.name, f"{r.max_error:.2e}", f"{r.seconds:.2f}", "ok" if r.passed else "[red]FAIL[/red]")
    console.print(table)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise ContractError(f"gradient check failed: {', '.join(failed)}")


@app.command()
@_handle_errors
def selftest(
    fixture: Path,
    golden: Annotated[Optional[Path], typer.Option(help="Committed report to compare against.")] = None,
    report: Annotated[Optional[Path], typer.Option(help="Write the report here.")] = None,
    radius: float = 0.015625,
    cell: float = 0.015625,
) -> None:
    """Oracle suites plus a report over a labeled fixture cloud."""
    from jsenet.selftest import compare_golden, run_selftest
    from jsenet.session import validate_path

    result = run_selftest(validate_path(fixture), radius, cell)
    console.print(result.to_text(), end="")
    if report:
        Path(report).write_text(result.to_text(), encoding="utf-8")
    if not result.passed:
        failed = [f"{r.name}: {r.detail}" for r in result.results if not r.passed]
        raise ContractError("oracle suites failed: " + "; ".join(failed))
    if golden:
        diffs = compare_golden(result, validate_path(golden))
        if diffs:
            raise ContractError("report differs from golden file: " + "; ".join(diffs))


@app.command()
@_handle_errors
def summary(
    checkpoint: Annotated[Optional[Path], typer.Option(help="Summarize a trained model.")] = None,
    config: Annotated[Optional[Path], typer.Option("--config", "-c")] = None,
    num_classes: Optional[int] = None,
) -> None:
    """Parameter counts of the segmentation stream, edge stream and refinement module."""
    if checkpoint:
        counts = _session(checkpoint).model_summary()
    else:
        counts = JSENet(_train_config(config, num_classes=num_classes)).summary()
    table = Table(title="Model parameters")
    table.add_column("partition")
    table.add_column("parameters", justify="right")
    for name, count in counts.items():
        table.add_row(name, f"{count:,}")
    console.print(table)


if __name__ == "__main__":
    app()
