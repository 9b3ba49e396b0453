"""
Command-line front end.

Every subcommand resolves a RunConfig (flags over config file over
defaults), writes its outputs plus a manifest.json, and on a library error
prints ``error: <ErrorClass>: <message>`` to stderr, removes what it wrote
and exits with status 2.
"""

import logging
import math
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, List, Optional

import click
import typer

from src.config import RunConfig, config, parse_list
from src.core import representation
from src.core.geometry import min_area_rect, rbox_to_quad
from src.core.nms import ScoredPoly, batched_oriented_nms
from src.core.representation import SelectionPolicy
from src.errors import GlidingError
from src.services import dataio_service, evaluation_service, simulation_service
from src.services.artifact_service import ArtifactService
from src.services.dataio_service import DetRecord, GtRecord
from src.services.training_service import TrainingService, save_checkpoint
from src.utils import formatters
from src.utils.validators import validate_log_level

PROG = "gliding"
DEFAULTS = RunConfig()

app = typer.Typer(help="Gliding-vertex oriented object toolkit.", add_completion=False, no_args_is_help=True)
eval_app = typer.Typer(help="Evaluate detections against ground truth.", no_args_is_help=True)
app.add_typer(eval_app, name="eval")


def _default(name: str) -> str:
    value = getattr(DEFAULTS, name)
    if isinstance(value, tuple):
        value = ",".join(str(v) for v in value)
    return f"(default {value})"


CONFIG_OPTION = typer.Option(None, "--config", help="KEY=VALUE config file; flags override it")
SEED_OPTION = typer.Option(None, "--seed", help=f"Random seed {_default('seed')}")
CONCAT_OPTION = typer.Option(False, "--concatenated", help="Single files carry an image id first column")


@contextmanager
def _artifacts(command: str, out_dir: Optional[Path] = None) -> Iterator[ArtifactService]:
    artifacts = ArtifactService(command, out_dir)
    try:
        yield artifacts
    except GlidingError as exc:
        artifacts.cleanup()
        message = str(exc).replace("\n", " ")
        typer.echo(f"error: {type(exc).__name__}: {message}", err=True)
        raise typer.Exit(code=2)
    except Exception:
        artifacts.cleanup()
        raise


def _finish(artifacts: ArtifactService, run: RunConfig, directory: Path) -> None:
    artifacts.write_manifest(run.as_dict(), run.seed, directory)


@app.callback()
def main_callback(
    log_level: Optional[str] = typer.Option(None, "--log-level", help="Logging level (default from GLIDING_LOG_LEVEL, else WARNING)"),
):
    level = (log_level or config.log_level).upper()
    error = validate_log_level(level)
    if error:
        raise typer.BadParameter(error, param_hint="--log-level")
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", force=True)


@app.command()
def encode(
    source: Path = typer.Option(..., "--in", help="Ground-truth file or directory"),
    out: Path = typer.Option(..., "--out", help="Output CSV of (x, y, w, h, alpha1..4, r) per record"),
    concatenated: bool = CONCAT_OPTION,
    config_file: Optional[Path] = CONFIG_OPTION,
):
    """Encode annotated quadrangles as gliding-vertex representations."""
    with _artifacts("encode") as artifacts:
        run = RunConfig.resolve(config_file)
        artifacts.add_input(source)
        gts = dataio_service.load_gts(source, concatenated)
        keys, reps = [], []
        for image_id in sorted(gts):
            for record in gts[image_id]:
                keys.append((image_id, record.cls))
                reps.append(representation.encode(record.polygon))
        artifacts.write_text(out, formatters.format_reps_csv(keys, reps))
        _finish(artifacts, run, out.parent)


@app.command()
def decode(
    source: Path = typer.Option(..., "--in", help="Representation CSV written by encode"),
    out: Path = typer.Option(..., "--out", help="Output ground-truth directory (or file with --concatenated)"),
    select: bool = typer.Option(False, "--select", help="Emit the horizontal box when r > t_r"),
    rbox: bool = typer.Option(False, "--rbox", help="Emit the minimum-area rotated rectangle of each quadrangle"),
    t_r: Optional[float] = typer.Option(None, "--t-r", help=f"Obliquity threshold {_default('t_r')}"),
    concatenated: bool = CONCAT_OPTION,
    config_file: Optional[Path] = CONFIG_OPTION,
):
    """Decode representations back to quadrangles."""
    with _artifacts("decode") as artifacts:
        run = RunConfig.resolve(config_file, t_r=t_r)
        policy = SelectionPolicy(run.t_r if select else 1.0)
        artifacts.add_input(source)
        dataset = {}
        for image_id, cls, rep in dataio_service.load_reps(source):
            quad = representation.select(rep, policy)
            if rbox:
                quad = rbox_to_quad(min_area_rect(quad))
            dataset.setdefault(image_id, []).append(GtRecord(quad, cls, False))
        if not concatenated:
            artifacts.prepare_dir(out)
        artifacts.track(dataio_service.write_gts(dataset, out, concatenated))
        _finish(artifacts, run, out.parent if concatenated else out)


def _nms_dataset(dets, iou_thresh: float):
    classes = sorted({d.cls for records in dets.values() for d in records})
    out = {}
    for image_id in sorted(dets):
        scored = [ScoredPoly(d.polygon, d.score, classes.index(d.cls) + 1) for d in dets[image_id]]
        out[image_id] = [DetRecord(classes[s.cls - 1], s.score, s.poly) for s in batched_oriented_nms(scored, iou_thresh)]
    return out


@app.command()
def nms(
    source: Path = typer.Option(..., "--in", help="Detection file or directory"),
    out: Path = typer.Option(..., "--out", help="Output detection directory (or file with --concatenated)"),
    iou: Optional[float] = typer.Option(None, "--iou", help=f"Suppression IoU threshold {_default('nms_iou')}"),
    concatenated: bool = CONCAT_OPTION,
    config_file: Optional[Path] = CONFIG_OPTION,
):
    """Per-class oriented non-maximum suppression."""
    with _artifacts("nms") as artifacts:
        run = RunConfig.resolve(config_file, nms_iou=iou)
        artifacts.add_input(source)
        dets = dataio_service.load_dets(source, concatenated)
        kept = _nms_dataset(dets, run.nms_iou)
        logging.info(f"NMS kept {sum(map(len, kept.values()))} of {sum(map(len, dets.values()))} detections")
        if not concatenated:
            artifacts.prepare_dir(out)
        artifacts.track(dataio_service.write_dets(kept, out, concatenated))
        _finish(artifacts, run, out.parent if concatenated else out)


def _load_eval_inputs(artifacts: ArtifactService, dets: Path, gts: Path, concatenated: bool):
    artifacts.add_input(dets)
    artifacts.add_input(gts)
    return dataio_service.load_dets(dets, concatenated), dataio_service.load_gts(gts, concatenated)


@eval_app.command("map")
def eval_map(
    dets: Path = typer.Option(..., "--dets", help="Detection file or directory"),
    gts: Path = typer.Option(..., "--gts", help="Ground-truth file or directory"),
    out: Path = typer.Option(..., "--out", help="Output directory"),
    iou: Optional[float] = typer.Option(None, "--iou", help=f"Matching IoU threshold {_default('eval_iou')}"),
    mode: Optional[str] = typer.Option(None, "--mode", help=f"voc07 or all-points {_default('ap_mode')}"),
    concatenated: bool = CONCAT_OPTION,
    config_file: Optional[Path] = CONFIG_OPTION,
):
    """Per-class AP and mAP."""
    with _artifacts("eval map", out) as artifacts:
        run = RunConfig.resolve(config_file, eval_iou=iou, ap_mode=mode)
        det_data, gt_data = _load_eval_inputs(artifacts, dets, gts, concatenated)
        result = evaluation_service.mean_average_precision(det_data, gt_data, run.eval_iou, run.ap_mode)
        report = formatters.format_map_report(result)
        artifacts.write_text(out / "report.txt", report)
        artifacts.write_text(out / "ap.csv", formatters.format_map_csv(result))
        artifacts.write_text(out / "pr_curve.csv", formatters.format_pr_curve_csv(result))
        _finish(artifacts, run, out)
        typer.echo(report, nl=False)


@eval_app.command("fmeasure")
def eval_fmeasure(
    dets: Path = typer.Option(..., "--dets", help="Detection file or directory"),
    gts: Path = typer.Option(..., "--gts", help="Ground-truth file or directory"),
    out: Path = typer.Option(..., "--out", help="Output directory"),
    iou: Optional[float] = typer.Option(None, "--iou", help=f"Matching IoU threshold {_default('eval_iou')}"),
    min_score: float = typer.Option(0.0, "--min-score", help="Drop detections scoring below this (default 0)"),
    concatenated: bool = CONCAT_OPTION,
    config_file: Optional[Path] = CONFIG_OPTION,
):
    """Precision, recall and F-measure under one-to-one matching."""
    with _artifacts("eval fmeasure", out) as artifacts:
        run = RunConfig.resolve(config_file, eval_iou=iou)
        det_data, gt_data = _load_eval_inputs(artifacts, dets, gts, concatenated)
        det_data = {k: [d for d in v if d.score >= min_score] for k, v in det_data.items()}
        result = evaluation_service.f_measure(det_data, gt_data, run.eval_iou)
        report = formatters.format_prf_report(result, run.eval_iou)
        artifacts.write_text(out / "report.txt", report)
        _finish(artifacts, run, out)
        typer.echo(report, nl=False)


@eval_app.command("lamr")
def eval_lamr(
    dets: Path = typer.Option(..., "--dets", help="Detection file or directory"),
    gts: Path = typer.Option(..., "--gts", help="Ground-truth file or directory"),
    out: Path = typer.Option(..., "--out", help="Output directory"),
    iou: Optional[float] = typer.Option(None, "--iou", help=f"Matching IoU threshold {_default('eval_iou')}"),
    concatenated: bool = CONCAT_OPTION,
    config_file: Optional[Path] = CONFIG_OPTION,
):
    """Miss rate against false positives per image and its log-average."""
    with _artifacts("eval lamr", out) as artifacts:
        run = RunConfig.resolve(config_file, eval_iou=iou)
        det_data, gt_data = _load_eval_inputs(artifacts, dets, gts, concatenated)
        result = evaluation_service.lamr(det_data, gt_data, run.eval_iou)
        report = formatters.format_lamr_report(result)
        artifacts.write_text(out / "report.txt", report)
        artifacts.write_text(out / "fppi_curve.csv", formatters.format_lamr_csv(result))
        _finish(artifacts, run, out)
        typer.echo(report, nl=False)


@app.command()
def synth(
    out: Path = typer.Option(..., "--out", help="Output directory"),
    images: Optional[int] = typer.Option(None, "--images", help=f"Number of images {_default('train_images')}"),
    rotations: Optional[int] = typer.Option(None, "--rotations", help=f"Extra rotated copies per image {_default('rotations')}"),
    seed: Optional[int] = SEED_OPTION,
    config_file: Optional[Path] = CONFIG_OPTION,
):
    """Generate a synthetic rotated-rectangle dataset."""
    with _artifacts("synth", out) as artifacts:
        run = RunConfig.resolve(config_file, seed=seed, train_images=images, rotations=rotations)
        gts = simulation_service.gen_dataset(TrainingService.scene_spec(run), run.train_images, "img")
        size = (run.image_size, run.image_size)
        for k in range(1, run.rotations + 1):
            angle = 2.0 * math.pi * k / (run.rotations + 1)
            degrees = int(round(math.degrees(angle)))
            for image_id in sorted(gts):
                if "_rot" not in image_id:
                    gts[f"{image_id}_rot{degrees:03d}"] = simulation_service.rotate_records(gts[image_id], angle, size)
        artifacts.track(dataio_service.write_gts(gts, artifacts.prepare_dir(out / "gts")))
        _finish(artifacts, run, out)


@app.command()
def robustness(
    out: Path = typer.Option(..., "--out", help="Output directory"),
    aspects: Optional[str] = typer.Option(None, "--aspects", help=f"Aspect ratios {_default('aspects')}"),
    angle_errors: Optional[str] = typer.Option(None, "--angle-errors", help=f"Angle errors in degrees {_default('angle_errors')}"),
    trials: Optional[int] = typer.Option(None, "--trials", help=f"Rectangles per cell {_default('trials')}"),
    max_angle: Optional[float] = typer.Option(None, "--max-angle", help=f"Orientation range in degrees {_default('sweep_max_angle')}"),
    seed: Optional[int] = SEED_OPTION,
    config_file: Optional[Path] = CONFIG_OPTION,
):
    """Mean IoU under angle, vertex-offset and length-ratio noise of matched size."""
    with _artifacts("robustness", out) as artifacts:
        run = RunConfig.resolve(
            config_file,
            seed=seed,
            aspects=parse_list(aspects),
            angle_errors=parse_list(angle_errors),
            trials=trials,
            sweep_max_angle=max_angle,
        )
        cells = simulation_service.robustness_sweep(
            run.aspects, run.angle_errors, trials=run.trials, seed=run.seed, max_angle_deg=run.sweep_max_angle
        )
        artifacts.write_text(out / "robustness.csv", formatters.format_sweep_csv(cells))
        table = formatters.format_sweep_table(cells)
        artifacts.write_text(out / "robustness.txt", table)
        _finish(artifacts, run, out)
        typer.echo(table, nl=False)


@app.command()
def confusion(
    out: Path = typer.Option(..., "--out", help="Output directory"),
    aspect: Optional[float] = typer.Option(None, "--aspect", help=f"Rectangle aspect ratio {_default('confusion_aspect')}"),
    angle_range: Optional[float] = typer.Option(None, "--range", help=f"Sweep half-width in degrees {_default('confusion_range')}"),
    step: Optional[float] = typer.Option(None, "--step", help=f"Sweep step in degrees {_default('confusion_step')}"),
    config_file: Optional[Path] = CONFIG_OPTION,
):
    """Target jumps of vertex regression versus the gliding representation."""
    with _artifacts("confusion", out) as artifacts:
        run = RunConfig.resolve(config_file, confusion_aspect=aspect, confusion_range=angle_range, confusion_step=step)
        angles = simulation_service.sweep_angles(run.confusion_range, run.confusion_step)
        report = simulation_service.vertex_order_discontinuity(run.confusion_aspect, angles)
        artifacts.write_text(out / "confusion.csv", formatters.format_discontinuity_csv(report))
        text = formatters.format_discontinuity_report(report)
        artifacts.write_text(out / "confusion.txt", text)
        _finish(artifacts, run, out)
        typer.echo(text, nl=False)


@app.command()
def selection(
    out: Path = typer.Option(..., "--out", help="Output directory"),
    images: Optional[int] = typer.Option(None, "--images", help=f"Number of images {_default('test_images')}"),
    alpha_noise: Optional[float] = typer.Option(None, "--alpha-noise", help=f"Uniform noise on alpha {_default('alpha_noise')}"),
    t_r: Optional[float] = typer.Option(None, "--t-r", help=f"Obliquity threshold {_default('t_r')}"),
    iou: float = typer.Option(0.7, "--iou", help="Matching IoU threshold (default 0.7)"),
    seed: Optional[int] = SEED_OPTION,
    config_file: Optional[Path] = CONFIG_OPTION,
):
    """mAP with obliquity-guided selection against oriented-only output."""
    with _artifacts("selection", out) as artifacts:
        run = RunConfig.resolve(config_file, seed=seed, test_images=images, alpha_noise=alpha_noise, t_r=t_r)
        gts = simulation_service.gen_dataset(TrainingService.scene_spec(run), run.test_images, "test", split=1)
        benefit = simulation_service.selection_benefit(gts, run.alpha_noise, run.t_r, iou, run.seed, run.ap_mode)
        text = formatters.format_selection_report(benefit)
        artifacts.write_text(out / "selection.txt", text)
        _finish(artifacts, run, out)
        typer.echo(text, nl=False)


def _write_training(artifacts: ArtifactService, out: Path, fit) -> None:
    artifacts.write_text(out / "loss_trace.csv", formatters.format_loss_trace_csv(fit.losses, fit.learning_rates))
    artifacts.track([save_checkpoint(fit.model, out / "checkpoint.json")])


@app.command("train-demo")
def train_demo(
    out: Path = typer.Option(..., "--out", help="Output directory"),
    steps: Optional[int] = typer.Option(None, "--steps", help=f"SGD steps {_default('steps')}"),
    images: Optional[int] = typer.Option(None, "--images", help=f"Training images {_default('train_images')}"),
    seed: Optional[int] = SEED_OPTION,
    config_file: Optional[Path] = CONFIG_OPTION,
):
    """Train the detection head on a synthetic split."""
    with _artifacts("train-demo", out) as artifacts:
        run = RunConfig.resolve(config_file, seed=seed, steps=steps, train_images=images)
        gts = simulation_service.gen_dataset(TrainingService.scene_spec(run), run.train_images, "train", split=0)
        split = TrainingService.build_split(gts, run, 0)
        fit = TrainingService.train(split, run)
        _write_training(artifacts, out, fit)
        if fit.losses:
            typer.echo(f"Initial loss: {formatters.format_float(fit.losses[0])}\nFinal loss: {formatters.format_float(fit.losses[-1])}")
        _finish(artifacts, run, out)


@app.command()
def pipeline(
    out: Path = typer.Option(..., "--out", help="Output directory"),
    steps: Optional[int] = typer.Option(None, "--steps", help=f"SGD steps {_default('steps')}"),
    seed: Optional[int] = SEED_OPTION,
    config_file: Optional[Path] = CONFIG_OPTION,
):
    """Synthesize, train, detect and evaluate in one run."""
    with _artifacts("pipeline", out) as artifacts:
        run = RunConfig.resolve(config_file, seed=seed, steps=steps)
        result = TrainingService.run_pipeline(run, (run.eval_iou, 0.7))
        artifacts.track(dataio_service.write_gts(result.test.gts, artifacts.prepare_dir(out / "gts")))
        artifacts.track(dataio_service.write_dets(result.detections, artifacts.prepare_dir(out / "dets")))
        display = {k: [d for d in v if d.score >= run.display_score] for k, v in result.detections.items()}
        artifacts.track(dataio_service.write_dets(display, artifacts.prepare_dir(out / "dets_display")))
        _write_training(artifacts, out, result.fit)
        reports = [formatters.format_map_report(result.metrics[t]) for t in sorted(result.metrics)]
        untrained = result.untrained_metrics[run.eval_iou].mean
        text = "\n".join(reports) + f"\nUntrained mAP@{formatters.format_float(run.eval_iou)}: {formatters.format_float(untrained)}\n"
        artifacts.write_text(out / "metrics.txt", text)
        _finish(artifacts, run, out)
        typer.echo(text, nl=False)


def run(argv: Optional[List[str]] = None) -> int:
    """Run the CLI and return its exit status"""
    try:
        result = app(args=argv, prog_name=PROG, standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        return 1
    return result if isinstance(result, int) else 0


def main() -> None:
    sys.exit(run())
