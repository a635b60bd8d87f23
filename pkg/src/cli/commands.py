"""
Command-line interface for the S2AP pipeline.

Every data command writes its reports (CSV plus summary.json) into --out and
prints the summary to stdout inside the standard response envelope. Failures
print an error envelope and exit with status 1.
"""

import functools
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import click
import numpy as np

from src.api import bench as bench_api
from src.api.geometry import MeanShape, synthetic_mean_shape
from src.api.labels import render_labels
from src.api.maskconv import TIMING_HEADER
from src.api.scenes import Scene, dump_scenes, gen_scenes, load_scenes, render_image
from src.api.toynet import Parameters, init_parameters, train
from src.core.config import ConvSpec, PipelineConfig, load_config, settings
from src.core.utils import NotAchievableError, S2APError, error_response, format_response
from src.main import setup_logging

logger = logging.getLogger(__name__)

LOSS_HEADER = ["iteration", "loss"]


def _emit(payload: Dict[str, Any]) -> None:
    click.echo(json.dumps(payload, sort_keys=True, indent=2))


def _command(func: Callable) -> Callable:
    """Shared options, logging setup and error reporting for data commands."""

    @click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Pipeline config JSON")
    @click.option("--seed", type=int, default=0, show_default=True, help="Random seed")
    @click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Report directory")
    @click.option("--workers", type=int, default=None, help="Worker threads")
    @click.option(
        "--log-level",
        type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"], case_sensitive=False),
        default=None,
        help="Set the log level",
    )
    @functools.wraps(func)
    def wrapper(config_path, seed, out_dir, workers, log_level, **kwargs):
        setup_logging(log_level)
        out = Path(out_dir or settings.OUTPUT_DIR)
        workers = workers or settings.WORKERS
        try:
            config = load_config(config_path)
            summary = func(config=config, seed=seed, out=out, workers=workers, **kwargs)
        except S2APError as e:
            logger.error(f"{func.__name__} failed: {e.message}")
            _emit(error_response(e))
            sys.exit(1)
        bench_api.write_summary(out / "summary.json", summary)
        _emit(format_response(True, data=summary))

    return wrapper


def _mean_shape(config: PipelineConfig, seed: int) -> MeanShape:
    if config.mean_shape is not None:
        return MeanShape(config.mean_shape)
    return synthetic_mean_shape(seed)


def _scenes(config: PipelineConfig, seed: int, workers: int, scenes_path: Optional[str]) -> List[Scene]:
    if scenes_path:
        return load_scenes(scenes_path)
    return gen_scenes(
        config.scenes, seed, _mean_shape(config, seed), config.scalemap, config.labels.n_s, workers
    )


def _training_set(config: PipelineConfig, scenes: List[Scene]) -> List[Tuple[np.ndarray, Any]]:
    n_s = config.network.n_s
    return [
        (render_image(s, config.scalemap), render_labels(s.boxes, s.dims, n_s, config.scalemap, config.labels))
        for s in scenes
    ]


def _train(config: PipelineConfig, scenes: List[Scene], seed: int, out: Path) -> Tuple[Parameters, Dict[str, Any]]:
    result = train(config.network, init_parameters(config.network, seed), _training_set(config, scenes), config.train)
    result.params.save(out / "params.bin")
    bench_api.write_csv(
        out / "losses.csv", LOSS_HEADER, [{"iteration": i, "loss": f"{v:.8f}"} for i, v in enumerate(result.losses)]
    )
    stats = {
        "iterations": len(result.losses),
        "initial_loss": result.losses[0] if result.losses else None,
        "final_loss": result.losses[-1] if result.losses else None,
    }
    return result.params, stats


def _predictor(config: PipelineConfig, kind: Optional[str], params_path: Optional[str]) -> bench_api.Predictor:
    kind = kind or config.bench.predictor
    params = Parameters.load(params_path) if params_path else None
    return bench_api.make_predictor(kind, config.scalemap, config.labels, config.network, params)


def _eval_summary(points: List[bench_api.EvalPoint], target: float) -> Dict[str, Any]:
    try:
        selected = bench_api.select_threshold(points, target)
        best = None
    except NotAchievableError as e:
        logger.warning(e.message)
        selected, best = None, e.details.get("best_point")
    return {"recall_target": target, "selected_threshold": selected, "best_point": best}


def _curve_row(point: Dict[str, Any]) -> Dict[str, str]:
    speedup = point["speedup"]
    return {
        "threshold": f"{point['threshold']:.6f}",
        "recall": f"{point['recall']:.6f}",
        "speedup": "" if speedup is None else f"{speedup:.6f}",
    }


_scenes_option = click.option("--scenes", "scenes_path", type=click.Path(exists=True, dir_okay=False), default=None)
_predictor_option = click.option(
    "--predictor", type=click.Choice(["oracle", "toynet", "noise"]), default=None, help="Attention map source"
)
_params_option = click.option(
    "--params", "params_path", type=click.Path(exists=True, dir_okay=False), default=None, help="Trained parameters"
)


@click.group()
def cli():
    """S2AP scale and spatial attention pipeline."""


@cli.command("gen-scenes")
@_command
def gen_scenes_cmd(config, seed, out, workers):
    """Generate synthetic scenes into scenes.json."""
    scenes = _scenes(config, seed, workers, None)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scenes.json").write_text(dump_scenes(scenes) + "\n", encoding="utf-8")
    return {"scenes": len(scenes), "faces": sum(len(s.faces) for s in scenes), "seed": seed}


@cli.command("make-labels")
@_scenes_option
@_command
def make_labels_cmd(config, seed, out, workers, scenes_path):
    """Render ground-truth attention maps for every scene."""
    scenes = _scenes(config, seed, workers, scenes_path)
    n_s = config.labels.n_s
    files = []
    for i, scene in enumerate(scenes):
        maps = render_labels(scene.boxes, scene.dims, n_s, config.scalemap, config.labels)
        files.append(str(maps.save(out / "labels" / f"scene_{i:04d}.bin").relative_to(out)))
    return {"scenes": len(scenes), "n_s": n_s, "files": files}


@cli.command("train-toy")
@_scenes_option
@click.option("--iterations", type=int, default=None, help="Override the configured iteration count")
@click.option("--progress/--no-progress", default=False, help="Show a progress bar")
@_command
def train_toy_cmd(config, seed, out, workers, scenes_path, iterations, progress):
    """Train the attention network on synthetic scenes."""
    update: Dict[str, Any] = {"progress": progress, "seed": seed}
    if iterations is not None:
        update["iterations"] = iterations
    config = config.model_copy(update={"train": config.train.model_copy(update=update)})
    scenes = _scenes(config, seed, workers, scenes_path)
    _, stats = _train(config, scenes, seed, out)
    return {"scenes": len(scenes), **stats}


@cli.command("decode")
@_scenes_option
@_predictor_option
@_params_option
@click.option("--pgm/--no-pgm", default=False, help="Also write each level mask as a PGM image")
@_command
def decode_cmd(config, seed, out, workers, scenes_path, predictor, params_path, pgm):
    """Decode attention maps into pyramid plans."""
    scenes = _scenes(config, seed, workers, scenes_path)
    source = _predictor(config, predictor, params_path)
    levels = []
    for i, scene in enumerate(scenes):
        result = bench_api.run_pipeline(scene, source, config.decode, config.bench, config.scalemap, config.network)
        plan_dir = out / "plans"
        plan_dir.mkdir(parents=True, exist_ok=True)
        (plan_dir / f"scene_{i:04d}.json").write_text(result.plan.to_json() + "\n", encoding="utf-8")
        if pgm:
            for k, level in enumerate(result.plan.levels):
                level.mask.save_pgm(plan_dir / f"scene_{i:04d}_level_{k}.pgm")
        levels.append(len(result.plan.levels))
    return {"predictor": source.name, "scenes": len(scenes), "levels": levels}


@cli.command("eval")
@_scenes_option
@_predictor_option
@_params_option
@_command
def eval_cmd(config, seed, out, workers, scenes_path, predictor, params_path):
    """Sweep decode thresholds and report recall against proposal ratio."""
    scenes = _scenes(config, seed, workers, scenes_path)
    source = _predictor(config, predictor, params_path)
    points = bench_api.eval_recall_ratio(scenes, config.decode, source, config.scalemap, workers)
    bench_api.write_csv(out / "eval.csv", bench_api.EVAL_HEADER, [p.to_row() for p in points])
    return {"predictor": source.name, "points": len(points), **_eval_summary(points, config.bench.recall_target)}


@cli.command("bench-conv")
@click.option("--size", type=int, default=128, show_default=True, help="Square input side")
@click.option("--density", "densities", type=float, multiple=True, help="Mask densities (repeatable)")
@click.option("--repeats", type=int, default=3, show_default=True)
@_command
def bench_conv_cmd(config, seed, out, workers, size, densities, repeats):
    """Time dense against masked convolution for the detector layers."""
    densities = list(densities) or [0.05, 0.1, 0.25, 0.5, 1.0]
    specs: List[ConvSpec] = list(config.bench.detector)
    timings = bench_api.bench_conv(specs, (size, size), densities, seed, repeats, workers)
    bench_api.write_csv(out / "bench_conv.csv", TIMING_HEADER, [t.to_row() for t in timings])
    return {"rows": len(timings), "size": size, "densities": densities}


@cli.command("cost-report")
@_scenes_option
@_predictor_option
@_params_option
@click.option("--mode", type=click.Choice(["scale", "spatial", "both"]), default=None, help="Cost ablation")
@_command
def cost_report_cmd(config, seed, out, workers, scenes_path, predictor, params_path, mode):
    """Compare dense-pyramid and planned-pyramid detector FLOPs."""
    if mode is not None:
        config = config.model_copy(update={"bench": config.bench.model_copy(update={"cost_mode": mode})})
    scenes = _scenes(config, seed, workers, scenes_path)
    source = _predictor(config, predictor, params_path)
    report = bench_api.cost_report(
        scenes, config.decode, config.bench, source, config.scalemap, config.network, workers
    )
    bench_api.write_csv(out / "cost.csv", bench_api.COST_HEADER, [r.to_row() for r in report.rows])
    return {"predictor": source.name, "scenes": len(scenes), **report.summary()}


@cli.command("run")
@_scenes_option
@_predictor_option
@_params_option
@_command
def run_cmd(config, seed, out, workers, scenes_path, predictor, params_path):
    """Full pipeline: scenes, predictor, threshold sweep, cost at the selected threshold."""
    scenes = _scenes(config, seed, workers, scenes_path)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scenes.json").write_text(dump_scenes(scenes) + "\n", encoding="utf-8")

    summary: Dict[str, Any] = {"scenes": len(scenes), "faces": sum(len(s.faces) for s in scenes), "seed": seed}
    kind = predictor or config.bench.predictor
    if kind == "toynet" and params_path is None:
        params, stats = _train(config, scenes, seed, out)
        summary["training"] = stats
        source = bench_api.make_predictor(kind, config.scalemap, config.labels, config.network, params)
    else:
        source = _predictor(config, kind, params_path)

    maps = bench_api.predict_all(scenes, source, workers)
    points = bench_api.eval_recall_ratio(scenes, config.decode, source, config.scalemap, workers, maps)
    bench_api.write_csv(out / "eval.csv", bench_api.EVAL_HEADER, [p.to_row() for p in points])
    selection = _eval_summary(points, config.bench.recall_target)
    threshold = selection["selected_threshold"]
    if threshold is None:
        threshold = selection["best_point"]["threshold"]

    decode = config.decode.with_threshold(threshold)
    report = bench_api.cost_report(
        scenes, decode, config.bench, source, config.scalemap, config.network, workers, maps
    )
    bench_api.write_csv(out / "cost.csv", bench_api.COST_HEADER, [r.to_row() for r in report.rows])

    curve = bench_api.speed_recall_curve(
        scenes, config.decode, config.bench, source, config.scalemap, config.network, workers, maps, points
    )
    bench_api.write_csv(out / "curve.csv", bench_api.CURVE_HEADER, [_curve_row(c) for c in curve])

    summary.update({"predictor": source.name, "threshold": threshold, **selection, "cost": report.summary()})
    return summary


@cli.command("version")
def version_cmd():
    """Show the package version."""
    click.echo(f"s2ap v{settings.VERSION}")


def main(args: Optional[List[str]] = None) -> int:
    """Main entry point for the CLI."""
    try:
        cli.main(args=args, prog_name="s2ap", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except SystemExit as e:
        return int(e.code or 0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
