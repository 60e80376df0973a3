# This file is part of ts_unigs.
#
# Developed for the Vera Rubin Observatory Systems.
# This product includes software developed by the LSST Project
# (https://www.lsst.org).
# See the COPYRIGHT file at the top-level directory of this distribution
# for details of code ownership.
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <https://www.gnu.org/licenses/>.

__all__ = ["run_unigs", "create_parser", "check_arguments", "parse_run_config", "set_log", "run"]

import logging
import sys
from datetime import datetime
from pathlib import Path

from PySide6.QtCore import QCommandLineOption, QCommandLineParser, QCoreApplication

from .bench import ViewBenchmark
from .checks import CheckRunner
from .enums import FaultMode, RunMode, SceneKind, Split
from .fitting import SceneFitter, evaluate_views
from .gaussian_model import activate_params, load_ply
from .io_utils import get_default_config_path, read_yaml_file
from .losses import write_metric_report
from .scene import Scene, load_scene, synth_scene
from .structs import RunConfig
from .training import Trainer, load_model

# Command line verbs
VERBS = {
    "synth": RunMode.Synth,
    "fit": RunMode.Fit,
    "train-tiny": RunMode.TrainTiny,
    "render": RunMode.Render,
    "check": RunMode.Check,
    "bench": RunMode.Bench,
}

# Scene kinds of the command line
KINDS = {
    "spheres3": SceneKind.Spheres3,
    "cube": SceneKind.Cube,
    "random": SceneKind.RandomGaussians,
}

# Injected faults of the command line
FAULTS = {"softmax-axis": FaultMode.SoftmaxAxis}


def run_unigs() -> None:
    """Run the UniGS command line."""

    application = QCoreApplication.instance() or QCoreApplication(sys.argv)
    application.setApplicationName("run_unigs")

    parser, options = create_parser()
    parser.process(application)

    sys.exit(main(parser, options))


def create_parser() -> tuple[QCommandLineParser, dict[str, QCommandLineOption]]:
    """Create the command line parser.

    Returns
    -------
    parser : `PySide6.QtCore.QCommandLineParser`
        Command line parser.
    `dict` [`str`, `PySide6.QtCore.QCommandLineOption`]
        Command line options keyed by their long names.
    """

    parser = QCommandLineParser()
    parser.setApplicationDescription(
        "Reconstruct 3D Gaussians from sparse posed views: synthesize the scenes, fit or train, render, "
        "and run the invariant checks and benchmarks."
    )
    parser.addHelpOption()

    parser.addPositionalArgument("verb", f"One of: {', '.join(VERBS)}.")

    specifications = [
        (["scene"], "Scene directory with cameras.json.", "directory"),
        (["out"], "Output directory. The default is output.", "directory"),
        (["views"], "Number of the input views of the synthetic scenes.", "count"),
        (["n-gaussians"], "Number of the Gaussians.", "count"),
        (["iters"], "Number of the optimization steps.", "count"),
        (["lr"], "Learning rate.", "rate"),
        (["seed"], "Random seed.", "seed"),
        (["resolution"], "Image height and width of the synthetic scenes.", "pixel"),
        (["kind"], f"Kind of the synthetic scene: {', '.join(KINDS)}.", "kind"),
        (["config"], "JSON or YAML file that overrides the model configuration.", "file"),
        (["checkpoint"], "Model checkpoint to write (train-tiny) or read (render, bench).", "file"),
        (["ply"], "Splat file to render.", "file"),
        (["resume"], "Checkpoint to resume the training from.", "file"),
        (["fault"], f"Fault injected into the checks: {', '.join(FAULTS)}.", "fault"),
        (["ablation"], "Run the ablation sweep of the benchmark.", None),
        (["v", "verbose"], "Print log messages to terminal.", None),
        (
            ["d", "debuglevel"],
            (
                "Debug logging level: CRITICAL (50), ERROR (40), WARNING (30), "
                "INFO (20), DEBUG (10), NOTSET (0). The default is 20."
            ),
            "level",
        ),
        (["no-logfile"], "Do not write log messages to file.", None),
    ]

    options = dict()
    for names, description, value_name in specifications:
        option = (
            QCommandLineOption(names, description)
            if value_name is None
            else QCommandLineOption(names, description, value_name)
        )
        parser.addOption(option)
        options[names[-1]] = option

    return parser, options


def check_arguments(args: list) -> RunMode:
    """Check the arguments.

    Parameters
    ----------
    args : `list`
        Arguments from the command line.

    Returns
    -------
    enum `RunMode`
        Verb.

    Raises
    ------
    `ValueError`
        If the number of arguments is not 1.
    `ValueError`
        If the argument is not a known verb.
    """

    if len(args) != 1:
        raise ValueError("The number of arguments must be 1.")

    if args[0] not in VERBS:
        raise ValueError(f"The argument must be one of {list(VERBS)}.")

    return VERBS[args[0]]


def parse_run_config(mode: RunMode, values: dict[str, str | bool]) -> RunConfig:
    """Build the run configuration from the packaged defaults and the
    command line values.

    Parameters
    ----------
    mode : enum `RunMode`
        Verb.
    values : `dict`
        Values of the set options keyed by their long names. The flags are
        booleans.

    Returns
    -------
    `RunConfig`
        Configuration.

    Raises
    ------
    `ValueError`
        When a value is invalid.
    """

    config = RunConfig.from_dict(read_yaml_file(get_default_config_path()), base=RunConfig(mode=mode))

    if "config" in values:
        config = RunConfig.from_dict({"decoder": read_yaml_file(values["config"])}, base=config)

    fields: dict = dict()
    decoder: dict = dict()

    for name, key in (("scene", "scene_dir"), ("out", "output_dir")):
        if name in values:
            fields[key] = Path(values[name])

    for name in ("checkpoint", "ply", "resume"):
        if name in values:
            fields[name] = Path(values[name])

    integers = (("views", "num_views"), ("iters", "iterations"), ("resolution", "resolution"))
    try:
        for name, key in integers:
            if name in values:
                fields[key] = int(values[name])

        if "n-gaussians" in values:
            fields["num_fit_gaussians"] = int(values["n-gaussians"])
            decoder["num_gaussians"] = int(values["n-gaussians"])

        if "seed" in values:
            fields["seed"] = int(values["seed"])
            decoder["seed"] = int(values["seed"])

        if "lr" in values:
            fields["learning_rate"] = float(values["lr"])

    except ValueError as error:
        raise ValueError(f"Invalid number on the command line: {error}.")

    if "kind" in values:
        if values["kind"] not in KINDS:
            raise ValueError(f"Unknown scene kind: {values['kind']}. Use one of {list(KINDS)}.")

        fields["kind"] = KINDS[values["kind"]]

    if "fault" in values:
        if values["fault"] not in FAULTS:
            raise ValueError(f"Unknown fault: {values['fault']}. Use one of {list(FAULTS)}.")

        fields["fault"] = FAULTS[values["fault"]]

    if values.get("ablation", False):
        fields["is_ablation"] = True

    if decoder:
        fields["decoder"] = decoder

    return RunConfig.from_dict(fields, base=config)


def set_log(
    mode: RunMode,
    output_dir: Path,
    is_output_log_to_file: bool,
    is_output_log_on_screen: bool,
    level: int = logging.INFO,
) -> logging.Logger:
    """Set the logger.

    Parameters
    ----------
    mode : enum `RunMode`
        Verb, used in the log file name.
    output_dir : `pathlib.Path`
        Directory of the log file.
    is_output_log_to_file : `bool`
        Is outputting the log messages to file or not.
    is_output_log_on_screen : `bool`
        Is outputting the log messages on screen or not.
    level : `int`, optional
        Logging level. (the default is logging.INFO)

    Returns
    -------
    log : `logging.Logger`
        A logger.
    """

    message_format = "%(asctime)s, %(levelname)s, %(message)s"

    log = logging.getLogger("unigs")

    if is_output_log_to_file:
        output_dir.mkdir(parents=True, exist_ok=True)
        verb = next(name for name, value in VERBS.items() if value == mode)
        name = f"unigs_{verb}_log_%s.txt" % datetime.now().strftime("%d_%m_%Y_%H_%M_%S")
        logging.basicConfig(filename=output_dir / name, format=message_format)
    else:
        logging.basicConfig(format=message_format)

    if is_output_log_on_screen:
        handler = logging.StreamHandler(sys.stdout)
        handler.setFormatter(logging.Formatter(message_format))
        log.addHandler(handler)

    log.setLevel(level)

    return log


def main(parser: QCommandLineParser, options: dict[str, QCommandLineOption]) -> int:
    """Main application.

    Parameters
    ----------
    parser : `PySide6.QtCore.QCommandLineParser`
        Command line parser.
    options : `dict` [`str`, `PySide6.QtCore.QCommandLineOption`]
        Command line options keyed by their long names.

    Returns
    -------
    `int`
        Exit code: 0 on success and 1 on any failure.
    """

    try:
        mode = check_arguments(parser.positionalArguments())

        values: dict[str, str | bool] = dict()
        for name, option in options.items():
            if parser.isSet(option):
                values[name] = parser.value(option) if option.valueName() else True

        level = int(values.get("debuglevel", logging.INFO))
        config = parse_run_config(mode, values)

    except (ValueError, FileNotFoundError) as error:
        print(f"run_unigs: {error}", file=sys.stderr)
        return 1

    log = set_log(
        mode,
        config.output_dir,
        not values.get("no-logfile", False),
        bool(values.get("verbose", False)),
        level=level,
    )

    return run(config, log)


def run(config: RunConfig, log: logging.Logger) -> int:
    """Run a verb.

    Parameters
    ----------
    config : `RunConfig`
        Configuration.
    log : `logging.Logger`
        A logger.

    Returns
    -------
    `int`
        Exit code: 0 on success and 1 on any failure or failed check.
    """

    log.info(f"Start {config.mode.name} with the output directory {config.output_dir}.")

    try:
        match config.mode:
            case RunMode.Synth:
                _run_synth(config, log)
            case RunMode.Fit:
                _run_fit(config, log)
            case RunMode.TrainTiny:
                _run_train_tiny(config, log)
            case RunMode.Render:
                _run_render(config, log)
            case RunMode.Check:
                if not _run_check(config, log):
                    return 1
            case RunMode.Bench:
                _run_bench(config, log)

    except Exception:
        log.exception(f"{config.mode.name} failed.")
        return 1

    log.info(f"Stop {config.mode.name}.")
    return 0


def _synth_scenes(config: RunConfig, num_scenes: int) -> list[Scene]:
    return [
        synth_scene(
            config.kind,
            config.num_views,
            config.resolution,
            config.resolution,
            config.seed + idx,
            num_heldout=config.num_heldout,
        )
        for idx in range(num_scenes)
    ]


def _get_scene(config: RunConfig, log: logging.Logger) -> Scene:
    if config.scene_dir is not None:
        scene = load_scene(config.scene_dir)
        log.info(f"Loaded the scene {scene.name} with {len(scene.views)} views from {config.scene_dir}.")
        return scene

    scene = _synth_scenes(config, 1)[0]
    log.info(f"No scene directory. Synthesized the scene {scene.name}.")
    return scene


def _run_synth(config: RunConfig, log: logging.Logger) -> None:
    directory = config.scene_dir or config.output_dir
    scene = synth_scene(
        config.kind,
        config.num_views,
        config.resolution,
        config.resolution,
        config.seed,
        directory=directory,
        num_heldout=config.num_heldout,
    )
    log.info(f"Scene {scene.name} with {len(scene.views)} views is written to {directory}.")


def _run_fit(config: RunConfig, log: logging.Logger) -> None:
    scene = _get_scene(config, log)

    result = SceneFitter(log).fit_scene(scene, config, directory=config.output_dir)
    log.info(
        f"Loss {result.initial_loss:.6f} -> {result.final_loss:.6f}; mean PSNR "
        f"{sum(row.psnr for row in result.metrics) / max(len(result.metrics), 1):.2f} dB."
    )


def _run_train_tiny(config: RunConfig, log: logging.Logger) -> None:
    if config.scene_dir is not None:
        scenes = [_get_scene(config, log)]
    else:
        scenes = _synth_scenes(config, config.num_scenes)

    checkpoint = config.checkpoint or (config.output_dir / "unigs.ckpt")

    trainer = Trainer(log)
    result = trainer.train_tiny(scenes, config, checkpoint_path=checkpoint)

    if result.epoch_psnr:
        log.info(f"Train PSNR {result.epoch_psnr[0]:.2f} -> {result.epoch_psnr[-1]:.2f} dB.")


def _run_render(config: RunConfig, log: logging.Logger) -> None:
    scene = _get_scene(config, log)

    if config.ply is not None:
        gaussians = activate_params(load_ply(config.ply))
        log.info(f"Render {gaussians.num_gaussians} Gaussians of {config.ply}.")

    elif config.checkpoint is not None:
        model = load_model(config.checkpoint, log)
        gaussians = model.reconstruct(
            scene.images(Split.Input), scene.cameras(Split.Input), masks=scene.masks(Split.Input)
        )
        log.info(f"Render the reconstruction of the checkpoint {config.checkpoint}.")

    else:
        raise ValueError("render needs --ply or --checkpoint.")

    metrics, _ = evaluate_views(gaussians, scene.views, scene.name, directory=config.output_dir)
    write_metric_report(metrics, config.output_dir / "metrics.csv")


def _run_check(config: RunConfig, log: logging.Logger) -> bool:
    runner = CheckRunner(log, fault=config.fault, seed=config.seed)
    report = runner.run()
    runner.write_report(report, config.output_dir / "checks.csv")

    if report.passed:
        log.info(f"All {len(report.results)} checks passed.")
    else:
        log.error(f"Failed checks: {report.failures}.")

    return report.passed


def _run_bench(config: RunConfig, log: logging.Logger) -> None:
    benchmark = ViewBenchmark(log)

    model = load_model(config.checkpoint, log) if config.checkpoint is not None else None
    scene = load_scene(config.scene_dir) if config.scene_dir is not None else None

    table = benchmark.bench_views(config, model=model, scene=scene)
    benchmark.write_table(table, config.output_dir / "bench_views.csv")

    if config.is_ablation:
        table = benchmark.ablation_sweep(_synth_scenes(config, config.num_scenes), config)
        benchmark.write_table(table, config.output_dir / "bench_ablation.csv")
