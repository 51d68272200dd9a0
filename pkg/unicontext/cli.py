from __future__ import annotations

import argparse
import difflib
import logging
import pathlib
import sys
from typing import Any, Callable, Literal, NoReturn, Union

import attr
import numpy as np

import unicontext
from unicontext import (
    checkpoints,
    config,
    evaluation,
    exceptions,
    prompts,
    synthdata,
    tasks,
    training,
    utils,
)
from unicontext.model import build_model
from unicontext.quantizers.bundle import Quantizers, train_quantizers

logger = logging.getLogger(__name__)

PROGRAM_NAME = "unicontext"
DEFAULT_OUT = "run"
DATASET_DIR = "dataset"
TOKENIZERS_DIR = "tokenizers"
REPORT_FILE = "report.tsv"
# Data keys that may still change after the scenes are generated
POST_BUILD_DATA_KEYS = (
    "codebook_size",
    "codebook_iters",
    "bpe_merges",
    "caption_budget",
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


def get_log_level(verbosity: int) -> int:
    """
    Given the number of repetitions of the flag -v,
    returns the desired log level
    """
    return {0: logging.INFO, 1: logging.DEBUG}.get(min((1, verbosity)), 0)


Style = Union[Literal["%"], Literal["{"], Literal["$"]]


def configure_logging(verbosity: int, format: str, style: Style) -> None:
    level = get_log_level(verbosity=verbosity)
    logging.basicConfig(level=level, format=format, style=style)
    level_name = logging.getLevelName(level)
    logger.debug(
        f"Log level set to {level_name}",
        extra={"action": "set_log_level", "value": level_name},
    )


def print_stderr(*args):
    print(*args, file=sys.stderr)


class ArgumentParser(argparse.ArgumentParser):
    """
    Usage errors exit with status 1.
    """

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def add_argument(parser: argparse._ActionsContainer, *args, **kwargs):
    return parser.add_argument(*args, **kwargs)


def add_cli_features(parser: argparse.ArgumentParser):
    """
    Add features to the parser to make it more CLI-friendly.
    """
    add_argument(
        parser,
        "-v",
        "--verbose",
        default=0,
        action="count",
        help="Use multiple times to increase verbosity",
    )
    log_group = parser.add_argument_group("Logging")
    add_argument(
        log_group,
        "--log-format",
        default=logging.BASIC_FORMAT,
        help="Defines the format used for logging (see "
        "https://docs.python.org/3/library/logging.html#logrecord-attributes)",
    )
    add_argument(
        log_group,
        "--log-format-style",
        default="%",
        choices=["%", "{", "$"],
        help="Defines the style for the log format string (see "
        "https://docs.python.org/3/howto/logging-cookbook.html#use-of-alternative-formatting-styles)",
    )
    add_argument(
        parser,
        "-V",
        "--version",
        action="version",
        help="Print the version and exit",
        version=f"%(prog)s, version {unicontext.__version__}",
    )


parser_options = {
    "allow_abbrev": False,
    "formatter_class": argparse.ArgumentDefaultsHelpFormatter,
}


def create_parser() -> ArgumentParser:
    return ArgumentParser(
        prog=PROGRAM_NAME,
        description="Desk-scale in-context segmentation and region captioning. "
        "See subcommands for details.",
        **parser_options,
    )


def add_common_arguments(parser: argparse.ArgumentParser) -> None:
    add_argument(
        parser,
        "--config",
        type=pathlib.Path,
        help="Flat key = value configuration file",
    )
    add_argument(
        parser,
        "--out",
        type=pathlib.Path,
        default=pathlib.Path(DEFAULT_OUT),
        help="Run directory holding the dataset, tokenizers, checkpoints and reports",
    )
    group = parser.add_argument_group(
        "Configuration", "Override single configuration keys"
    )
    for name, key in sorted(config.config_keys().items()):
        is_list = key.type_name.startswith("tuple[")
        add_argument(
            group,
            f"--{name.replace('_', '-')}",
            dest=f"key_{name}",
            default=argparse.SUPPRESS,
            metavar="LIST" if is_list else key.type_name.upper(),
            help=f"{', '.join(key.targets)} setting",
        )


def add_query_arguments(parser: argparse.ArgumentParser) -> None:
    add_argument(
        parser,
        "--task",
        choices=tasks.TASK_NAMES,
        default=tasks.SEGMENTATION,
        help="In-context task",
    )
    add_argument(parser, "--scene-id", type=int, required=True, help="Query scene")
    add_argument(
        parser,
        "--class",
        dest="class_name",
        required=True,
        help="Query class, by name (\"red square\") or index",
    )
    add_argument(
        parser, "-k", type=int, default=3, help="Number of in-context samples"
    )


def add_arguments(parser: argparse.ArgumentParser) -> argparse.ArgumentParser:
    subparsers = parser.add_subparsers(dest="command", required=True)
    commands: list[tuple[str, Callable, str]] = [
        ("build-data", build_data, "Generate the synthetic scene dataset"),
        (
            "train-tokenizers",
            train_tokenizers,
            "Fit the image codebook and the BPE text tokenizer",
        ),
        ("train", train, "Train the model"),
        ("eval", eval_, "Evaluate the trained model over the k sweep"),
        ("infer", infer, "Run one in-context query and print the decoded output"),
        ("inspect-tokens", inspect_tokens, "Print the prompt of one query, by token"),
    ]
    for name, func, description in commands:
        subparser = subparsers.add_parser(name, help=description, **parser_options)
        subparser.set_defaults(func=func)
        add_common_arguments(subparser)
        if name == "build-data":
            add_argument(
                subparser,
                "--verify",
                action="store_true",
                help="Also check that the saved dataset regenerates identically",
            )
        if name in ("infer", "inspect-tokens"):
            add_query_arguments(subparser)
        if name == "inspect-tokens":
            add_argument(
                subparser,
                "--training",
                dest="training_layout",
                action="store_true",
                help="Show the training layout, query target included",
            )
    return parser


# Commands


def load_settings(
    config_path: pathlib.Path | None, overrides: dict[str, str]
) -> config.Settings:
    layers: list[dict[str, Any]] = []
    if config_path is not None:
        layers.append(config.load_config(config_path))
    layers.append(overrides)
    return config.build_settings(layers)


def load_workspace(
    out: pathlib.Path, settings: config.Settings
) -> tuple[synthdata.Dataset, config.Settings]:
    """
    The saved dataset, with the data settings that still apply after scene
    generation taken from ``settings``.
    """
    dataset = synthdata.load_dataset(out / DATASET_DIR)
    data = attr.evolve(
        dataset.config,
        **{key: getattr(settings.data, key) for key in POST_BUILD_DATA_KEYS},
    )
    return attr.evolve(dataset, config=data), attr.evolve(settings, data=data)


def build_data(settings: config.Settings, out: pathlib.Path, verify: bool) -> None:
    dataset = synthdata.build_dataset(settings.data)
    synthdata.save_dataset(dataset, out / DATASET_DIR)
    config.write_effective(settings, out, "build-data")
    if verify and not synthdata.regenerate(out / DATASET_DIR):
        raise exceptions.DatasetError("Saved dataset does not regenerate identically")
    print(
        f"{len(dataset.train)} train and {len(dataset.val)} val scenes "
        f"written to {out / DATASET_DIR}"
    )


def train_tokenizers(settings: config.Settings, out: pathlib.Path) -> None:
    dataset, settings = load_workspace(out, settings)
    quantizers = train_quantizers(dataset)
    quantizers.save(out / TOKENIZERS_DIR)
    config.write_effective(settings, out, "train-tokenizers")
    print(
        f"Vocabulary of {quantizers.vocab.total_size} tokens written to "
        f"{out / TOKENIZERS_DIR}"
    )


def _tasks(
    names: tuple[str, ...],
    dataset: synthdata.Dataset,
    quantizers: Quantizers,
    settings: config.Settings,
    split: str,
) -> list[tasks.Task]:
    return [
        tasks.build_task(
            name,
            dataset,
            quantizers,
            split=split,
            max_positions=settings.model.max_positions,
            pad_captions=settings.train.pad_captions,
        )
        for name in names
    ]


def train(settings: config.Settings, out: pathlib.Path) -> None:
    dataset, settings = load_workspace(out, settings)
    quantizers = Quantizers.load(out / TOKENIZERS_DIR)
    model_config = attr.evolve(settings.model, vocab_size=quantizers.vocab.total_size)
    model = build_model(
        model_config,
        seed=settings.train.seed,
        segment_table=quantizers.vocab.segment_table(),
    )
    config.write_effective(settings, out, "train")
    trainer = training.build_trainer(
        model,
        _tasks(settings.train.tasks, dataset, quantizers, settings, "train"),
        settings.train,
        out=out,
    )
    result = trainer.run()
    print(
        f"{result.steps} step(s), {result.epochs_completed} epoch(s)"
        f"{' (stopped)' if result.stopped else ''}, checkpoint {result.checkpoint}"
    )


def _load_model(out: pathlib.Path) -> checkpoints.Checkpoint:
    return checkpoints.load_checkpoint(out / training.CHECKPOINT_FILE)


def eval_(settings: config.Settings, out: pathlib.Path) -> None:
    dataset, settings = load_workspace(out, settings)
    quantizers = Quantizers.load(out / TOKENIZERS_DIR)
    model = _load_model(out).model
    config.write_effective(settings, out, "eval")
    eval_tasks = _tasks(
        settings.train.tasks, dataset, quantizers, settings, settings.eval.split
    )
    rows = evaluation.evaluate(model, eval_tasks, settings.eval)
    evaluation.write_report(rows, out / REPORT_FILE)
    print(evaluation.format_report(rows), end="")


def _query(
    dataset: synthdata.Dataset,
    quantizers: Quantizers,
    settings: config.Settings,
    task_name: str,
    scene_id: int,
    class_name: str,
    k: int,
) -> tuple[tasks.Task, synthdata.PoolEntry, list[synthdata.PoolEntry]]:
    split = next(
        (
            name
            for name, ids in synthdata.split_ids(dataset.config).items()
            if scene_id in ids
        ),
        None,
    )
    if split is None:
        raise exceptions.DatasetError(f"Unknown scene id {scene_id}")
    task = _tasks((task_name,), dataset, quantizers, settings, split)[0]

    names = list(quantizers.class_names)
    if class_name.isdigit() and int(class_name) < len(names):
        class_index = int(class_name)
    elif class_name in names:
        class_index = names.index(class_name)
    else:
        raise exceptions.UnknownCategory(
            class_name, candidates=difflib.get_close_matches(class_name, names)
        )
    scene = task.scenes[scene_id]
    object_index = next(
        (i for i, obj in enumerate(scene.objects) if obj.class_index == class_index),
        None,
    )
    if object_index is None:
        raise exceptions.DatasetError(
            f"Scene {scene_id} has no {names[class_index]!r} object"
        )
    query = synthdata.PoolEntry(scene_id=scene_id, object_index=object_index)
    rng = np.random.default_rng([settings.eval.seed, scene_id, class_index])
    return task, query, task.contexts_for(query, k, rng)


def mask_art(mask: np.ndarray) -> str:
    return "".join(
        "".join("#" if value else "." for value in row) + "\n" for row in mask
    )


def infer(
    settings: config.Settings,
    out: pathlib.Path,
    task: str,
    scene_id: int,
    class_name: str,
    k: int,
) -> None:
    dataset, settings = load_workspace(out, settings)
    quantizers = Quantizers.load(out / TOKENIZERS_DIR)
    model = _load_model(out).model
    config.write_effective(settings, out, "infer")
    query_task, query, contexts = _query(
        dataset, quantizers, settings, task, scene_id, class_name, k
    )
    if isinstance(query_task, tasks.SegmentationTask):
        mask = evaluation.predict_mask(model, query_task, query, contexts)
        print(mask_art(mask), end="")
    elif isinstance(query_task, tasks.CaptioningTask):
        record = evaluation.predict_caption(model, query_task, query, contexts)
        box = " ".join(f"{value:.3f}" for value in record.bbox.as_tuple())
        fields = [quantizers.class_names[record.category], box, record.caption]
        if record.truncated:
            fields.append("(truncated)")
        print("\t".join(fields))


def inspect_tokens(
    settings: config.Settings,
    out: pathlib.Path,
    task: str,
    scene_id: int,
    class_name: str,
    k: int,
    training_layout: bool,
) -> None:
    dataset, settings = load_workspace(out, settings)
    quantizers = Quantizers.load(out / TOKENIZERS_DIR)
    config.write_effective(settings, out, "inspect-tokens")
    query_task, query, contexts = _query(
        dataset, quantizers, settings, task, scene_id, class_name, k
    )
    sequence = query_task.prompt(query, contexts, training=training_layout)
    print(
        prompts.render_sequence(sequence, quantizers.vocab, quantizers.tokenizer),
        end="",
    )


def cli(args: list[str]) -> int:
    parser = create_parser()
    add_arguments(parser)
    add_cli_features(parser)
    parsed = vars(parser.parse_args(args))

    configure_logging(
        verbosity=parsed.pop("verbose"),
        format=parsed.pop("log_format"),
        style=parsed.pop("log_format_style"),
    )
    return execute_command(parsed)


def execute_command(parsed: dict[str, Any]) -> int:
    parsed.pop("command")
    func = parsed.pop("func")
    overrides = {
        name[len("key_") :]: parsed.pop(name)
        for name in list(parsed)
        if name.startswith("key_")
    }
    try:
        settings = load_settings(parsed.pop("config"), overrides)
        func(settings=settings, **parsed)
    except Exception as exc:
        logger.debug("Exception details:", exc_info=exc)
        messages = [f"{utils.qualified_name(e)}: {e}" for e in utils.causes(exc)]
        exit_message = "\n".join(e.strip() for e in messages[::-1] if e)

        print_stderr(exit_message)
        if isinstance(exc, exceptions.ConfigError):
            return EXIT_USAGE
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(cli(sys.argv[1:]))
