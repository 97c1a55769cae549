#!/usr/bin/env python3

"""
twostream trains a small two-stream vision-language transformer on a generated image/caption corpus.

Commands: generate-data, pretrain, finetune, eval, sample-captions, gradcheck and compare. Every command writes
config.yaml, results.csv and log.txt into its run directory. See README.md for more information.

Requires Python 3.9 or higher.
"""

from argparse import ArgumentParser, Namespace
import logging
from logging import getLogger
import pathlib
import sys
from typing import Any, Callable, Dict, List, NoReturn, Optional, Sequence

import numpy as np

from twostream import compare
from twostream.config import RunConfig, resolve_run_dir, write_effective_config
from twostream.data.data_generate import SPLITS, generate_dataset, select_subset
from twostream.data.data_io import load_dataset, load_dataset_config, write_dataset, write_manifest
from twostream.data.data_rng import derive_rng, derive_seed
from twostream.data.data_types import GeneratorConfig, PairedExample
from twostream.errors import ContractError, TwoStreamError, UsageError
from twostream.model.model_base import TwoStreamModel
from twostream.model.model_config import ModelConfig
from twostream.processors.process_training import ProcessTraining, final_metrics
from twostream.tasks.transfer.transfer_base import TaskMap, get_task, load_task_dataset, write_task_dataset
from twostream.tasks.transfer.transfer_generate import generate_task_dataset
from twostream.tasks.transfer.transfer_retrieval import zero_shot_retrieval
from twostream.tasks.transfer.transfer_sampling import sample_caption
from twostream.tasks.transfer.transfer_types import RetrievalPool
from twostream.training.training_check import SCOPES, require_passing, run_gradcheck
from twostream.training.training_checkpoint import load_checkpoint
from twostream.training.training_config import TrainConfig
from twostream.training.training_loop import finetune, metric_row, pretrain
from twostream.training.training_results import RunResults


logger = getLogger("twostream")

LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
ZERO_SHOT = "zeroshot-retrieval"
EVAL_TASKS = [ZERO_SHOT] + sorted(TaskMap)
SCRATCH = "scratch"


class CliParser(ArgumentParser):
    """ArgumentParser whose usage errors exit with status 1."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(UsageError.exit_code, f"{self.prog}: error: {message}\n")


def main(argv: Optional[Sequence[str]] = None) -> None:
    """
    Parse the arguments, set up the run directory and logging, run the command and exit with its status.
    :param argv: Arguments without the program name, defaults to sys.argv[1:]
    :return:
    """
    args = arg_parsing(argv)
    try:
        run_dir = resolve_run_dir(args.out or f"runs/{args.command}")
        # A refused generate-data leaves the existing corpus directory untouched
        refused = args.command == "generate-data" and (run_dir / "manifest.json").exists() and not args.force
        if refused:
            configure_logging(args.log_level)
        else:
            run_dir.mkdir(parents=True, exist_ok=True)
            configure_logging(args.log_level, run_dir / "log.txt")
        run = RunConfig.load(args.config, overrides=flag_overrides(args))
        Commands[args.command](args, run, run_dir)
    except TwoStreamError as e:
        logger.error("%s failed: %s", args.command, str(e))
        print(f"Error: {str(e)}", file=sys.stderr)
        sys.exit(e.exit_code)
    except (OSError, ValueError) as e:
        logger.error("%s failed: %s", args.command, str(e))
        print(f"Error: {str(e)}", file=sys.stderr)
        sys.exit(ContractError.exit_code)

    sys.exit()


def arg_parsing(argv: Optional[Sequence[str]] = None) -> Namespace:
    """
    Parse the CLI arguments and return them in an Argparse Namespace
    :return:
    """

    common = ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", type=str, help="A flat YAML run config, layered over the packaged one.")
    common.add_argument("-o", "--out", type=str, help="Run directory, default 'runs/<command>'.")
    common.add_argument("--seed", type=int, help="Global seed of the run.")
    common.add_argument(
        "-l",
        "--log_level",
        choices=LOG_LEVELS,
        default="INFO",
        help="What level are we logging at",
    )

    model = ArgumentParser(add_help=False)
    model.add_argument("--preset", choices=["desk", "paper"], help="Model and schedule size, default desk.")
    model.add_argument("--arch", choices=["two_stream", "single_stream"], help="Architecture, default two_stream.")
    model.add_argument("--depth", type=int, help="Number of co-attention blocks.")
    model.add_argument("--epochs", type=int)
    model.add_argument("--batch-size", dest="batch_size", type=int)
    model.add_argument("--lr", dest="peak_lr", type=float, help="Peak learning rate.")
    model.add_argument("--weight-decay", dest="weight_decay", type=float)
    model.add_argument("--grad-clip", dest="grad_clip", type=float, help="Global gradient norm cap, 0 disables.")

    argparser = CliParser(description="Two-stream vision-language pretraining on a generated corpus")
    commands = argparser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    generate = commands.add_parser("generate-data", parents=[common], help="Write the train/val/test corpus.")
    generate.add_argument("--n", type=int, help="Training pairs, default 5000.")
    generate.add_argument("--n-val", dest="n_val", type=int)
    generate.add_argument("--n-test", dest="n_test", type=int)
    generate.add_argument("--fraction", dest="data_fraction", type=float, help="Keep a seeded share of train.")
    generate.add_argument(
        "--tasks", type=str, help=f"Comma separated transfer tasks to emit as well: {','.join(sorted(TaskMap))}."
    )
    generate.add_argument("--task-examples", dest="task_examples", type=int, help="Training examples per task.")
    generate.add_argument("--force", action="store_true", help="Overwrite an existing corpus.")

    pretrain_cmd = commands.add_parser("pretrain", parents=[common, model], help="Run the pretraining objectives.")
    pretrain_cmd.add_argument("--data", type=str, required=True, help="Corpus directory from generate-data.")
    pretrain_cmd.add_argument("--resume", type=str, help="Continue from this pretraining checkpoint.")
    pretrain_cmd.add_argument("--data-fraction", dest="data_fraction", type=float)
    pretrain_cmd.add_argument(
        "--mask-negatives", dest="mask_negatives", action="store_const", const=True, help="Also mask negatives."
    )

    finetune_cmd = commands.add_parser("finetune", parents=[common, model], help="Train a transfer task.")
    finetune_cmd.add_argument("--task", choices=sorted(TaskMap), required=True)
    finetune_cmd.add_argument(
        "--from", dest="source", type=str, required=True, help="A pretraining checkpoint, or 'scratch'."
    )
    finetune_cmd.add_argument("--data", type=str, required=True)

    evaluate = commands.add_parser("eval", parents=[common], help="Evaluate a checkpoint, read-only.")
    evaluate.add_argument("--task", choices=EVAL_TASKS, required=True)
    evaluate.add_argument("--checkpoint", type=str, required=True)
    evaluate.add_argument("--data", type=str, required=True)
    evaluate.add_argument("--split", choices=["val", "test"], default="test")

    sample = commands.add_parser("sample-captions", parents=[common], help="Sample captions by resampling words.")
    sample.add_argument("--checkpoint", type=str, required=True)
    sample.add_argument("--data", type=str, required=True)
    sample.add_argument("--n", dest="num_samples", type=int, help="Number of images to caption.")
    sample.add_argument("--steps", type=int)
    sample.add_argument("--length", type=int, help="Words per caption.")
    sample.add_argument("--temperature", type=float)

    gradcheck = commands.add_parser("gradcheck", parents=[common], help="Finite-difference gradient checks.")
    gradcheck.add_argument("--scope", choices=SCOPES, default="op")

    compare_cmd = commands.add_parser("compare", parents=[common], help="Summary tables over run directories.")
    compare_cmd.add_argument("runs", nargs="+", help="Run directories holding results.csv.")

    args = argparser.parse_args(argv)
    if getattr(args, "force", None) is None:
        args.force = False
    return args


def configure_logging(log_level: str, log_file: Optional[pathlib.Path] = None) -> None:
    """
    Send the package logger to the console and, when given, to the run's log file.
    """
    logger.setLevel(log_level)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()
    formatter = logging.Formatter(LOG_FORMAT)
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file is not None:
        handlers.append(logging.FileHandler(log_file, mode="a", encoding="utf-8"))
    for handler in handlers:
        handler.setFormatter(formatter)
        logger.addHandler(handler)


def flag_overrides(args: Namespace) -> Dict[str, Any]:
    """Run settings given on the command line; unset flags are None and leave the config untouched."""
    fields = set(RunConfig.model_fields)
    return {k: v for k, v in vars(args).items() if k in fields and v is not None}


# Helpers shared by several commands


def corpus_of(data_dir: pathlib.Path) -> GeneratorConfig:
    corpus = load_dataset_config(data_dir / "train.jsonl")
    if corpus is None:
        raise ContractError(f"{str(data_dir / 'train.jsonl')} is empty")
    return corpus


def check_compatible(config: ModelConfig, corpus: GeneratorConfig) -> None:
    """Raise unless a model with this config can read the corpus."""
    vocab = len(corpus.vocabulary())
    problems = []
    if config.text_vocab_size < vocab:
        problems.append(f"vocabulary {config.text_vocab_size} < {vocab} words")
    if config.visual_feature_dim != corpus.visual_feature_dim:
        problems.append(f"feature width {config.visual_feature_dim} != {corpus.visual_feature_dim}")
    if config.num_region_classes != corpus.num_region_classes:
        problems.append(f"region classes {config.num_region_classes} != {corpus.num_region_classes}")
    if problems:
        raise ContractError(f"model does not match the corpus: {'; '.join(problems)}")


def task_file(data_dir: pathlib.Path, task: str, split: str) -> pathlib.Path:
    path = data_dir / f"{task}_{split}.jsonl"
    if not path.is_file():
        raise UsageError(f"{str(path)} not found, generate it with: generate-data --tasks {task}")
    return path


def write_summary(run_dir: pathlib.Path, rows: List[Dict], results: RunResults) -> None:
    ProcessTraining.write_metrics(run_dir / "metrics.csv", rows)
    results.record_metrics(final_metrics(rows))
    ProcessTraining.write_results(run_dir / "results.csv", [results])


def results_for(run_dir: pathlib.Path, command: str, run: RunConfig, config: ModelConfig, **extra) -> RunResults:
    return RunResults(
        name=run_dir.name,
        command=command,
        architecture=config.architecture,
        num_co_blocks=config.num_co_blocks,
        seed=run.seed,
        **extra,
    )


# Commands


def generate_data(args: Namespace, run: RunConfig, run_dir: pathlib.Path) -> None:
    """
    Write train/val/test pretraining splits, optional transfer task splits and manifest.json; print corpus stats.
    """
    if (run_dir / "manifest.json").exists() and not args.force:
        raise UsageError(f"{str(run_dir)} already holds a corpus, pass --force to overwrite it")
    tasks = [t for t in (args.tasks or "").split(",") if t]
    unknown = sorted(set(tasks) - set(TaskMap))
    if unknown:
        raise UsageError(f"unknown transfer task(s) {unknown}, expected some of {sorted(TaskMap)}")
    corpus = run.generator_config()
    write_effective_config(run_dir, run, command="generate-data", tasks=args.tasks)

    sizes = {"train": run.n, "val": run.n_val, "test": run.n_test}
    files: Dict[str, int] = {}
    splits: Dict[str, List[PairedExample]] = {}
    for split in SPLITS:
        examples = generate_dataset(corpus, sizes[split], split)
        if split == "train":
            examples = select_subset(examples, run.data_fraction, run.seed)
        write_dataset(run_dir / f"{split}.jsonl", examples, corpus)
        files[f"{split}.jsonl"] = len(examples)
        splits[split] = examples
    for task in tasks:
        evaluation = run.retrieval_pool if task == "retrieval" else run.task_eval_examples
        for split, count in (("train", run.task_examples), ("val", evaluation), ("test", evaluation)):
            examples = generate_task_dataset(task, corpus, count, split)
            write_task_dataset(run_dir / f"{task}_{split}.jsonl", task, examples, corpus)
            files[f"{task}_{split}.jsonl"] = len(examples)
    digest = write_manifest(run_dir, files, corpus)

    regions = np.mean([e.image.num_regions for e in splits["train"]])
    words = np.mean([len(e.text) - 2 for e in splits["train"]])
    print(f"Corpus written to {str(run_dir)}")
    for name, count in files.items():
        print(f"  - {name}: {count} records")
    print(f"Vocabulary: {len(corpus.vocabulary())} words, {corpus.num_region_classes} region classes")
    print(f"Train split: {regions:.2f} regions per image, {words:.2f} words per caption")
    print(f"Manifest sha256: {digest}")
    results = RunResults(
        name=run_dir.name, command="generate-data", data_fraction=run.data_fraction, seed=run.seed, manifest=digest
    )
    ProcessTraining.write_results(run_dir / "results.csv", [results])


def pretrain_command(args: Namespace, run: RunConfig, run_dir: pathlib.Path) -> None:
    data_dir = pathlib.Path(args.data)
    corpus = corpus_of(data_dir)
    train = select_subset(load_dataset(data_dir / "train.jsonl"), run.data_fraction, run.seed)
    val = load_dataset(data_dir / "val.jsonl")
    resume = load_checkpoint(pathlib.Path(args.resume)) if args.resume else None
    if resume is not None:
        config = resume.model_config
        train_config = TrainConfig(**resume.meta["train_config"])
    else:
        config = run.model_config_for(corpus)
        train_config = run.train_config()
    check_compatible(config, corpus)
    write_effective_config(run_dir, run, command="pretrain", data=args.data, resume=args.resume)

    results = results_for(
        run_dir, "pretrain", run, config, data_fraction=run.data_fraction, epochs=train_config.epochs
    )
    outcome = pretrain(
        train,
        val,
        config,
        train_config,
        corpus.vocabulary().word_ids(),
        checkpoint_dir=run_dir / "checkpoints",
        resume=resume,
        processors=[ProcessTraining(run_dir, results)],
        meta={"data_fraction": run.data_fraction, "corpus": corpus.model_dump()},
    )
    logger.info("Pretraining finished after epoch %s", outcome.checkpoint.meta["epoch"])


def finetune_command(args: Namespace, run: RunConfig, run_dir: pathlib.Path) -> None:
    data_dir = pathlib.Path(args.data)
    corpus = corpus_of(data_dir)
    train = load_task_dataset(task_file(data_dir, args.task, "train"), args.task)
    val = load_task_dataset(task_file(data_dir, args.task, "val"), args.task)

    data_fraction = 1.0
    if args.source == SCRATCH:
        model = TwoStreamModel.initialize(run.model_config_for(corpus), seed=derive_seed(run.seed, "init"))
        pretrained = False
    else:
        checkpoint = load_checkpoint(pathlib.Path(args.source))
        if checkpoint.kind != "pretrain":
            raise ContractError(f"{args.source} is a {checkpoint.kind} checkpoint, fine-tuning needs a pretrained one")
        model = checkpoint.to_model()
        pretrained = True
        data_fraction = float(checkpoint.meta.get("data_fraction", 1.0))
    check_compatible(model.config, corpus)
    write_effective_config(run_dir, run, command="finetune", task=args.task, source=args.source, data=args.data)

    train_config = run.train_config(args.task)
    results = results_for(
        run_dir,
        "finetune",
        run,
        model.config,
        task=args.task,
        pretrained=pretrained,
        data_fraction=data_fraction,
        epochs=train_config.epochs,
    )
    finetune(
        args.task,
        train,
        val,
        model,
        train_config,
        checkpoint_dir=run_dir / "checkpoints",
        pretrained=pretrained,
        processors=[ProcessTraining(run_dir, results)],
        meta={"data_fraction": data_fraction},
    )


def eval_command(args: Namespace, run: RunConfig, run_dir: pathlib.Path) -> None:
    """
    Read-only evaluation of a checkpoint on one task split; prints the metrics and writes metrics.csv.
    """
    data_dir = pathlib.Path(args.data)
    checkpoint = load_checkpoint(pathlib.Path(args.checkpoint))
    model = checkpoint.to_model()
    check_compatible(model.config, corpus_of(data_dir))
    write_effective_config(
        run_dir, run, command="eval", task=args.task, checkpoint=args.checkpoint, data=args.data, split=args.split
    )

    if args.task == ZERO_SHOT:
        if checkpoint.kind != "pretrain":
            raise ContractError(f"zero-shot retrieval needs a pretraining checkpoint, got a {checkpoint.task} one")
        examples = load_task_dataset(task_file(data_dir, "retrieval", args.split), "retrieval")
        metrics = zero_shot_retrieval(RetrievalPool.from_examples(examples), model)
    else:
        if checkpoint.task != args.task:
            raise ContractError(
                f"{args.checkpoint} was fine-tuned for '{checkpoint.task or 'pretraining'}', not '{args.task}'"
            )
        runner = get_task(args.task)
        runner.check(model)
        metrics = runner.evaluate(load_task_dataset(task_file(data_dir, args.task, args.split), args.task), model)

    epoch = int(checkpoint.meta.get("epoch", 0))
    rows = [metric_row(epoch, args.split, name, value) for name, value in metrics.items()]
    for name, value in metrics.items():
        print(f"{args.task} {args.split} {name}: {value:.4f}")
    results = results_for(
        run_dir,
        "eval",
        run,
        model.config,
        task=args.task,
        pretrained=bool(checkpoint.meta.get("pretrained", checkpoint.kind == "pretrain" and epoch > 0)),
        data_fraction=float(checkpoint.meta.get("data_fraction", 1.0)),
        epochs=epoch,
    )
    write_summary(run_dir, rows, results)


def sample_captions_command(args: Namespace, run: RunConfig, run_dir: pathlib.Path) -> None:
    """
    Caption the first validation images by resampling one word position per step, starting from all MASK.
    """
    data_dir = pathlib.Path(args.data)
    corpus = corpus_of(data_dir)
    checkpoint = load_checkpoint(pathlib.Path(args.checkpoint))
    model = checkpoint.to_model()
    check_compatible(model.config, corpus)
    write_effective_config(run_dir, run, command="sample-captions", checkpoint=args.checkpoint, data=args.data)

    vocab = corpus.vocabulary()
    images = load_dataset(data_dir / "val.jsonl")[: run.num_samples]
    lines = []
    for i, example in enumerate(images):
        rng = derive_rng(run.seed, "sample", i)
        text = sample_caption(
            example.image, model, run.steps, rng, run.length, vocab.word_ids(), temperature=run.temperature
        )
        line = f"{example.example_id}: {' '.join(vocab.decode(text.token_ids))}"
        print(line)
        lines.append(line)
    (run_dir / "samples.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    results = results_for(run_dir, "sample-captions", run, model.config, samples=len(lines), steps=run.steps)
    ProcessTraining.write_results(run_dir / "results.csv", [results])


def gradcheck_command(args: Namespace, run: RunConfig, run_dir: pathlib.Path) -> None:
    write_effective_config(run_dir, run, command="gradcheck", scope=args.scope)
    errors, tolerance = run_gradcheck(args.scope, run.seed)
    for name, error in sorted(errors.items()):
        print(f"{name:<40} {error:.3e}")
    worst = max(errors.values()) if errors else 0.0
    print(f"Max relative error ({args.scope}): {worst:.3e}, tolerance {tolerance:.0e}")
    results = RunResults(name=run_dir.name, command="gradcheck", seed=run.seed, scope=args.scope, max_error=worst)
    ProcessTraining.write_results(run_dir / "results.csv", [results])
    require_passing(errors, tolerance)


def compare_command(args: Namespace, run: RunConfig, run_dir: pathlib.Path) -> None:
    write_effective_config(run_dir, run, command="compare", runs=" ".join(args.runs))
    compare.render(compare.collect(args.runs), run_dir)


# Maps a command name to the function running it.
Commands: Dict[str, Callable[[Namespace, RunConfig, pathlib.Path], None]] = {
    "generate-data": generate_data,
    "pretrain": pretrain_command,
    "finetune": finetune_command,
    "eval": eval_command,
    "sample-captions": sample_captions_command,
    "gradcheck": gradcheck_command,
    "compare": compare_command,
}


if __name__ == "__main__":
    main()
