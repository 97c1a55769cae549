#!/usr/bin/env python3

"""
Observe training runs: print run times and progress, and write metrics.csv / results.csv into the run directory.

Training loops call every processor they were given at the start of a run, after every epoch, and at the end.
"""

import csv
import datetime
import logging
import pathlib
from typing import Dict, List, Optional, Sequence


from twostream.training.training_results import RunResults


logger = logging.getLogger("twostream")

METRIC_FIELDS = ["epoch", "split", "metric", "value"]


class TrainingProcessor:
    """
    No-op hooks; subclasses override the stages they care about.
    """

    def task_started(self, kind: str, epochs: int, history: List[Dict]) -> None:
        pass  # This is required for implementation, but at this time we're taking no action here

    def epoch_completed(self, epoch: int, rows: List[Dict]) -> None:
        pass  # This is required for implementation, but at this time we're taking no action here

    def task_completed(self, kind: str, rows: List[Dict]) -> None:
        pass  # This is required for implementation, but at this time we're taking no action here


class ProcessTraining(TrainingProcessor):
    def __init__(self, run_directory: Optional[pathlib.Path] = None, results: Optional[RunResults] = None) -> None:
        """
        Initialize some base values for this processor
        :param run_directory: Where metrics.csv and results.csv go; None only prints
        :param results: Summary row to complete with the final metrics and write as results.csv
        """

        self.task_start_time = datetime.datetime.utcnow()
        self.run_directory = pathlib.Path(run_directory) if run_directory is not None else None
        self.results = results
        self.rows: List[Dict] = []

    def task_started(self, kind: str, epochs: int, history: List[Dict]) -> None:
        """
        When the overall run starts, print the start time.
        :param kind: pretrain, finetune or eval
        :param epochs:
        :param history: Metric rows restored from a checkpoint when resuming
        :return:
        """

        self.task_start_time = datetime.datetime.utcnow()
        self.rows = list(history)
        print(f"{kind.capitalize()} Start Time: {self.task_start_time.isoformat()}")
        logger.info("Starting %s for %s epochs", kind, epochs)

    def epoch_completed(self, epoch: int, rows: List[Dict]) -> None:
        """
        Print the epoch's headline numbers and append its rows to metrics.csv.
        :param epoch:
        :param rows: {epoch, split, metric, value} dicts
        :return:
        """
        self.rows.extend(rows)
        summary = ", ".join(f"{r['split']} {r['metric']}={r['value']:.4f}" for r in rows)
        print(f"  - epoch {epoch}: {summary}")
        if self.run_directory is not None:
            self.write_metrics(self.run_directory / "metrics.csv", self.rows)

    def task_completed(self, kind: str, rows: List[Dict]) -> None:
        """
        When the overall run finishes, do the following:
            1) Print finish time and calculate run time
            2) Write the full metric log as metrics.csv
            3) Fill the summary row with the final epoch's metrics and write results.csv
        :param kind:
        :param rows: The complete metric log of the run
        :return:
        """

        task_end_time = datetime.datetime.utcnow()
        print(f"{kind.capitalize()} End Time: {task_end_time.isoformat()}")
        print(f"{kind.capitalize()} Elapsed Time: {task_end_time - self.task_start_time}")

        if self.run_directory is None:
            return
        self.write_metrics(self.run_directory / "metrics.csv", rows)
        if self.results is not None:
            self.results.record_metrics(final_metrics(rows))
            csv_out = self.run_directory / "results.csv"
            print(f"Putting results into a CSV at {csv_out}")
            self.write_results(csv_out, [self.results])

    # Helper functions, not core to handling run stages.
    @staticmethod
    def write_metrics(path: pathlib.Path, rows: Sequence[Dict]) -> None:
        with path.open(mode="w", newline="") as output_file:
            writer = csv.DictWriter(output_file, fieldnames=METRIC_FIELDS)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: row[k] for k in METRIC_FIELDS})

    @staticmethod
    def write_results(path: pathlib.Path, results: Sequence[RunResults]) -> None:
        fieldnames: List[str] = []
        for result in results:
            fieldnames += [k for k in result.keys() if k not in fieldnames]
        with path.open(mode="w", newline="") as output_file:
            writer = csv.DictWriter(output_file, fieldnames=fieldnames)
            writer.writeheader()
            for result in results:
                writer.writerow(dict(result))


def final_metrics(rows: Sequence[Dict]) -> Dict[str, float]:
    """
    The last epoch's held-out metrics, keyed by metric name (train rows are used when there is no held-out split).
    """
    if not rows:
        return {}
    last = max(int(r["epoch"]) for r in rows)
    latest = [r for r in rows if int(r["epoch"]) == last]
    held_out = [r for r in latest if r["split"] != "train"] or latest
    return {r["metric"]: float(r["value"]) for r in held_out}
