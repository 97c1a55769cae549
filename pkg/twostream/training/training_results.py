#!/usr/bin/env python3

"""
One-row summary of a command, written to results.csv and read back by compare.
"""

from datetime import datetime
from typing import Dict, Mapping, Optional, Union


ResultValue = Union[bool, int, float, str]

# Leading results.csv columns; final metrics and command-specific facts follow in insertion order.
RUN_COLUMNS = ("command", "architecture", "num_co_blocks", "task", "pretrained", "data_fraction", "seed", "epochs")


class RunResults(Dict[str, ResultValue]):

    """
    The run facts compare groups by, followed by the final metrics.

    Example:
    {
        "command": "finetune",
        "architecture": "two_stream",
        "num_co_blocks": 2,
        "task": "vqa",
        "pretrained": True,
        "data_fraction": 1.0,
        "seed": 0,
        "epochs": 10,
        "run_finished": "2026-01-25T13:25:53.540015",
        "vqa_score": 0.91,
        "accuracy": 0.88,
    }
    """

    def __init__(
        self,
        name: str,
        command: str,
        architecture: str = "two_stream",
        num_co_blocks: int = 0,
        task: str = "",
        pretrained: bool = True,
        data_fraction: float = 1.0,
        seed: int = 0,
        epochs: int = 0,
        run_finished: Optional[str] = None,
        **extra: ResultValue,
    ) -> None:
        """
        :param name: Run directory name; kept off the row
        :param command: CLI command that produced the run
        :param architecture: two_stream or single_stream
        :param num_co_blocks: Co-attention depth
        :param task: Transfer task, empty for pretraining and data generation
        :param pretrained: Whether the weights came out of pretraining
        :param data_fraction: Share of the pretraining corpus used
        :param seed: Global seed
        :param epochs: Epochs trained
        :param run_finished: ISO timestamp, now when omitted
        :param extra: Metric values and command-specific columns
        """
        super().__init__(
            zip(RUN_COLUMNS, (command, architecture, num_co_blocks, task, pretrained, data_fraction, seed, epochs))
        )
        self["run_finished"] = run_finished or datetime.utcnow().isoformat()
        self.update(extra)
        self.name = name

    def record_metrics(self, metrics: Mapping[str, float]) -> "RunResults":
        """Add final metric values as columns; run facts are never overwritten by a metric of the same name."""
        clashes = sorted(set(metrics) & set(RUN_COLUMNS))
        if clashes:
            raise ValueError(f"metric names {clashes} collide with run columns")
        self.update(metrics)
        return self

    def __repr__(self) -> str:
        return f"{self.__class__.__name__} ({self.name}): {dict(self)!r}"
