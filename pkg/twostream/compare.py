#!/usr/bin/env python3

"""
Summary tables over many run directories: transfer results per architecture and pretraining, the co-attention
depth ablation, and the pretraining data-fraction sweep.

Reads each run's results.csv. Runs that land in the same table cell (seeds) are summarised by their median.
"""

from argparse import ArgumentParser, Namespace
import csv
from logging import getLogger
import pathlib
import sys
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from twostream.errors import UsageError


logger = getLogger("twostream")

# (task, metric) columns of the transfer tables; zero-shot retrieval comes from eval runs of a pretrained model.
TASK_COLUMNS: List[Tuple[str, str]] = [
    ("vqa", "vqa_score"),
    ("mc", "q_a"),
    ("mc", "qa_r"),
    ("mc", "q_ar"),
    ("refexp", "accuracy"),
    ("retrieval", "recall@1"),
    ("retrieval", "recall@5"),
    ("retrieval", "recall@10"),
    ("zeroshot-retrieval", "recall@1"),
    ("zeroshot-retrieval", "recall@5"),
    ("zeroshot-retrieval", "recall@10"),
]
PRETRAIN_COLUMNS: List[Tuple[str, str]] = [("pretrain", "alignment_accuracy"), ("pretrain", "masked_region")]

Row = Dict[str, str]
Table = Tuple[List[str], List[List[str]]]


def collect(run_dirs: Sequence[str]) -> List[Row]:
    """
    One dict per results.csv row found in the given run directories.
    """
    rows: List[Row] = []
    for run_dir in run_dirs:
        path = pathlib.Path(run_dir) / "results.csv"
        if not path.is_file():
            logger.warning("No results.csv in %s, skipping it", str(run_dir))
            continue
        with path.open(newline="") as results_file:
            rows.extend(dict(r) for r in csv.DictReader(results_file))
    if not rows:
        raise UsageError("none of the given run directories holds a results.csv")
    return rows


def _task(row: Row) -> str:
    return "pretrain" if row.get("command") == "pretrain" else row.get("task", "")


def _truthy(value: Optional[str]) -> bool:
    return str(value).strip().lower() in ("true", "1", "yes")


def _value(rows: List[Row], task: str, metric: str) -> str:
    values = []
    for row in rows:
        if _task(row) == task and row.get(metric) not in (None, ""):
            values.append(float(row[metric]))
    return f"{float(np.median(values)):.4f}" if values else "-"


def build_table(
    rows: List[Row], key: Callable[[Row], Optional[str]], columns: List[Tuple[str, str]], label: str
) -> Table:
    """
    Group rows by `key` (None drops a row) and fill one cell per (task, metric) column.
    """
    groups: Dict[str, List[Row]] = {}
    for row in rows:
        if row.get("command") not in ("pretrain", "finetune", "eval"):
            continue
        name = key(row)
        if name is not None:
            groups.setdefault(name, []).append(row)
    header = [label] + [f"{task} {metric}" for task, metric in columns]
    body = [[name] + [_value(members, t, m) for t, m in columns] for name, members in sorted(groups.items())]
    return header, body


def transfer_table(rows: List[Row]) -> Table:
    def key(row: Row) -> str:
        origin = "pretrained" if _truthy(row.get("pretrained", "True")) else "scratch"
        return f"{row.get('architecture', 'two_stream')} {origin}"

    return build_table(rows, key, TASK_COLUMNS, "model")


def depth_table(rows: List[Row]) -> Table:
    def key(row: Row) -> Optional[str]:
        if row.get("architecture") != "two_stream" or not _truthy(row.get("pretrained", "True")):
            return None
        return f"{int(row.get('num_co_blocks', 0)):d}-layer"

    return build_table(rows, key, PRETRAIN_COLUMNS + TASK_COLUMNS, "co-attention depth")


def fraction_table(rows: List[Row]) -> Table:
    def key(row: Row) -> Optional[str]:
        if not _truthy(row.get("pretrained", "True")):
            return None
        return f"{100 * float(row.get('data_fraction', 1.0)):.0f}%"

    table = build_table(rows, key, PRETRAIN_COLUMNS + TASK_COLUMNS, "pretraining data")
    header, body = table
    return header, sorted(body, key=lambda r: float(r[0].rstrip("%")))


def format_table(title: str, table: Table) -> str:
    header, body = table
    widths = [max(len(cell) for cell in column) for column in zip(header, *body)]
    lines = [title, "  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body]
    return "\n".join(lines)


def write_table(path: pathlib.Path, table: Table) -> None:
    header, body = table
    with path.open(mode="w", newline="") as output_file:
        writer = csv.writer(output_file)
        writer.writerow(header)
        writer.writerows(body)


def render(rows: List[Row], out_dir: Optional[pathlib.Path] = None) -> Dict[str, Table]:
    """
    Print the three tables and, when out_dir is given, write them as transfer.csv, depth.csv and fraction.csv.
    """
    tables = {"transfer": transfer_table(rows), "depth": depth_table(rows), "fraction": fraction_table(rows)}
    titles = {
        "transfer": "Transfer results",
        "depth": "Co-attention depth ablation",
        "fraction": "Pretraining data fraction",
    }
    for name, table in tables.items():
        print(format_table(titles[name], table))
        print()
        if out_dir is not None:
            pathlib.Path(out_dir).mkdir(parents=True, exist_ok=True)
            write_table(pathlib.Path(out_dir) / f"{name}.csv", table)
    return tables


def arg_parsing(argv: Optional[Sequence[str]] = None) -> Namespace:
    argparser = ArgumentParser(description="Summarise twostream run directories")
    argparser.add_argument("runs", nargs="+", help="Run directories holding results.csv")
    argparser.add_argument("-o", "--out", type=str, help="Also write the tables as CSV files here")
    return argparser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> None:
    args = arg_parsing(argv)
    try:
        render(collect(args.runs), pathlib.Path(args.out) if args.out else None)
    except UsageError as e:
        print(f"Error: {str(e)}", file=sys.stderr)
        sys.exit(e.exit_code)
    sys.exit()


if __name__ == "__main__":
    main()
