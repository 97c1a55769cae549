#!/usr/bin/env python3

"""
Line-delimited JSON dataset files.

Line 1 is a header record (format, version, PRNG, generator config and its digest, record kind and count);
every following line is one record. Pretraining splits hold ExampleRecords, task files hold the task record
types from twostream.tasks.transfer, which reuse ImageRecord and TextRecord.
"""

import hashlib
import json
from logging import getLogger
import pathlib
from typing import Any, Dict, List, Optional, Sequence, Tuple, Type, TypeVar

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from twostream.data.data_rng import PRNG_NAME
from twostream.data.data_types import GeneratorConfig, PairedExample
from twostream.errors import ContractError, ParseError, VersionMismatchError
from twostream.model.model_inputs import ImageInput, TextInput


logger = getLogger("twostream")

FORMAT_NAME = "twostream-dataset"
FORMAT_VERSION = 1

Record = TypeVar("Record", bound=BaseModel)


class ImageRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    features: List[List[float]]
    boxes: List[List[float]]
    detector_dist: List[List[float]]
    class_ids: Optional[List[int]] = None

    @classmethod
    def from_image(cls, image: ImageInput) -> "ImageRecord":
        return cls(
            features=image.region_features.tolist(),
            boxes=image.boxes.tolist(),
            detector_dist=image.detector_dist.tolist(),
            class_ids=None if image.class_ids is None else [int(c) for c in image.class_ids],
        )

    def to_image(self) -> ImageInput:
        width = len(self.features[0]) if self.features else 0
        image = ImageInput(
            region_features=np.asarray(self.features, dtype=np.float64).reshape(len(self.features), width),
            boxes=np.asarray(self.boxes, dtype=np.float64).reshape(len(self.boxes), 4),
            detector_dist=np.asarray(self.detector_dist, dtype=np.float64).reshape(len(self.detector_dist), -1),
            class_ids=None if self.class_ids is None else np.asarray(self.class_ids, dtype=np.int64),
        )
        image.validate()
        return image


class TextRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tokens: List[int]
    segments: List[int]

    @classmethod
    def from_text(cls, text: TextInput) -> "TextRecord":
        return cls(tokens=text.token_ids.tolist(), segments=text.segment_ids.tolist())

    def to_text(self) -> TextInput:
        return TextInput.build(self.tokens, self.segments)


class ExampleRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    example_id: int = Field(ge=0)
    image: ImageRecord
    text: TextRecord
    aligned: bool = True

    @classmethod
    def from_example(cls, example: PairedExample) -> "ExampleRecord":
        return cls(
            example_id=example.example_id,
            image=ImageRecord.from_image(example.image),
            text=TextRecord.from_text(example.text),
            aligned=example.aligned,
        )

    def to_example(self) -> PairedExample:
        return PairedExample(
            example_id=self.example_id, image=self.image.to_image(), text=self.text.to_text(), aligned=self.aligned
        )


class DatasetHeader(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format: str = FORMAT_NAME
    version: int = FORMAT_VERSION
    kind: str
    prng: str = PRNG_NAME
    config_digest: str
    generator: Dict[str, Any]
    count: int = Field(ge=0)

    @classmethod
    def for_config(cls, cfg: GeneratorConfig, kind: str, count: int) -> "DatasetHeader":
        return cls(kind=kind, config_digest=cfg.digest(), generator=cfg.model_dump(), count=count)

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(**self.generator)


def _dump(record: BaseModel) -> str:
    return json.dumps(record.model_dump(), sort_keys=True, separators=(",", ":"))


def write_records(path: pathlib.Path, header: DatasetHeader, records: Sequence[BaseModel]) -> None:
    """
    Write a header line followed by one line per record. The output is a pure function of its inputs.
    """
    path = pathlib.Path(path)
    if header.count != len(records):
        header = header.model_copy(update={"count": len(records)})
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open(mode="w", encoding="utf-8", newline="\n") as out:
            out.write(_dump(header) + "\n")
            for record in records:
                out.write(_dump(record) + "\n")
    except OSError as e:
        raise OSError(f"Unable to write dataset file {str(path)}: {e.strerror or str(e)}") from e
    logger.info("Wrote %s %s records to %s", len(records), header.kind, str(path))


def read_records(
    path: pathlib.Path, record_type: Type[Record], kind: Optional[str] = None
) -> Tuple[Optional[DatasetHeader], List[Record]]:
    """
    Read a file written by write_records.
    :param path: Dataset file
    :param record_type: Pydantic model every record line must validate against
    :param kind: If given, the header's record kind must equal it
    :return: (header, records); (None, []) for an empty file
    """
    path = pathlib.Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise OSError(f"Unable to read dataset file {str(path)}: {e.strerror or str(e)}") from e
    if not lines:
        return None, []

    header = _parse_header(path, lines[0])
    if kind is not None and header.kind != kind:
        raise ParseError(f"{str(path)}: holds '{header.kind}' records, expected '{kind}'")

    records: List[Record] = []
    for number, line in enumerate(lines[1:], start=2):
        try:
            records.append(record_type.model_validate_json(line))
        except ValidationError as e:
            raise ParseError(
                f"{str(path)} line {number}: malformed {header.kind} record (last good line {number - 1}): "
                f"{e.errors()[0]['msg']}"
            ) from e
    if len(records) != header.count:
        raise ParseError(
            f"{str(path)}: header announces {header.count} records but the file holds {len(records)} "
            f"(last good line {len(lines)})"
        )
    return header, records


def _parse_header(path: pathlib.Path, line: str) -> DatasetHeader:
    try:
        raw = json.loads(line)
    except ValueError as e:
        raise ParseError(f"{str(path)} line 1: header is not valid JSON: {str(e)}") from e
    if not isinstance(raw, dict) or raw.get("format") != FORMAT_NAME:
        raise ParseError(f"{str(path)} line 1: not a {FORMAT_NAME} file")
    if raw.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"Dataset {str(path)}", raw.get("version"), FORMAT_VERSION)
    try:
        return DatasetHeader.model_validate(raw)
    except ValidationError as e:
        raise ParseError(f"{str(path)} line 1: malformed header: {e.errors()[0]['msg']}") from e


def write_dataset(path: pathlib.Path, examples: Sequence[PairedExample], cfg: GeneratorConfig) -> None:
    header = DatasetHeader.for_config(cfg, kind="pretrain", count=len(examples))
    write_records(path, header, [ExampleRecord.from_example(e) for e in examples])


def to_examples(path: pathlib.Path, records: Sequence[Any], kind: str) -> List[Any]:
    """
    Convert validated records, reporting the file line of any record whose contents break an input contract.
    """
    examples = []
    for number, record in enumerate(records, start=2):
        try:
            examples.append(record.to_example())
        except ContractError as e:
            raise ParseError(
                f"{str(path)} line {number}: invalid {kind} record (last good line {number - 1}): {str(e)}"
            ) from e
    return examples


def load_dataset(path: pathlib.Path) -> List[PairedExample]:
    _, records = read_records(path, ExampleRecord, kind="pretrain")
    return to_examples(path, records, "pretrain")


def load_dataset_config(path: pathlib.Path) -> Optional[GeneratorConfig]:
    """The generator config recorded in a dataset header, or None for an empty file."""
    header, _ = read_records(path, ExampleRecord, kind="pretrain")
    return None if header is None else header.generator_config()


def file_digest(path: pathlib.Path) -> str:
    return hashlib.sha256(pathlib.Path(path).read_bytes()).hexdigest()


def write_manifest(directory: pathlib.Path, files: Dict[str, int], cfg: GeneratorConfig) -> str:
    """
    Write manifest.json listing each dataset file with its record count and sha256.
    :return: The manifest's own sha256
    """
    directory = pathlib.Path(directory)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "prng": PRNG_NAME,
        "config_digest": cfg.digest(),
        "files": {name: {"count": count, "sha256": file_digest(directory / name)} for name, count in files.items()},
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return file_digest(path)
