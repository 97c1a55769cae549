#!/usr/bin/env python3

"""
Checkpoint files.

Layout: MAGIC, format version (uint32 LE), header length (uint64 LE), header JSON, tensor payload, sha256 of
everything before it. The header holds the model config, run metadata, optimizer scalars and a table of
(name, dtype, shape, offset, nbytes) for every stored tensor; tensors are written little-endian in the model's
dtype, parameters first and then Adam's moments. All randomness in a run is derived from (seed, stream, keys),
so seed, epoch and step in the metadata are the complete random state.
"""

from collections import OrderedDict
from dataclasses import dataclass, field
import hashlib
import json
from logging import getLogger
import pathlib
import struct
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from twostream.errors import IntegrityError, ParseError, VersionMismatchError
from twostream.model.model_base import TwoStreamModel
from twostream.model.model_config import ModelConfig
from twostream.tensor.tensor_base import Tensor
from twostream.training.training_optim import AdamState


logger = getLogger("twostream")

MAGIC = b"TWOSTRM\n"
CHECKPOINT_VERSION = 1
DIGEST_SIZE = 32
_PREFIX = struct.Struct("<IQ")


def _copy_adam(adam: Optional[AdamState]) -> Optional[AdamState]:
    if adam is None:
        return None
    return AdamState(
        m={n: a.copy() for n, a in adam.m.items()},
        v={n: a.copy() for n, a in adam.v.items()},
        step=adam.step,
        beta1=adam.beta1,
        beta2=adam.beta2,
        eps=adam.eps,
    )


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: "OrderedDict[str, np.ndarray]"
    adam: Optional[AdamState] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_model(
        cls, model: TwoStreamModel, adam: Optional[AdamState] = None, meta: Optional[Dict[str, Any]] = None
    ) -> "Checkpoint":
        return cls(
            model_config=model.config,
            params=OrderedDict((name, t.data.copy()) for name, t in model.params.items()),
            adam=_copy_adam(adam),
            meta=dict(meta or {}),
        )

    def to_model(self) -> TwoStreamModel:
        params = OrderedDict(
            (name, Tensor(array.copy(), requires_grad=True, name=name, dtype=array.dtype))
            for name, array in self.params.items()
        )
        return TwoStreamModel(self.model_config, params)

    def restore_adam(self) -> Optional[AdamState]:
        return _copy_adam(self.adam)

    @property
    def kind(self) -> str:
        return str(self.meta.get("kind", "pretrain"))

    @property
    def task(self) -> Optional[str]:
        return self.meta.get("task")


def _tensor_table(checkpoint: Checkpoint) -> List[Tuple[str, np.ndarray]]:
    table = [(f"param/{n}", a) for n, a in checkpoint.params.items()]
    if checkpoint.adam is not None:
        table += [(f"adam_m/{n}", a) for n, a in checkpoint.adam.m.items()]
        table += [(f"adam_v/{n}", a) for n, a in checkpoint.adam.v.items()]
    return table


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, array in _tensor_table(checkpoint):
        data = np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": array.dtype.newbyteorder("<").str,
                "shape": list(array.shape),
                "offset": offset,
                "nbytes": len(data),
            }
        )
        chunks.append(data)
        offset += len(data)
    adam = checkpoint.adam
    scalars = None if adam is None else {"step": adam.step, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps}
    header = {
        "model_config": checkpoint.model_config.model_dump(),
        "meta": checkpoint.meta,
        "adam": scalars,
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + _PREFIX.pack(CHECKPOINT_VERSION, len(header_bytes)) + header_bytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(blob: bytes, source: str = "checkpoint") -> Checkpoint:
    minimum = len(MAGIC) + _PREFIX.size + DIGEST_SIZE
    if len(blob) < minimum or not blob.startswith(MAGIC):
        raise ParseError(f"{source} is not a twostream checkpoint")
    body, digest = blob[:-DIGEST_SIZE], blob[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{source} failed its checksum, the file is corrupted")
    version, header_size = _PREFIX.unpack_from(body, len(MAGIC))
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"Checkpoint {source}", version, CHECKPOINT_VERSION)
    start = len(MAGIC) + _PREFIX.size
    try:
        header = json.loads(body[start:start + header_size].decode("utf-8"))
    except ValueError as e:
        raise ParseError(f"{source} has an unreadable header: {str(e)}") from e
    payload = body[start + header_size:]

    arrays: Dict[str, "OrderedDict[str, np.ndarray]"] = {"param": OrderedDict(), "adam_m": {}, "adam_v": {}}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        array = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        group, name = entry["name"].split("/", 1)
        arrays[group][name] = array.astype(array.dtype.newbyteorder("="))

    adam = None
    if header["adam"] is not None:
        adam = AdamState(m=dict(arrays["adam_m"]), v=dict(arrays["adam_v"]), **header["adam"])
    return Checkpoint(
        model_config=ModelConfig(**header["model_config"]), params=arrays["param"], adam=adam, meta=header["meta"]
    )


def save_checkpoint(path: pathlib.Path, checkpoint: Checkpoint) -> None:
    path = pathlib.Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_checkpoint(checkpoint))
    except OSError as e:
        raise OSError(f"Unable to write checkpoint {str(path)}: {e.strerror or str(e)}") from e
    logger.debug("Saved checkpoint %s", str(path))


def load_checkpoint(path: pathlib.Path) -> Checkpoint:
    path = pathlib.Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise OSError(f"Unable to read checkpoint {str(path)}: {e.strerror or str(e)}") from e
    return decode_checkpoint(blob, source=str(path))
