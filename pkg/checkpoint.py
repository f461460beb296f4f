"""
HEDL Tensor Container
Binary persistence for model weights, adapters and intervention vectors

Layout (little-endian):
    magic b"HEDL" | version u32 | entry count u32
    per entry: name length u32 | UTF-8 name | dtype code u8 | ndim u32 |
               shape u64 * ndim | payload offset u64 | payload bytes u64
    payloads, concatenated, offsets relative to the end of the table
"""
import json
import logging
import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, Union

import numpy as np

from config import ModelConfig
from exceptions import ArtifactIOException, InputException
from model import ModelWeights, param_names
from tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"HEDL"
VERSION = 1

DTYPE_FLOAT64 = 1
DTYPE_INT64 = 2
DTYPE_UTF8 = 3

_NUMPY_DTYPES = {DTYPE_FLOAT64: np.dtype("<f8"), DTYPE_INT64: np.dtype("<i8"), DTYPE_UTF8: np.dtype("u1")}

META_KEY = "__meta__"

Entry = Union[np.ndarray, str]


def _dtype_code(value: Entry) -> int:
    if isinstance(value, str):
        return DTYPE_UTF8
    if np.issubdtype(value.dtype, np.integer):
        return DTYPE_INT64
    if np.issubdtype(value.dtype, np.floating):
        return DTYPE_FLOAT64
    raise ArtifactIOException(f"unsupported dtype {value.dtype}")


def encode_container(entries: Dict[str, Entry]) -> bytes:
    """Serialize named arrays (and UTF-8 strings) into HEDL bytes"""
    table = bytearray()
    payloads = bytearray()
    for name in sorted(entries):
        value = entries[name]
        code = _dtype_code(value)
        if code == DTYPE_UTF8:
            raw = value.encode("utf-8")
            shape = (len(raw),)
        else:
            arr = np.ascontiguousarray(value, dtype=_NUMPY_DTYPES[code])
            raw = arr.tobytes(order="C")
            shape = arr.shape
        encoded_name = name.encode("utf-8")
        table += struct.pack("<I", len(encoded_name)) + encoded_name
        table += struct.pack("<BI", code, len(shape))
        table += struct.pack(f"<{len(shape)}Q", *shape)
        table += struct.pack("<QQ", len(payloads), len(raw))
        payloads += raw
    header = MAGIC + struct.pack("<II", VERSION, len(entries))
    return bytes(header + table + payloads)


def decode_container(blob: bytes) -> Dict[str, Entry]:
    """Parse HEDL bytes back into named arrays and strings"""
    try:
        if blob[:4] != MAGIC:
            raise ArtifactIOException("not a HEDL container (bad magic)")
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise ArtifactIOException(f"unsupported HEDL version {version}")
        pos = 12
        table = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            code, ndim = struct.unpack_from("<BI", blob, pos)
            pos += 5
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            offset, nbytes = struct.unpack_from("<QQ", blob, pos)
            pos += 16
            table.append((name, code, shape, offset, nbytes))
        entries: Dict[str, Entry] = {}
        for name, code, shape, offset, nbytes in table:
            raw = blob[pos + offset:pos + offset + nbytes]
            if len(raw) != nbytes:
                raise ArtifactIOException(f"truncated payload for {name}")
            if code == DTYPE_UTF8:
                entries[name] = raw.decode("utf-8")
            elif code in _NUMPY_DTYPES:
                entries[name] = np.frombuffer(raw, dtype=_NUMPY_DTYPES[code]).reshape(shape).copy()
            else:
                raise ArtifactIOException(f"unknown dtype code {code} for {name}")
        return entries
    except (struct.error, UnicodeDecodeError, ValueError) as e:
        raise ArtifactIOException(f"corrupt HEDL container: {e}")


def write_container(path: Union[str, Path], entries: Dict[str, Entry]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_container(entries))
    except OSError as e:
        raise ArtifactIOException(f"cannot write {path}: {e}", {"path": str(path)})
    logger.debug(f"wrote {len(entries)} entries to {path}")
    return path


def read_container(path: Union[str, Path]) -> Dict[str, Entry]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise ArtifactIOException(f"cannot read {path}: {e}", {"path": str(path)})
    return decode_container(blob)


def read_meta(entries: Dict[str, Entry]) -> Dict[str, Any]:
    raw = entries.get(META_KEY)
    if not isinstance(raw, str):
        raise ArtifactIOException("container has no metadata record")
    try:
        meta = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ArtifactIOException(f"container metadata is not valid JSON: {e}")
    if not isinstance(meta, dict):
        raise ArtifactIOException("container metadata is not a JSON object")
    return meta


def require_array(entries: Dict[str, Entry], name: str) -> np.ndarray:
    """Fetch a named array entry"""
    value = entries.get(name)
    if not isinstance(value, np.ndarray):
        raise ArtifactIOException(f"container has no array entry {name!r}", {"entry": name})
    return value


@contextmanager
def artifact_errors(path: Union[str, Path]) -> Iterator[None]:
    """Report malformed container contents as ArtifactIOException"""
    try:
        yield
    except (KeyError, TypeError, ValueError, InputException) as e:
        raise ArtifactIOException(f"malformed artifact {path}: {e}", {"path": str(path)})


def save_weights(weights: ModelWeights, path: Union[str, Path]) -> Path:
    """Write model weights with their config as metadata"""
    entries: Dict[str, Entry] = {name: t.data for name, t in weights.tensors.items()}
    meta = {"kind": "model", "config": weights.config.model_dump(mode="json"),
            "train_accuracy": weights.train_accuracy}
    entries[META_KEY] = json.dumps(meta, sort_keys=True)
    return write_container(path, entries)


def load_weights(path: Union[str, Path]) -> ModelWeights:
    entries = read_container(path)
    meta = read_meta(entries)
    if meta.get("kind") != "model":
        raise ArtifactIOException(f"{path} does not hold model weights")
    with artifact_errors(path):
        config = ModelConfig.model_validate(meta["config"])
    tensors = {name: Tensor(require_array(entries, name), name=name) for name in param_names(config)}
    return ModelWeights(config=config, tensors=tensors, train_accuracy=meta.get("train_accuracy"))
