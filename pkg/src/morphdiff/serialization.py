"""On-disk formats: DFTN tensors, ``key = value`` sidecars and DFCK checkpoints.

DFTN v1: magic ``DFTN``, u32 version, u8 rank, rank x u32 dims, row-major f32
payload, all little-endian.

DFCK v1: magic ``DFCK``, u32 version, u32 header length, UTF-8 JSON header,
then for every name in ``header.tensor_names`` a u64 length and a DFTN blob.
"""
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from dotenv import dotenv_values
from pydantic import BaseModel

from .config import ModelSpec
from .errors import CheckpointError

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"DFTN"
TENSOR_VERSION = 1
CHECKPOINT_MAGIC = b"DFCK"
CHECKPOINT_VERSION = 1


def encode_tensor(array: np.ndarray) -> bytes:
    arr = np.asarray(array, dtype="<f4").copy(order="C")
    head = TENSOR_MAGIC + struct.pack("<IB", TENSOR_VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    if buf[offset : offset + 4] != TENSOR_MAGIC:
        raise ValueError("not a DFTN tensor (bad magic)")
    version, rank = struct.unpack_from("<IB", buf, offset + 4)
    if version != TENSOR_VERSION:
        raise ValueError(f"unsupported DFTN version {version}")
    offset += 9
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(shape)
    return data.astype(np.float32), offset + 4 * count


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(array))


def read_tensor(path: str | Path) -> np.ndarray:
    array, _ = decode_tensor(Path(path).read_bytes())
    return array


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".meta")


def write_metadata(path: str | Path, values: dict) -> None:
    lines = [f"{key} = {value}" for key, value in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_metadata(path: str | Path) -> dict[str, str]:
    return {k: v for k, v in dotenv_values(path).items() if v is not None}


def rng_state(rng: np.random.Generator) -> dict[str, str]:
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": str(state["state"]["state"]),
        "inc": str(state["state"]["inc"]),
        "has_uint32": str(state["has_uint32"]),
        "uinteger": str(state["uinteger"]),
    }


def restore_rng(values: dict[str, str]) -> np.random.Generator:
    if values.get("bit_generator") != "PCG64":
        raise CheckpointError(f"unsupported RNG {values.get('bit_generator')}")
    rng = np.random.default_rng()
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(values["state"]), "inc": int(values["inc"])},
        "has_uint32": int(values["has_uint32"]),
        "uinteger": int(values["uinteger"]),
    }
    return rng


class CriticSpec(BaseModel):
    width: int = 8
    age_min: float = 40.0
    age_max: float = 90.0


class CheckpointHeader(BaseModel):
    version: int = CHECKPOINT_VERSION
    architecture: ModelSpec | None = None
    critic: CriticSpec | None = None
    epoch: int = 0
    optimizer_step: int = 0
    rng_state: dict[str, str] | None = None
    metadata: dict[str, str] = {}
    tensor_names: list[str] = []


@dataclass
class Checkpoint:
    header: CheckpointHeader
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def namespace(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix.`` with the prefix stripped."""
        cut = len(prefix) + 1
        return {name[cut:]: arr for name, arr in self.tensors.items() if name.startswith(f"{prefix}.")}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    names = sorted(ckpt.tensors)
    header = ckpt.header.model_copy(update={"tensor_names": names})
    header_bytes = header.model_dump_json().encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)), header_bytes]
    for name in names:
        blob = encode_tensor(ckpt.tensors[name])
        parts.append(struct.pack("<Q", len(blob)))
        parts.append(blob)
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a DFCK checkpoint (bad magic)")
    try:
        version, header_len = struct.unpack_from("<II", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        offset = 12
        header = CheckpointHeader.model_validate_json(buf[offset : offset + header_len])
        offset += header_len
        tensors = {}
        for name in header.tensor_names:
            (length,) = struct.unpack_from("<Q", buf, offset)
            offset += 8
            tensors[name], _ = decode_tensor(buf[offset : offset + length])
            offset += length
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"truncated or corrupt checkpoint: {e}") from e
    return Checkpoint(header=header, tensors=tensors)


def write_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Write atomically, so an interrupted save never replaces a good file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)
    logger.debug(f"Wrote checkpoint {path} ({len(ckpt.tensors)} tensors)")


def read_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
