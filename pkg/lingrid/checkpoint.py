"""``LINGRID1`` checkpoint files.

Layout, all integers u32 little-endian::

    b"LINGRID1"
    repeated per parameter, in model order:
        name length, UTF-8 name, rank, dims..., values as f32 LE row-major
"""
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict

import numpy as np

from lingrid.diffcore import ParamStore
from lingrid.errors import ConfigError

PathT = os.PathLike

MAGIC = b"LINGRID1"

logger = logging.getLogger(__name__)


def encode_state(state: Dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC]
    for name, value in state.items():
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_state(raw: bytes) -> Dict[str, np.ndarray]:
    if raw[: len(MAGIC)] != MAGIC:
        raise ConfigError(f"not a LINGRID1 checkpoint (magic {raw[:len(MAGIC)]!r})")
    state = {}
    offset = len(MAGIC)

    def read(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(raw):
            raise ConfigError("truncated checkpoint")
        values = struct.unpack_from(fmt, raw, offset)
        offset += size
        return values

    while offset < len(raw):
        (name_len,) = read("<I")
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = read("<I")
        dims = read(f"<{rank}I")
        count = int(np.prod(dims)) if rank else 1
        end = offset + 4 * count
        if end > len(raw):
            raise ConfigError(f"truncated checkpoint at parameter {name}")
        state[name] = np.frombuffer(raw[offset:end], dtype="<f4").reshape(dims)
        offset = end
    return state


@dataclass
class Checkpoint:
    model_path: PathT

    def save(self, store: ParamStore) -> None:
        path = Path(self.model_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(encode_state(store.state()))
        tmp.replace(path)
        logger.info(f"saved checkpoint {path} ({len(store)} parameters)")

    def load_into(self, store: ParamStore) -> None:
        path = Path(self.model_path)
        if not path.is_file():
            raise ConfigError(f"checkpoint not found: {path}")
        state = decode_state(path.read_bytes())
        if list(state) != store.names():
            raise ConfigError(
                "checkpoint parameter names do not match the model: "
                f"checkpoint has {sorted(set(state) - set(store.names()))}, "
                f"model expects {sorted(set(store.names()) - set(state))}"
                if set(state) != set(store.names())
                else "checkpoint parameter order does not match the model"
            )
        store.load_state(state)
        logger.info(f"loaded checkpoint {path}")
