"""
    roomdistill.checkpoint
    ~~~~~~~~~~~~~~~~~~~~~~

    Binary checkpoints.  All integers are little-endian.  A file is::

        magic        8 bytes  b"RDSTCKPT"
        version      u32
        n_sections   u32
        n_sections times:
            name_len u16, name (utf-8), payload_len u64, payload

    Sections, in this order:

    ``config``
        the canonical config text.
    ``cursor``
        ``u32 stage, u32 next_iteration, u32 flags``; flag bit 0 marks the
        stage as complete.
    ``field``
        the field parameters as an array list (below).
    ``optimizer``
        ``u64 step`` then an array list holding the first and second moment of
        every parameter, interleaved.
    ``rng``
        the PCG64 sampler state as six u64 words: state high, state low,
        increment high, increment low, has_uint32, uinteger.
    ``prompt``
        prompt and negative prompt, utf-8, separated by a newline.
    ``depth_field`` (optional)
        the frozen stage-1 field as an array list.

    An array list is ``u32 count`` followed by, per array, ``u16 name_len``,
    name, ``u8 ndim``, ``ndim`` u32 dimensions and the values as f32.  Field
    arrays come in :meth:`RadianceField.named_parameter_arrays` order.

    :license: BSD, see LICENSE for more details.
"""

import logging
import os
import struct
from dataclasses import dataclass
from dataclasses import field
from typing import Any
from typing import Dict
from typing import List
from typing import Optional
from typing import Tuple

import numpy as np

from roomdistill.exceptions import CheckpointCorrupt

logger = logging.getLogger(__name__)

MAGIC = b"RDSTCKPT"
VERSION = 1
REQUIRED_SECTIONS = ("config", "cursor", "field", "optimizer", "rng", "prompt")
OPTIONAL_SECTIONS = ("depth_field",)
FLAG_STAGE_COMPLETE = 1
_U64 = (1 << 64) - 1

NamedArrays = List[Tuple[str, np.ndarray]]


@dataclass(eq=False)
class Checkpoint:
    config_text: str
    stage: int
    next_iteration: int
    stage_complete: bool
    field_arrays: NamedArrays
    optimizer_step: int
    moments: List[Tuple[np.ndarray, np.ndarray]]
    rng_state: Dict[str, Any]
    prompt: str = ""
    negative_prompt: str = ""
    depth_field_arrays: Optional[NamedArrays] = field(default=None)

    @property
    def cursor(self) -> Tuple[int, int]:
        return self.stage, self.next_iteration


def _pack_arrays(arrays: NamedArrays) -> bytes:
    parts = [struct.pack("<I", len(arrays))]
    for name, array in arrays:
        encoded = name.encode("utf-8")
        array = np.asarray(array)
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, what: str) -> None:
        self.data = data
        self.offset = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointCorrupt(
                f"{self.what} is truncated: needs {n} bytes at offset "
                f"{self.offset}, has {len(self.data) - self.offset}"
            )
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self) -> None:
        if self.offset != len(self.data):
            raise CheckpointCorrupt(
                f"{self.what} has {len(self.data) - self.offset} trailing bytes"
            )


def _unpack_arrays(data: bytes, what: str) -> NamedArrays:
    reader = _Reader(data, what)
    (count,) = reader.unpack("<I")
    arrays = []
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointCorrupt(f"{what} holds an undecodable array name") from None
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(reader.take(4 * size), dtype="<f4")
        arrays.append((name, values.astype(np.float32).reshape(shape)))
    reader.done()
    return arrays


def _pack_rng(state: Dict[str, Any]) -> bytes:
    if state.get("bit_generator") != "PCG64":
        raise ValueError(
            f"only PCG64 states are stored, got {state.get('bit_generator')}"
        )
    inner = state["state"]
    return struct.pack(
        "<6Q",
        (inner["state"] >> 64) & _U64,
        inner["state"] & _U64,
        (inner["inc"] >> 64) & _U64,
        inner["inc"] & _U64,
        int(state["has_uint32"]),
        int(state["uinteger"]),
    )


def _unpack_rng(data: bytes) -> Dict[str, Any]:
    reader = _Reader(data, "rng section")
    s_hi, s_lo, i_hi, i_lo, has_uint32, uinteger = reader.unpack("<6Q")
    reader.done()
    return {
        "bit_generator": "PCG64",
        "state": {"state": (s_hi << 64) | s_lo, "inc": (i_hi << 64) | i_lo},
        "has_uint32": has_uint32,
        "uinteger": uinteger,
    }


def dumps(checkpoint: Checkpoint) -> bytes:
    moments: NamedArrays = []
    for index, (first, second) in enumerate(checkpoint.moments):
        moments.append((f"{index}.exp_avg", first))
        moments.append((f"{index}.exp_avg_sq", second))
    flags = FLAG_STAGE_COMPLETE if checkpoint.stage_complete else 0
    sections = [
        ("config", checkpoint.config_text.encode("utf-8")),
        (
            "cursor",
            struct.pack("<III", checkpoint.stage, checkpoint.next_iteration, flags),
        ),
        ("field", _pack_arrays(checkpoint.field_arrays)),
        (
            "optimizer",
            struct.pack("<Q", checkpoint.optimizer_step) + _pack_arrays(moments),
        ),
        ("rng", _pack_rng(checkpoint.rng_state)),
        (
            "prompt",
            f"{checkpoint.prompt}\n{checkpoint.negative_prompt}".encode("utf-8"),
        ),
    ]
    if checkpoint.depth_field_arrays is not None:
        sections.append(("depth_field", _pack_arrays(checkpoint.depth_field_arrays)))

    parts = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for name, payload in sections:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
    return b"".join(parts)


def loads(data: bytes) -> Checkpoint:
    """Parse a checkpoint.

    :raises CheckpointCorrupt: on a bad magic, an unknown version, missing or
                               unknown sections, or any length mismatch.
    """
    reader = _Reader(data, "checkpoint")
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointCorrupt("not a checkpoint: bad magic")
    version, n_sections = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointCorrupt(
            f"checkpoint format version {version} is not supported (expected {VERSION})"
        )
    sections: Dict[str, bytes] = {}
    for _ in range(n_sections):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8", errors="replace")
        (payload_len,) = reader.unpack("<Q")
        if name not in REQUIRED_SECTIONS + OPTIONAL_SECTIONS or name in sections:
            raise CheckpointCorrupt(f"unexpected section {name!r}")
        sections[name] = reader.take(payload_len)
    reader.done()
    missing = [name for name in REQUIRED_SECTIONS if name not in sections]
    if missing:
        raise CheckpointCorrupt(f"missing sections: {', '.join(missing)}")

    cursor = _Reader(sections["cursor"], "cursor section")
    stage, next_iteration, flags = cursor.unpack("<III")
    cursor.done()

    optimizer = _Reader(sections["optimizer"], "optimizer section")
    (step,) = optimizer.unpack("<Q")
    moment_arrays = _unpack_arrays(sections["optimizer"][8:], "optimizer section")
    if len(moment_arrays) % 2:
        raise CheckpointCorrupt("optimizer section holds an odd number of moments")
    moments = [
        (moment_arrays[i][1], moment_arrays[i + 1][1])
        for i in range(0, len(moment_arrays), 2)
    ]

    try:
        config_text = sections["config"].decode("utf-8")
        prompt, _, negative_prompt = sections["prompt"].decode("utf-8").partition("\n")
    except UnicodeDecodeError:
        raise CheckpointCorrupt("text section is not valid utf-8") from None

    depth_field = None
    if "depth_field" in sections:
        depth_field = _unpack_arrays(sections["depth_field"], "depth_field section")

    return Checkpoint(
        config_text=config_text,
        stage=stage,
        next_iteration=next_iteration,
        stage_complete=bool(flags & FLAG_STAGE_COMPLETE),
        field_arrays=_unpack_arrays(sections["field"], "field section"),
        optimizer_step=step,
        moments=moments,
        rng_state=_unpack_rng(sections["rng"]),
        prompt=prompt,
        negative_prompt=negative_prompt,
        depth_field_arrays=depth_field,
    )


def save(checkpoint: Checkpoint, path) -> None:
    """Write ``checkpoint`` to ``path`` atomically."""
    path = os.fspath(path)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(dumps(checkpoint))
    os.replace(tmp, path)
    logger.info(
        "checkpoint %s: stage %d next iteration %d",
        path,
        checkpoint.stage,
        checkpoint.next_iteration,
    )


def load(path) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError:
        raise CheckpointCorrupt(f"no checkpoint at {path}") from None
    return loads(data)
