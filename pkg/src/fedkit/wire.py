"""Binary framing for protocol messages, carried as opaque pub/sub payloads.

Layout (all multi-byte integers little-endian):

    magic "FLP1"      4 bytes
    version           u8, currently 1
    kind              u8: 1 = global model, 2 = client update, 3 = join request
    round             u32
    client_id         u16 (0 for the server)
    sample_count      u32 (0 when absent)
    tensor_count      u8
    per tensor:       ndim u8, each dim u32, then raw float32 data
    crc32             u32, IEEE, over all preceding bytes

Tensor order is fixed: w1, b1, w2, b2. Decoding is the exact inverse of
encoding and preserves float bit patterns; the full contract lives in
docs/protocol.md.
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from fedkit.nn import HIDDEN_SIZE, INPUT_SIZE, N_CLASSES, ModelParams

MAGIC = b"FLP1"
VERSION = 1

_HEADER = struct.Struct("<4sBBIHIB")
_CRC = struct.Struct("<I")
MIN_MESSAGE_SIZE = _HEADER.size + _CRC.size  # join request: header + crc, no tensors

MODEL_SHAPES = (
    (INPUT_SIZE, HIDDEN_SIZE),
    (HIDDEN_SIZE,),
    (HIDDEN_SIZE, N_CLASSES),
    (N_CLASSES,),
)


class MessageKind(enum.IntEnum):
    GLOBAL_MODEL = 1
    CLIENT_UPDATE = 2
    JOIN_REQUEST = 3


class WireError(ValueError):
    """Base class for every framing violation."""


class BadMagicError(WireError):
    pass


class BadVersionError(WireError):
    pass


class CrcMismatchError(WireError):
    pass


class TruncatedError(WireError):
    pass


class UnknownKindError(WireError):
    pass


class ShapeMismatchError(WireError):
    pass


@dataclass
class WireMessage:
    kind: MessageKind
    round_index: int = 0
    client_id: int = 0
    sample_count: int = 0
    params: ModelParams | None = field(default=None)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WireMessage):
            return NotImplemented
        if (self.kind, self.round_index, self.client_id, self.sample_count) != (
            other.kind, other.round_index, other.client_id, other.sample_count
        ):
            return False
        if (self.params is None) != (other.params is None):
            return False
        if self.params is None:
            return True
        return self.params.tobytes() == other.params.tobytes()


def global_model(round_index: int, params: ModelParams) -> WireMessage:
    return WireMessage(MessageKind.GLOBAL_MODEL, round_index, client_id=0, params=params)


def client_update(round_index: int, client_id: int, sample_count: int, params: ModelParams) -> WireMessage:
    return WireMessage(MessageKind.CLIENT_UPDATE, round_index, client_id, sample_count, params)


def join_request(client_id: int) -> WireMessage:
    return WireMessage(MessageKind.JOIN_REQUEST, round_index=0, client_id=client_id)


def encode(msg: WireMessage) -> bytes:
    """Serialize a message; equal messages always produce identical bytes."""
    carries_params = msg.kind in (MessageKind.GLOBAL_MODEL, MessageKind.CLIENT_UPDATE)
    if carries_params and msg.params is None:
        raise ValueError(f"{msg.kind.name} requires params")
    if not carries_params and msg.params is not None:
        raise ValueError(f"{msg.kind.name} must not carry params")
    if msg.kind is MessageKind.CLIENT_UPDATE and msg.sample_count < 1:
        raise ValueError("client update needs sample_count >= 1")

    tensors = msg.params.tensors() if msg.params is not None else ()
    parts = [_HEADER.pack(MAGIC, VERSION, int(msg.kind), msg.round_index,
                          msg.client_id, msg.sample_count, len(tensors))]
    for t in tensors:
        parts.append(struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t).astype("<f4", copy=False).tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def decode(data: bytes) -> WireMessage:
    """Parse a frame, rejecting anything malformed with a WireError subclass.

    The CRC is checked before any field is interpreted, so any single corrupted
    byte surfaces as a CRC mismatch rather than a misleading field error.
    """
    if len(data) < MIN_MESSAGE_SIZE:
        raise TruncatedError(f"message of {len(data)} bytes is shorter than the {MIN_MESSAGE_SIZE}-byte minimum")
    body, crc_bytes = data[:-_CRC.size], data[-_CRC.size:]
    (stated_crc,) = _CRC.unpack(crc_bytes)
    actual_crc = zlib.crc32(body) & 0xFFFFFFFF
    if stated_crc != actual_crc:
        raise CrcMismatchError(f"crc 0x{stated_crc:08x} does not match computed 0x{actual_crc:08x}")

    magic, version, kind_raw, round_index, client_id, sample_count, tensor_count = _HEADER.unpack_from(body, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersionError(f"unsupported version {version}")
    try:
        kind = MessageKind(kind_raw)
    except ValueError:
        raise UnknownKindError(f"unknown message kind {kind_raw}") from None

    offset = _HEADER.size
    tensors = []
    for _ in range(tensor_count):
        if offset + 1 > len(body):
            raise TruncatedError(f"tensor descriptor truncated at offset {offset}")
        ndim = body[offset]
        offset += 1
        if offset + 4 * ndim > len(body):
            raise TruncatedError(f"tensor dims truncated at offset {offset}")
        shape = struct.unpack_from(f"<{ndim}I", body, offset)
        offset += 4 * ndim
        count = 1
        for extent in shape:
            count *= extent
        nbytes = count * 4
        if offset + nbytes > len(body):
            raise TruncatedError(f"tensor data truncated at offset {offset}")
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
        tensors.append(arr)
    if offset != len(body):
        raise TruncatedError(f"{len(body) - offset} unexpected trailing bytes at offset {offset}")

    if kind is MessageKind.JOIN_REQUEST:
        if tensors:
            raise ShapeMismatchError("join request must not carry tensors")
        return WireMessage(kind, round_index, client_id, sample_count)

    shapes = tuple(t.shape for t in tensors)
    if shapes != MODEL_SHAPES:
        raise ShapeMismatchError(f"tensor shapes {shapes} do not match the model layout {MODEL_SHAPES}")
    if kind is MessageKind.CLIENT_UPDATE and sample_count < 1:
        raise ShapeMismatchError("client update with sample_count 0")
    return WireMessage(kind, round_index, client_id, sample_count, ModelParams(*tensors))
