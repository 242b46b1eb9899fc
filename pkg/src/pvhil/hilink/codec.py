"""Length-prefixed binary frames for the plant/controller lockstep link.

Frame layout::

    u32 LE  length   (type byte + payload)
    u8      type
    bytes   payload  (little-endian 64-bit fields in declaration order)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, fields
from typing import ClassVar, Union

PROTOCOL_VERSION = 1
MAX_FRAME_LENGTH = 1 << 16
HEADER = struct.Struct("<IB")


class ProtocolError(Exception):
    """Violation of the lockstep protocol."""


class FrameError(ProtocolError):
    """Bytes that do not form a valid frame."""


@dataclass(frozen=True)
class Hello:
    TYPE: ClassVar[int] = 0x01
    FORMAT: ClassVar[struct.Struct] = struct.Struct("<QdQ8s")
    version: int
    dt: float
    step_count: int
    digest: bytes


@dataclass(frozen=True)
class HelloAck:
    TYPE: ClassVar[int] = 0x02
    FORMAT: ClassVar[struct.Struct] = struct.Struct("<QdQ8s")
    version: int
    dt: float
    step_count: int
    digest: bytes


@dataclass(frozen=True)
class MeasMsg:
    TYPE: ClassVar[int] = 0x03
    FORMAT: ClassVar[struct.Struct] = struct.Struct("<Qddddd")
    seq: int
    t: float
    v_mag: float
    v_ang: float
    f_local: float
    rocof: float


@dataclass(frozen=True)
class CmdMsg:
    TYPE: ClassVar[int] = 0x04
    FORMAT: ClassVar[struct.Struct] = struct.Struct("<QddQQ")
    seq: int
    i_p_ref: float
    i_q_ref: float
    breaker_open: bool
    mode: int = 0  # InverterMode code, reported for the plant-side trace


@dataclass(frozen=True)
class Bye:
    TYPE: ClassVar[int] = 0x05


@dataclass(frozen=True)
class ErrorMsg:
    TYPE: ClassVar[int] = 0x06
    code: int
    message: str = ""


Message = Union[Hello, HelloAck, MeasMsg, CmdMsg, Bye, ErrorMsg]

_FIXED = {cls.TYPE: cls for cls in (Hello, HelloAck, MeasMsg, CmdMsg)}
_U64 = struct.Struct("<Q")


def _payload(msg: Message) -> bytes:
    if isinstance(msg, Bye):
        return b""
    if isinstance(msg, ErrorMsg):
        return _U64.pack(msg.code) + msg.message.encode("utf-8")
    if isinstance(msg, CmdMsg):
        return msg.FORMAT.pack(msg.seq, msg.i_p_ref, msg.i_q_ref, int(bool(msg.breaker_open)), msg.mode)
    return msg.FORMAT.pack(*(getattr(msg, f.name) for f in fields(msg)))


def encode_frame(msg: Message) -> bytes:
    payload = _payload(msg)
    return HEADER.pack(len(payload) + 1, msg.TYPE) + payload


def frame_length(header: bytes) -> int:
    """Validate a 4-byte length prefix and return the number of bytes that follow it."""
    if len(header) != 4:
        raise FrameError("truncated length prefix")
    (length,) = struct.unpack("<I", header)
    if length < 1:
        raise FrameError("zero-length frame")
    if length > MAX_FRAME_LENGTH:
        raise FrameError(f"frame length {length} exceeds {MAX_FRAME_LENGTH}")
    return length


def decode_frame(buf: bytes) -> Message:
    """Decode exactly one complete frame; any defect raises ``FrameError``."""
    buf = bytes(buf)
    if len(buf) < HEADER.size:
        raise FrameError(f"truncated frame ({len(buf)} bytes)")
    length = frame_length(buf[:4])
    if len(buf) != 4 + length:
        raise FrameError(f"length field says {length} but {len(buf) - 4} bytes follow")
    return decode_body(buf[4], buf[5:])


def decode_body(mtype: int, payload: bytes) -> Message:
    if mtype == Bye.TYPE:
        if payload:
            raise FrameError("BYE carries no payload")
        return Bye()
    if mtype == ErrorMsg.TYPE:
        if len(payload) < 8:
            raise FrameError("ERROR payload too short")
        (code,) = _U64.unpack_from(payload)
        try:
            text = payload[8:].decode("utf-8")
        except UnicodeDecodeError:
            raise FrameError("ERROR message is not UTF-8") from None
        return ErrorMsg(code, text)
    cls = _FIXED.get(mtype)
    if cls is None:
        raise FrameError(f"unknown message type 0x{mtype:02x}")
    if len(payload) != cls.FORMAT.size:
        raise FrameError(f"{cls.__name__} payload must be {cls.FORMAT.size} bytes, got {len(payload)}")
    values = cls.FORMAT.unpack(payload)
    for v in values:
        if isinstance(v, float) and not math.isfinite(v):
            raise FrameError(f"non-finite field in {cls.__name__}")
    if cls is CmdMsg:
        seq, i_p, i_q, breaker, mode = values
        if breaker not in (0, 1):
            raise FrameError("breaker_open flag must be 0 or 1")
        if mode > 3:
            raise FrameError(f"unknown inverter mode {mode}")
        return CmdMsg(seq, i_p, i_q, bool(breaker), mode)
    return cls(*values)
