"""Framed protocol messages.

Frame: ``length(4 BE) | type(1) | payload`` where ``length`` counts the type
byte plus the payload. Payload fields are written in declaration order:
fixed-width integers big-endian, byte strings and text as ``len(4) | bytes``,
lists as ``count(4) | items``.
"""

from __future__ import annotations

import enum
import re
import struct
from dataclasses import dataclass, field, fields
from typing import ClassVar

from .chain import BlockHeader
from .crypto import CipherChunk

_ENDPOINT_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9.\-]*:(\d{1,5})$")


def valid_endpoint(endpoint: str) -> bool:
    m = _ENDPOINT_RE.match(endpoint or "")
    return bool(m) and 0 < int(m.group(1)) < 65536


class MsgType(enum.IntEnum):
    DEMAND = 1
    REPLY = 2
    PROPOSE = 3
    ACCEPT = 4
    TRADE_INIT = 5
    ATTEST_REQ = 10
    ATTEST_RESP = 11
    OPEN_TRADE = 12
    TRADE_OPENED = 13
    PARAMS_REQ = 14
    PARAMS_RESP = 15
    DEPOSIT_DATA = 16
    DEPOSIT_ACK = 17
    SAMPLE = 18
    SUBMIT_EVIDENCE = 19
    DATA_RELEASED = 20
    EVIDENCE_RESULT = 21
    TX = 30
    BLOCK = 31
    HEADERS = 32


class FrameError(ValueError):
    pass


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.off = 0

    def take(self, n: int) -> bytes:
        out = self.raw[self.off : self.off + n]
        if len(out) != n:
            raise FrameError("truncated payload")
        self.off += n
        return out

    def uint(self, fmt: str) -> int:
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))[0]

    def blob(self) -> bytes:
        return self.take(self.uint(">I"))


def _w_blob(b: bytes) -> bytes:
    return struct.pack(">I", len(b)) + b


_INT_FORMATS = {"u8": ">B", "u32": ">I", "u64": ">Q"}
_FIXED = {"b16": 16, "b20": 20, "b32": 32}


def _write(kind: str, value) -> bytes:
    if kind in _INT_FORMATS:
        return struct.pack(_INT_FORMATS[kind], value)
    if kind in _FIXED:
        if len(value) != _FIXED[kind]:
            raise FrameError(f"{kind} field has {len(value)} bytes")
        return bytes(value)
    if kind == "bytes":
        return _w_blob(bytes(value))
    if kind == "str":
        return _w_blob(value.encode())
    if kind == "strs":
        return struct.pack(">I", len(value)) + b"".join(_w_blob(s.encode()) for s in value)
    if kind == "chunks":
        return struct.pack(">I", len(value)) + b"".join(_w_blob(c.to_bytes()) for c in value)
    if kind == "ids":
        return struct.pack(">I", len(value)) + b"".join(_w_blob(n.encode()) + bytes(i) for n, i in value)
    if kind == "headers":
        return struct.pack(">I", len(value)) + b"".join(h.encode() for h in value)
    raise FrameError(f"unknown field kind {kind}")


def _read(kind: str, r: _Reader):
    if kind in _INT_FORMATS:
        return r.uint(_INT_FORMATS[kind])
    if kind in _FIXED:
        return r.take(_FIXED[kind])
    if kind == "bytes":
        return r.blob()
    if kind == "str":
        return r.blob().decode()
    if kind == "strs":
        return tuple(r.blob().decode() for _ in range(r.uint(">I")))
    if kind == "chunks":
        return tuple(CipherChunk.from_bytes(r.blob()) for _ in range(r.uint(">I")))
    if kind == "ids":
        return tuple((r.blob().decode(), r.take(16)) for _ in range(r.uint(">I")))
    if kind == "headers":
        return tuple(BlockHeader.decode(r.take(120)) for _ in range(r.uint(">I")))
    raise FrameError(f"unknown field kind {kind}")


_REGISTRY: dict[int, type] = {}


class Message:
    TYPE: ClassVar[MsgType]
    SCHEMA: ClassVar[tuple]

    def __init_subclass__(cls, **kw):
        super().__init_subclass__(**kw)
        _REGISTRY[int(cls.TYPE)] = cls

    def payload(self) -> bytes:
        return b"".join(_write(kind, getattr(self, name)) for name, kind in self.SCHEMA)

    def frame(self) -> bytes:
        body = bytes([int(self.TYPE)]) + self.payload()
        return struct.pack(">I", len(body)) + body

    @classmethod
    def from_payload(cls, payload: bytes):
        r = _Reader(payload)
        values = {name: _read(kind, r) for name, kind in cls.SCHEMA}
        if r.off != len(payload):
            raise FrameError(f"{cls.__name__}: trailing bytes")
        return cls(**values)


def decode_frame(frame: bytes) -> Message:
    if len(frame) < 5:
        raise FrameError("frame too short")
    (length,) = struct.unpack_from(">I", frame, 0)
    if length != len(frame) - 4:
        raise FrameError("length prefix mismatch")
    cls = _REGISTRY.get(frame[4])
    if cls is None:
        raise FrameError(f"unknown message type {frame[4]}")
    return cls.from_payload(frame[5:])


def _schema(cls):
    """Derive SCHEMA from dataclass field metadata."""
    cls.SCHEMA = tuple((f.name, f.metadata["kind"]) for f in fields(cls))
    return cls


def _f(kind: str):
    return field(metadata={"kind": kind})


@_schema
@dataclass(frozen=True)
class Demand(Message):
    TYPE = MsgType.DEMAND
    tags: tuple = _f("strs")
    min_size: int = _f("u64")
    max_size: int = _f("u64")
    price: int = _f("u64")
    buyer_endpoint: str = _f("str")


@_schema
@dataclass(frozen=True)
class Reply(Message):
    TYPE = MsgType.REPLY
    seller: bytes = _f("b20")
    seller_endpoint: str = _f("str")


@_schema
@dataclass(frozen=True)
class Propose(Message):
    TYPE = MsgType.PROPOSE
    price: int = _f("u64")
    buyer: bytes = _f("b20")
    buyer_endpoint: str = _f("str")
    exchanges: tuple = _f("strs")


@_schema
@dataclass(frozen=True)
class Accept(Message):
    TYPE = MsgType.ACCEPT
    accepted: int = _f("u8")


@_schema
@dataclass(frozen=True)
class TradeInit(Message):
    TYPE = MsgType.TRADE_INIT
    trade_ids: tuple = _f("ids")
    data_key: bytes = _f("b32")


@_schema
@dataclass(frozen=True)
class AttestRequest(Message):
    TYPE = MsgType.ATTEST_REQ
    nonce: bytes = _f("b32")
    step: int = _f("u8")


@_schema
@dataclass(frozen=True)
class AttestResponse(Message):
    TYPE = MsgType.ATTEST_RESP
    report: bytes = _f("bytes")


@_schema
@dataclass(frozen=True)
class OpenTrade(Message):
    TYPE = MsgType.OPEN_TRADE
    evidence: bytes = _f("bytes")
    price: int = _f("u64")
    buyer: bytes = _f("b20")
    seller: bytes = _f("b20")
    buyer_endpoint: str = _f("str")


@_schema
@dataclass(frozen=True)
class TradeOpened(Message):
    TYPE = MsgType.TRADE_OPENED
    status: int = _f("u8")
    trade_id: bytes = _f("b16")
    detail: str = _f("str")


@_schema
@dataclass(frozen=True)
class ParamsRequest(Message):
    TYPE = MsgType.PARAMS_REQ
    trade_id: bytes = _f("b16")


@_schema
@dataclass(frozen=True)
class ParamsResponse(Message):
    TYPE = MsgType.PARAMS_RESP
    status: int = _f("u8")
    trade_id: bytes = _f("b16")
    price: int = _f("u64")
    buyer: bytes = _f("b20")
    seller: bytes = _f("b20")


@_schema
@dataclass(frozen=True)
class DepositData(Message):
    TYPE = MsgType.DEPOSIT_DATA
    trade_id: bytes = _f("b16")
    chunks: tuple = _f("chunks")


@_schema
@dataclass(frozen=True)
class DepositAck(Message):
    TYPE = MsgType.DEPOSIT_ACK
    status: int = _f("u8")
    trade_id: bytes = _f("b16")
    detail: str = _f("str")


@_schema
@dataclass(frozen=True)
class Sample(Message):
    TYPE = MsgType.SAMPLE
    trade_id: bytes = _f("b16")
    chunks: tuple = _f("chunks")


@_schema
@dataclass(frozen=True)
class SubmitEvidence(Message):
    TYPE = MsgType.SUBMIT_EVIDENCE
    trade_id: bytes = _f("b16")
    evidence: bytes = _f("bytes")


@_schema
@dataclass(frozen=True)
class DataReleasedMsg(Message):
    TYPE = MsgType.DATA_RELEASED
    trade_id: bytes = _f("b16")
    chunks: tuple = _f("chunks")


@_schema
@dataclass(frozen=True)
class EvidenceResult(Message):
    TYPE = MsgType.EVIDENCE_RESULT
    status: int = _f("u8")
    trade_id: bytes = _f("b16")
    detail: str = _f("str")


@_schema
@dataclass(frozen=True)
class TxMsg(Message):
    TYPE = MsgType.TX
    tx: bytes = _f("bytes")


@_schema
@dataclass(frozen=True)
class BlockMsg(Message):
    TYPE = MsgType.BLOCK
    block: bytes = _f("bytes")


@_schema
@dataclass(frozen=True)
class Headers(Message):
    TYPE = MsgType.HEADERS
    headers: tuple = _f("headers")


STATUS_OK = 0
STATUS_ERROR = 1
