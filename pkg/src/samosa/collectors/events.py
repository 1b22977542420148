"""Typed side-channel events and their newline-delimited JSON form."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, fields

from ..config import DiskDevice


class Direction(enum.Enum):
    ENTER = "enter"
    EXIT = "exit"


class NotCounted(enum.Enum):
    """Placeholder for counter readings perf could not take."""

    NOT_COUNTED = "<not counted>"

    def __repr__(self):
        return "NOT_COUNTED"


NOT_COUNTED = NotCounted.NOT_COUNTED


class TransportProto(enum.Enum):
    TCP = "tcp"
    UDP = "udp"
    OTHER = "other"


class PacketDirection(enum.Enum):
    TX = "tx"
    RX = "rx"
    OTHER = "other"


class DiskOp(enum.Enum):
    READ = "read"
    WRITE = "write"


@dataclass(frozen=True)
class SyscallEvent:
    guest_ts_ns: int
    proc_name: str
    tid: int
    direction: Direction
    syscall: str
    info: str = ""


@dataclass(frozen=True)
class HpcSample:
    rel_ts_s: float
    counter: str
    value: int | float | NotCounted
    unit: str = ""


@dataclass(frozen=True)
class PacketRecord:
    host_ts_ns: int
    src_ip: str | None
    dst_ip: str | None
    src_port: int | None
    dst_port: int | None
    protocol: TransportProto
    wire_len_bytes: int
    direction: PacketDirection


@dataclass(frozen=True)
class DiskEvent:
    host_ts_ns: int
    op: DiskOp
    address: int
    nblocks: int
    device: DiskDevice

_ENUM_FIELDS = {
    SyscallEvent: {"direction": Direction},
    HpcSample: {},
    PacketRecord: {"protocol": TransportProto, "direction": PacketDirection},
    DiskEvent: {"op": DiskOp, "device": DiskDevice},
}


def to_record(event) -> dict:
    rec = asdict(event)
    for k, v in rec.items():
        if isinstance(v, enum.Enum):
            rec[k] = v.value
    return rec


def from_record(cls, rec: dict):
    kwargs = {}
    enums = _ENUM_FIELDS[cls]
    for f in fields(cls):
        v = rec[f.name]
        if f.name in enums:
            v = enums[f.name](v)
        elif cls is HpcSample and f.name == "value" and v == NOT_COUNTED.value:
            v = NOT_COUNTED
        kwargs[f.name] = v
    return cls(**kwargs)


def dump_ndjson(events, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            fh.write(json.dumps(to_record(e), sort_keys=True))
            fh.write("\n")


def load_ndjson(cls, path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(from_record(cls, json.loads(line)))
    return out
