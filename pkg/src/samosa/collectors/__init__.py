"""Side-channel monitors and parsers for their native output formats."""

from .capture import (
    CaptureJob,
    CollectorState,
    convert_syscall_capture,
    start_hpc,
    start_pcap,
    start_syscall_capture,
    stop_syscall_capture,
)
from .disk import DEFAULT_EVENT_TABLE, TraceEventSpec, parse_disk_trace
from .events import (
    NOT_COUNTED,
    Direction,
    DiskEvent,
    DiskOp,
    HpcSample,
    PacketDirection,
    PacketRecord,
    SyscallEvent,
    TransportProto,
    dump_ndjson,
    load_ndjson,
)
from .hpc import parse_hpc_csv
from .pcap import parse_pcap
from .syscalls import parse_syscall_text
