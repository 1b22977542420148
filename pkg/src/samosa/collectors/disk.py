"""Parse QEMU block tracing output into DiskEvents.

With ``-msg timestamp=on`` and the log trace backend QEMU writes lines such as::

    4187@1700000000.123456:pci_nvme_read cid 12 nsid 1 nlb 8 count 4096 lba 0x800
    4187@1700000000.123501:virtio_blk_handle_write vdev 0x55d0 req 0x7f10 sector 4096 nsectors 8

The leading ``pid@`` is optional.  Event names differ between QEMU versions,
so the mapping from event name to (device, op, field names) is a table the
caller can extend.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from ..config import DiskDevice
from .events import DiskEvent, DiskOp


@dataclass(frozen=True)
class TraceEventSpec:
    device: DiskDevice
    op: DiskOp
    address_keys: tuple[str, ...]
    count_keys: tuple[str, ...]


_NVME_ADDR = ("slba", "lba")
_NVME_COUNT = ("nlb",)
_VIRTIO_ADDR = ("sector",)
_VIRTIO_COUNT = ("nsectors", "nb_sectors", "count")

DEFAULT_EVENT_TABLE: dict[str, TraceEventSpec] = {
    "pci_nvme_read": TraceEventSpec(DiskDevice.NVME, DiskOp.READ, _NVME_ADDR, _NVME_COUNT),
    "pci_nvme_write": TraceEventSpec(DiskDevice.NVME, DiskOp.WRITE, _NVME_ADDR, _NVME_COUNT),
    "virtio_blk_handle_read": TraceEventSpec(DiskDevice.VIRTIO_BLK, DiskOp.READ, _VIRTIO_ADDR, _VIRTIO_COUNT),
    "virtio_blk_handle_write": TraceEventSpec(DiskDevice.VIRTIO_BLK, DiskOp.WRITE, _VIRTIO_ADDR, _VIRTIO_COUNT),
}

_LINE_RE = re.compile(r"^(?:\d+@)?(\d+)\.(\d{1,9}):\s*([A-Za-z0-9_]+)\s*(.*)$", re.ASCII)
_KV_RE = re.compile(r"([A-Za-z_][A-Za-z0-9_]*)[ =]('[^']*'|\"[^\"]*\"|\S+)", re.ASCII)


def trace_events_for(device: DiskDevice, table=None) -> list[str]:
    table = DEFAULT_EVENT_TABLE if table is None else table
    return sorted(name for name, spec in table.items() if spec.device is device)


def _int(text: str) -> int | None:
    if not text.isascii():
        return None
    try:
        return int(text, 16) if text.lower().startswith("0x") else int(text)
    except ValueError:
        return None


def _field(kv: dict, keys) -> int | None:
    for k in keys:
        if k in kv:
            return _int(kv[k])
    return None


def parse_disk_line(line: str, device: DiskDevice, table=None):
    """Return a DiskEvent, ``None`` for an ignorable line, or ``False`` if malformed."""
    table = DEFAULT_EVENT_TABLE if table is None else table
    m = _LINE_RE.match(line.strip())
    if not m:
        return False
    spec = table.get(m.group(3))
    if spec is None or spec.device is not device:
        return None
    kv = dict(_KV_RE.findall(m.group(4)))
    address = _field(kv, spec.address_keys)
    count = _field(kv, spec.count_keys)
    if address is None or address < 0 or count is None or count < 1:
        return False
    try:
        ts = int(m.group(1)) * 10**9 + int(m.group(2).ljust(9, "0"))
    except ValueError:
        return False
    return DiskEvent(host_ts_ns=ts, op=spec.op, address=address, nblocks=count, device=device)


def parse_disk_trace(lines, device: DiskDevice, table=None) -> tuple[list[DiskEvent], int]:
    if isinstance(lines, bytes):
        lines = lines.decode("utf-8", "replace")
    if isinstance(lines, str):
        lines = lines.splitlines()
    device = DiskDevice(device)
    events, skipped = [], 0
    for line in lines:
        if isinstance(line, bytes):
            line = line.decode("utf-8", "replace")
        if not line.strip():
            continue
        ev = parse_disk_line(line, device, table)
        if ev is False:
            skipped += 1
        elif ev is not None:
            events.append(ev)
    return events, skipped


def format_disk_line(ev: DiskEvent, pid: int = 1000) -> str:
    """Render an event the way QEMU's log backend does (microsecond stamps)."""
    sec, ns = divmod(ev.host_ts_ns, 10**9)
    stamp = f"{pid}@{sec}.{ns // 1000:06d}"
    if ev.device is DiskDevice.NVME:
        return (f"{stamp}:pci_nvme_{ev.op.value} cid 1 nsid 1 nlb {ev.nblocks} "
                f"count {ev.nblocks * 512} lba 0x{ev.address:x}")
    return (f"{stamp}:virtio_blk_handle_{ev.op.value} vdev 0x5555 req 0x7777 "
            f"sector {ev.address} nsectors {ev.nblocks}")
