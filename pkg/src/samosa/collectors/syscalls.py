"""Parse sysdig's default text export into SyscallEvents.

Lines look like::

    12 10:01:02.123456789 1 bash (2817) > openat fd=3 name=/etc/passwd

The second column is either a time of day (the default) or seconds since the
epoch (``sysdig -t a``).  Time-of-day stamps are anchored to the UTC day of
``ref_guest_ns`` when given.
"""

from __future__ import annotations

import re

from .events import Direction, SyscallEvent

NS_PER_DAY = 86_400 * 10**9

_LINE_RE = re.compile(
    r"^(\d+) (\S+) (\d+) (.+?) \((\d+)\) ([<>]) ([A-Za-z0-9_]+)(?: (.*))?$",
    re.ASCII,
)
_EPOCH_RE = re.compile(r"^(\d+)\.(\d{1,9})$", re.ASCII)
_TOD_RE = re.compile(r"^(\d{2}):(\d{2}):(\d{2})\.(\d{1,9})$", re.ASCII)


def _frac_ns(frac: str) -> int:
    return int(frac.ljust(9, "0"))


def parse_timestamp(text: str, ref_guest_ns: int | None = None) -> int | None:
    m = _EPOCH_RE.match(text)
    if m:
        return int(m.group(1)) * 10**9 + _frac_ns(m.group(2))
    m = _TOD_RE.match(text)
    if not m:
        return None
    h, mi, s = int(m.group(1)), int(m.group(2)), int(m.group(3))
    if h > 23 or mi > 59 or s > 60:
        return None
    tod = ((h * 60 + mi) * 60 + s) * 10**9 + _frac_ns(m.group(4))
    if ref_guest_ns is None:
        return tod
    ts = ref_guest_ns - ref_guest_ns % NS_PER_DAY + tod
    # pick the day that puts the stamp nearest the reference
    if ts - ref_guest_ns > NS_PER_DAY // 2:
        ts -= NS_PER_DAY
    elif ref_guest_ns - ts > NS_PER_DAY // 2:
        ts += NS_PER_DAY
    return ts


def parse_syscall_line(line: str, ref_guest_ns: int | None = None) -> SyscallEvent | None:
    m = _LINE_RE.match(line.rstrip("\r\n"))
    if not m:
        return None
    try:
        ts = parse_timestamp(m.group(2), ref_guest_ns)
        tid = int(m.group(5))
    except ValueError:  # digit runs beyond int()'s string limit
        return None
    if ts is None:
        return None
    return SyscallEvent(
        guest_ts_ns=ts,
        proc_name=m.group(4),
        tid=tid,
        direction=Direction.ENTER if m.group(6) == ">" else Direction.EXIT,
        syscall=m.group(7),
        info=m.group(8) or "",
    )


def parse_syscall_text(lines, ref_guest_ns: int | None = None) -> tuple[list[SyscallEvent], int]:
    """Return ``(events, skipped)``; blank lines are neither events nor skips."""
    if isinstance(lines, bytes):
        lines = lines.decode("utf-8", "replace")
    if isinstance(lines, str):
        lines = lines.splitlines()
    events, skipped = [], 0
    for line in lines:
        if isinstance(line, bytes):
            line = line.decode("utf-8", "replace")
        if not line.strip():
            continue
        ev = parse_syscall_line(line, ref_guest_ns)
        if ev is None:
            skipped += 1
        else:
            events.append(ev)
    return events, skipped


def format_syscall_line(num: int, ev: SyscallEvent, cpu: int = 0) -> str:
    """Render an event in the ``sysdig -t a`` layout (inverse of the parser)."""
    sec, ns = divmod(ev.guest_ts_ns, 10**9)
    marker = ">" if ev.direction is Direction.ENTER else "<"
    tail = f" {ev.info}" if ev.info else ""
    return f"{num} {sec}.{ns:09d} {cpu} {ev.proc_name} ({ev.tid}) {marker} {ev.syscall}{tail}"
