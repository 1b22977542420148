"""Types and helpers shared by the QEMU and mock backends."""

from __future__ import annotations

import enum
import logging
import os
import signal
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import SpawnError

log = logging.getLogger(__name__)


class Backend(enum.Enum):
    QEMU = "qemu"
    MOCK = "mock"


class WallClock:
    def now_ns(self) -> int:
        return time.time_ns()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)

    def advance(self, ns: int) -> None:
        self.sleep(ns / 1e9)


class VirtualClock:
    """Deterministic clock: every read moves time forward by ``tick_ns``."""

    def __init__(self, start_ns: int, tick_ns: int = 1000):
        self._now = start_ns
        self.tick_ns = tick_ns

    def now_ns(self) -> int:
        self._now += self.tick_ns
        return self._now

    def peek_ns(self) -> int:
        return self._now

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            self._now += int(round(seconds * 1e9))

    def advance(self, ns: int) -> None:
        self._now += max(0, int(ns))


@dataclass(frozen=True)
class BootCommand:
    tokens: tuple[str, ...]
    trace_output: Path
    tap: str
    snapshot: Path

    @property
    def run_dir(self) -> Path:
        return Path(self.trace_output).parent


@dataclass
class VmHandle:
    backend: Backend
    guest_ip: str
    ssh_port: int
    snapshot_path: Path
    boot_ts: int
    run_dir: Path
    emulator_pid: int | None = None
    ssh_user: str = "root"
    ssh_key: str = ""


@dataclass(frozen=True)
class GuestExecResult:
    exit_code: int
    stdout: bytes
    stderr: bytes
    started_ts: int
    ended_ts: int


@dataclass
class GuestJob:
    job_id: str
    command: str
    started_ts: int
    pidfile: str = ""
    proc: subprocess.Popen | None = field(default=None, repr=False)


@dataclass(frozen=True)
class ClockSample:
    guest_ns: int
    host_ns_before: int
    host_ns_after: int

    @property
    def offset_ns(self) -> int:
        """guest minus host, using the midpoint of the host bracket."""
        return self.guest_ns - (self.host_ns_before + self.host_ns_after) // 2

    @property
    def half_width_ns(self) -> int:
        return (self.host_ns_after - self.host_ns_before + 1) // 2


def best_clock_sample(samples: list[ClockSample]) -> ClockSample:
    return min(samples, key=lambda s: s.host_ns_after - s.host_ns_before)


class HostJob:
    """A host-side collector process (perf, tcpdump) in its own process group."""

    def __init__(self, name: str, argv, proc, start_ts: int, clock):
        self.name = name
        self.argv = list(argv)
        self.proc = proc
        self.start_ts = start_ts
        self.stop_ts: int | None = None
        self._clock = clock

    @classmethod
    def spawn(cls, name: str, argv, log_path, clock=None) -> "HostJob":
        clock = clock or WallClock()
        try:
            with open(log_path, "ab") as logf:
                start = clock.now_ns()
                proc = subprocess.Popen(list(argv), stdin=subprocess.DEVNULL, stdout=logf,
                                        stderr=subprocess.STDOUT, start_new_session=True)
        except OSError as exc:
            raise SpawnError(f"cannot start {name} ({argv[0]}): {exc}") from exc
        log.debug("started %s pid=%d", name, proc.pid)
        return cls(name, argv, proc, start, clock)

    @property
    def running(self) -> bool:
        return self.stop_ts is None and self.proc.poll() is None

    def stop(self, grace_s: float = 5.0) -> int:
        if self.stop_ts is not None:
            return self.stop_ts
        if self.proc.poll() is None:
            _signal_group(self.proc, signal.SIGINT)
            try:
                self.proc.wait(timeout=grace_s)
            except subprocess.TimeoutExpired:
                _signal_group(self.proc, signal.SIGKILL)
                self.proc.wait()
        self.stop_ts = self._clock.now_ns()
        return self.stop_ts


def _signal_group(proc, sig):
    try:
        os.killpg(proc.pid, sig)
    except (ProcessLookupError, PermissionError):
        pass


def kill_process_tree(proc: subprocess.Popen, grace_s: float = 5.0) -> None:
    if proc.poll() is not None:
        return
    _signal_group(proc, signal.SIGTERM)
    try:
        proc.wait(timeout=grace_s)
    except subprocess.TimeoutExpired:
        _signal_group(proc, signal.SIGKILL)
        proc.wait()
