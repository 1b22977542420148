"""Starting and stopping the four side-channel monitors.

Syscalls are captured inside the guest by sysdig writing to a RAM-backed
directory.  HPC counting (perf attached to the emulator process) and packet
capture (tcpdump on the tap) run on the host through the driver's
``spawn_host_job`` so the mock backend can substitute scripted output.  Disk
tracing needs no job: QEMU writes it from boot.
"""

from __future__ import annotations

import posixpath
import shlex
from dataclasses import dataclass, field

from ..errors import GuestToolMissing, SamosaError, SshError
from .hpc import perf_command
from .pcap import tcpdump_command

SCAP_NAME = "syscalls.scap"
SYSCALL_TEXT_NAME = "syscalls.txt"


@dataclass
class CaptureJob:
    job: object
    scap_path: str
    text_path: str
    start_ts: int
    stop_ts: int | None = None


@dataclass
class CollectorState:
    """Tracks one run's collectors so a second start is refused."""

    syscall: CaptureJob | None = None
    host: dict = field(default_factory=dict)


def start_syscall_capture(driver, handle, ram_path: str, state: CollectorState | None = None) -> CaptureJob:
    if state is not None and state.syscall is not None:
        raise SamosaError("syscall capture already running for this run")
    probe = driver.exec_guest(handle, "command -v sysdig", timeout_s=30)
    if probe.exit_code != 0:
        raise GuestToolMissing(
            "sysdig not found in the guest; install it in the base image "
            "(prebuilt packages exist for x86_64/arm64, build from source for ppc64le)"
        )
    mk = driver.exec_guest(handle, f"mkdir -p {shlex.quote(ram_path)}", timeout_s=30)
    if mk.exit_code != 0:
        raise SshError(f"cannot create capture directory {ram_path}")
    scap = posixpath.join(ram_path, SCAP_NAME)
    text = posixpath.join(ram_path, SYSCALL_TEXT_NAME)
    start = driver.clock.now_ns()
    job = driver.exec_guest(handle, f"sysdig -q -w {shlex.quote(scap)}", background=True)
    cap = CaptureJob(job, scap, text, start)
    if state is not None:
        state.syscall = cap
    return cap


def stop_syscall_capture(driver, handle, cap: CaptureJob) -> int:
    if cap.stop_ts is None:
        driver.halt_job(handle, cap.job)
        cap.stop_ts = driver.clock.now_ns()
    return cap.stop_ts


def convert_syscall_capture(driver, handle, cap: CaptureJob, timeout_s: float = 600) -> None:
    """Render the binary capture as text lines in the guest (absolute timestamps)."""
    res = driver.exec_guest(
        handle,
        f"sysdig -r {shlex.quote(cap.scap_path)} -t a > {shlex.quote(cap.text_path)}",
        timeout_s=timeout_s,
    )
    if res.exit_code != 0:
        raise SshError(f"sysdig conversion failed: {res.stderr.decode(errors='replace').strip()}")


def start_hpc(driver, emulator_pid, events, interval_ms: int, out_path, state: CollectorState | None = None):
    if not events:
        raise SamosaError("at least one HPC event is required")
    argv = perf_command(emulator_pid if emulator_pid is not None else 0, events, interval_ms, out_path)
    return _start_host(driver, "perf", argv, out_path, state)


def start_pcap(driver, tap: str, out_path, state: CollectorState | None = None):
    return _start_host(driver, "tcpdump", tcpdump_command(tap, out_path), out_path, state)


def _start_host(driver, name, argv, out_path, state):
    if state is not None and name in state.host:
        raise SamosaError(f"{name} already running for this run")
    job = driver.spawn_host_job(name, argv, out_path)
    if state is not None:
        state.host[name] = job
    return job
