"""Scripted stand-in for QEMU + guest, used by tests and ``--backend mock``.

The mock keeps a tiny in-memory guest (file system, process table, wall
clock with a configurable skew) and hands back the scenario's canned
side-channel outputs byte for byte.  With ``clock = "virtual"`` nothing
sleeps: time only moves when the mock or the pipeline says so, which makes a
whole run deterministic and fast.
"""

from __future__ import annotations

import itertools
import posixpath
import random
import re
import shlex
import socket
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..collectors.disk import format_disk_line
from ..collectors.events import DiskEvent, DiskOp, Direction, SyscallEvent
from ..collectors.pcap import ipv4_frame, pcap_header, pcap_record
from ..collectors.syscalls import format_syscall_line
from ..config import DiskDevice, RunConfig
from ..errors import (
    BootTimeout,
    ExecTimeout,
    GuestPathError,
    InjectedFault,
    SchemaError,
    SshError,
)
from ..netemu import build_dns_query
from .boot import clone_snapshot
from .common import (
    Backend,
    BootCommand,
    ClockSample,
    GuestExecResult,
    GuestJob,
    VirtualClock,
    VmHandle,
    WallClock,
)

DEFAULT_START_NS = 1_700_000_000 * 10**9
GUEST_DIRS = ("/", "/tmp", "/root", "/dev", "/dev/shm", "/home", "/etc", "/usr", "/usr/bin")
BOOT_LOG = "[    0.000000] Linux version 5.4.0 (mock)\n[    1.200000] systemd[1]: Reached target Multi-User System.\n"


@dataclass
class ScriptedResult:
    exit_code: int = 0
    stdout: bytes = b""
    stderr: bytes = b""
    # for background jobs: natural exit after this long; None runs until halted
    runtime_ms: int | None = None


@dataclass
class ScenarioScript:
    boot_delay_ms: int = 10
    clock: str = "virtual"  # or "wall"
    start_ns: int = DEFAULT_START_NS
    clock_skew_ns: int = 0
    # one-way latency range of the guest clock read; asymmetry is the error source
    clock_latency_ns: tuple[int, int] = (20_000, 400_000)
    exec_latency_ns: int = 1_000_000
    seed: int = 0
    responses: list[tuple[str, ScriptedResult]] = field(default_factory=list)
    guest_tools: tuple[str, ...] = ("sysdig",)
    binary_pattern: str = r"^/tmp/samosa/"
    binary_stdout: bytes = b""
    binary_stderr: bytes = b""
    binary_runtime_ms: int | None = None
    syscall_text: str = ""
    syscall_scap: bytes = b"\x0a\x0d\x0d\x0amock-scap"
    hpc_csv: str = ""
    pcap_bytes: bytes = field(default_factory=pcap_header)
    disk_trace_lines: list[str] = field(default_factory=list)
    boot_log: str = BOOT_LOG
    http_requests: list[str] = field(default_factory=list)
    dns_queries: list[str] = field(default_factory=list)
    fail_at: str | None = None
    hang_on_shutdown: bool = False
    ssh_unreachable: bool = False

    def respond(self, command: str) -> ScriptedResult | None:
        for pattern, result in self.responses:
            if re.search(pattern, command):
                return result
        return None


class MockHostJob:
    def __init__(self, name, argv, out_path, content: bytes, clock):
        self.name = name
        self.argv = list(argv)
        self.out_path = Path(out_path)
        self._content = content
        self._clock = clock
        self.start_ts = clock.now_ns()
        self.stop_ts: int | None = None

    @property
    def running(self) -> bool:
        return self.stop_ts is None

    def stop(self, grace_s: float = 5.0) -> int:
        if self.stop_ts is None:
            self.out_path.write_bytes(self._content)
            self.stop_ts = self._clock.now_ns()
        return self.stop_ts


@dataclass
class _MockJob:
    job: GuestJob
    result: ScriptedResult
    stdout_path: str | None
    stderr_path: str | None
    done: bool = False


class MockDriver:
    backend = Backend.MOCK

    def __init__(self, scenario: ScenarioScript | None = None):
        self.scenario = scenario or ScenarioScript()
        if self.scenario.clock == "virtual":
            self.clock = VirtualClock(self.scenario.start_ns)
        elif self.scenario.clock == "wall":
            self.clock = WallClock()
        else:
            raise SchemaError(f"unknown mock clock {self.scenario.clock!r}")
        self._rng = random.Random(self.scenario.seed)
        self._ids = itertools.count(1000)
        self.files: dict[str, bytes] = {}
        self.dirs: set[str] = set(GUEST_DIRS)
        self.jobs: dict[str, _MockJob] = {}
        self.host_jobs: list[MockHostJob] = []
        self.transcript: list[str] = []
        self.vm_running = False
        self._cmd: BootCommand | None = None
        self._endpoints: dict = {}

    # -- bookkeeping --------------------------------------------------------

    def enter_step(self, step) -> None:
        name = getattr(step, "name", str(step))
        if self.scenario.fail_at == name:
            raise InjectedFault(f"fault injected at {name}")

    def attach_network(self, endpoints) -> None:
        self._endpoints = dict(endpoints or {})

    def live_resources(self) -> dict:
        live = {}
        if self.vm_running:
            live["vm"] = True
        running = [j.job.job_id for j in self.jobs.values() if not self._finished(j)]
        if running:
            live["guest_jobs"] = running
        hosts = [j.name for j in self.host_jobs if j.running]
        if hosts:
            live["host_jobs"] = hosts
        return live

    # -- lifecycle ----------------------------------------------------------

    def clone_snapshot(self, profile, run_dir) -> Path:
        return clone_snapshot(profile, run_dir, qemu_img=None)

    def boot(self, cmd: BootCommand, profile, timeout_s: float) -> VmHandle:
        boot_ts = self.clock.now_ns()
        if self.scenario.ssh_unreachable or self.scenario.boot_delay_ms > timeout_s * 1000:
            self.clock.sleep(timeout_s)
            raise BootTimeout(f"guest not reachable over ssh within {timeout_s}s")
        self.clock.sleep(self.scenario.boot_delay_ms / 1000)
        self._cmd = cmd
        Path(cmd.trace_output).touch()
        self.vm_running = True
        return VmHandle(
            backend=Backend.MOCK,
            guest_ip=profile.guest_ip,
            ssh_port=profile.ssh_port,
            snapshot_path=Path(cmd.snapshot),
            boot_ts=boot_ts,
            run_dir=cmd.run_dir,
            emulator_pid=None,
            ssh_user=profile.ssh_user,
            ssh_key=profile.ssh_key,
        )

    def shutdown(self, handle: VmHandle, grace_s: float = 30) -> None:
        if not self.vm_running:
            return
        self.transcript.append("$ poweroff")
        if self.scenario.hang_on_shutdown:
            self.clock.sleep(min(grace_s, 0.05) if isinstance(self.clock, WallClock) else grace_s)
            self.transcript.append("-- guest hung, emulator terminated")
        for j in self.jobs.values():
            j.done = True
        run_dir = Path(handle.run_dir)
        text = self.scenario.boot_log + "".join(line + "\n" for line in self.transcript)
        text += "[  OK  ] Reached target Power-Off.\nreboot: Power down\n"
        (run_dir / "vm.log").write_text(text, encoding="utf-8")
        if self._cmd is not None:
            with open(self._cmd.trace_output, "a", encoding="utf-8") as fh:
                fh.writelines(line + "\n" for line in self.scenario.disk_trace_lines)
        self.vm_running = False

    # -- guest access -------------------------------------------------------

    def _require_running(self):
        if not self.vm_running:
            raise SshError("guest is not running")

    def exec_guest(self, handle: VmHandle, command: str, timeout_s: float = 60,
                   background: bool = False, stdout_path=None, stderr_path=None):
        self._require_running()
        self.transcript.append(f"$ {command}")
        started = self.clock.now_ns()
        self.clock.advance(self.scenario.exec_latency_ns)
        if background:
            return self._start_job(command, started, stdout_path, stderr_path)
        result = self.scenario.respond(command) or self._builtin(command)
        if result.runtime_ms is not None and result.runtime_ms > timeout_s * 1000:
            self.clock.sleep(timeout_s)
            raise ExecTimeout(f"{command!r} exceeded {timeout_s}s")
        if result.runtime_ms:
            self.clock.sleep(result.runtime_ms / 1000)
        if stdout_path:
            Path(stdout_path).write_bytes(result.stdout)
        if stderr_path:
            Path(stderr_path).write_bytes(result.stderr)
        return GuestExecResult(result.exit_code, result.stdout, result.stderr, started, self.clock.now_ns())

    def _start_job(self, command, started, stdout_path, stderr_path) -> GuestJob:
        job = GuestJob(f"job{next(self._ids)}", command, started)
        result = self.scenario.respond(command)
        if re.search(self.scenario.binary_pattern, command):
            if result is None:
                result = ScriptedResult(0, self.scenario.binary_stdout, self.scenario.binary_stderr,
                                        self.scenario.binary_runtime_ms)
            self._emit_traffic()
        m = re.search(r"^sysdig\b.*\s-w\s+(\S+)", command)
        if m and result is None:
            if "sysdig" in self.scenario.guest_tools and self._parent_exists(m.group(1)):
                self.files[posixpath.normpath(m.group(1))] = self.scenario.syscall_scap
                result = ScriptedResult()
            else:
                result = ScriptedResult(127, b"", b"sysdig: not found\n", 0)
        self.jobs[job.job_id] = _MockJob(job, result or ScriptedResult(), stdout_path, stderr_path)
        return job

    def _finished(self, j: _MockJob) -> bool:
        if not j.done and j.result.runtime_ms is not None:
            if self.clock_peek() - j.job.started_ts >= j.result.runtime_ms * 10**6:
                self._finish(j)
        return j.done

    def _finish(self, j: _MockJob):
        j.done = True
        if j.stdout_path:
            Path(j.stdout_path).write_bytes(j.result.stdout)
        if j.stderr_path:
            Path(j.stderr_path).write_bytes(j.result.stderr)

    def clock_peek(self) -> int:
        return self.clock.peek_ns() if isinstance(self.clock, VirtualClock) else self.clock.now_ns()

    def job_running(self, handle: VmHandle, job: GuestJob) -> bool:
        j = self.jobs.get(job.job_id)
        return j is not None and not self._finished(j)

    def halt_job(self, handle: VmHandle, job: GuestJob, grace_s: float = 2) -> None:
        self._require_running()
        self.transcript.append(f"$ kill -TERM -- -<{job.job_id}>")
        self.clock.advance(self.scenario.exec_latency_ns)
        j = self.jobs.get(job.job_id)
        if j is not None and not self._finished(j):
            self._finish(j)

    def _parent_exists(self, path: str) -> bool:
        return posixpath.dirname(posixpath.normpath(path)) in self.dirs

    def copy_in(self, handle: VmHandle, local, guest_path: str, executable: bool = False) -> None:
        self._require_running()
        self.clock.advance(self.scenario.exec_latency_ns)
        if not self._parent_exists(guest_path):
            raise GuestPathError(f"{guest_path}: No such file or directory")
        self.files[posixpath.normpath(guest_path)] = Path(local).read_bytes()
        self.transcript.append(f"scp -> {guest_path}")

    def copy_out(self, handle: VmHandle, guest_path: str, local) -> None:
        self._require_running()
        self.clock.advance(self.scenario.exec_latency_ns)
        data = self.files.get(posixpath.normpath(guest_path))
        if data is None:
            raise GuestPathError(f"{guest_path}: No such file or directory")
        Path(local).write_bytes(data)
        self.transcript.append(f"scp <- {guest_path}")

    def sample_guest_clock(self, handle: VmHandle) -> ClockSample:
        self._require_running()
        lo, hi = self.scenario.clock_latency_ns
        if isinstance(self.clock, VirtualClock):
            before = self.clock.now_ns()
            self.clock.advance(self._rng.randint(lo, hi))
            guest = self.clock.peek_ns() + self.scenario.clock_skew_ns
            self.clock.advance(self._rng.randint(lo, hi))
            after = self.clock.now_ns()
        else:
            before = self.clock.now_ns()
            guest = self.clock.now_ns() + self.scenario.clock_skew_ns
            after = self.clock.now_ns()
        self.transcript.append("$ date +%s%N")
        return ClockSample(guest, before, after)

    def _builtin(self, command: str) -> ScriptedResult:
        try:
            argv = shlex.split(command)
        except ValueError:
            argv = command.split()
        if not argv:
            return ScriptedResult()
        prog = argv[0]
        if prog == "echo":
            return ScriptedResult(0, (" ".join(argv[1:]) + "\n").encode())
        if prog in ("which",) or argv[:2] == ["command", "-v"]:
            tool = argv[-1]
            if tool in self.scenario.guest_tools:
                return ScriptedResult(0, f"/usr/bin/{tool}\n".encode())
            return ScriptedResult(1)
        if argv[:2] == ["mkdir", "-p"]:
            for d in argv[2:]:
                d = posixpath.normpath(d)
                while d not in self.dirs:
                    self.dirs.add(d)
                    d = posixpath.dirname(d)
            return ScriptedResult()
        if prog in ("chmod", "test", "cat", "touch"):
            path = posixpath.normpath(argv[-1])
            exists = path in self.files or path in self.dirs
            if prog == "touch":
                if not self._parent_exists(path):
                    return ScriptedResult(1, b"", b"touch: No such file or directory\n")
                self.files.setdefault(path, b"")
                return ScriptedResult()
            if prog == "cat" and exists:
                return ScriptedResult(0, self.files.get(path, b""))
            return ScriptedResult(0 if exists else 1)
        if prog == "date" and argv[1:] == ["+%s%N"]:
            guest = self.clock_peek() + self.scenario.clock_skew_ns
            return ScriptedResult(0, f"{guest}\n".encode())
        if prog == "ps":
            rows = ["PID CMD"] + [f"{j.job.job_id} {j.job.command}" for j in self.jobs.values()
                                  if not self._finished(j)]
            return ScriptedResult(0, ("\n".join(rows) + "\n").encode())
        if prog == "sysdig" and "-r" in argv:
            m = re.search(r"-r\s+(\S+).*>\s*(\S+)\s*$", command)
            if not m or posixpath.normpath(m.group(1)) not in self.files:
                return ScriptedResult(1, b"", b"sysdig: cannot open capture\n")
            self.files[posixpath.normpath(m.group(2))] = self.scenario.syscall_text.encode()
            return ScriptedResult()
        return ScriptedResult()

    def _emit_traffic(self):
        """Send the scenario's requests to the attached network emulator."""
        http = self._endpoints.get("HTTPListener80")
        for raw in self.scenario.http_requests if http else ():
            with socket.create_connection(http, timeout=2) as s:
                s.sendall(raw.encode("latin-1"))
                s.shutdown(socket.SHUT_WR)
                while s.recv(65536):
                    pass
        dns = self._endpoints.get("DNSListener53")
        for i, name in enumerate(self.scenario.dns_queries if dns else ()):
            with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
                s.settimeout(2)
                s.sendto(build_dns_query(name, 0x4000 + i), dns)
                s.recvfrom(4096)

    # -- host collectors -------------------------------------------------------

    def spawn_host_job(self, name: str, argv, out_path) -> MockHostJob:
        content = {
            "perf": self.scenario.hpc_csv.encode(),
            "tcpdump": self.scenario.pcap_bytes,
        }.get(name, b"")
        job = MockHostJob(name, argv, out_path, content, self.clock)
        self.host_jobs.append(job)
        return job


# --------------------------------------------------------------------------
# scenario construction

_SYSCALL_WEIGHTS = {
    "read": 30, "write": 25, "openat": 12, "close": 12, "futex": 10, "nanosleep": 8,
    "mmap": 6, "getrandom": 5, "fstat": 5, "lseek": 4, "statx": 3, "getdents64": 2,
    "readlinkat": 2, "socket": 1, "connect": 1, "sendto": 1, "recvfrom": 1,
}


def synthetic_scenario(cfg: RunConfig, *, clock: str = "virtual", skew_ns: int = 0, seed: int = 0,
                       start_ns: int | None = None, n_syscalls: int = 2000, n_packets: int = 400,
                       n_disk: int = 300, **overrides) -> ScenarioScript:
    """A scenario whose traces cover the whole expected run window.

    Events are spread over ``[start, start + duration + 3 s]`` so that the
    analysis stage has material both inside and outside the execution window.
    """
    rng = random.Random(seed)
    if start_ns is None:
        start_ns = DEFAULT_START_NS if clock == "virtual" else WallClock().now_ns()
    span_ns = (cfg.exec_duration_s + 3) * 10**9
    binary = Path(cfg.binary_path).name or "target"

    def when():
        return start_ns + rng.randrange(span_ns)

    # syscalls, written as `sysdig -t a` output on the guest clock
    names, weights = zip(*_SYSCALL_WEIGHTS.items())
    events = []
    for _ in range(n_syscalls // 2):
        ts = when()
        name = rng.choices(names, weights)[0]
        proc = rng.choice([binary, binary, binary, "systemd", "sshd"])
        tid = rng.randint(300, 5000)
        events.append(SyscallEvent(ts + skew_ns, proc, tid, Direction.ENTER, name, "fd=3"))
        events.append(SyscallEvent(ts + skew_ns + rng.randint(1_000, 90_000), proc, tid,
                                   Direction.EXIT, name, "res=0"))
    events.sort(key=lambda e: e.guest_ts_ns)
    syscall_text = "".join(format_syscall_line(i + 1, e, cpu=i % 4) + "\n" for i, e in enumerate(events))

    # perf interval rows relative to counting start
    interval_s = cfg.hpc_interval_ms / 1000
    rows = ["# started on Thu Jan  1 00:00:00 2026", ""]
    n_intervals = int(span_ns / 1e9 / interval_s)
    for k in range(1, n_intervals + 1):
        rel = k * interval_s + rng.randint(0, 900) * 1e-9
        for ev in cfg.hpc_events:
            if rng.random() < 0.01:
                rows.append(f"{rel:14.9f},<not counted>,,{ev},0,0.00,,")
            else:
                rows.append(f"{rel:14.9f},{rng.randint(10_000, 50_000_000)},,{ev},{int(interval_s * 1e9)},100.00,,")
    hpc_csv = "\n".join(rows) + "\n"

    # packets between the guest and emulated/external services
    guest = cfg.profile.guest_ip
    peers = [cfg.emulator_ip, "203.0.113.7", "198.51.100.23"]
    pcap = bytearray(pcap_header())
    for ts in sorted(when() for _ in range(n_packets)):
        peer = rng.choice(peers)
        proto = rng.choice((6, 6, 17))
        size = rng.randint(0, 1400)
        if rng.random() < 0.03:
            frame = b"\xff" * 6 + b"\x52\x54\x00\x12\x34\x56" + b"\x08\x06" + bytes(28)
        elif rng.random() < 0.5:
            frame = ipv4_frame(guest, peer, proto, rng.randint(32768, 60999), rng.choice((53, 80, 443)), bytes(size))
        else:
            frame = ipv4_frame(peer, guest, proto, rng.choice((53, 80, 443)), rng.randint(32768, 60999), bytes(size))
        pcap += pcap_record(ts, frame)

    device = cfg.profile.disk_device
    disk_lines = []
    for ts in sorted(when() for _ in range(n_disk)):
        ev = DiskEvent(ts - ts % 1000, rng.choice((DiskOp.READ, DiskOp.WRITE)),
                       rng.randrange(1 << 21), rng.randint(1, 256), device)
        disk_lines.append(format_disk_line(ev))

    scenario = ScenarioScript(
        clock=clock,
        start_ns=start_ns,
        clock_skew_ns=skew_ns,
        seed=seed,
        binary_stdout=f"{binary}: started\n".encode(),
        syscall_text=syscall_text,
        hpc_csv=hpc_csv,
        pcap_bytes=bytes(pcap),
        disk_trace_lines=disk_lines,
        http_requests=[
            f"GET /{binary}_payload HTTP/1.1\r\nHost: 203.0.113.7\r\nUser-Agent: curl/7.68.0\r\nAccept: */*\r\n\r\n",
            "GET /ce.sh HTTP/1.1\r\nUser-Agent: Wget/1.20.3 (linux-gnu)\r\nAccept: */*\r\n"
            "Host: 198.51.100.23\r\nConnection: Keep-Alive\r\n\r\n",
        ],
        dns_queries=["c2.example.net.", "pool.example.org."],
    )
    return replace(scenario, **overrides)


_SCENARIO_FILE_KEYS = {
    "syscall_file": ("syscall_text", "text"),
    "hpc_file": ("hpc_csv", "text"),
    "pcap_file": ("pcap_bytes", "bytes"),
    "scap_file": ("syscall_scap", "bytes"),
    "disk_file": ("disk_trace_lines", "lines"),
}


def load_scenario(path, cfg: RunConfig) -> ScenarioScript:
    """Read a TOML scenario.  ``synthetic = true`` starts from synthetic_scenario()."""
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise SchemaError(f"cannot load scenario {path}: {exc}") from exc
    known = {f.name for f in fields(ScenarioScript)}
    synthetic = doc.pop("synthetic", False)
    seed = doc.get("seed", 0)
    kwargs = {}
    for key, value in doc.items():
        if key in _SCENARIO_FILE_KEYS:
            target, kind = _SCENARIO_FILE_KEYS[key]
            f = path.parent / value
            if kind == "bytes":
                kwargs[target] = f.read_bytes()
            elif kind == "text":
                kwargs[target] = f.read_text(encoding="utf-8")
            else:
                kwargs[target] = f.read_text(encoding="utf-8").splitlines()
        elif key == "responses":
            kwargs["responses"] = [
                (r["pattern"], ScriptedResult(r.get("exit_code", 0), r.get("stdout", "").encode(),
                                              r.get("stderr", "").encode(), r.get("runtime_ms")))
                for r in value
            ]
        elif key in ("binary_stdout", "binary_stderr"):
            kwargs[key] = value.encode()
        elif key == "clock_latency_ns":
            kwargs[key] = tuple(value)
        elif key in known:
            kwargs[key] = value
        else:
            raise SchemaError(f"scenario {path}: unknown field {key!r}")
    if synthetic:
        base = synthetic_scenario(cfg, clock=kwargs.get("clock", "virtual"),
                                  skew_ns=kwargs.get("clock_skew_ns", 0), seed=seed,
                                  start_ns=kwargs.get("start_ns"))
        return replace(base, **kwargs)
    return ScenarioScript(**kwargs)
