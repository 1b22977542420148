"""End-to-end execution of one sandbox run.

Steps always run in the order of ``PipelineStep``.  Whatever happens, the
cleanup pass halts guest jobs, stops collectors and the network emulator,
removes NAT rules and shuts the VM down before the error propagates, and
``run.json`` is written last.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import shlex
import signal
import subprocess
import time
import uuid
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import netemu
from .collectors import capture
from .config import HookSpec, HookStage, Locus, NetworkMode, RunConfig, validate_config
from .errors import ExecTimeout, HookFailed, PipelineError, SamosaError, SchemaError
from .vmdriver import Backend, MockDriver, QemuDriver, best_clock_sample, build_boot_command

log = logging.getLogger(__name__)

GUEST_WORKDIR = "/tmp/samosa"
BOOT_TIMEOUT_S = 300
SHUTDOWN_GRACE_S = 30
CLOCK_SAMPLES = 5
WAIT_POLL_S = 0.1

ARTIFACTS = {
    "pcap": "capture.pcap",
    "syscalls_scap": "syscalls.scap",
    "syscalls_text": "syscalls.txt",
    "hpc": "hpc.csv",
    "disk_trace": "disk.trace",
    "fakenet_log": "fakenet.log",
    "fakenet_report": "fakenet_report.html",
    "stdout": "binary.stdout",
    "stderr": "binary.stderr",
    "vm_log": "vm.log",
    "snapshot": "snapshot.img",
    "manifest": "run.json",
}


class PipelineStep(enum.Enum):
    PRE_SETUP_HOOKS = 1
    CLONE_SNAPSHOT = 2
    BOOT_VM = 3
    ENABLE_DISK_TRACE = 4
    COPY_BINARY = 5
    PRE_RUN_HOOKS = 6
    START_NETEMU = 7
    START_HPC = 8
    START_SYSDIG = 9
    EXECUTE_BINARY = 10
    WAIT_DURATION = 11
    HALT_EXECUTION = 12
    STOP_COLLECTORS = 13
    POST_RUN_HOOKS = 14
    COPY_OUT = 15
    SHUTDOWN_VM = 16
    POST_SHUTDOWN_HOOKS = 17


STEP_ORDER = [s.name for s in PipelineStep]


def is_step_prefix(step_log) -> bool:
    names = [entry["step"] for entry in step_log]
    return names == STEP_ORDER[:len(names)]


@dataclass
class CommandResult:
    command: str
    exit_code: int
    stdout: bytes = b""
    stderr: bytes = b""
    duration_ms: int = 0


@dataclass
class HookResult:
    spec: HookSpec
    exit_code: int
    stdout: bytes
    stderr: bytes
    duration_ms: int

    @property
    def ok(self) -> bool:
        return self.exit_code == 0


class CommandRecorder:
    """Collects host commands instead of running them."""

    def __init__(self, exit_code: int = 0, fail_on: str | None = None):
        self.commands: list[str] = []
        self.exit_code = exit_code
        self.fail_on = fail_on

    def __call__(self, cmd: str) -> CommandResult:
        self.commands.append(cmd)
        code = 1 if self.fail_on and self.fail_on in cmd else self.exit_code
        return CommandResult(cmd, code)


def execute_host_command(cmd: str, timeout_s: float, recorder: CommandRecorder | None = None,
                         env: dict | None = None) -> CommandResult:
    if recorder is not None:
        return recorder(cmd)
    started = time.monotonic()
    proc = subprocess.Popen(cmd, shell=True, stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                            stdin=subprocess.DEVNULL, start_new_session=True,
                            env={**os.environ, **(env or {})})
    try:
        out, err = proc.communicate(timeout=timeout_s)
    except subprocess.TimeoutExpired:
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        proc.communicate()
        raise ExecTimeout(f"host command {cmd!r} exceeded {timeout_s}s") from None
    return CommandResult(cmd, proc.returncode, out, err, int((time.monotonic() - started) * 1000))


def execute_hooks(stage: HookStage, cfg: RunConfig, handle=None, driver=None,
                  recorder: CommandRecorder | None = None, env: dict | None = None,
                  results: list | None = None) -> list[HookResult]:
    """Run the stage's hooks in declaration order.

    Pre-setup/pre-run failures raise HookFailed right away (after the result
    has been appended to ``results``); post-stage failures are only recorded.
    """
    out = results if results is not None else []
    abort = stage in (HookStage.PRE_SETUP, HookStage.PRE_RUN)
    for spec in cfg.hooks_for(stage):
        started = time.monotonic()
        try:
            if spec.locus is Locus.GUEST:
                if handle is None or driver is None:
                    raise SamosaError(f"guest hook at {stage.value} without a booted VM")
                r = driver.exec_guest(handle, spec.command, timeout_s=spec.timeout_s)
                code, so, se = r.exit_code, r.stdout, r.stderr
            else:
                r = execute_host_command(spec.command, spec.timeout_s, recorder, env)
                code, so, se = r.exit_code, r.stdout, r.stderr
        except ExecTimeout as exc:
            code, so, se = -1, b"", str(exc).encode()
        result = HookResult(spec, code, so, se, int((time.monotonic() - started) * 1000))
        out.append(result)
        if not result.ok:
            if abort:
                raise HookFailed(result)
            log.warning("%s hook %r exited %d; continuing", stage.value, spec.command, code)
    return out


@dataclass
class RunManifest:
    run_id: str
    binary_name: str
    args: list
    network_mode: str
    boot_command: list = field(default_factory=list)
    t_boot: int | None = None
    t_exec_start: int | None = None
    t_exec_halt: int | None = None
    t_shutdown: int | None = None
    hooks_executed: list = field(default_factory=list)
    guest_clock_offset_ns: int = 0
    guest_clock_uncertainty_ns: int | None = None
    artifacts: dict = field(default_factory=dict)
    step_log: list = field(default_factory=list)
    collectors: dict = field(default_factory=dict)
    hpc_anchor_ns: int | None = None
    exec_duration_s: int = 0
    binary_exited_early: bool = False
    arch: str = ""
    disk_device: str = ""
    guest_ip: str = ""
    status: str = "running"
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunManifest":
        known = set(cls.__dataclass_fields__)
        missing = {"run_id", "binary_name", "args", "network_mode"} - set(doc)
        if missing:
            raise SchemaError(f"manifest missing fields: {', '.join(sorted(missing))}")
        unknown = set(doc) - known
        if unknown:
            raise SchemaError(f"manifest has unknown fields: {', '.join(sorted(unknown))}")
        return cls(**doc)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def new_run_id(binary_path: str) -> str:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    return f"{Path(binary_path).stem or 'run'}-{stamp}-{uuid.uuid4().hex[:6]}"


class Pipeline:
    def __init__(self, cfg: RunConfig, driver, recorder: CommandRecorder | None = None,
                 run_id: str | None = None, boot_timeout_s: float = BOOT_TIMEOUT_S,
                 shutdown_grace_s: float = SHUTDOWN_GRACE_S):
        self.cfg = cfg
        self.driver = driver
        self.clock = driver.clock
        mock = getattr(driver, "backend", None) is Backend.MOCK
        # NAT rules need root; the mock backend records them instead
        self.nat_recorder = recorder if recorder is not None else (CommandRecorder() if mock else None)
        self.hook_recorder = recorder
        self.mock = mock
        self.run_id = run_id or new_run_id(cfg.binary_path)
        self.run_dir = Path(cfg.output_dir) / self.run_id
        self.boot_timeout_s = boot_timeout_s
        self.shutdown_grace_s = shutdown_grace_s
        self.manifest = RunManifest(
            run_id=self.run_id,
            binary_name=Path(cfg.binary_path).name,
            args=list(cfg.args),
            network_mode=cfg.network_mode.value,
            exec_duration_s=cfg.exec_duration_s,
            arch=cfg.profile.arch.value,
            disk_device=cfg.profile.disk_device.value,
            guest_ip=cfg.profile.guest_ip,
        )
        self.handle = None
        self.binary_job = None
        self.collectors = capture.CollectorState()
        self.emulator = None
        self.nat_plan = None
        self.nat_applied = False
        self.hook_results: list[HookResult] = []

    # -- helpers ------------------------------------------------------------

    @property
    def guest_binary(self) -> str:
        return f"{GUEST_WORKDIR}/{Path(self.cfg.binary_path).name}"

    def _env(self) -> dict:
        env = {"SAMOSA_RUN_ID": self.run_id, "SAMOSA_RUN_DIR": str(self.run_dir.resolve()),
               "SAMOSA_GUEST_IP": self.cfg.profile.guest_ip}
        if self.handle is not None and self.handle.emulator_pid:
            env["SAMOSA_QEMU_PID"] = str(self.handle.emulator_pid)
        return env

    def _hooks(self, stage: HookStage):
        start = len(self.hook_results)
        try:
            execute_hooks(stage, self.cfg, self.handle, self.driver, self.hook_recorder,
                          self._env(), self.hook_results)
        finally:
            for r in self.hook_results[start:]:
                self.manifest.hooks_executed.append({
                    "stage": r.spec.stage.value, "locus": r.spec.locus.value,
                    "command": r.spec.command, "exit_code": r.exit_code,
                })

    def _collector(self, name, start=None, stop=None):
        entry = self.manifest.collectors.setdefault(name, {"start_ns": None, "stop_ns": None})
        if start is not None:
            entry["start_ns"] = start
        if stop is not None:
            entry["stop_ns"] = stop

    def _step(self, step: PipelineStep, fn):
        ts = self.clock.now_ns()
        try:
            self.driver.enter_step(step)
            fn()
        except Exception as exc:
            self.manifest.step_log.append({"step": step.name, "ts": ts, "outcome": f"failed: {exc}"})
            raise
        self.manifest.step_log.append({"step": step.name, "ts": ts, "outcome": "ok"})

    # -- steps ----------------------------------------------------------------

    def _clone(self):
        self.snapshot = self.driver.clone_snapshot(self.cfg.profile, self.run_dir)

    def _boot(self):
        cmd = build_boot_command(self.cfg.profile, self.run_id, self.snapshot, self.cfg.tap)
        self.manifest.boot_command = list(cmd.tokens)
        self.boot_cmd = cmd
        self.handle = self.driver.boot(cmd, self.cfg.profile, self.boot_timeout_s)
        self.manifest.t_boot = self.handle.boot_ts

    def _enable_disk_trace(self):
        if not Path(self.boot_cmd.trace_output).exists():
            raise SamosaError(f"disk trace output {self.boot_cmd.trace_output} was not created")
        self._collector("disk", start=self.clock.now_ns())

    def _copy_binary(self):
        res = self.driver.exec_guest(self.handle, f"mkdir -p {GUEST_WORKDIR}", timeout_s=30)
        if res.exit_code != 0:
            raise SamosaError(f"cannot create {GUEST_WORKDIR} in the guest")
        self.driver.copy_in(self.handle, self.cfg.binary_path, self.guest_binary, executable=True)

    def _start_network(self):
        if self.cfg.network_mode is NetworkMode.EMULATED:
            bind = "127.0.0.1" if self.mock else self.cfg.emulator_ip
            listeners = netemu.default_listeners(bind, ephemeral=self.mock)
            self.emulator = netemu.start_emulator(listeners, answer_ip=self.cfg.emulator_ip)
            self.driver.attach_network({bl.config.name: bl.address for bl in self.emulator.listeners})
        else:
            self.nat_plan = netemu.plan_nat(self.cfg.bridge, self.cfg.guest_subnet)
            self.nat_applied = True
            for cmd in self.nat_plan.setup_cmds:
                res = execute_host_command(cmd, 30, self.nat_recorder)
                if res.exit_code != 0:
                    raise SamosaError(f"NAT setup command failed ({res.exit_code}): {cmd}")
        job = capture.start_pcap(self.driver, self.cfg.tap, self.run_dir / ARTIFACTS["pcap"], self.collectors)
        self._collector("network", start=job.start_ts)

    def _start_hpc(self):
        job = capture.start_hpc(self.driver, self.handle.emulator_pid, self.cfg.hpc_events,
                                self.cfg.hpc_interval_ms, self.run_dir / ARTIFACTS["hpc"], self.collectors)
        self.manifest.hpc_anchor_ns = job.start_ts
        self._collector("hpc", start=job.start_ts)

    def _start_sysdig(self):
        cap = capture.start_syscall_capture(self.driver, self.handle, self.cfg.profile.capture_dir,
                                            self.collectors)
        self._collector("syscall", start=cap.start_ts)
        samples = [self.driver.sample_guest_clock(self.handle) for _ in range(CLOCK_SAMPLES)]
        best = best_clock_sample(samples)
        self.manifest.guest_clock_offset_ns = best.offset_ns
        self.manifest.guest_clock_uncertainty_ns = best.half_width_ns

    def _execute(self):
        command = shlex.join([self.guest_binary, *self.cfg.args])
        self.manifest.t_exec_start = self.clock.now_ns()
        self.binary_job = self.driver.exec_guest(
            self.handle, command, background=True,
            stdout_path=self.run_dir / ARTIFACTS["stdout"],
            stderr_path=self.run_dir / ARTIFACTS["stderr"],
        )

    def _wait(self):
        deadline = self.manifest.t_exec_start + self.cfg.exec_duration_s * 10**9
        while True:
            now = self.clock.now_ns()
            if now >= deadline:
                return
            if not self.driver.job_running(self.handle, self.binary_job):
                self.manifest.binary_exited_early = True
                log.info("binary exited before the execution window elapsed")
                return
            self.clock.sleep(min(WAIT_POLL_S, (deadline - now) / 1e9))

    def _halt(self):
        self.driver.halt_job(self.handle, self.binary_job)
        self.binary_job = None
        self.manifest.t_exec_halt = self.clock.now_ns()
        for name in ("stdout", "stderr"):
            (self.run_dir / ARTIFACTS[name]).touch()

    def _stop_collectors(self):
        cap = self.collectors.syscall
        if cap is not None:
            self._collector("syscall", stop=capture.stop_syscall_capture(self.driver, self.handle, cap))
        for name, key in (("perf", "hpc"), ("tcpdump", "network")):
            job = self.collectors.host.get(name)
            if job is not None:
                self._collector(key, stop=job.stop())
        self._stop_emulator()

    def _stop_emulator(self):
        if self.emulator is not None and not self.emulator.stopped:
            self.emulator.stop()
            netemu.write_report(self.emulator, self.run_dir)

    def _copy_out(self):
        cap = self.collectors.syscall
        capture.convert_syscall_capture(self.driver, self.handle, cap)
        self.driver.copy_out(self.handle, cap.scap_path, self.run_dir / ARTIFACTS["syscalls_scap"])
        self.driver.copy_out(self.handle, cap.text_path, self.run_dir / ARTIFACTS["syscalls_text"])

    def _shutdown(self):
        self.driver.shutdown(self.handle, self.shutdown_grace_s)
        self.manifest.t_shutdown = self.clock.now_ns()
        self._collector("disk", stop=self.manifest.t_shutdown)
        self.handle_shut = True

    # -- driver ---------------------------------------------------------------

    def run(self) -> RunManifest:
        problems = validate_config(self.cfg)
        if problems:
            raise SchemaError("invalid configuration: " + "; ".join(f"{v.field}: {v.message}" for v in problems))
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.handle_shut = False
        plan = [
            (PipelineStep.PRE_SETUP_HOOKS, lambda: self._hooks(HookStage.PRE_SETUP)),
            (PipelineStep.CLONE_SNAPSHOT, self._clone),
            (PipelineStep.BOOT_VM, self._boot),
            (PipelineStep.ENABLE_DISK_TRACE, self._enable_disk_trace),
            (PipelineStep.COPY_BINARY, self._copy_binary),
            (PipelineStep.PRE_RUN_HOOKS, lambda: self._hooks(HookStage.PRE_RUN)),
            (PipelineStep.START_NETEMU, self._start_network),
            (PipelineStep.START_HPC, self._start_hpc),
            (PipelineStep.START_SYSDIG, self._start_sysdig),
            (PipelineStep.EXECUTE_BINARY, self._execute),
            (PipelineStep.WAIT_DURATION, self._wait),
            (PipelineStep.HALT_EXECUTION, self._halt),
            (PipelineStep.STOP_COLLECTORS, self._stop_collectors),
            (PipelineStep.POST_RUN_HOOKS, lambda: self._hooks(HookStage.POST_RUN)),
            (PipelineStep.COPY_OUT, self._copy_out),
            (PipelineStep.SHUTDOWN_VM, self._shutdown),
            (PipelineStep.POST_SHUTDOWN_HOOKS, lambda: self._hooks(HookStage.POST_SHUTDOWN)),
        ]
        failed = None
        try:
            for step, fn in plan:
                failed = step
                self._step(step, fn)
            failed = None
        except Exception as exc:
            self.manifest.status = "failed"
            self.manifest.error = f"{failed.name}: {exc}"
            self._cleanup()
            self._finish()
            if isinstance(exc, SamosaError):
                exc.step = failed.name
                exc.step_log = list(self.manifest.step_log)
                raise
            raise PipelineError(failed.name, exc, self.manifest.step_log) from exc
        self._cleanup()
        self.manifest.status = "ok"
        self._finish()
        return self.manifest

    def _cleanup(self):
        """Release everything still held. Never raises."""

        def attempt(what, fn):
            try:
                fn()
            except Exception as exc:  # cleanup must reach every resource
                log.warning("cleanup: %s failed: %s", what, exc)

        booted = self.handle is not None and not self.handle_shut
        if booted and self.binary_job is not None:
            attempt("halt binary", lambda: self.driver.halt_job(self.handle, self.binary_job))
        cap = self.collectors.syscall
        if booted and cap is not None and cap.stop_ts is None:
            attempt("stop sysdig", lambda: capture.stop_syscall_capture(self.driver, self.handle, cap))
        for job in self.collectors.host.values():
            attempt(f"stop {job.name}", job.stop)
        attempt("stop network emulator", self._stop_emulator)
        if self.nat_applied:
            for cmd in self.nat_plan.teardown_cmds:
                attempt(f"NAT teardown {cmd}", lambda c=cmd: execute_host_command(c, 30, self.nat_recorder))
            self.nat_applied = False
        if booted:
            attempt("shutdown VM", lambda: self.driver.shutdown(self.handle, self.shutdown_grace_s))
            self.handle_shut = True

    def live_resources(self) -> dict:
        """Everything this run still holds; empty once cleanup has finished."""
        probe = getattr(self.driver, "live_resources", None)
        live = dict(probe()) if probe else {}
        if self.nat_applied:
            live["nat_rules"] = list(self.nat_plan.teardown_cmds)
        if self.emulator is not None and not self.emulator.stopped:
            live["netemu"] = True
        running = [j.name for j in self.collectors.host.values() if j.running]
        if running:
            live.setdefault("host_jobs", running)
        return live

    def _finish(self):
        self.manifest.artifacts = {
            name: rel for name, rel in ARTIFACTS.items()
            if name == "manifest" or (self.run_dir / rel).exists()
        }
        self.manifest.write(self.run_dir / ARTIFACTS["manifest"])


def run_pipeline(cfg: RunConfig, backend=Backend.QEMU, scenario=None, recorder=None,
                 run_id=None, driver=None, **kwargs) -> RunManifest:
    if driver is None:
        backend = Backend(backend)
        driver = MockDriver(scenario) if backend is Backend.MOCK else QemuDriver()
    return Pipeline(cfg, driver, recorder=recorder, run_id=run_id, **kwargs).run()
