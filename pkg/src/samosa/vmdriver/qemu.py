"""Backend driving a real QEMU process and reaching the guest over ssh/scp."""

from __future__ import annotations

import itertools
import logging
import shlex
import subprocess
from pathlib import Path

from ..errors import (
    BootTimeout,
    ExecTimeout,
    GuestPathError,
    SpawnError,
    SshError,
    TransferError,
)
from .boot import clone_snapshot
from .common import (
    Backend,
    BootCommand,
    ClockSample,
    GuestExecResult,
    GuestJob,
    HostJob,
    VmHandle,
    WallClock,
    kill_process_tree,
)

log = logging.getLogger(__name__)

SSH_EXIT_ERROR = 255
JOB_DIR = "/tmp/samosa-jobs"


class QemuDriver:
    backend = Backend.QEMU

    def __init__(self, ssh: str = "ssh", scp: str = "scp", qemu_img: str | None = "qemu-img",
                 connect_timeout_s: int = 5, poll_interval_s: float = 2.0):
        self.clock = WallClock()
        self.ssh = ssh
        self.scp = scp
        self.qemu_img = qemu_img
        self.connect_timeout_s = connect_timeout_s
        self.poll_interval_s = poll_interval_s
        self._proc: subprocess.Popen | None = None
        self._qemu_stderr = None
        self._job_ids = itertools.count(1)
        self._jobs: dict[str, GuestJob] = {}

    # -- argv helpers -----------------------------------------------------

    def _ssh_opts(self, handle: VmHandle, port_flag: str) -> list[str]:
        opts = [
            "-o", "BatchMode=yes",
            "-o", "StrictHostKeyChecking=no",
            "-o", "UserKnownHostsFile=/dev/null",
            "-o", "LogLevel=ERROR",
            "-o", f"ConnectTimeout={self.connect_timeout_s}",
            port_flag, str(handle.ssh_port),
        ]
        if handle.ssh_key:
            opts += ["-i", handle.ssh_key]
        return opts

    def ssh_argv(self, handle: VmHandle, command: str) -> list[str]:
        return [self.ssh, *self._ssh_opts(handle, "-p"), f"{handle.ssh_user}@{handle.guest_ip}", "--", command]

    def scp_argv(self, handle: VmHandle, src: str, dst: str) -> list[str]:
        return [self.scp, "-q", *self._ssh_opts(handle, "-P"), src, dst]

    def _remote(self, handle: VmHandle, path: str) -> str:
        return f"{handle.ssh_user}@{handle.guest_ip}:{path}"

    # -- lifecycle ----------------------------------------------------------

    def enter_step(self, step) -> None:
        pass

    def attach_network(self, endpoints) -> None:
        pass

    def clone_snapshot(self, profile, run_dir) -> Path:
        return clone_snapshot(profile, run_dir, self.qemu_img)

    def boot(self, cmd: BootCommand, profile, timeout_s: float) -> VmHandle:
        run_dir = cmd.run_dir
        self._qemu_stderr = open(run_dir / "qemu.stderr", "ab")
        boot_ts = self.clock.now_ns()
        try:
            self._proc = subprocess.Popen(list(cmd.tokens), stdin=subprocess.DEVNULL,
                                          stdout=self._qemu_stderr, stderr=subprocess.STDOUT,
                                          start_new_session=True)
        except OSError as exc:
            self._qemu_stderr.close()
            raise SpawnError(f"cannot start {cmd.tokens[0]}: {exc}") from exc
        handle = VmHandle(
            backend=Backend.QEMU,
            guest_ip=profile.guest_ip,
            ssh_port=profile.ssh_port,
            snapshot_path=Path(cmd.snapshot),
            boot_ts=boot_ts,
            run_dir=run_dir,
            emulator_pid=self._proc.pid,
            ssh_user=profile.ssh_user,
            ssh_key=profile.ssh_key,
        )
        deadline = boot_ts + int(timeout_s * 1e9)
        while True:
            if self._proc.poll() is not None:
                self._close_stderr()
                raise SpawnError(f"emulator exited during boot with status {self._proc.returncode}")
            try:
                res = subprocess.run(self.ssh_argv(handle, "true"), capture_output=True,
                                     timeout=max(1, self.connect_timeout_s + 1))
                if res.returncode == 0:
                    log.info("guest %s reachable after %.1fs", profile.guest_ip,
                             (self.clock.now_ns() - boot_ts) / 1e9)
                    return handle
            except (subprocess.TimeoutExpired, OSError):
                pass
            if self.clock.now_ns() >= deadline:
                kill_process_tree(self._proc)
                self._close_stderr()
                raise BootTimeout(f"guest not reachable over ssh within {timeout_s}s")
            self.clock.sleep(self.poll_interval_s)

    def _close_stderr(self):
        if self._qemu_stderr is not None:
            self._qemu_stderr.close()
            self._qemu_stderr = None

    @property
    def emulator_running(self) -> bool:
        return self._proc is not None and self._proc.poll() is None

    def shutdown(self, handle: VmHandle, grace_s: float = 30) -> None:
        if self._proc is None:
            return
        if self._proc.poll() is None:
            try:
                subprocess.run(self.ssh_argv(handle, "poweroff || shutdown -h now"),
                               capture_output=True, timeout=10)
            except (subprocess.TimeoutExpired, OSError):
                pass
            try:
                self._proc.wait(timeout=grace_s)
            except subprocess.TimeoutExpired:
                log.warning("guest did not power off within %ss; terminating emulator", grace_s)
                kill_process_tree(self._proc)
        for job in self._jobs.values():
            if job.proc is not None:
                kill_process_tree(job.proc, grace_s=1)
        self._jobs.clear()
        self._close_stderr()

    # -- guest access -------------------------------------------------------

    def exec_guest(self, handle: VmHandle, command: str, timeout_s: float = 60,
                   background: bool = False, stdout_path=None, stderr_path=None):
        if background:
            return self._exec_background(handle, command, stdout_path, stderr_path)
        started = self.clock.now_ns()
        try:
            proc = subprocess.Popen(self.ssh_argv(handle, command), stdin=subprocess.DEVNULL,
                                    stdout=subprocess.PIPE, stderr=subprocess.PIPE, start_new_session=True)
        except OSError as exc:
            raise SshError(f"cannot run {self.ssh}: {exc}") from exc
        try:
            out, err = proc.communicate(timeout=timeout_s)
        except subprocess.TimeoutExpired:
            # dropping the ssh session sends SIGHUP to the remote command
            kill_process_tree(proc, grace_s=1)
            proc.communicate()
            raise ExecTimeout(f"{command!r} exceeded {timeout_s}s") from None
        ended = self.clock.now_ns()
        if proc.returncode == SSH_EXIT_ERROR:
            raise SshError(err.decode(errors="replace").strip() or "ssh failed")
        if stdout_path:
            Path(stdout_path).write_bytes(out)
        if stderr_path:
            Path(stderr_path).write_bytes(err)
        return GuestExecResult(proc.returncode, out, err, started, ended)

    def _exec_background(self, handle, command, stdout_path, stderr_path) -> GuestJob:
        job_id = f"job{next(self._job_ids)}"
        pidfile = f"{JOB_DIR}/{job_id}.pid"
        # setsid makes the job its own process group so halting reaches children
        inner = f"echo $$ > {pidfile}; exec sh -c {shlex.quote(command)}"
        remote = f"mkdir -p {JOB_DIR} && exec setsid -w sh -c {shlex.quote(inner)}"
        out = open(stdout_path, "wb") if stdout_path else subprocess.DEVNULL
        err = open(stderr_path, "wb") if stderr_path else subprocess.DEVNULL
        started = self.clock.now_ns()
        try:
            proc = subprocess.Popen(self.ssh_argv(handle, remote), stdin=subprocess.DEVNULL,
                                    stdout=out, stderr=err, start_new_session=True)
        except OSError as exc:
            raise SshError(f"cannot run {self.ssh}: {exc}") from exc
        finally:
            for fh in (out, err):
                if fh is not subprocess.DEVNULL:
                    fh.close()
        job = GuestJob(job_id, command, started, pidfile, proc)
        self._jobs[job_id] = job
        return job

    def job_running(self, handle: VmHandle, job: GuestJob) -> bool:
        return job.proc is not None and job.proc.poll() is None

    def halt_job(self, handle: VmHandle, job: GuestJob, grace_s: float = 2) -> None:
        # dash's kill builtin rejects "--", so the group is passed as -PGID directly;
        # the reap loop tolerates a zombie that its parent has not collected yet
        script = (
            f"test -f {job.pidfile} || exit 0; pg=$(cat {job.pidfile}); "
            f"kill -TERM -$pg 2>/dev/null; sleep {grace_s}; kill -KILL -$pg 2>/dev/null; "
            "i=0; while kill -0 -$pg 2>/dev/null; do "
            "i=$((i+1)); [ $i -ge 20 ] && exit 1; sleep 0.1; done; "
            f"rm -f {job.pidfile}"
        )
        try:
            res = self.exec_guest(handle, script, timeout_s=grace_s + 30)
            if res.exit_code != 0:
                raise SshError(f"{job.job_id} still alive after SIGKILL")
        finally:
            if job.proc is not None:
                try:
                    job.proc.wait(timeout=5)
                except subprocess.TimeoutExpired:
                    kill_process_tree(job.proc, grace_s=1)
            self._jobs.pop(job.job_id, None)

    def copy_in(self, handle: VmHandle, local, guest_path: str, executable: bool = False) -> None:
        self._scp(handle, str(local), self._remote(handle, guest_path), guest_path)
        if executable:
            res = self.exec_guest(handle, f"chmod +x {shlex.quote(guest_path)}")
            if res.exit_code != 0:
                raise TransferError(f"chmod failed on {guest_path}")

    def copy_out(self, handle: VmHandle, guest_path: str, local) -> None:
        self._scp(handle, self._remote(handle, guest_path), str(local), guest_path)

    def _scp(self, handle, src, dst, guest_path):
        try:
            res = subprocess.run(self.scp_argv(handle, src, dst), capture_output=True, timeout=600)
        except subprocess.TimeoutExpired as exc:
            raise TransferError(f"scp of {guest_path} timed out") from exc
        except OSError as exc:
            raise TransferError(f"cannot run {self.scp}: {exc}") from exc
        if res.returncode != 0:
            msg = res.stderr.decode(errors="replace").strip()
            if "No such file or directory" in msg or "Not a directory" in msg:
                raise GuestPathError(f"{guest_path}: {msg}")
            raise TransferError(f"scp {guest_path} failed: {msg}")

    def sample_guest_clock(self, handle: VmHandle) -> ClockSample:
        before = self.clock.now_ns()
        res = self.exec_guest(handle, "date +%s%N", timeout_s=30)
        after = self.clock.now_ns()
        try:
            guest = int(res.stdout.strip())
        except ValueError as exc:
            raise SshError(f"unexpected guest clock output {res.stdout!r}") from exc
        return ClockSample(guest, before, after)

    # -- host collectors ------------------------------------------------------

    def spawn_host_job(self, name: str, argv, out_path) -> HostJob:
        log_path = Path(out_path).parent / f"{name}.log"
        return HostJob.spawn(name, argv, log_path, self.clock)
