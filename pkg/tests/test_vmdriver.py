import dataclasses
import hashlib
import os
import subprocess
import sys
import time
from pathlib import Path

import pytest

from samosa.config import Architecture, DiskDevice, default_profile
from samosa.errors import (
    BootTimeout,
    ExecTimeout,
    GuestPathError,
    InjectedFault,
    MissingBaseImage,
    SshError,
    UnsupportedArch,
)
from samosa.vmdriver import (
    Backend,
    BootCommand,
    ClockSample,
    MockDriver,
    QemuDriver,
    ScenarioScript,
    ScriptedResult,
    VirtualClock,
    best_clock_sample,
    build_boot_command,
    clone_snapshot,
    load_scenario,
    make_driver,
    synthetic_scenario,
)
from samosa.vmdriver.common import HostJob, WallClock

from conftest import make_config

# -- boot commands --------------------------------------------------------------


def test_x86_boot_command_snapshot(tmp_path):
    snap = tmp_path / "r1" / "snapshot.img"
    cmd = build_boot_command(default_profile(Architecture.X86_64), "r1", snap, "stap0")
    run = tmp_path / "r1"
    assert list(cmd.tokens) == [
        "qemu-system-x86_64", "-name", "samosa-r1", "-enable-kvm",
        "-machine", "q35,accel=kvm", "-cpu", "host", "-m", "4096M", "-smp", "4",
        "-display", "none", "-serial", f"file:{run / 'vm.log'}",
        "-drive", f"file={snap},if=none,id=disk0,format=qcow2",
        "-device", "nvme,drive=disk0,serial=samosa0",
        "-netdev", "tap,id=net0,ifname=stap0,script=no,downscript=no",
        "-device", "virtio-net-pci,netdev=net0,mac=52:54:00:00:00:d4",
        "-msg", "timestamp=on", "-D", str(run / "disk.trace"),
        "-trace", "pci_nvme_read", "-trace", "pci_nvme_write",
    ]
    assert cmd.trace_output == run / "disk.trace"
    assert cmd.run_dir == run


def test_arm_boot_command(tmp_path):
    toks = build_boot_command(default_profile(Architecture.ARM64), "r", tmp_path / "s.img", "t0").tokens
    assert toks[0] == "qemu-system-aarch64"
    assert toks[toks.index("-machine") + 1] == "virt"
    assert toks[toks.index("-cpu") + 1] == "cortex-a72"
    assert "virtio-blk-pci,drive=disk0" in toks
    assert not any("nvme" in t for t in toks)
    assert "-enable-kvm" not in toks


def test_ppc_boot_command(tmp_path):
    toks = build_boot_command(default_profile(Architecture.PPC64LE), "r", tmp_path / "s.img", "t0").tokens
    assert toks[0] == "qemu-system-ppc64"
    assert ("pseries", "power9") == (toks[toks.index("-machine") + 1], toks[toks.index("-cpu") + 1])
    assert "nvme,drive=disk0,serial=samosa0" in toks


def test_boot_command_is_deterministic_and_uses_profile(tmp_path):
    p = dataclasses.replace(default_profile(Architecture.ARM64), ram_mb=8192, cores=2, extra_args=("-s",))
    a = build_boot_command(p, "x", tmp_path / "s.img", "t")
    assert a == build_boot_command(p, "x", tmp_path / "s.img", "t")
    assert "8192M" in a.tokens and a.tokens[-1] == "-s"
    assert a.tokens[a.tokens.index("-smp") + 1] == "2"


def test_unsupported_arch(tmp_path):
    p = dataclasses.replace(default_profile(Architecture.X86_64), arch="mips")
    with pytest.raises(UnsupportedArch):
        build_boot_command(p, "r", tmp_path / "s.img", "t")


def test_raw_image_format_detected(tmp_path):
    img = tmp_path / "snapshot.img"
    img.write_bytes(bytes(512))
    toks = build_boot_command(default_profile(Architecture.X86_64), "r", img, "t").tokens
    assert f"file={img},if=none,id=disk0,format=raw" in toks


# -- snapshots ------------------------------------------------------------------


def test_clone_leaves_base_untouched(tmp_path):
    base = tmp_path / "base.qcow2"
    base.write_bytes(os.urandom(4096))
    before = hashlib.sha256(base.read_bytes()).hexdigest()
    p = dataclasses.replace(default_profile(Architecture.X86_64), base_image=str(base))
    a = clone_snapshot(p, tmp_path / "run-a", qemu_img=None)
    b = clone_snapshot(p, tmp_path / "run-b", qemu_img=None)
    assert a != b and a.read_bytes() == base.read_bytes()
    a.write_bytes(b"changed")
    assert hashlib.sha256(base.read_bytes()).hexdigest() == before


def test_clone_missing_base(tmp_path):
    p = dataclasses.replace(default_profile(Architecture.X86_64), base_image=str(tmp_path / "nope"))
    with pytest.raises(MissingBaseImage):
        clone_snapshot(p, tmp_path / "run")


# -- clocks ---------------------------------------------------------------------


def test_clock_sample_math():
    s = ClockSample(guest_ns=1_005_000_000, host_ns_before=999_000_000, host_ns_after=1_001_000_000)
    assert s.offset_ns == 5_000_000
    assert s.half_width_ns == 1_000_000
    wide = ClockSample(0, 0, 10)
    assert best_clock_sample([wide, s, ClockSample(0, 0, 10**9)]) is wide


def test_virtual_clock_ticks():
    c = VirtualClock(100, tick_ns=10)
    assert c.now_ns() == 110 and c.now_ns() == 120
    c.sleep(1e-6)
    assert c.peek_ns() == 1120


# -- mock driver ----------------------------------------------------------------


@pytest.fixture
def booted(tmp_path):
    cfg = make_config(tmp_path)
    drv = MockDriver(ScenarioScript())
    snap = drv.clone_snapshot(cfg.profile, tmp_path / "run")
    handle = drv.boot(build_boot_command(cfg.profile, "r", snap, "t"), cfg.profile, 60)
    return drv, handle, cfg


def test_mock_boot_delay(booted):
    drv, handle, _ = booted
    assert handle.backend is Backend.MOCK
    assert drv.clock.peek_ns() - handle.boot_ts >= 10_000_000
    assert (handle.run_dir / "disk.trace").exists()


def test_mock_echo_and_copy_round_trip(booted, tmp_path):
    drv, h, _ = booted
    r = drv.exec_guest(h, "echo hi")
    assert (r.exit_code, r.stdout) == (0, b"hi\n")
    src = tmp_path / "payload"
    src.write_bytes(os.urandom(300))
    drv.copy_in(h, src, "/tmp/payload")
    drv.copy_out(h, "/tmp/payload", tmp_path / "back")
    assert (tmp_path / "back").read_bytes() == src.read_bytes()
    with pytest.raises(GuestPathError):
        drv.copy_in(h, src, "/no/such/dir/file")
    with pytest.raises(GuestPathError):
        drv.copy_out(h, "/tmp/missing", tmp_path / "x")


def test_mock_background_job_until_halt(booted):
    drv, h, _ = booted
    job = drv.exec_guest(h, "/tmp/samosa/bin --flag", background=True)
    assert drv.job_running(h, job)
    assert job.job_id.encode() in drv.exec_guest(h, "ps").stdout
    drv.halt_job(h, job)
    assert not drv.job_running(h, job)
    assert job.job_id.encode() not in drv.exec_guest(h, "ps").stdout


def test_mock_job_natural_exit(tmp_path):
    cfg = make_config(tmp_path)
    drv = MockDriver(ScenarioScript(binary_runtime_ms=50))
    snap = drv.clone_snapshot(cfg.profile, tmp_path / "run")
    h = drv.boot(build_boot_command(cfg.profile, "r", snap, "t"), cfg.profile, 60)
    job = drv.exec_guest(h, "/tmp/samosa/bin", background=True)
    drv.clock.sleep(0.048)  # exec latency already advanced 1 ms
    assert drv.job_running(h, job)
    drv.clock.sleep(0.002)
    assert not drv.job_running(h, job)


def test_mock_exec_timeout(tmp_path):
    cfg = make_config(tmp_path)
    drv = MockDriver(ScenarioScript(responses=[("^slow", ScriptedResult(0, runtime_ms=5000))]))
    snap = drv.clone_snapshot(cfg.profile, tmp_path / "run")
    h = drv.boot(build_boot_command(cfg.profile, "r", snap, "t"), cfg.profile, 60)
    with pytest.raises(ExecTimeout):
        drv.exec_guest(h, "slow thing", timeout_s=1)


def test_mock_unreachable_ssh(tmp_path):
    cfg = make_config(tmp_path)
    drv = MockDriver(ScenarioScript(ssh_unreachable=True))
    snap = drv.clone_snapshot(cfg.profile, tmp_path / "run")
    with pytest.raises(BootTimeout):
        drv.boot(build_boot_command(cfg.profile, "r", snap, "t"), cfg.profile, 5)
    assert drv.live_resources() == {}


@pytest.mark.parametrize("skew", [5_000_000, 0, -50_000_000])
def test_mock_clock_offset_within_bracket(tmp_path, skew):
    cfg = make_config(tmp_path)
    drv = MockDriver(ScenarioScript(clock_skew_ns=skew, seed=3))
    snap = drv.clone_snapshot(cfg.profile, tmp_path / "run")
    h = drv.boot(build_boot_command(cfg.profile, "r", snap, "t"), cfg.profile, 60)
    samples = [drv.sample_guest_clock(h) for _ in range(10)]
    for s in samples:
        assert abs(s.offset_ns - skew) <= s.half_width_ns
    for a in samples:
        for b in samples:
            assert abs(a.offset_ns - b.offset_ns) <= 2 * max(a.half_width_ns, b.half_width_ns)


def test_mock_shutdown_writes_vm_log(booted):
    drv, h, _ = booted
    drv.exec_guest(h, "echo hi")
    drv.shutdown(h)
    text = (h.run_dir / "vm.log").read_text()
    assert "Linux version" in text and "$ echo hi" in text and "Power down" in text
    assert drv.live_resources() == {}
    with pytest.raises(SshError):
        drv.exec_guest(h, "echo again")


def test_mock_hung_shutdown_still_returns(tmp_path):
    cfg = make_config(tmp_path)
    drv = MockDriver(ScenarioScript(hang_on_shutdown=True))
    snap = drv.clone_snapshot(cfg.profile, tmp_path / "run")
    h = drv.boot(build_boot_command(cfg.profile, "r", snap, "t"), cfg.profile, 60)
    drv.shutdown(h, grace_s=3)
    assert not drv.vm_running
    assert "hung" in (h.run_dir / "vm.log").read_text()


def test_mock_fault_injection():
    drv = MockDriver(ScenarioScript(fail_at="BOOT_VM"))
    drv.enter_step("CLONE_SNAPSHOT")
    with pytest.raises(InjectedFault):
        drv.enter_step("BOOT_VM")


def test_synthetic_and_file_scenarios(tmp_path):
    cfg = make_config(tmp_path)
    s = synthetic_scenario(cfg, seed=1)
    assert s.syscall_text and s.hpc_csv and len(s.disk_trace_lines) == 300
    assert synthetic_scenario(cfg, seed=1) == s
    (tmp_path / "sys.txt").write_text("1 1.0 0 a (1) > read\n")
    (tmp_path / "sc.toml").write_text(
        'syscall_file = "sys.txt"\nboot_delay_ms = 5\n'
        '[[responses]]\npattern = "^uname"\nstdout = "Linux\\n"\n')
    loaded = load_scenario(tmp_path / "sc.toml", cfg)
    assert loaded.syscall_text.startswith("1 1.0")
    assert loaded.boot_delay_ms == 5
    assert loaded.respond("uname -a").stdout == b"Linux\n"
    assert isinstance(make_driver("mock", loaded), MockDriver)


# -- QEMU driver against stand-in ssh/scp -------------------------------------------

FAKE_SSH = """#!/bin/sh
# run the command after "--" locally
while [ $# -gt 0 ] && [ "$1" != "--" ]; do shift; done
shift
case "$*" in
    *poweroff*) exit 0 ;;  # never power off the test host
esac
exec sh -c "$*"
"""

DEAD_SSH = "#!/bin/sh\necho 'ssh: connect to host: Connection refused' >&2\nexit 255\n"

FAKE_SCP = f"""#!{sys.executable}
import shutil, sys
def local(p):
    head, sep, tail = p.partition(":")
    return tail if sep and "@" in head else p
src, dst = map(local, sys.argv[-2:])
try:
    shutil.copyfile(src, dst)
except FileNotFoundError as exc:
    sys.stderr.write(f"scp: {{exc.filename}}: No such file or directory\\n")
    sys.exit(1)
"""


def script(tmp_path, name, body):
    path = tmp_path / name
    path.write_text(body)
    path.chmod(0o755)
    return str(path)


@pytest.fixture
def qemu_env(tmp_path):
    cfg = make_config(tmp_path)
    drv = QemuDriver(ssh=script(tmp_path, "ssh", FAKE_SSH), scp=script(tmp_path, "scp", FAKE_SCP),
                     qemu_img=None, poll_interval_s=0.05)
    run_dir = tmp_path / "run"
    snap = drv.clone_snapshot(cfg.profile, run_dir)
    cmd = BootCommand(("sleep", "60"), run_dir / "disk.trace", "t", snap)
    return drv, cmd, cfg


def test_ssh_argv_shape(qemu_env):
    drv, cmd, cfg = qemu_env
    h = dataclasses.replace(drv.boot(cmd, cfg.profile, 10), ssh_key="/k")
    argv = drv.ssh_argv(h, "uname -a")
    assert argv[-3:] == ["root@192.168.100.2", "--", "uname -a"]
    assert "BatchMode=yes" in argv and argv[argv.index("-i") + 1] == "/k"
    scp = drv.scp_argv(h, "a", "b")
    assert scp[scp.index("-P") + 1] == "22" and "-p" not in scp
    drv.shutdown(h, grace_s=1)


def test_qemu_exec_copy_and_jobs(qemu_env, tmp_path):
    drv, cmd, cfg = qemu_env
    h = drv.boot(cmd, cfg.profile, 10)
    assert h.emulator_pid and drv.emulator_running
    r = drv.exec_guest(h, "echo hi")
    assert (r.exit_code, r.stdout) == (0, b"hi\n")
    assert drv.exec_guest(h, "exit 3").exit_code == 3
    with pytest.raises(ExecTimeout):
        drv.exec_guest(h, "sleep 5", timeout_s=0.3)

    src = tmp_path / "payload"
    src.write_bytes(os.urandom(100))
    guest_copy = tmp_path / "guest-copy"
    drv.copy_in(h, src, str(guest_copy), executable=True)
    assert os.access(guest_copy, os.X_OK)
    drv.copy_out(h, str(guest_copy), tmp_path / "back")
    assert (tmp_path / "back").read_bytes() == src.read_bytes()
    with pytest.raises(GuestPathError):
        drv.copy_out(h, str(tmp_path / "missing"), tmp_path / "x")

    out = tmp_path / "job.out"
    job = drv.exec_guest(h, "echo started; sleep 30", background=True, stdout_path=out)
    deadline = time.time() + 5
    while not out.read_bytes() and time.time() < deadline:
        time.sleep(0.02)
    assert drv.job_running(h, job)
    drv.halt_job(h, job, grace_s=0.1)
    assert not drv.job_running(h, job)
    assert out.read_bytes() == b"started\n"

    before = drv.clock.now_ns()
    s = drv.sample_guest_clock(h)
    assert before <= s.host_ns_before <= s.host_ns_after
    assert abs(s.offset_ns) < 10**9  # same machine

    drv.shutdown(h, grace_s=0.5)
    assert not drv.emulator_running


def test_qemu_boot_timeout_kills_emulator(tmp_path):
    cfg = make_config(tmp_path)
    drv = QemuDriver(ssh=script(tmp_path, "ssh", DEAD_SSH), scp="scp", qemu_img=None, poll_interval_s=0.05)
    snap = drv.clone_snapshot(cfg.profile, tmp_path / "run")
    with pytest.raises(BootTimeout):
        drv.boot(BootCommand(("sleep", "60"), tmp_path / "run" / "disk.trace", "t", snap), cfg.profile, 0.3)
    assert not drv.emulator_running


def test_qemu_ssh_failure_is_ssh_error(qemu_env, tmp_path):
    drv, cmd, cfg = qemu_env
    h = drv.boot(cmd, cfg.profile, 10)
    drv.ssh = script(tmp_path, "dead", DEAD_SSH)
    with pytest.raises(SshError, match="refused"):
        drv.exec_guest(h, "true")
    drv.shutdown(h, grace_s=0.2)


def test_host_job_stops_process_group(tmp_path):
    job = HostJob.spawn("sleeper", ["sh", "-c", "sleep 30 & sleep 30"], tmp_path / "log", WallClock())
    assert job.running
    stop = job.stop(grace_s=1)
    assert stop >= job.start_ts and not job.running
    assert job.stop() == stop
    ps = subprocess.run(["ps", "-o", "pid=", "-g", str(job.proc.pid)], capture_output=True, text=True)
    assert ps.stdout.strip() == ""
