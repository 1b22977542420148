"""QEMU command-line construction and snapshot cloning."""

from __future__ import annotations

import logging
import shutil
import subprocess
from pathlib import Path

from ..collectors.disk import trace_events_for
from ..config import Architecture, DiskDevice, VmProfile
from ..errors import IoError, MissingBaseImage, UnsupportedArch
from .common import BootCommand

log = logging.getLogger(__name__)

EMULATORS = {
    Architecture.X86_64: "qemu-system-x86_64",
    Architecture.ARM64: "qemu-system-aarch64",
    Architecture.PPC64LE: "qemu-system-ppc64",
}
DISK_CLAUSES = {
    DiskDevice.NVME: "nvme,drive=disk0,serial=samosa0",
    DiskDevice.VIRTIO_BLK: "virtio-blk-pci,drive=disk0",
}
QCOW2_MAGIC = b"QFI\xfb"
SNAPSHOT_NAME = "snapshot.img"


def image_format(path) -> str:
    try:
        with open(path, "rb") as fh:
            return "qcow2" if fh.read(4) == QCOW2_MAGIC else "raw"
    except OSError:
        return "qcow2"


def _mac_for(run_id: str) -> str:
    h = sum(ord(c) * (i + 1) for i, c in enumerate(run_id)) & 0xFFFFFF
    return "52:54:00:{:02x}:{:02x}:{:02x}".format(h >> 16, (h >> 8) & 0xFF, h & 0xFF)


def build_boot_command(profile: VmProfile, run_id: str, snapshot, tap: str) -> BootCommand:
    try:
        exe = EMULATORS[profile.arch]
    except KeyError:
        raise UnsupportedArch(str(profile.arch)) from None
    snapshot = Path(snapshot)
    run_dir = snapshot.parent
    trace_output = run_dir / "disk.trace"

    machine = profile.machine_type
    tokens = [exe, "-name", f"samosa-{run_id}"]
    if profile.kvm:
        tokens += ["-enable-kvm"]
        machine += ",accel=kvm"
    tokens += [
        "-machine", machine,
        "-cpu", profile.cpu_model,
        "-m", f"{profile.ram_mb}M",
        "-smp", str(profile.cores),
        "-display", "none",
        "-serial", f"file:{run_dir / 'vm.log'}",
        "-drive", f"file={snapshot},if=none,id=disk0,format={image_format(snapshot)}",
        "-device", DISK_CLAUSES[profile.disk_device],
        "-netdev", f"tap,id=net0,ifname={tap},script=no,downscript=no",
        "-device", f"virtio-net-pci,netdev=net0,mac={_mac_for(run_id)}",
        # log-backend trace lines get a host wall-clock prefix with -msg timestamp=on
        "-msg", "timestamp=on",
        "-D", str(trace_output),
    ]
    for event in trace_events_for(profile.disk_device):
        tokens += ["-trace", event]
    tokens += list(profile.extra_args)
    return BootCommand(tuple(tokens), trace_output, tap, snapshot)


def clone_snapshot(profile: VmProfile, run_dir, qemu_img: str | None = "qemu-img") -> Path:
    """Place a disposable copy of the base image at ``run_dir/snapshot.img``.

    A qcow2 overlay backed by the base is used when the base is qcow2 and
    ``qemu-img`` is available; otherwise the image is copied in full.
    """
    base = Path(profile.base_image)
    if not base.is_file():
        raise MissingBaseImage(f"base image {base} not found")
    run_dir = Path(run_dir)
    dest = run_dir / SNAPSHOT_NAME
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        if qemu_img and image_format(base) == "qcow2" and shutil.which(qemu_img):
            subprocess.run(
                [qemu_img, "create", "-q", "-f", "qcow2", "-F", "qcow2", "-b", str(base.resolve()), str(dest)],
                check=True, capture_output=True,
            )
        else:
            shutil.copyfile(base, dest)
    except subprocess.CalledProcessError as exc:
        raise IoError(f"qemu-img failed: {exc.stderr.decode(errors='replace').strip()}") from exc
    except OSError as exc:
        raise IoError(exc.errno, f"cannot clone snapshot: {exc.strerror}", str(dest)) from exc
    log.info("snapshot %s cloned from %s", dest, base)
    return dest
