"""Run configuration: VM profiles, hooks, network mode and collector settings.

A run is declared in a TOML document::

    binary = "samples/chaos"
    args = ["-v"]
    duration_s = 60
    network_mode = "emulated"      # or "nat"
    arch = "x86_64"                 # x86_64 | arm64 | ppc64le
    output_dir = "runs"

    [profile]                       # overrides on top of default_profile(arch)
    ram_mb = 8192

    [[hook]]
    stage = "pre_run"               # pre_setup | pre_run | post_run | post_shutdown
    locus = "guest"                 # host | guest
    command = "python3 /root/make_files.py"
    timeout_s = 120

    [hpc]
    events = ["instructions", "dTLB-loads"]
    interval_ms = 100

    [net]
    window_ms = 1

Everything here is an immutable value; ``validate_config`` never raises.
"""

from __future__ import annotations

import enum
import ipaddress
import re
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import tomli_w

from .errors import ConfigSyntaxError, SchemaError

DEFAULT_RAM_MB = 4096
DEFAULT_CORES = 4
DEFAULT_HPC_EVENTS = (
    "instructions",
    "branch-instructions",
    "dTLB-loads",
    "L1-dcache-loads",
    "mem-stores",
)
DEFAULT_HPC_INTERVAL_MS = 100
DEFAULT_NET_WINDOW_MS = 1
DEFAULT_HOOK_TIMEOUT_S = 300

_IFNAME_RE = re.compile(r"^[A-Za-z0-9_.-]{1,15}$")


class Architecture(enum.Enum):
    X86_64 = "x86_64"
    ARM64 = "arm64"
    PPC64LE = "ppc64le"


class DiskDevice(enum.Enum):
    NVME = "nvme"
    VIRTIO_BLK = "virtio_blk"


class HookStage(enum.Enum):
    PRE_SETUP = "pre_setup"
    PRE_RUN = "pre_run"
    POST_RUN = "post_run"
    POST_SHUTDOWN = "post_shutdown"


class Locus(enum.Enum):
    HOST = "host"
    GUEST = "guest"


class NetworkMode(enum.Enum):
    EMULATED = "emulated"
    NAT = "nat"


HOST_ONLY_STAGES = frozenset({HookStage.PRE_SETUP, HookStage.POST_SHUTDOWN})


@dataclass(frozen=True)
class VmProfile:
    arch: Architecture
    machine_type: str
    cpu_model: str
    ram_mb: int = DEFAULT_RAM_MB
    cores: int = DEFAULT_CORES
    disk_device: DiskDevice = DiskDevice.NVME
    kvm: bool = False
    base_image: str = ""
    guest_ip: str = "192.168.100.2"
    ssh_port: int = 22
    ssh_user: str = "root"
    os_label: str = ""
    ssh_key: str = ""
    # tmpfs inside the guest; keeps the syscall capture off the traced disk
    capture_dir: str = "/dev/shm/samosa"
    extra_args: tuple[str, ...] = ()


@dataclass(frozen=True)
class HookSpec:
    stage: HookStage
    locus: Locus
    command: str
    timeout_s: int = DEFAULT_HOOK_TIMEOUT_S


@dataclass(frozen=True)
class RunConfig:
    binary_path: str
    profile: VmProfile
    args: tuple[str, ...] = ()
    exec_duration_s: int = 60
    network_mode: NetworkMode = NetworkMode.EMULATED
    hooks: tuple[HookSpec, ...] = ()
    hpc_events: tuple[str, ...] = DEFAULT_HPC_EVENTS
    hpc_interval_ms: int = DEFAULT_HPC_INTERVAL_MS
    output_dir: str = "runs"
    net_window_ms: int = DEFAULT_NET_WINDOW_MS
    bridge: str = "sbr0"
    tap: str = "stap0"
    guest_subnet: str = "192.168.100.0/24"
    emulator_ip: str = "192.168.100.1"

    def hooks_for(self, stage: HookStage) -> list[HookSpec]:
        return [h for h in self.hooks if h.stage is stage]


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str
    message: str


_PROFILE_DEFAULTS = {
    Architecture.X86_64: dict(
        machine_type="q35",
        cpu_model="host",
        disk_device=DiskDevice.NVME,
        kvm=True,
        os_label="ubuntu-20.04",
    ),
    Architecture.ARM64: dict(
        machine_type="virt",
        cpu_model="cortex-a72",
        disk_device=DiskDevice.VIRTIO_BLK,
        kvm=False,
        os_label="ubuntu-20.04",
    ),
    Architecture.PPC64LE: dict(
        machine_type="pseries",
        cpu_model="power9",
        disk_device=DiskDevice.NVME,
        kvm=False,
        os_label="debian-trixie",
    ),
}


def default_profile(arch: Architecture) -> VmProfile:
    arch = Architecture(arch)
    return VmProfile(
        arch=arch,
        base_image=f"images/{arch.value}.qcow2",
        **_PROFILE_DEFAULTS[arch],
    )


def required_disk_device(arch: Architecture) -> DiskDevice:
    # the ARM virt board has no NVMe support
    return DiskDevice.VIRTIO_BLK if arch is Architecture.ARM64 else DiskDevice.NVME


# --------------------------------------------------------------------------
# validation


def validate_config(cfg: RunConfig) -> list[Violation]:
    out: list[Violation] = []

    def check(name, rule, fn, message):
        try:
            ok = fn()
        except Exception:  # a wrongly-typed field is itself a violation
            ok = False
        if not ok:
            out.append(Violation(name, rule, message))

    p = cfg.profile
    check("profile.arch", "closed-enum", lambda: isinstance(p.arch, Architecture),
          f"unknown architecture {p.arch!r}")
    if isinstance(p.arch, Architecture):
        want = required_disk_device(p.arch)
        check("profile.disk_device", "device-rule", lambda: p.disk_device is want,
              f"{p.arch.value} requires disk device {want.value}, got {getattr(p.disk_device, 'value', p.disk_device)}")
        check("profile.kvm", "kvm-rule", lambda: not p.kvm or p.arch is Architecture.X86_64,
              "kvm is only available for x86_64")
    check("profile.ram_mb", "positive", lambda: _is_int(p.ram_mb) and p.ram_mb > 0,
          "ram_mb must be a positive integer")
    check("profile.cores", "positive", lambda: _is_int(p.cores) and p.cores > 0,
          "cores must be a positive integer")
    check("profile.guest_ip", "ipv4", lambda: ipaddress.IPv4Address(p.guest_ip) is not None,
          f"guest_ip {p.guest_ip!r} is not an IPv4 address")
    check("profile.ssh_port", "port-range", lambda: _is_int(p.ssh_port) and 1 <= p.ssh_port <= 65535,
          "ssh_port must be in [1, 65535]")

    for i, hook in enumerate(cfg.hooks):
        name = f"hook[{i}]"
        check(f"{name}.locus", "locus-rule",
              lambda h=hook: h.locus is Locus.HOST or h.stage not in HOST_ONLY_STAGES,
              f"{getattr(hook.stage, 'value', hook.stage)} hooks can only run on the host")
        check(f"{name}.stage", "closed-enum", lambda h=hook: isinstance(h.stage, HookStage),
              f"unknown hook stage {hook.stage!r}")
        check(f"{name}.locus", "closed-enum", lambda h=hook: isinstance(h.locus, Locus),
              f"unknown hook locus {hook.locus!r}")
        check(f"{name}.command", "nonempty", lambda h=hook: bool(h.command.strip()),
              "hook command is empty")
        check(f"{name}.timeout_s", "positive", lambda h=hook: _is_int(h.timeout_s) and h.timeout_s > 0,
              "hook timeout_s must be a positive integer")

    check("binary", "regular-file", lambda: Path(cfg.binary_path).is_file(),
          f"binary {cfg.binary_path!r} does not exist or is not a regular file")
    check("duration_s", "positive", lambda: _is_int(cfg.exec_duration_s) and cfg.exec_duration_s >= 1,
          "duration_s must be >= 1")
    check("network_mode", "closed-enum", lambda: isinstance(cfg.network_mode, NetworkMode),
          f"unknown network mode {cfg.network_mode!r}")
    check("hpc.events", "nonempty", lambda: len(cfg.hpc_events) > 0 and all(cfg.hpc_events),
          "hpc.events must name at least one counter")
    check("hpc.interval_ms", "positive", lambda: _is_int(cfg.hpc_interval_ms) and cfg.hpc_interval_ms > 0,
          "hpc.interval_ms must be positive")
    check("net.window_ms", "positive", lambda: _is_int(cfg.net_window_ms) and cfg.net_window_ms > 0,
          "net.window_ms must be positive")
    check("net.bridge", "ifname", lambda: bool(_IFNAME_RE.match(cfg.bridge)), "invalid bridge name")
    check("net.tap", "ifname", lambda: bool(_IFNAME_RE.match(cfg.tap)), "invalid tap name")
    check("net.subnet", "cidr", lambda: ipaddress.IPv4Network(cfg.guest_subnet, strict=False) is not None,
          f"invalid subnet {cfg.guest_subnet!r}")
    check("net.emulator_ip", "ipv4", lambda: ipaddress.IPv4Address(cfg.emulator_ip) is not None,
          f"emulator_ip {cfg.emulator_ip!r} is not an IPv4 address")
    return out


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


# --------------------------------------------------------------------------
# document loading / saving

_TOP_KEYS = {"binary", "args", "duration_s", "network_mode", "arch", "profile",
             "hook", "hpc", "net", "output_dir"}
_HOOK_KEYS = {"stage", "locus", "command", "timeout_s"}
_HPC_KEYS = {"events", "interval_ms"}
_NET_KEYS = {"window_ms", "bridge", "tap", "subnet", "emulator_ip"}
_PROFILE_TYPES = {
    "machine_type": str, "cpu_model": str, "ram_mb": int, "cores": int,
    "disk_device": str, "kvm": bool, "base_image": str, "guest_ip": str,
    "ssh_port": int, "ssh_user": str, "os_label": str, "ssh_key": str,
    "capture_dir": str, "extra_args": list,
}


def _expect(value, typ, where):
    if typ is int and isinstance(value, bool):
        raise SchemaError(f"{where}: expected integer, got boolean")
    if not isinstance(value, typ):
        raise SchemaError(f"{where}: expected {typ.__name__}, got {type(value).__name__}")
    return value


def _enum(enum_cls, value, where):
    _expect(value, str, where)
    try:
        return enum_cls(value.lower())
    except ValueError:
        allowed = ", ".join(m.value for m in enum_cls)
        raise SchemaError(f"{where}: {value!r} is not one of {allowed}") from None


def _unknown(table, allowed, where):
    extra = sorted(set(table) - allowed)
    if extra:
        raise SchemaError(f"{where}: unknown field(s) {', '.join(extra)}")


def _positive(value, where):
    _expect(value, int, where)
    if value < 1:
        raise SchemaError(f"{where}: must be >= 1, got {value}")
    return value


def _str_list(value, where):
    _expect(value, list, where)
    for i, item in enumerate(value):
        _expect(item, str, f"{where}[{i}]")
    return tuple(value)


def config_from_dict(doc: dict, base_dir: Path | None = None) -> RunConfig:
    """Build a RunConfig from an already-parsed document."""
    _unknown(doc, _TOP_KEYS, "document")
    if "binary" not in doc:
        raise SchemaError("document: missing required field 'binary'")
    if "arch" not in doc:
        raise SchemaError("document: missing required field 'arch'")

    def resolve(p: str) -> str:
        path = Path(p).expanduser()
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return str(path)

    arch = _enum(Architecture, doc["arch"], "arch")
    profile = default_profile(arch)
    overrides = _expect(doc.get("profile", {}), dict, "profile")
    _unknown(overrides, set(_PROFILE_TYPES), "profile")
    changes = {}
    for key, value in overrides.items():
        where = f"profile.{key}"
        _expect(value, _PROFILE_TYPES[key], where)
        if key == "disk_device":
            value = _enum(DiskDevice, value, where)
        elif key in ("ram_mb", "cores"):
            value = _positive(value, where)
        elif key == "extra_args":
            value = _str_list(value, where)
        elif key in ("base_image", "ssh_key") and value:
            value = resolve(value)
        changes[key] = value
    if "base_image" not in changes:
        changes["base_image"] = resolve(profile.base_image)
    profile = replace(profile, **changes)

    hooks = []
    for i, table in enumerate(_expect(doc.get("hook", []), list, "hook")):
        where = f"hook[{i}]"
        _expect(table, dict, where)
        _unknown(table, _HOOK_KEYS, where)
        for key in ("stage", "locus", "command"):
            if key not in table:
                raise SchemaError(f"{where}: missing required field {key!r}")
        hooks.append(HookSpec(
            stage=_enum(HookStage, table["stage"], f"{where}.stage"),
            locus=_enum(Locus, table["locus"], f"{where}.locus"),
            command=_expect(table["command"], str, f"{where}.command"),
            timeout_s=_positive(table.get("timeout_s", DEFAULT_HOOK_TIMEOUT_S), f"{where}.timeout_s"),
        ))

    hpc = _expect(doc.get("hpc", {}), dict, "hpc")
    _unknown(hpc, _HPC_KEYS, "hpc")
    net = _expect(doc.get("net", {}), dict, "net")
    _unknown(net, _NET_KEYS, "net")
    events = _str_list(hpc.get("events", list(DEFAULT_HPC_EVENTS)), "hpc.events")
    if not events:
        raise SchemaError("hpc.events: must name at least one counter")

    defaults = RunConfig(binary_path="", profile=profile)
    return RunConfig(
        binary_path=resolve(_expect(doc["binary"], str, "binary")),
        profile=profile,
        args=_str_list(doc.get("args", []), "args"),
        exec_duration_s=_positive(doc.get("duration_s", defaults.exec_duration_s), "duration_s"),
        network_mode=_enum(NetworkMode, doc.get("network_mode", defaults.network_mode.value), "network_mode"),
        hooks=tuple(hooks),
        hpc_events=events,
        hpc_interval_ms=_positive(hpc.get("interval_ms", defaults.hpc_interval_ms), "hpc.interval_ms"),
        output_dir=resolve(_expect(doc.get("output_dir", defaults.output_dir), str, "output_dir")),
        net_window_ms=_positive(net.get("window_ms", defaults.net_window_ms), "net.window_ms"),
        bridge=_expect(net.get("bridge", defaults.bridge), str, "net.bridge"),
        tap=_expect(net.get("tap", defaults.tap), str, "net.tap"),
        guest_subnet=_expect(net.get("subnet", defaults.guest_subnet), str, "net.subnet"),
        emulator_ip=_expect(net.get("emulator_ip", defaults.emulator_ip), str, "net.emulator_ip"),
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"cannot read {path}: {exc}") from exc
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigSyntaxError(f"{path}: {exc}") from exc
    return config_from_dict(doc, base_dir=path.parent.resolve())


def config_to_dict(cfg: RunConfig) -> dict:
    """Inverse of config_from_dict; every field is written explicitly."""
    profile = {}
    for f in fields(VmProfile):
        if f.name == "arch":
            continue
        value = getattr(cfg.profile, f.name)
        if isinstance(value, enum.Enum):
            value = value.value
        elif isinstance(value, tuple):
            value = list(value)
        profile[f.name] = value
    return {
        "binary": cfg.binary_path,
        "args": list(cfg.args),
        "duration_s": cfg.exec_duration_s,
        "network_mode": cfg.network_mode.value,
        "arch": cfg.profile.arch.value,
        "output_dir": cfg.output_dir,
        "profile": profile,
        "hook": [
            {"stage": h.stage.value, "locus": h.locus.value, "command": h.command, "timeout_s": h.timeout_s}
            for h in cfg.hooks
        ],
        "hpc": {"events": list(cfg.hpc_events), "interval_ms": cfg.hpc_interval_ms},
        "net": {
            "window_ms": cfg.net_window_ms,
            "bridge": cfg.bridge,
            "tap": cfg.tap,
            "subnet": cfg.guest_subnet,
            "emulator_ip": cfg.emulator_ip,
        },
    }


def dump_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")
