"""VM backends: real QEMU over ssh, and a scripted mock."""

from .boot import build_boot_command, clone_snapshot, image_format
from .common import (
    Backend,
    BootCommand,
    ClockSample,
    GuestExecResult,
    GuestJob,
    HostJob,
    VirtualClock,
    VmHandle,
    WallClock,
    best_clock_sample,
)
from .mock import MockDriver, ScenarioScript, ScriptedResult, load_scenario, synthetic_scenario
from .qemu import QemuDriver


def make_driver(backend, scenario=None):
    backend = Backend(backend)
    if backend is Backend.MOCK:
        return MockDriver(scenario)
    return QemuDriver()
