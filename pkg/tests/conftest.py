import dataclasses
import sys
from pathlib import Path

import pytest

from samosa.config import Architecture, RunConfig, default_profile


def make_config(tmp_path: Path, arch=Architecture.X86_64, **overrides) -> RunConfig:
    binary = tmp_path / "sample.bin"
    if not binary.exists():
        binary.write_bytes(b"\x7fELF" + bytes(60))
    image = tmp_path / "images" / f"{arch.value}.qcow2"
    image.parent.mkdir(exist_ok=True)
    if not image.exists():
        image.write_bytes(b"\x00" * 512)
    profile = dataclasses.replace(default_profile(arch), base_image=str(image))
    kwargs = dict(binary_path=str(binary), profile=profile, exec_duration_s=2,
                  output_dir=str(tmp_path / "runs"))
    kwargs.update(overrides)
    return RunConfig(**kwargs)


@pytest.fixture
def cfg(tmp_path):
    return make_config(tmp_path)


@pytest.fixture
def config_factory(tmp_path):
    def factory(**kw):
        return make_config(tmp_path, **kw)
    return factory


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
