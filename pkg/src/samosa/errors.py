"""Exception hierarchy shared by every stage of the sandbox toolkit."""


class SamosaError(Exception):
    """Base class for all toolkit errors."""


class ConfigSyntaxError(SamosaError):
    """The run-config document could not be parsed at all."""


class SchemaError(SamosaError):
    """A document or argument is well-formed but violates the schema."""


class IoError(SamosaError, OSError):
    pass


# network emulator
class BindError(SamosaError):
    def __init__(self, port, reason=""):
        self.port = port
        super().__init__(f"cannot bind port {port}" + (f": {reason}" if reason else ""))


class MalformedQuery(SamosaError):
    pass


class MalformedRequest(SamosaError):
    pass


# vm driver
class MissingBaseImage(SamosaError):
    pass


class SpawnError(SamosaError):
    pass


class BootTimeout(SamosaError):
    pass


class SshError(SamosaError):
    pass


class ExecTimeout(SamosaError):
    pass


class TransferError(SamosaError):
    pass


class GuestPathError(TransferError):
    pass


class GuestToolMissing(SamosaError):
    pass


class UnsupportedArch(SamosaError):
    pass


# pcap
class BadMagic(SamosaError):
    pass


class TruncatedFile(SamosaError):
    pass


# analysis
class MissingArtifact(SamosaError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing artifacts: " + ", ".join(self.missing))


# pipeline
class PipelineError(SamosaError):
    """A pipeline step failed. ``step_log`` holds the steps executed so far."""

    def __init__(self, step, cause, step_log=()):
        self.step = step
        self.cause = cause
        self.step_log = list(step_log)
        super().__init__(f"{step}: {cause}")


class HookFailed(SamosaError):
    def __init__(self, result):
        self.result = result
        spec = result.spec
        super().__init__(
            f"{spec.stage.name} {spec.locus.name} hook {spec.command!r} "
            f"exited with {result.exit_code}"
        )


class InjectedFault(SamosaError):
    """Raised by the mock backend when a scenario asks for a failure."""
