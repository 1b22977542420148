"""Post-processing: align the four streams on the host clock, clip them to the
execution window and turn them into plot-ready series."""

from __future__ import annotations

import csv
import enum
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

from .collectors import (
    NOT_COUNTED,
    DiskEvent,
    DiskOp,
    HpcSample,
    PacketDirection,
    PacketRecord,
    SyscallEvent,
    parse_disk_trace,
    parse_hpc_csv,
    parse_pcap,
    parse_syscall_text,
)
from .collectors.events import Direction
from .config import DiskDevice, NetworkMode
from .errors import IoError, MissingArtifact
from .pipeline import ARTIFACTS, RunManifest

log = logging.getLogger(__name__)

NET_CSV = "net_series.csv"
SYSCALL_CSV = "syscall_scatter.csv"
DISK_CSV = "disk_scatter.csv"
HPC_CSV = "hpc_series.csv"
ENDPOINTS_CSV = "net_endpoints.csv"
SUMMARY_JSON = "analysis.json"
REPORT_SVG = "report.svg"
EMITTED = (NET_CSV, SYSCALL_CSV, DISK_CSV, HPC_CSV, ENDPOINTS_CSV, SUMMARY_JSON, REPORT_SVG)

FAKENET = ("fakenet_log", "fakenet_report")


@dataclass(frozen=True)
class Timeline:
    t0: int
    t1: int
    guest_offset_ns: int = 0

    def __post_init__(self):
        if not self.t0 < self.t1:
            raise ValueError(f"empty execution window [{self.t0}, {self.t1}]")

    def contains(self, ts: int) -> bool:
        return self.t0 <= ts <= self.t1


@dataclass(frozen=True)
class AlignedSyscall:
    host_ts_ns: int
    event: SyscallEvent


@dataclass(frozen=True)
class AlignedHpc:
    host_ts_ns: int
    sample: HpcSample


@dataclass
class AlignedStreams:
    syscalls: list
    hpc: list
    packets: list
    disk: list
    dropped: dict


def shift_syscalls(events, offset_ns: int) -> list[SyscallEvent]:
    """Map guest timestamps onto the host clock given guest = host + offset."""
    return [replace(e, guest_ts_ns=e.guest_ts_ns - offset_ns) for e in events]


def hpc_host_ns(sample: HpcSample, anchor_ns: int) -> int:
    return anchor_ns + round(Fraction(repr(sample.rel_ts_s)) * 10**9)


def align_and_clip(syscalls, hpc, packets, disk, tl: Timeline, hpc_anchor_ns: int) -> AlignedStreams:
    def clip(items, ts_of):
        kept = [x for x in items if tl.contains(ts_of(x))]
        return kept, len(items) - len(kept)

    sys_al = [AlignedSyscall(e.guest_ts_ns - tl.guest_offset_ns, e) for e in syscalls]
    hpc_al = [AlignedHpc(hpc_host_ns(s, hpc_anchor_ns), s) for s in hpc]
    out = {}
    dropped = {}
    for name, items, ts_of in (
        ("syscall", sys_al, lambda x: x.host_ts_ns),
        ("hpc", hpc_al, lambda x: x.host_ts_ns),
        ("network", list(packets), lambda x: x.host_ts_ns),
        ("disk", list(disk), lambda x: x.host_ts_ns),
    ):
        out[name], dropped[name] = clip(items, ts_of)
    return AlignedStreams(out["syscall"], out["hpc"], out["network"], out["disk"], dropped)


# -- network ------------------------------------------------------------------

@dataclass(frozen=True)
class NetBin:
    bin_start_ns: int
    tx_bytes: int
    rx_bytes: int
    tx_kb_s: Fraction
    rx_kb_s: Fraction


@dataclass
class NetSeries:
    window_ms: int
    bins: list

    @property
    def window_ns(self) -> int:
        return self.window_ms * 1_000_000

    def total_bytes(self, direction: PacketDirection) -> Fraction:
        """Bytes recovered from the rates alone: sum(rate * window) * 1024."""
        w_s = Fraction(self.window_ms, 1000)
        attr = "tx_kb_s" if direction is PacketDirection.TX else "rx_kb_s"
        return sum((getattr(b, attr) * w_s * 1024 for b in self.bins), Fraction(0))


def kb_per_s(nbytes: int, window_ms: int) -> Fraction:
    return Fraction(nbytes * 1000, 1024 * window_ms)


def aggregate_network(packets, tl: Timeline, window_ms: int = 1) -> NetSeries:
    if window_ms < 1:
        raise ValueError("window_ms must be positive")
    w = window_ms * 1_000_000
    n = (tl.t1 - tl.t0) // w + 1
    tx = [0] * n
    rx = [0] * n
    for p in packets:
        if not tl.contains(p.host_ts_ns):
            continue
        b = (p.host_ts_ns - tl.t0) // w
        if p.direction is PacketDirection.TX:
            tx[b] += p.wire_len_bytes
        elif p.direction is PacketDirection.RX:
            rx[b] += p.wire_len_bytes
    bins = [NetBin(tl.t0 + i * w, tx[i], rx[i], kb_per_s(tx[i], window_ms), kb_per_s(rx[i], window_ms))
            for i in range(n)]
    return NetSeries(window_ms, bins)


@dataclass(frozen=True)
class EndpointRow:
    remote_ip: str
    remote_port: int | None
    direction: str
    packets: int
    bytes: int


def endpoint_breakdown(packets) -> list[EndpointRow]:
    agg = defaultdict(lambda: [0, 0])
    for p in packets:
        if p.direction is PacketDirection.TX:
            key = (p.dst_ip, p.dst_port, "tx")
        elif p.direction is PacketDirection.RX:
            key = (p.src_ip, p.src_port, "rx")
        else:
            continue
        agg[key][0] += 1
        agg[key][1] += p.wire_len_bytes
    rows = [EndpointRow(ip or "", port, d, c, b) for (ip, port, d), (c, b) in agg.items()]
    rows.sort(key=lambda r: (-r.bytes, r.remote_ip, r.remote_port if r.remote_port is not None else -1, r.direction))
    return rows


# -- syscalls -----------------------------------------------------------------

@dataclass(frozen=True)
class RankedSyscall:
    syscall: str
    count: int
    timestamps: tuple


@dataclass
class SyscallScatter:
    k: int
    ranked: list


def rank_syscalls(events, k: int = 15) -> SyscallScatter:
    """Top-k syscalls by ENTER count; ties go to the lexicographically smaller name."""
    if k < 1:
        raise ValueError("k must be at least 1")
    stamps = defaultdict(list)
    for a in events:
        if a.event.direction is Direction.ENTER:
            stamps[a.event.syscall].append(a.host_ts_ns)
    order = sorted(stamps, key=lambda name: (-len(stamps[name]), name))[:k]
    return SyscallScatter(k, [RankedSyscall(n, len(stamps[n]), tuple(sorted(stamps[n]))) for n in order])


# -- disk -----------------------------------------------------------------------

class AddressUnit(enum.Enum):
    LBA = "lba"
    SECTOR = "sector"


UNIT_FOR_DEVICE = {DiskDevice.NVME: AddressUnit.LBA, DiskDevice.VIRTIO_BLK: AddressUnit.SECTOR}


@dataclass(frozen=True)
class DiskPoint:
    host_ts_ns: int
    address: int
    op: DiskOp


@dataclass
class DiskScatter:
    points: list
    unit: AddressUnit


def disk_scatter(events, device: DiskDevice) -> DiskScatter:
    pts = [DiskPoint(e.host_ts_ns, e.address, e.op) for e in events if e.device is device]
    pts.sort(key=lambda p: (p.host_ts_ns, p.address, p.op.value))
    return DiskScatter(pts, UNIT_FOR_DEVICE[device])


# -- hpc ------------------------------------------------------------------------

@dataclass
class HpcSeries:
    counters: dict
    not_counted: dict = field(default_factory=dict)
    units: dict = field(default_factory=dict)


def hpc_series(aligned) -> HpcSeries:
    counters = defaultdict(list)
    missing = Counter()
    units = {}
    for a in sorted(aligned, key=lambda a: a.host_ts_ns):
        s = a.sample
        if s.value is NOT_COUNTED:
            missing[s.counter] += 1
            continue
        pts = counters[s.counter]
        if pts and pts[-1][0] >= a.host_ts_ns:
            log.debug("dropping duplicate %s sample at %d", s.counter, a.host_ts_ns)
            continue
        pts.append((a.host_ts_ns, s.value))
        if s.unit:
            units.setdefault(s.counter, s.unit)
    for name in missing:
        counters.setdefault(name, [])
    return HpcSeries(dict(counters), dict(missing), units)


# -- report ---------------------------------------------------------------------

@dataclass
class AggregatedReport:
    run_id: str
    timeline: Timeline
    net: NetSeries
    syscalls: SyscallScatter
    disk: DiskScatter
    hpc: HpcSeries
    endpoints: list
    dropped: dict
    skipped: dict = field(default_factory=dict)
    clock_uncertainty_ns: int | None = None


def build_report(streams: AlignedStreams, manifest: RunManifest, window_ms: int = 1, top_k: int = 15,
                 skipped: dict | None = None) -> AggregatedReport:
    tl = Timeline(manifest.t_exec_start, manifest.t_exec_halt, manifest.guest_clock_offset_ns)
    return AggregatedReport(
        run_id=manifest.run_id,
        timeline=tl,
        net=aggregate_network(streams.packets, tl, window_ms),
        syscalls=rank_syscalls(streams.syscalls, top_k),
        disk=disk_scatter(streams.disk, DiskDevice(manifest.disk_device)),
        hpc=hpc_series(streams.hpc),
        endpoints=endpoint_breakdown(streams.packets),
        dropped=dict(streams.dropped),
        skipped=dict(skipped or {}),
        clock_uncertainty_ns=manifest.guest_clock_uncertainty_ns,
    )


def required_artifacts(manifest: RunManifest) -> list[str]:
    names = [k for k in ARTIFACTS if k not in FAKENET]
    if manifest.network_mode == NetworkMode.EMULATED.value:
        names += list(FAKENET)
    return [ARTIFACTS[k] for k in names]


def check_inventory(run_dir, manifest: RunManifest, extra=()) -> None:
    run_dir = Path(run_dir)
    missing = [name for name in [*required_artifacts(manifest), *extra] if not (run_dir / name).is_file()]
    if missing:
        raise MissingArtifact(missing)


def _fmt_frac(x: Fraction) -> str:
    return str(x)


def write_net_csv(series: NetSeries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_start_ns", "window_ms", "tx_bytes", "rx_bytes", "tx_kb_s", "rx_kb_s"])
        for b in series.bins:
            w.writerow([b.bin_start_ns, series.window_ms, b.tx_bytes, b.rx_bytes,
                        _fmt_frac(b.tx_kb_s), _fmt_frac(b.rx_kb_s)])


def load_net_csv(path, window_ms: int | None = None) -> NetSeries:
    bins = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            window_ms = int(row["window_ms"])
            bins.append(NetBin(int(row["bin_start_ns"]), int(row["tx_bytes"]), int(row["rx_bytes"]),
                               Fraction(row["tx_kb_s"]), Fraction(row["rx_kb_s"])))
    return NetSeries(window_ms or 1, bins)


def write_syscall_csv(sc: SyscallScatter, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "syscall", "count", "host_ts_ns"])
        for i, r in enumerate(sc.ranked, 1):
            for ts in r.timestamps:
                w.writerow([i, r.syscall, r.count, ts])


def load_syscall_csv(path, k: int | None = None) -> SyscallScatter:
    groups: dict[int, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            g = groups.setdefault(int(row["rank"]), [row["syscall"], int(row["count"]), []])
            g[2].append(int(row["host_ts_ns"]))
    ranked = [RankedSyscall(n, c, tuple(ts)) for _, (n, c, ts) in sorted(groups.items())]
    return SyscallScatter(k if k is not None else max(1, len(ranked)), ranked)


def write_disk_csv(ds: DiskScatter, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["host_ts_ns", "address", "op", "unit"])
        for p in ds.points:
            w.writerow([p.host_ts_ns, p.address, p.op.value, ds.unit.value])


def load_disk_csv(path, unit: AddressUnit | None = None) -> DiskScatter:
    pts = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            unit = AddressUnit(row["unit"])
            pts.append(DiskPoint(int(row["host_ts_ns"]), int(row["address"]), DiskOp(row["op"])))
    return DiskScatter(pts, unit or AddressUnit.LBA)


def _num(text: str):
    return float(text) if any(c in text for c in ".eE") or text in ("nan", "inf", "-inf") else int(text)


def write_hpc_csv(hs: HpcSeries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["counter", "host_ts_ns", "value"])
        for name in sorted(hs.counters):
            for ts, v in hs.counters[name]:
                w.writerow([name, ts, repr(v) if isinstance(v, float) else v])


def load_hpc_csv(path) -> HpcSeries:
    counters = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            counters[row["counter"]].append((int(row["host_ts_ns"]), _num(row["value"])))
    return HpcSeries(dict(counters))


def write_endpoints_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["remote_ip", "remote_port", "direction", "packets", "bytes"])
        for r in rows:
            w.writerow([r.remote_ip, "" if r.remote_port is None else r.remote_port, r.direction, r.packets, r.bytes])


def write_summary(report: AggregatedReport, path) -> None:
    doc = {
        "run_id": report.run_id,
        "t0": report.timeline.t0,
        "t1": report.timeline.t1,
        "guest_clock_offset_ns": report.timeline.guest_offset_ns,
        "guest_clock_uncertainty_ns": report.clock_uncertainty_ns,
        "dropped_outside_window": report.dropped,
        "skipped_unparsable": report.skipped,
        "hpc_not_counted": report.hpc.not_counted,
        "net_window_ms": report.net.window_ms,
        "syscall_top_k": report.syscalls.k,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def render_svg(report: AggregatedReport, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t0 = report.timeline.t0

    def secs(ts):
        return [(t - t0) / 1e9 for t in ts]

    with plt.rc_context({"svg.fonttype": "none", "svg.hashsalt": "samosa"}):
        fig, axes = plt.subplots(4, 1, figsize=(10, 12), sharex=True)
        ax = axes[0]
        for name in sorted(report.hpc.counters):
            pts = report.hpc.counters[name]
            if pts:
                ax.plot(secs([p[0] for p in pts]), [p[1] for p in pts], label=name, linewidth=0.8)
        ax.set_ylabel("count / interval")
        ax.set_title("Hardware performance counters")
        if report.hpc.counters:
            ax.legend(fontsize="x-small", loc="upper right")

        ax = axes[1]
        for op, color in ((DiskOp.READ, "tab:blue"), (DiskOp.WRITE, "tab:red")):
            pts = [p for p in report.disk.points if p.op is op]
            ax.scatter(secs([p.host_ts_ns for p in pts]), [p.address for p in pts], s=4, c=color, label=op.value)
        ax.set_ylabel(report.disk.unit.value.upper())
        ax.set_title("Disk accesses")
        ax.legend(fontsize="x-small", loc="upper right")

        ax = axes[2]
        names = [r.syscall for r in report.syscalls.ranked]
        for i, r in enumerate(report.syscalls.ranked):
            ax.scatter(secs(r.timestamps), [i] * len(r.timestamps), s=3, marker="|")
        ax.set_yticks(range(len(names)))
        ax.set_yticklabels(names, fontsize="x-small")
        ax.invert_yaxis()
        ax.set_title(f"Top {report.syscalls.k} syscalls")

        ax = axes[3]
        starts = secs([b.bin_start_ns for b in report.net.bins])
        ax.plot(starts, [float(b.tx_kb_s) for b in report.net.bins], label="TX", linewidth=0.8)
        ax.plot(starts, [float(b.rx_kb_s) for b in report.net.bins], label="RX", linewidth=0.8)
        ax.set_ylabel("KB/s")
        ax.set_xlabel("time since execution start (s)")
        ax.set_title(f"Network ({report.net.window_ms} ms bins)")
        ax.legend(fontsize="x-small", loc="upper right")

        fig.suptitle(f"run {report.run_id}")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)


def emit_outputs(report: AggregatedReport, out_dir, manifest: RunManifest | None = None) -> list[Path]:
    out_dir = Path(out_dir)
    if manifest is not None:
        check_inventory(out_dir, manifest)
    try:
        write_net_csv(report.net, out_dir / NET_CSV)
        write_syscall_csv(report.syscalls, out_dir / SYSCALL_CSV)
        write_disk_csv(report.disk, out_dir / DISK_CSV)
        write_hpc_csv(report.hpc, out_dir / HPC_CSV)
        write_endpoints_csv(report.endpoints, out_dir / ENDPOINTS_CSV)
        write_summary(report, out_dir / SUMMARY_JSON)
        render_svg(report, out_dir / REPORT_SVG)
    except OSError as exc:
        raise IoError(f"cannot write analysis outputs to {out_dir}: {exc}") from exc
    return [out_dir / name for name in EMITTED]


def load_streams(run_dir, manifest: RunManifest):
    """Parse the raw artifacts. Returns (syscalls, hpc, packets, disk, skipped)."""
    run_dir = Path(run_dir)
    ref = manifest.t_exec_start + manifest.guest_clock_offset_ns
    with open(run_dir / ARTIFACTS["syscalls_text"], encoding="utf-8", errors="replace") as fh:
        syscalls, s_skip = parse_syscall_text(fh, ref)
    hpc, h_skip = parse_hpc_csv((run_dir / ARTIFACTS["hpc"]).read_text(encoding="utf-8", errors="replace"))
    packets, p_skip = parse_pcap((run_dir / ARTIFACTS["pcap"]).read_bytes(), manifest.guest_ip)
    with open(run_dir / ARTIFACTS["disk_trace"], encoding="utf-8", errors="replace") as fh:
        disk, d_skip = parse_disk_trace(fh, DiskDevice(manifest.disk_device))
    skipped = {"syscall": s_skip, "hpc": h_skip, "network": p_skip, "disk": d_skip}
    return syscalls, hpc, packets, disk, skipped


def hpc_anchor(manifest: RunManifest) -> int:
    if manifest.hpc_anchor_ns is not None:
        return manifest.hpc_anchor_ns
    return manifest.t_exec_start


def analyze_run(run_dir, top_k: int = 15, window_ms: int = 1) -> AggregatedReport:
    run_dir = Path(run_dir)
    manifest_path = run_dir / ARTIFACTS["manifest"]
    if not manifest_path.is_file():
        raise MissingArtifact([ARTIFACTS["manifest"]])
    manifest = RunManifest.load(manifest_path)
    check_inventory(run_dir, manifest)
    if manifest.t_exec_start is None or manifest.t_exec_halt is None:
        raise MissingArtifact(["execution timestamps in run.json"])
    syscalls, hpc, packets, disk, skipped = load_streams(run_dir, manifest)
    tl = Timeline(manifest.t_exec_start, manifest.t_exec_halt, manifest.guest_clock_offset_ns)
    streams = align_and_clip(syscalls, hpc, packets, disk, tl, hpc_anchor(manifest))
    report = build_report(streams, manifest, window_ms, top_k, skipped)
    emit_outputs(report, run_dir, manifest)
    return report
