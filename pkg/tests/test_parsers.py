import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from samosa.collectors import (
    NOT_COUNTED,
    Direction,
    DiskEvent,
    DiskOp,
    HpcSample,
    PacketDirection,
    PacketRecord,
    SyscallEvent,
    TransportProto,
    dump_ndjson,
    load_ndjson,
    parse_disk_trace,
    parse_hpc_csv,
    parse_pcap,
    parse_syscall_text,
)
from samosa.collectors.disk import format_disk_line, parse_disk_line, trace_events_for
from samosa.collectors.hpc import perf_command
from samosa.collectors.pcap import ipv4_frame, pcap_header, pcap_record, tcpdump_command
from samosa.collectors.syscalls import format_syscall_line, parse_syscall_line, parse_timestamp
from samosa.config import DiskDevice
from samosa.errors import BadMagic, TruncatedFile

# -- syscalls ---------------------------------------------------------------

DAY0 = 1_700_000_000 * 10**9  # 2023-11-14T22:13:20Z


def test_time_of_day_line():
    ev = parse_syscall_line("12 10:01:02.123456789 1 bash (2817) > openat fd=3 name=/etc/passwd")
    assert (ev.syscall, ev.direction, ev.proc_name, ev.tid) == ("openat", Direction.ENTER, "bash", 2817)
    assert ev.info == "fd=3 name=/etc/passwd"
    assert ev.guest_ts_ns == ((10 * 60 + 1) * 60 + 2) * 10**9 + 123456789


def test_time_of_day_anchored_to_reference_day():
    ts = parse_timestamp("22:13:21.5", DAY0)
    assert ts == DAY0 + 1_500_000_000
    # just after midnight relative to a reference just before it
    late = DAY0 - DAY0 % (86_400 * 10**9) + 86_399 * 10**9
    assert parse_timestamp("00:00:01.0", late) == late + 2 * 10**9


def test_epoch_line_and_exit_direction():
    ev = parse_syscall_line("7 1700000000.000000042 3 my proc (99) < read res=5 data=...")
    assert ev.guest_ts_ns == DAY0 + 42
    assert ev.direction is Direction.EXIT
    assert ev.proc_name == "my proc"


def test_empty_and_corrupt_lines():
    assert parse_syscall_text("") == ([], 0)
    text = ("1 1.000000001 0 a (1) > read\n"
            "garbage here\n"
            "\n"
            "2 1.000000002 0 a (1) < read res=0\n")
    events, skipped = parse_syscall_text(text)
    assert [e.guest_ts_ns for e in events] == [1_000_000_001, 1_000_000_002]
    assert skipped == 1


def test_format_round_trip():
    ev = SyscallEvent(DAY0 + 123, "kinsing", 4242, Direction.ENTER, "connect", "fd=5 addr=1.2.3.4:80")
    assert parse_syscall_line(format_syscall_line(9, ev, cpu=2)) == ev


# -- hpc --------------------------------------------------------------------

def test_hpc_row():
    [s], skipped = parse_hpc_csv("1.000123,4567,,instructions,100200,100.00,,\n")
    assert s == HpcSample(1.000123, "instructions", 4567, "")
    assert skipped == 0


def test_hpc_not_counted_and_comments():
    text = ("# started on Mon\n\n"
            "     0.100133201,<not counted>,,dTLB-loads,0,0.00,,\n"
            "     0.100133201,<not supported>,,mem-stores,0,0.00,,\n"
            "0.2,12.5,msec,task-clock,200,100.00,,\n")
    samples, skipped = parse_hpc_csv(text)
    assert [s.value for s in samples] == [NOT_COUNTED, NOT_COUNTED, 12.5]
    assert samples[2].unit == "msec"
    assert skipped == 0


def test_hpc_two_counters_three_intervals():
    rows = [f"{t}.0,{t * 10 + i},,{c},1,100.00,," for t in (1, 2, 3) for i, c in enumerate(("a", "b"))]
    samples, skipped = parse_hpc_csv("\n".join(rows))
    assert len(samples) == 6 and skipped == 0
    for c in ("a", "b"):
        ts = [s.rel_ts_s for s in samples if s.counter == c]
        assert ts == sorted(ts)


def test_hpc_malformed_rows_are_skipped():
    samples, skipped = parse_hpc_csv("x,1,,a\n1.0,abc,,a\n1.0,5\n1.0,5,,b,1\n")
    assert len(samples) == 1 and skipped == 3


def test_perf_command():
    argv = perf_command(4321, ["instructions", "dTLB-loads"], 100, "/r/hpc.csv")
    assert argv == ["perf", "stat", "-x", ",", "-I", "100", "-e", "instructions,dTLB-loads",
                    "-p", "4321", "-o", "/r/hpc.csv"]


# -- pcap -------------------------------------------------------------------

GUEST = "10.0.2.15"


def udp_dns_packet():
    # 14 ethernet + 20 IPv4 + 8 UDP + 36 payload = 78 wire bytes
    return ipv4_frame(GUEST, "8.8.8.8", 17, 40000, 53, b"\x00" * 36)


@pytest.mark.parametrize("big_endian", [False, True])
@pytest.mark.parametrize("nanos", [False, True])
def test_single_udp_packet(big_endian, nanos):
    frame = udp_dns_packet()
    assert len(frame) == 78
    data = pcap_header(nanos=nanos, big_endian=big_endian) + pcap_record(
        5 * 10**9 + 123456000, frame, nanos=nanos, big_endian=big_endian)
    [rec], skipped = parse_pcap(data, GUEST)
    assert skipped == 0
    assert rec == PacketRecord(5_123_456_000, GUEST, "8.8.8.8", 40000, 53, TransportProto.UDP, 78,
                               PacketDirection.TX)


def test_header_only_capture():
    assert parse_pcap(pcap_header(), GUEST) == ([], 0)


def test_truncated_tail_counts_one_skip():
    good = pcap_record(10**9, udp_dns_packet())
    data = pcap_header() + good + good[:30]
    records, skipped = parse_pcap(data, GUEST)
    assert len(records) == 1 and skipped == 1


def test_bad_magic_and_truncated_header():
    with pytest.raises(BadMagic, match="pcapng"):
        parse_pcap(b"\x0a\x0d\x0d\x0a" + bytes(40), GUEST)
    with pytest.raises(BadMagic):
        parse_pcap(b"hello world, not a capture", GUEST)
    with pytest.raises(TruncatedFile):
        parse_pcap(pcap_header()[:10], GUEST)


def test_snaplen_truncated_packet_keeps_wire_length():
    frame = ipv4_frame("1.1.1.1", GUEST, 6, 443, 5555, bytes(1400))
    [rec], _ = parse_pcap(pcap_header() + pcap_record(0, frame[:68], orig_len=len(frame)), GUEST)
    assert rec.wire_len_bytes == len(frame)
    assert (rec.direction, rec.src_port, rec.dst_port) == (PacketDirection.RX, 443, 5555)


def test_vlan_arp_raw_and_fragment():
    ip = ipv4_frame(GUEST, "9.9.9.9", 6, 1, 2)[14:]
    vlan = b"\x00" * 12 + b"\x81\x00\x00\x05\x08\x00" + ip
    arp = b"\xff" * 6 + b"\x00" * 6 + b"\x08\x06" + bytes(28)
    frag = bytearray(ipv4_frame(GUEST, "9.9.9.9", 17, 7, 8))
    frag[14 + 6:14 + 8] = struct.pack("!H", 10)  # nonzero fragment offset
    recs, _ = parse_pcap(pcap_header() + b"".join(pcap_record(i, f) for i, f in enumerate([vlan, arp, bytes(frag)])), GUEST)
    assert (recs[0].src_port, recs[0].protocol) == (1, TransportProto.TCP)
    assert recs[1].protocol is TransportProto.OTHER and recs[1].direction is PacketDirection.OTHER
    assert recs[2].src_port is None and recs[2].protocol is TransportProto.UDP
    raw = pcap_header(linktype=101) + pcap_record(0, ip)
    assert parse_pcap(raw, GUEST)[0][0].dst_ip == "9.9.9.9"


def test_tcpdump_command():
    assert tcpdump_command("stap0", "/r/capture.pcap") == [
        "tcpdump", "-i", "stap0", "-n", "-U", "-s", "0", "-w", "/r/capture.pcap"]


# -- disk -------------------------------------------------------------------

def test_nvme_read_line():
    ev = parse_disk_line("123.456789: pci_nvme_read cid 1 nsid 1 slba 2048 nlb 8", DiskDevice.NVME)
    assert ev == DiskEvent(123_456_789_000, DiskOp.READ, 2048, 8, DiskDevice.NVME)


def test_qemu_log_backend_line():
    ev = parse_disk_line("4187@1700000000.123456:pci_nvme_write cid 12 nsid 1 nlb 8 count 4096 lba 0x800",
                         DiskDevice.NVME)
    assert (ev.op, ev.address, ev.nblocks, ev.host_ts_ns) == (DiskOp.WRITE, 0x800, 8, DAY0 + 123_456_000)


def test_virtio_write_line():
    ev = parse_disk_line("1.5: virtio_blk_handle_write vdev 0x1 req 0x2 sector 4096 nsectors 8",
                         DiskDevice.VIRTIO_BLK)
    assert (ev.op, ev.address, ev.device) == (DiskOp.WRITE, 4096, DiskDevice.VIRTIO_BLK)


def test_unrelated_events_ignored_not_skipped():
    text = ("1.0: pci_nvme_irq_msix vector 1\n"
            "1.1: virtio_blk_handle_read sector 1 nsectors 1\n"  # other device
            "1.2: pci_nvme_read cid 1 slba 5 nlb 1\n"
            "nonsense\n"
            "1.3: pci_nvme_read cid 1 nlb 1\n")
    events, skipped = parse_disk_trace(text, DiskDevice.NVME)
    assert [e.address for e in events] == [5]
    assert skipped == 2


def test_disk_format_round_trip():
    for dev in DiskDevice:
        ev = DiskEvent(DAY0 + 5_000, DiskOp.WRITE, 123456, 16, dev)
        assert parse_disk_line(format_disk_line(ev), dev) == ev
    assert trace_events_for(DiskDevice.VIRTIO_BLK) == ["virtio_blk_handle_read", "virtio_blk_handle_write"]


# -- ndjson ---------------------------------------------------------------------

def test_ndjson_round_trip(tmp_path):
    cases = {
        SyscallEvent: [SyscallEvent(1, "a", 2, Direction.EXIT, "read", "x")],
        HpcSample: [HpcSample(0.1, "instructions", 5), HpcSample(0.2, "x", NOT_COUNTED, "")],
        PacketRecord: [PacketRecord(1, None, None, None, None, TransportProto.OTHER, 60, PacketDirection.OTHER)],
        DiskEvent: [DiskEvent(1, DiskOp.READ, 2, 3, DiskDevice.NVME)],
    }
    for cls, events in cases.items():
        path = tmp_path / f"{cls.__name__}.ndjson"
        dump_ndjson(events, path)
        assert load_ndjson(cls, path) == events


# -- totality -------------------------------------------------------------------

@settings(max_examples=300, deadline=None)
@given(st.lists(st.text(), max_size=8))
def test_text_parsers_account_for_every_line(lines):
    text = "\n".join(lines)
    nonblank = [l for l in text.splitlines() if l.strip()]
    events, skipped = parse_syscall_text(text)
    assert len(events) + skipped == len(nonblank)
    events, skipped = parse_disk_trace(text, DiskDevice.NVME)
    ignored = sum(parse_disk_line(l, DiskDevice.NVME) is None for l in nonblank)
    assert len(events) + skipped + ignored == len(nonblank)
    samples, skipped = parse_hpc_csv(text)
    data_lines = [l for l in nonblank if not l.strip().startswith("#")]
    assert len(samples) + skipped == len(data_lines)


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=400))
def test_pcap_total_on_random_bytes(tail):
    try:
        records, skipped = parse_pcap(pcap_header() + tail, GUEST)
    except (BadMagic, TruncatedFile):
        pytest.fail("valid header must not raise")
    assert skipped in (0, 1)
    assert all(r.wire_len_bytes >= 0 for r in records)


def test_control_characters_and_foreign_digits_are_skips():
    # surrounding control characters are stripped before conversion, never crash
    [s], _ = parse_hpc_csv("0.1\x1f,5,,instructions,1,100.00,,\n")
    assert s.rel_ts_s == 0.1
    assert parse_hpc_csv("١.0,5,,instructions\n") == ([], 1)
    assert parse_syscall_text("١ 1.0 0 a (1) > read\n") == ([], 1)
    assert parse_disk_trace("1.0: pci_nvme_read cid 1 slba ٥ nlb 1\n", DiskDevice.NVME)[0] == []
