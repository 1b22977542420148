"""Classic libpcap reader producing PacketRecords.

Only the fixed headers are decoded: Ethernet (with one optional 802.1Q tag),
IPv4, and the TCP/UDP port pair.  Anything that is not IPv4 is kept as an
``OTHER`` record carrying just its wire length and timestamp.
"""

from __future__ import annotations

import ipaddress
import logging
import struct

from ..errors import BadMagic, TruncatedFile
from .events import PacketDirection, PacketRecord, TransportProto

log = logging.getLogger(__name__)

MAGIC_USEC = 0xA1B2C3D4
MAGIC_NSEC = 0xA1B23C4D
LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_IPV4 = 228

_GLOBAL_HDR = 24
_REC_HDR = 16
ETHERTYPE_IPV4 = 0x0800
_VLAN_TYPES = (0x8100, 0x88A8)


def _byte_order(head: bytes):
    """Return (endian prefix, nanosecond flag) or None."""
    for endian in ("<", ">"):
        (magic,) = struct.unpack(endian + "I", head[:4])
        if magic == MAGIC_USEC:
            return endian, False
        if magic == MAGIC_NSEC:
            return endian, True
    return None


def _valid_magic_prefix(data: bytes) -> bool:
    for magic in (MAGIC_USEC, MAGIC_NSEC):
        for endian in ("<", ">"):
            if struct.pack(endian + "I", magic).startswith(data[:4]):
                return True
    return False


def _direction(src, dst, guest_ip):
    if src is not None and src == guest_ip:
        return PacketDirection.TX
    if dst is not None and dst == guest_ip:
        return PacketDirection.RX
    return PacketDirection.OTHER


def _decode_ipv4(frame: bytes):
    """Return (src, dst, proto, sport, dport) from an IPv4 header, or None."""
    if len(frame) < 20 or frame[0] >> 4 != 4:
        return None
    ihl = (frame[0] & 0x0F) * 4
    if ihl < 20 or len(frame) < ihl:
        return None
    proto_num = frame[9]
    frag_offset = struct.unpack("!H", frame[6:8])[0] & 0x1FFF
    src = str(ipaddress.IPv4Address(frame[12:16]))
    dst = str(ipaddress.IPv4Address(frame[16:20]))
    proto = {6: TransportProto.TCP, 17: TransportProto.UDP}.get(proto_num, TransportProto.OTHER)
    sport = dport = None
    if proto is not TransportProto.OTHER and frag_offset == 0 and len(frame) >= ihl + 4:
        sport, dport = struct.unpack("!HH", frame[ihl:ihl + 4])
    return src, dst, proto, sport, dport


def _decode_frame(frame: bytes, linktype: int):
    if linktype == LINKTYPE_ETHERNET:
        if len(frame) < 14:
            return None
        off = 12
        (etype,) = struct.unpack("!H", frame[off:off + 2])
        off += 2
        if etype in _VLAN_TYPES and len(frame) >= off + 4:
            (etype,) = struct.unpack("!H", frame[off + 2:off + 4])
            off += 4
        if etype != ETHERTYPE_IPV4:
            return None
        return _decode_ipv4(frame[off:])
    if linktype in (LINKTYPE_RAW, LINKTYPE_IPV4):
        return _decode_ipv4(frame)
    return None


def parse_pcap(data: bytes, guest_ip: str) -> tuple[list[PacketRecord], int]:
    """Parse a whole capture.

    Returns ``(records, skipped)`` where ``skipped`` is 1 when the file ends in
    the middle of a record (the partial record is dropped) and 0 otherwise.
    Raises BadMagic for non-pcap input and TruncatedFile when even the global
    header is incomplete.
    """
    data = bytes(data)
    if len(data) < _GLOBAL_HDR:
        if _valid_magic_prefix(data):
            raise TruncatedFile(f"pcap global header truncated ({len(data)} bytes)")
        raise BadMagic(f"not a pcap file (magic {data[:4].hex() or 'missing'})")
    order = _byte_order(data)
    if order is None:
        hint = " (pcapng is not supported)" if data[:4] == b"\x0a\x0d\x0d\x0a" else ""
        raise BadMagic(f"unrecognised pcap magic {data[:4].hex()}{hint}")
    endian, nanos = order
    linktype = struct.unpack(endian + "I", data[20:24])[0] & 0x0FFFFFFF
    rec_fmt = endian + "IIII"
    scale = 1 if nanos else 1000

    records: list[PacketRecord] = []
    skipped = 0
    off = _GLOBAL_HDR
    while off < len(data):
        if off + _REC_HDR > len(data):
            skipped = 1
            break
        ts_sec, ts_frac, incl_len, orig_len = struct.unpack(rec_fmt, data[off:off + _REC_HDR])
        off += _REC_HDR
        if off + incl_len > len(data):
            skipped = 1
            break
        frame = data[off:off + incl_len]
        off += incl_len
        decoded = _decode_frame(frame, linktype)
        if decoded is None:
            src = dst = sport = dport = None
            proto = TransportProto.OTHER
        else:
            src, dst, proto, sport, dport = decoded
        records.append(PacketRecord(
            host_ts_ns=ts_sec * 10**9 + ts_frac * scale,
            src_ip=src,
            dst_ip=dst,
            src_port=sport,
            dst_port=dport,
            protocol=proto,
            wire_len_bytes=orig_len,
            direction=_direction(src, dst, guest_ip),
        ))
    if skipped:
        log.warning("pcap truncated after %d complete records", len(records))
    return records, skipped


def tcpdump_command(iface: str, out_path: str) -> list[str]:
    return ["tcpdump", "-i", iface, "-n", "-U", "-s", "0", "-w", str(out_path)]


# --------------------------------------------------------------------------
# writer (used by the mock backend and for fixtures)


def pcap_header(linktype: int = LINKTYPE_ETHERNET, nanos: bool = False,
                big_endian: bool = False, snaplen: int = 262144) -> bytes:
    endian = ">" if big_endian else "<"
    magic = MAGIC_NSEC if nanos else MAGIC_USEC
    return struct.pack(endian + "IHHiIII", magic, 2, 4, 0, 0, snaplen, linktype)


def pcap_record(ts_ns: int, frame: bytes, orig_len: int | None = None,
                nanos: bool = False, big_endian: bool = False) -> bytes:
    endian = ">" if big_endian else "<"
    sec, frac = divmod(ts_ns, 10**9)
    if not nanos:
        frac //= 1000
    orig = len(frame) if orig_len is None else orig_len
    return struct.pack(endian + "IIII", sec, frac, len(frame), orig) + frame


def ipv4_frame(src: str, dst: str, proto: int, sport: int = 0, dport: int = 0,
               payload: bytes = b"", src_mac: bytes = b"\x52\x54\x00\x12\x34\x56",
               dst_mac: bytes = b"\x52\x54\x00\xab\xcd\xef") -> bytes:
    """Build an Ethernet/IPv4 frame with a TCP (20 byte) or UDP (8 byte) header."""
    if proto == 6:
        l4 = struct.pack("!HHIIBBHHH", sport, dport, 0, 0, 5 << 4, 0x02, 65535, 0, 0) + payload
    elif proto == 17:
        l4 = struct.pack("!HHHH", sport, dport, 8 + len(payload), 0) + payload
    else:
        l4 = payload
    total = 20 + len(l4)
    ip = struct.pack(
        "!BBHHHBBH4s4s", 0x45, 0, total, 0, 0, 64, proto, 0,
        ipaddress.IPv4Address(src).packed, ipaddress.IPv4Address(dst).packed,
    )
    ip = ip[:10] + struct.pack("!H", _checksum(ip)) + ip[12:]
    return dst_mac + src_mac + struct.pack("!H", ETHERTYPE_IPV4) + ip + l4


def _checksum(header: bytes) -> int:
    total = sum(struct.unpack("!%dH" % (len(header) // 2), header))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF
