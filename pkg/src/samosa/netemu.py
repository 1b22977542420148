"""Internet-services emulator for the sandbox network.

Every DNS question is answered with a fixed A record, every HTTP request gets
the same fake HTML page, and anything else on a raw listener gets a canned
reply.  All requests are appended to an access log whose text form looks like::

    [HTTPListener80] GET /payload HTTP/1.1
    [HTTPListener80] Host: 203.0.113.7

The emulator never opens outbound connections.  ``plan_nat`` produces the
iptables commands for the passthrough mode; it does not run them.
"""

from __future__ import annotations

import enum
import html
import ipaddress
import logging
import queue
import re
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import BindError, IoError, MalformedQuery, MalformedRequest, SchemaError

log = logging.getLogger(__name__)

POLL_INTERVAL_S = 0.02
DNS_TTL_S = 60
RAW_REPLY = b"\x00" * 4 + b"OK\r\n"
FAKE_HTML = (
    b"<!DOCTYPE html>\n<html>\n<head><title>Welcome</title></head>\n"
    b"<body>\n<h1>It works!</h1>\n<p>The requested resource is available.</p>\n"
    b"</body>\n</html>\n"
)

_IFNAME_RE = re.compile(r"^[A-Za-z0-9_.-]{1,15}$")


class Protocol(enum.Enum):
    DNS_UDP = "dns_udp"
    HTTP_TCP = "http_tcp"
    RAW_TCP = "raw_tcp"


@dataclass(frozen=True)
class ListenerConfig:
    name: str
    protocol: Protocol
    port: int  # 0 asks the OS for an ephemeral port
    bind_ip: str = "0.0.0.0"


@dataclass(frozen=True)
class AccessLogEntry:
    ts: int
    listener: str
    client: str
    lines: tuple[str, ...]

    def text_lines(self) -> list[str]:
        return [f"[{self.listener}] {line}" for line in self.lines]


def default_listeners(bind_ip: str = "0.0.0.0", ephemeral: bool = False) -> list[ListenerConfig]:
    """DNS on 53, HTTP on 80, 443 as a raw responder and a raw catch-all."""

    def port(p):
        return 0 if ephemeral else p

    return [
        ListenerConfig("DNSListener53", Protocol.DNS_UDP, port(53), bind_ip),
        ListenerConfig("HTTPListener80", Protocol.HTTP_TCP, port(80), bind_ip),
        ListenerConfig("RawListener443", Protocol.RAW_TCP, port(443), bind_ip),
        ListenerConfig("RawListener", Protocol.RAW_TCP, port(1337), bind_ip),
    ]


# --------------------------------------------------------------------------
# access log


class AccessLog:
    """Append-only log fed through a queue drained by one writer thread."""

    def __init__(self):
        self._queue: queue.Queue = queue.Queue()
        self._entries: list[AccessLogEntry] = []
        self._last_ts: dict[str, int] = {}
        self._writer = threading.Thread(target=self._drain, name="netemu-log", daemon=True)
        self._writer.start()
        self._closed = False

    def append(self, listener: str, client: str, lines, ts: int | None = None) -> None:
        lines = tuple(lines)
        if not lines:
            lines = ("<empty>",)
        self._queue.put((ts if ts is not None else time.time_ns(), listener, client, lines))

    def _drain(self):
        while True:
            item = self._queue.get()
            if item is None:
                return
            ts, listener, client, lines = item
            # keep per-listener timestamps nondecreasing in arrival order
            ts = max(ts, self._last_ts.get(listener, ts))
            self._last_ts[listener] = ts
            self._entries.append(AccessLogEntry(ts, listener, client, lines))

    def flush(self) -> None:
        if self._closed:
            return
        self._queue.put(None)
        self._writer.join()
        self._closed = True

    @property
    def entries(self) -> list[AccessLogEntry]:
        return list(self._entries)

    def text(self) -> str:
        return "".join(line + "\n" for e in self._entries for line in e.text_lines())


# --------------------------------------------------------------------------
# DNS


def _parse_dns_question(query: bytes):
    if len(query) < 12:
        raise MalformedQuery(f"DNS message too short ({len(query)} bytes)")
    ident, flags, qdcount = struct.unpack("!HHH", query[:6])
    if flags & 0x8000:
        raise MalformedQuery("message is a response, not a query")
    if qdcount < 1:
        raise MalformedQuery("query has no question")
    labels = []
    i = 12
    while True:
        if i >= len(query):
            raise MalformedQuery("question name runs past end of message")
        n = query[i]
        if n == 0:
            i += 1
            break
        if n & 0xC0:
            raise MalformedQuery("compressed or extended label in question")
        if i + 1 + n > len(query):
            raise MalformedQuery("label runs past end of message")
        labels.append(query[i + 1:i + 1 + n])
        i += 1 + n
        if i - 12 > 255:
            raise MalformedQuery("question name longer than 255 bytes")
    if i + 4 > len(query):
        raise MalformedQuery("question truncated before type/class")
    qtype, qclass = struct.unpack("!HH", query[i:i + 4])
    name = ".".join(l.decode("ascii", "backslashreplace") for l in labels) + "."
    return ident, flags, query[12:i + 4], name, qtype, qclass


def dns_answer(query: bytes, answer_ip: str) -> bytes:
    """Answer an A question with ``answer_ip``; other types get an empty NOERROR."""
    ident, flags, question, _name, qtype, qclass = _parse_dns_question(query)
    opcode_rd = flags & 0x7900  # opcode + RD copied from the query
    rflags = 0x8000 | opcode_rd | 0x0400 | 0x0080  # QR, AA, RA; RCODE 0
    answers = b""
    if qtype == 1 and qclass in (1, 255):
        answers = (
            b"\xc0\x0c"
            + struct.pack("!HHIH", 1, 1, DNS_TTL_S, 4)
            + ipaddress.IPv4Address(answer_ip).packed
        )
    ancount = 1 if answers else 0
    return struct.pack("!HHHHHH", ident, rflags, 1, ancount, 0, 0) + question + answers


def build_dns_query(name: str, ident: int = 0, qtype: int = 1) -> bytes:
    """A minimal recursive query with one question (used by test clients)."""
    qname = b"".join(
        bytes([len(label)]) + label.encode("ascii") for label in name.rstrip(".").split(".") if label
    )
    return struct.pack("!HHHHHH", ident, 0x0100, 1, 0, 0, 0) + qname + b"\x00" + struct.pack("!HH", qtype, 1)


def _dns_log_line(query: bytes) -> str:
    try:
        _, _, _, name, qtype, _ = _parse_dns_question(query)
    except MalformedQuery as exc:
        return f"Malformed query ({len(query)} bytes): {exc}"
    tname = {1: "A", 2: "NS", 5: "CNAME", 15: "MX", 16: "TXT", 28: "AAAA"}.get(qtype, str(qtype))
    return f"Received {tname} request for domain '{name.rstrip('.')}'."


# --------------------------------------------------------------------------
# HTTP

_REQUEST_LINE_RE = re.compile(r"^([A-Za-z]+) (\S+) HTTP/(\d)\.(\d)$")


def http_answer(request: str, log: AccessLog | None = None,
                listener: str = "HTTPListener80", client: str = "") -> str:
    """Return a 200 response with the fake page for any request.

    The request line and every header line are appended to ``log`` before the
    request line is checked, so even a malformed request leaves a trace.
    """
    head = request.split("\r\n\r\n", 1)[0].split("\n\n", 1)[0]
    lines = [l.rstrip("\r") for l in head.split("\n")]
    while lines and not lines[-1]:
        lines.pop()
    if log is not None:
        log.append(listener, client, lines or [""])
    if not lines or not _REQUEST_LINE_RE.match(lines[0]):
        raise MalformedRequest(f"bad request line: {lines[0] if lines else ''!r}")
    body = FAKE_HTML.decode("ascii")
    return (
        "HTTP/1.1 200 OK\r\n"
        "Server: Apache/2.4.41 (Ubuntu)\r\n"
        "Content-Type: text/html\r\n"
        f"Content-Length: {len(FAKE_HTML)}\r\n"
        "Connection: close\r\n"
        "\r\n" + body
    )


def _read_http_request(rfile, limit=1 << 16):
    """Read one request (head + Content-Length body). Returns text or None on EOF."""
    head = b""
    while not head.endswith(b"\r\n\r\n") and not head.endswith(b"\n\n"):
        line = rfile.readline(limit)
        if not line:
            return head.decode("latin-1") if head else None
        if not head and line in (b"\r\n", b"\n"):
            continue
        head += line
        if len(head) > limit:
            break
    text = head.decode("latin-1")
    m = re.search(r"^content-length:\s*(\d+)", text, re.IGNORECASE | re.MULTILINE)
    if m:
        body = rfile.read(min(int(m.group(1)), limit))
        text += body.decode("latin-1")
    return text


# --------------------------------------------------------------------------
# listeners


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = False


class _UDPServer(socketserver.ThreadingUDPServer):
    daemon_threads = True
    allow_reuse_address = False


def _client(addr) -> str:
    return f"{addr[0]}:{addr[1]}"


def _make_handler(cfg: ListenerConfig, access_log: AccessLog, answer_ip: str):
    name = cfg.name

    if cfg.protocol is Protocol.DNS_UDP:
        class DnsHandler(socketserver.BaseRequestHandler):
            def handle(self):
                data, sock = self.request
                access_log.append(name, _client(self.client_address), [_dns_log_line(data)])
                try:
                    sock.sendto(dns_answer(data, answer_ip), self.client_address)
                except MalformedQuery:
                    pass
        return DnsHandler

    if cfg.protocol is Protocol.HTTP_TCP:
        class HttpHandler(socketserver.StreamRequestHandler):
            timeout = 5

            def handle(self):
                client = _client(self.client_address)
                while True:
                    try:
                        request = _read_http_request(self.rfile)
                    except (OSError, socket.timeout):
                        return
                    if request is None:
                        return
                    try:
                        response = http_answer(request, access_log, name, client)
                    except MalformedRequest:
                        return
                    self.wfile.write(response.encode("latin-1"))
                    self.wfile.flush()
                    # responses carry Connection: close
                    return
        return HttpHandler

    class RawHandler(socketserver.StreamRequestHandler):
        timeout = 2

        def handle(self):
            try:
                data = self.request.recv(65536)
            except (OSError, socket.timeout):
                data = b""
            text = data.decode("utf-8", "backslashreplace")
            lines = [l.rstrip("\r") for l in text.split("\n") if l.strip()] if data else []
            if data and not lines:
                lines = [data[:64].hex()]
            access_log.append(name, _client(self.client_address), lines[:64] or ["<no data>"])
            try:
                self.request.sendall(RAW_REPLY)
            except OSError:
                pass
    return RawHandler


@dataclass
class BoundListener:
    config: ListenerConfig
    address: tuple[str, int]
    server: socketserver.BaseServer = field(repr=False)
    thread: threading.Thread = field(repr=False)


class EmulatorHandle:
    def __init__(self, listeners: list[BoundListener], access_log: AccessLog):
        self.listeners = listeners
        self.log = access_log
        self.stopped = False

    def address(self, name: str) -> tuple[str, int]:
        for bl in self.listeners:
            if bl.config.name == name:
                return bl.address
        raise KeyError(name)

    @property
    def entries(self) -> list[AccessLogEntry]:
        return self.log.entries

    def stop(self) -> None:
        if self.stopped:
            return
        # shutdown() blocks for up to one poll interval, so signal all servers at once
        stoppers = [threading.Thread(target=bl.server.shutdown) for bl in self.listeners]
        for t in stoppers:
            t.start()
        for t in stoppers:
            t.join()
        for bl in self.listeners:
            bl.server.server_close()
            bl.thread.join(timeout=5)
        self.log.flush()
        self.stopped = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def start_emulator(listeners: list[ListenerConfig], answer_ip: str = "192.168.100.1") -> EmulatorHandle:
    """Bind every listener and start serving. Raises BindError on conflicts."""
    seen_names = set()
    seen_ports = set()
    for cfg in listeners:
        if cfg.name in seen_names:
            raise SchemaError(f"duplicate listener name {cfg.name!r}")
        seen_names.add(cfg.name)
        if not 0 <= cfg.port <= 65535:
            raise SchemaError(f"{cfg.name}: port {cfg.port} out of range")
        if cfg.port:
            transport = "udp" if cfg.protocol is Protocol.DNS_UDP else "tcp"
            key = (cfg.bind_ip, cfg.port, transport)
            if key in seen_ports:
                raise BindError(cfg.port, "port already used by another listener")
            seen_ports.add(key)

    access_log = AccessLog()
    bound: list[BoundListener] = []
    try:
        for cfg in listeners:
            cls = _UDPServer if cfg.protocol is Protocol.DNS_UDP else _TCPServer
            handler = _make_handler(cfg, access_log, answer_ip)
            try:
                server = cls((cfg.bind_ip, cfg.port), handler)
            except OSError as exc:
                raise BindError(cfg.port, str(exc)) from exc
            thread = threading.Thread(target=server.serve_forever, kwargs={"poll_interval": POLL_INTERVAL_S},
                                      name=f"netemu-{cfg.name}", daemon=True)
            thread.start()
            bound.append(BoundListener(cfg, server.server_address[:2], server, thread))
            log.debug("listener %s on %s:%d", cfg.name, *server.server_address[:2])
    except BaseException:
        EmulatorHandle(bound, access_log).stop()
        raise
    return EmulatorHandle(bound, access_log)


# --------------------------------------------------------------------------
# report


def write_report(handle: EmulatorHandle, directory) -> dict[str, Path]:
    """Write ``fakenet.log`` and ``fakenet_report.html`` into ``directory``."""
    if not handle.stopped:
        raise RuntimeError("emulator must be stopped before writing the report")
    directory = Path(directory)
    log_path = directory / "fakenet.log"
    report_path = directory / "fakenet_report.html"

    entries = handle.entries
    stats = {bl.config.name: {"requests": 0, "clients": set(), "proto": bl.config.protocol.value,
                              "port": bl.address[1]} for bl in handle.listeners}
    for e in entries:
        s = stats.setdefault(e.listener, {"requests": 0, "clients": set(), "proto": "?", "port": 0})
        s["requests"] += 1
        s["clients"].add(e.client)

    rows = []
    for name, s in stats.items():
        clients = ", ".join(html.escape(c) for c in sorted(s["clients"])) or "&ndash;"
        rows.append(
            f"<tr><td>{html.escape(name)}</td><td>{s['proto']}</td><td>{s['port']}</td>"
            f"<td>{s['requests']}</td><td>{len(s['clients'])}</td><td>{clients}</td></tr>"
        )
    detail = "\n".join(
        f"<tr><td>{e.ts}</td><td>{html.escape(e.listener)}</td><td>{html.escape(e.client)}</td>"
        f"<td><pre>{html.escape(chr(10).join(e.lines))}</pre></td></tr>"
        for e in entries
    )
    doc = (
        "<!DOCTYPE html>\n<html>\n<head><meta charset=\"utf-8\"><title>Network emulator report</title>\n"
        "<style>table{border-collapse:collapse}td,th{border:1px solid #999;padding:2px 6px}</style>\n"
        "</head>\n<body>\n<h1>Network emulator report</h1>\n"
        f"<p>Total requests: {len(entries)}</p>\n"
        "<h2>Listeners</h2>\n<table>\n"
        "<tr><th>Listener</th><th>Protocol</th><th>Port</th><th>Requests</th>"
        "<th>Distinct clients</th><th>Clients</th></tr>\n"
        + "\n".join(rows)
        + "\n</table>\n<h2>Requests</h2>\n<table>\n"
        "<tr><th>Timestamp (ns)</th><th>Listener</th><th>Client</th><th>Request</th></tr>\n"
        + detail
        + "\n</table>\n</body>\n</html>\n"
    )
    try:
        log_path.write_text(handle.log.text(), encoding="utf-8", newline="\n")
        report_path.write_text(doc, encoding="utf-8")
    except OSError as exc:
        raise IoError(exc.errno, f"cannot write emulator report: {exc.strerror}", str(directory)) from exc
    return {"report_path": report_path, "log_path": log_path}


# --------------------------------------------------------------------------
# NAT


@dataclass(frozen=True)
class NatPlan:
    bridge: str
    setup_cmds: tuple[str, ...]
    teardown_cmds: tuple[str, ...]


def plan_nat(bridge: str, guest_subnet: str) -> NatPlan:
    """iptables rules giving ``guest_subnet`` on ``bridge`` masqueraded internet access."""
    if not isinstance(bridge, str) or not _IFNAME_RE.match(bridge):
        raise SchemaError(f"invalid interface name {bridge!r}")
    try:
        net = ipaddress.IPv4Network(guest_subnet, strict=False)
    except (ValueError, TypeError) as exc:
        raise SchemaError(f"invalid CIDR {guest_subnet!r}: {exc}") from None
    rules = [
        f"-t nat {{op}} POSTROUTING -s {net} ! -o {bridge} -j MASQUERADE",
        f"{{op}} FORWARD -i {bridge} -s {net} -j ACCEPT",
        f"{{op}} FORWARD -o {bridge} -d {net} -m conntrack --ctstate RELATED,ESTABLISHED -j ACCEPT",
    ]
    setup = ["sysctl -w net.ipv4.ip_forward=1"]
    setup += ["iptables " + r.format(op="-A") for r in rules]
    teardown = ["iptables " + r.format(op="-D") for r in reversed(rules)]
    return NatPlan(bridge, tuple(setup), tuple(teardown))
