import os
import socket

import dns.flags
import dns.message
import dns.rcode
import dns.rdatatype
import pytest

from samosa import netemu
from samosa.errors import BindError, IoError, MalformedQuery, MalformedRequest, SchemaError


def dns_query(name, ident=0x1234, rdtype="A"):
    q = dns.message.make_query(name, rdtype)
    q.id = ident
    return q.to_wire()


def test_dns_answer_decodes_with_independent_dissector():
    resp = dns.message.from_wire(netemu.dns_answer(dns_query("evil.example."), "10.0.2.2"))
    assert resp.rcode() == dns.rcode.NOERROR
    assert resp.flags & dns.flags.QR and resp.flags & dns.flags.AA
    [rrset] = resp.answer
    assert rrset.rdtype == dns.rdatatype.A
    assert [r.address for r in rrset] == ["10.0.2.2"]
    assert str(rrset.name) == "evil.example."


def test_dns_id_echo():
    assert netemu.dns_answer(dns_query("a.b.", ident=0x1234), "1.2.3.4")[:2] == b"\x12\x34"


def test_non_a_query_gets_empty_noerror():
    resp = dns.message.from_wire(netemu.dns_answer(dns_query("a.b.", rdtype="AAAA"), "1.2.3.4"))
    assert resp.rcode() == dns.rcode.NOERROR
    assert resp.answer == []


@pytest.mark.parametrize("data", [b"", b"\x12\x34\x01", bytes(12), b"\x00" * 12 + b"\x3f"])
def test_malformed_queries(data):
    with pytest.raises(MalformedQuery):
        netemu.dns_answer(data, "1.2.3.4")


def test_build_dns_query_is_parseable():
    q = dns.message.from_wire(netemu.build_dns_query("host.example.", ident=7))
    assert q.id == 7
    assert str(q.question[0].name) == "host.example."


def test_http_answer_logs_request_and_headers():
    log = netemu.AccessLog()
    resp = netemu.http_answer("GET /kinsing_aarch64 HTTP/1.1\r\nHost: 78.153.0.1\r\n\r\n", log)
    log.flush()
    assert resp.startswith("HTTP/1.1 200 OK\r\n")
    assert log.text().splitlines() == ["[HTTPListener80] GET /kinsing_aarch64 HTTP/1.1",
                                       "[HTTPListener80] Host: 78.153.0.1"]


def test_http_minimal_request_logs_one_line():
    log = netemu.AccessLog()
    netemu.http_answer("GET / HTTP/1.1\r\n\r\n", log)
    log.flush()
    assert log.text() == "[HTTPListener80] GET / HTTP/1.1\n"


def test_http_post_gets_same_body():
    get = netemu.http_answer("GET /a HTTP/1.1\r\n\r\n")
    post = netemu.http_answer("POST /x HTTP/1.1\r\nContent-Length: 3\r\n\r\nabc")
    assert get.split("\r\n\r\n", 1)[1] == post.split("\r\n\r\n", 1)[1] == netemu.FAKE_HTML.decode()


def test_http_malformed_request_still_logged():
    log = netemu.AccessLog()
    with pytest.raises(MalformedRequest):
        netemu.http_answer("hello there\r\n\r\n", log)
    log.flush()
    assert "hello there" in log.text()


def http_get(addr, path):
    with socket.create_connection(addr, timeout=3) as s:
        s.sendall(f"GET {path} HTTP/1.1\r\nHost: test\r\n\r\n".encode())
        chunks = []
        while data := s.recv(65536):
            chunks.append(data)
    return b"".join(chunks)


def test_default_listeners_serve_all_protocols(tmp_path):
    with netemu.start_emulator(netemu.default_listeners("127.0.0.1", ephemeral=True), "10.9.8.7") as h:
        assert len(h.listeners) == 4
        assert b"200 OK" in http_get(h.address("HTTPListener80"), "/one")
        with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
            s.settimeout(3)
            s.sendto(dns_query("x.test."), h.address("DNSListener53"))
            resp = dns.message.from_wire(s.recvfrom(4096)[0])
        assert resp.answer[0][0].address == "10.9.8.7"
        for name in ("RawListener443", "RawListener"):
            with socket.create_connection(h.address(name), timeout=3) as s:
                s.sendall(b"hello raw\n")
                assert s.recv(100) == netemu.RAW_REPLY
    assert h.stopped
    names = {e.listener for e in h.entries}
    assert names == {"HTTPListener80", "DNSListener53", "RawListener443", "RawListener"}
    paths = netemu.write_report(h, tmp_path)
    log_text = paths["log_path"].read_text()
    assert "[HTTPListener80] GET /one HTTP/1.1" in log_text
    assert "[RawListener] hello raw" in log_text
    assert "x.test" in log_text
    assert "Total requests: 4" in paths["report_path"].read_text()


def test_three_requests_logged():
    with netemu.start_emulator([netemu.ListenerConfig("HTTPListener80", netemu.Protocol.HTTP_TCP, 0, "127.0.0.1")]) as h:
        for i in range(3):
            http_get(h.address("HTTPListener80"), f"/p{i}")
    assert h.log.text().count("[HTTPListener80] GET") == 3
    stamps = [e.ts for e in h.entries]
    assert stamps == sorted(stamps)


def test_empty_listener_list(tmp_path):
    h = netemu.start_emulator([])
    assert h.listeners == []
    h.stop()
    paths = netemu.write_report(h, tmp_path)
    assert paths["log_path"].read_text() == ""
    assert "Total requests: 0" in paths["report_path"].read_text()


def test_shared_port_is_bind_error():
    free = socket.socket()
    free.bind(("127.0.0.1", 0))
    port = free.getsockname()[1]
    free.close()
    listeners = [netemu.ListenerConfig("a", netemu.Protocol.HTTP_TCP, port, "127.0.0.1"),
                 netemu.ListenerConfig("b", netemu.Protocol.RAW_TCP, port, "127.0.0.1")]
    with pytest.raises(BindError) as exc:
        netemu.start_emulator(listeners)
    assert exc.value.port == port


def test_port_in_use_is_bind_error():
    busy = socket.socket()
    busy.bind(("127.0.0.1", 0))
    busy.listen()
    try:
        cfg = netemu.ListenerConfig("a", netemu.Protocol.HTTP_TCP, busy.getsockname()[1], "127.0.0.1")
        with pytest.raises(BindError):
            netemu.start_emulator([cfg])
    finally:
        busy.close()


@pytest.mark.skipif(os.geteuid() == 0, reason="root can write anywhere")
def test_report_unwritable_dir(tmp_path):
    h = netemu.start_emulator([])
    h.stop()
    tmp_path.chmod(0o500)
    try:
        with pytest.raises(IoError):
            netemu.write_report(h, tmp_path)
    finally:
        tmp_path.chmod(0o700)


def test_report_missing_dir_is_io_error(tmp_path):
    h = netemu.start_emulator([])
    h.stop()
    with pytest.raises(IoError):
        netemu.write_report(h, tmp_path / "nope" / "deeper")


def test_nat_plan():
    plan = netemu.plan_nat("sbr0", "192.168.100.0/24")
    rules = [c for c in plan.setup_cmds if c.startswith("iptables")]
    assert sum("MASQUERADE" in r for r in rules) == 1
    assert sum("FORWARD" in r for r in rules) == 2
    assert all("sbr0" in r for r in rules)
    # teardown deletes exactly what setup appended, in reverse
    assert [r.replace("-A", "-D") for r in reversed(rules)] == list(plan.teardown_cmds)


@pytest.mark.parametrize("bridge,cidr", [("sbr0", "300.1.1.1/24"), ("bad name", "10.0.0.0/8"), ("x" * 16, "10.0.0.0/8")])
def test_nat_plan_rejects_bad_input(bridge, cidr):
    with pytest.raises(SchemaError):
        netemu.plan_nat(bridge, cidr)
