"""
nfclab: NFC protocol laboratory.

Unit tests of the relay wire format, the session hub and its TCP and
loopback transports.

"""

# import modules
import socket
import struct
import threading
import time
import unittest

import numpy as np

from nfclab._core import Direction, ProtocolError, StaticTagData, TagTech
from nfclab._nci import encode_tag_data
from nfclab._plugins import DropAllPlugin, Pipeline, UpperPlugin
from nfclab._relay import (EndpointRole, FrameDecoder, LoopbackNetwork,
                           MsgType, RelayHub, TcpLink, WireMessage,
                           decode_message, parse_address, run_server)
from nfclab._timing import ConstantDelay, NormalDelay

PCD = Direction.PcdToPicc
PICC = Direction.PiccToPcd


class FakeConnection:
    """Hub side connection collecting what the hub sends."""

    def __init__(self, name):
        self.name = name
        self.sent = []
        self.closed = False

    def send(self, msg):
        self.sent.append(msg)

    def close(self):
        self.closed = True

    def __repr__(self):
        return self.name


def wait_for(predicate, timeout=2.0):
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        if predicate():
            return True
        time.sleep(0.01)
    return predicate()


class TestWireFormat(unittest.TestCase):

    def test_encode(self):
        self.assertEqual(WireMessage.join(1, EndpointRole.Reader).encode(),
                         bytes.fromhex("00000003010101"))
        msg = WireMessage.apdu(PCD, b"\x90\x00")
        self.assertEqual(decode_message(msg.encode()), (msg, 8))

    def test_incomplete(self):
        data = WireMessage.apdu(PICC, b"\x90\x00").encode()
        self.assertEqual(decode_message(data[:5]), (None, 0))

    def test_malformed(self):
        for data in (bytes.fromhex("0000000109"),
                     bytes.fromhex("00000000"),
                     bytes.fromhex("000000020101"),
                     bytes.fromhex("00000003040300")):
            with self.assertRaises(ProtocolError):
                decode_message(data)

    def test_stream_decoder(self):
        messages = [WireMessage.join(2, EndpointRole.Tag),
                    WireMessage.apdu(PCD, b"\x5a\x01\x00\x00"),
                    WireMessage.leave(EndpointRole.Tag)]
        data = b"".join(m.encode() for m in messages)
        decoder = FrameDecoder()
        received = []
        for i in range(0, len(data), 3):
            received += decoder.feed(data[i:i + 3])
        self.assertEqual(received, messages)

    def test_session_id_range(self):
        with self.assertRaises(ValueError):
            WireMessage.join(256, EndpointRole.Tag)

    def test_parse_address(self):
        self.assertEqual(parse_address("5566"), ("127.0.0.1", 5566))
        self.assertEqual(parse_address("0.0.0.0:80"), ("0.0.0.0", 80))
        with self.assertRaises(ValueError):
            parse_address("localhost:http")


class TestRelayHub(unittest.TestCase):

    def setUp(self):
        self.hub = RelayHub()
        self.a = FakeConnection("a")
        self.b = FakeConnection("b")

    def join_both(self):
        self.hub.handle_join(self.a, 1, EndpointRole.Reader)
        self.hub.handle_join(self.b, 1, EndpointRole.Tag)

    def test_join(self):
        self.hub.handle_join(self.a, 1, EndpointRole.Reader)
        self.assertEqual(self.hub.member_count(1), 1)

    def test_join_twice(self):
        self.hub.handle_join(self.a, 1, EndpointRole.Reader)
        self.hub.handle_message(self.a, WireMessage.join(2,
                                                         EndpointRole.Tag))
        self.assertIs(self.a.sent[-1].msg_type, MsgType.Error)
        self.assertTrue(self.a.closed)
        self.assertEqual(self.hub.member_count(1), 0)

    def test_broadcast(self):
        self.join_both()
        self.hub.handle_message(self.a, WireMessage.apdu(PICC, b"x"))
        self.assertEqual(self.b.sent, [WireMessage.apdu(PICC, b"x")])
        self.assertEqual(self.a.sent, [])

    def test_modifying_pipeline(self):
        self.hub.pipeline = Pipeline([UpperPlugin()])
        self.join_both()
        self.hub.handle_message(self.a, WireMessage.apdu(PICC, b"ab"))
        self.assertEqual(self.b.sent[0].data, b"AB")
        # the log holds what the endpoint sent
        self.assertEqual(self.hub.session(1).log.entries[0].payload, b"ab")

    def test_drop(self):
        self.hub.pipeline = Pipeline([DropAllPlugin()])
        self.join_both()
        self.hub.handle_message(self.a, WireMessage.apdu(PICC, b"x"))
        self.assertEqual(self.b.sent, [])
        self.assertEqual(len(self.hub.session(1).dropped), 1)

    def test_data_before_join(self):
        self.hub.handle_message(self.a, WireMessage.apdu(PCD, b"x"))
        self.assertIs(self.a.sent[0].msg_type, MsgType.Error)
        self.assertTrue(self.a.closed)

    def test_leave(self):
        self.join_both()
        self.hub.handle_message(self.b, WireMessage.leave())
        self.assertEqual(self.a.sent[-1],
                         WireMessage.leave(EndpointRole.Tag))
        self.hub.handle_leave(self.a)
        self.assertIsNone(self.hub.session(1))
        self.assertEqual(len(self.hub.closed_sessions), 1)

    def test_late_joiner_gets_initial(self):
        data = StaticTagData(TagTech.NfcA, [("NFCID1", bytes(4))])
        self.hub.handle_join(self.a, 1, EndpointRole.Reader)
        self.hub.handle_message(self.a,
                                WireMessage.initial(encode_tag_data(data)))
        self.hub.handle_join(self.b, 1, EndpointRole.Tag)
        self.assertIs(self.b.sent[0].msg_type, MsgType.InitialData)
        self.assertEqual(self.hub.session(1).log.initial, data)

    def test_join_skips_closed_session(self):
        churn = FakeConnection("churn")
        stale = self.hub.handle_join(churn, 1, EndpointRole.Reader)
        self.hub.handle_leave(churn)
        self.assertTrue(stale.closed)
        # a closed session still registered must not take members
        self.hub.sessions[1] = stale
        session = self.hub.handle_join(self.a, 1, EndpointRole.Reader)
        self.assertIsNot(session, stale)
        self.assertIs(self.hub.session(1), session)
        self.assertEqual(stale.members, {})

    def test_concurrent_join_and_leave(self):
        for _ in range(300):
            hub = RelayHub()
            a, b = FakeConnection("a"), FakeConnection("b")
            churn = FakeConnection("churn")
            hub.handle_join(churn, 1, EndpointRole.Tag)
            barrier = threading.Barrier(2)

            def leave():
                barrier.wait()
                hub.handle_leave(churn)

            def join():
                barrier.wait()
                hub.handle_join(a, 1, EndpointRole.Reader)

            threads = [threading.Thread(target=leave),
                       threading.Thread(target=join)]
            for thread in threads:
                thread.start()
            for thread in threads:
                thread.join()
            hub.handle_join(b, 1, EndpointRole.Tag)
            session = hub.session(1)
            self.assertIsNotNone(session)
            self.assertFalse(session.closed)
            self.assertEqual(set(session.members), {a, b})
            hub.handle_message(a, WireMessage.apdu(PICC, b"x"))
            self.assertEqual(b.sent[-1], WireMessage.apdu(PICC, b"x"))


class TestLoopback(unittest.TestCase):

    def pair(self, network, session_id, delay=0.0):
        reader = network.connect(delay)
        tag = network.connect(delay)
        reader.send(WireMessage.join(session_id, EndpointRole.Reader))
        tag.send(WireMessage.join(session_id, EndpointRole.Tag))
        network.run()
        return reader, tag

    def test_delay(self):
        network = LoopbackNetwork()
        reader, tag = self.pair(network, 1, ConstantDelay(0.01))
        start = network.clock.now_ns()
        tag.send(WireMessage.apdu(PCD, b"\x01"))
        msg = reader.poll(1.0)
        self.assertEqual(msg.data, b"\x01")
        self.assertEqual(network.clock.now_ns() - start, 20_000_000)

    def test_poll_timeout(self):
        network = LoopbackNetwork()
        reader, _ = self.pair(network, 1)
        start = network.clock.now_ns()
        self.assertIsNone(reader.poll(0.5))
        self.assertEqual(network.clock.now_ns() - start, 500_000_000)

    def test_fifo(self):
        network = LoopbackNetwork(random_state=3)
        reader, tag = self.pair(network, 1, NormalDelay(0.01, 0.02))
        for i in range(10):
            tag.send(WireMessage.apdu(PCD, bytes([i])))
        network.run()
        self.assertEqual([m.data[0] for m in reader.inbox], list(range(10)))

    def test_session_isolation(self):
        network = LoopbackNetwork(random_state=4)
        pairs = [self.pair(network, sid, NormalDelay(0.005, 0.003))
                 for sid in (1, 2, 3)]
        rng = np.random.default_rng(4)
        for _ in range(60):
            sid = int(rng.integers(1, 4))
            pairs[sid - 1][1].send(WireMessage.apdu(PCD, bytes([sid])))
        network.run()
        for sid, (reader, _) in enumerate(pairs, 1):
            self.assertTrue(all(m.data == bytes([sid]) for m in reader.inbox))

    def test_leave_on_close(self):
        network = LoopbackNetwork()
        reader, tag = self.pair(network, 1)
        tag.close()
        msg = reader.poll(1.0)
        self.assertIs(msg.msg_type, MsgType.Leave)
        self.assertIs(msg.role, EndpointRole.Tag)


class TestTcp(unittest.TestCase):

    def setUp(self):
        self.server = run_server("127.0.0.1:0", background=True,
                                 idle_timeout=5.0)
        self.address = "%s:%d" % self.server.address
        self.links = []

    def tearDown(self):
        for link in self.links:
            link.close()
        self.server.shutdown()
        self.server.server_close()

    def link(self, session_id, role):
        link = TcpLink(self.address, timeout=2.0)
        self.links.append(link)
        link.send(WireMessage.join(session_id, role))
        return link

    def test_relay_order(self):
        reader = self.link(1, EndpointRole.Reader)
        tag = self.link(1, EndpointRole.Tag)
        self.assertTrue(wait_for(
            lambda: self.server.hub.member_count(1) == 2))
        for i in range(10):
            tag.send(WireMessage.apdu(PCD, bytes([i, 0xA4])))
        received = [reader.poll(2.0) for _ in range(10)]
        self.assertEqual([m.data[0] for m in received], list(range(10)))

    def test_killed_client(self):
        reader = self.link(1, EndpointRole.Reader)
        tag = self.link(1, EndpointRole.Tag)
        self.assertTrue(wait_for(
            lambda: self.server.hub.member_count(1) == 2))
        tag.sock.shutdown(socket.SHUT_RDWR)
        tag.sock.close()
        msg = reader.poll(2.0)
        self.assertIs(msg.msg_type, MsgType.Leave)

    def test_malformed_frame(self):
        reader = self.link(2, EndpointRole.Reader)
        tag = self.link(2, EndpointRole.Tag)
        with socket.create_connection(self.server.address, timeout=2.0) \
                as raw:
            raw.sendall(struct.pack(">I", 0))
            answer = FrameDecoder().feed(raw.recv(4096))
        self.assertIs(answer[0].msg_type, MsgType.Error)
        self.assertTrue(wait_for(
            lambda: self.server.hub.member_count(2) == 2))
        tag.send(WireMessage.apdu(PCD, b"\x01"))
        self.assertEqual(reader.poll(2.0).data, b"\x01")


if __name__ == '__main__':
    unittest.main()
