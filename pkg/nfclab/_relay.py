"""
nfclab: NFC protocol laboratory.

Python implementation of a hardware-free NFC relay, replay and clone toolkit.

Definition of the relay wire protocol, the session hub, its TCP server and
the in-process loopback network running on a virtual clock.

"""

# import modules
import enum
import heapq
import itertools
import logging
import queue
import socket
import socketserver
import struct
import threading
from collections import deque
from dataclasses import dataclass
from pathlib import Path

from sklearn.utils import check_random_state

from nfclab._core import (Apdu, Direction, LogMode, ParseError, ProtocolError,
                          SessionLog, StartupError, VirtualClock, WallClock)
from nfclab._nci import decode_tag_data
from nfclab._pcapng import DEFAULT_TSRESOL, write_log
from nfclab._plugins import (PayloadKind, Pipeline, PluginContext,
                             verdict_payloads)
from nfclab._timing import ZERO_DELAY, delay_from_spec

logger = logging.getLogger(__name__)

_HEADER = struct.Struct(">I")
MAX_MESSAGE_LENGTH = 1 << 20
PING_INTERVAL = 10.0
IDLE_TIMEOUT = 30.0
MAX_SESSION_ID = 0xFF


class MsgType(enum.IntEnum):
    Join = 0x01
    Leave = 0x02
    InitialData = 0x03
    ApduData = 0x04
    Error = 0x05
    Ping = 0x06


class EndpointRole(enum.IntEnum):
    """Role a device takes in a session."""
    Reader = 0x01
    Tag = 0x02

    @classmethod
    def from_label(cls, label):
        label = str(label).lower()
        if label == "reader":
            return cls.Reader
        if label == "tag":
            return cls.Tag
        raise ValueError("role must be reader or tag, got %s" % label)


# %% Wire messages

_ROLE_CODES = frozenset(int(r) for r in EndpointRole)
_DIRECTION_CODES = frozenset(int(d) for d in Direction)


@dataclass(frozen=True)
class WireMessage:
    """One length prefixed relay message."""
    msg_type: MsgType
    payload: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "msg_type", MsgType(self.msg_type))
        object.__setattr__(self, "payload", bytes(self.payload))

    def encode(self):
        return _HEADER.pack(1 + len(self.payload)) + \
            bytes([self.msg_type]) + self.payload

    # constructors
    @classmethod
    def join(cls, session_id, role):
        if not 0 <= session_id <= MAX_SESSION_ID:
            raise ValueError("session id must be a byte, got %s"
                             % session_id)
        return cls(MsgType.Join, bytes([session_id, EndpointRole(role)]))

    @classmethod
    def leave(cls, role=None):
        return cls(MsgType.Leave,
                   b"" if role is None else bytes([EndpointRole(role)]))

    @classmethod
    def initial(cls, blob):
        return cls(MsgType.InitialData, blob)

    @classmethod
    def apdu(cls, direction, payload):
        return cls(MsgType.ApduData, bytes([Direction(direction)]) +
                   bytes(payload))

    @classmethod
    def error(cls, text):
        return cls(MsgType.Error, str(text).encode("utf-8", "replace"))

    @classmethod
    def ping(cls):
        return cls(MsgType.Ping)

    # accessors
    @property
    def session_id(self):
        return self.payload[0]

    @property
    def role(self):
        if self.msg_type is MsgType.Join:
            return EndpointRole(self.payload[1])
        return EndpointRole(self.payload[0]) if self.payload else None

    @property
    def direction(self):
        return Direction(self.payload[0])

    @property
    def data(self):
        return self.payload[1:]

    @property
    def text(self):
        return self.payload.decode("utf-8", "replace")

    def __repr__(self):
        return "WireMessage(%s, %s)" % (self.msg_type.name,
                                        self.payload.hex())


def _validate(msg_type, payload, offset):
    if msg_type is MsgType.Join:
        if len(payload) != 2 or payload[1] not in _ROLE_CODES:
            raise ProtocolError("malformed Join at offset %d" % offset)
    elif msg_type is MsgType.ApduData:
        if len(payload) < 2 or payload[0] not in _DIRECTION_CODES:
            raise ProtocolError("malformed ApduData at offset %d" % offset)
    elif msg_type is MsgType.Leave:
        if len(payload) > 1:
            raise ProtocolError("malformed Leave at offset %d" % offset)


def decode_message(buffer, offset=0):
    """
    Decode one message at `offset`. Returns the message and the offset of
    the next one, or (None, offset) while the buffer is incomplete.
    """
    if len(buffer) - offset < _HEADER.size:
        return None, offset
    (length,) = _HEADER.unpack_from(buffer, offset)
    if length < 1 or length > MAX_MESSAGE_LENGTH:
        raise ProtocolError("invalid message length %d at offset %d"
                            % (length, offset))
    end = offset + _HEADER.size + length
    if len(buffer) < end:
        return None, offset
    code = buffer[offset + _HEADER.size]
    try:
        msg_type = MsgType(code)
    except ValueError:
        raise ProtocolError("unknown message type 0x%02X at offset %d"
                            % (code, offset)) from None
    payload = bytes(buffer[offset + _HEADER.size + 1:end])
    _validate(msg_type, payload, offset)
    return WireMessage(msg_type, payload), end


class FrameDecoder:
    """Incremental decoder for a byte stream."""

    def __init__(self):
        self._buffer = bytearray()

    def feed(self, data):
        self._buffer += data
        messages = []
        offset = 0
        while True:
            msg, offset_next = decode_message(self._buffer, offset)
            if msg is None:
                break
            messages.append(msg)
            offset = offset_next
        del self._buffer[:offset]
        return messages


# %% Sessions

class Session:
    """Members of one session, its log and its cached initial data."""

    def __init__(self, session_id, start_ns):
        self.id = session_id
        self.members = {}
        self.log = SessionLog(LogMode.Relay)
        self.start_ns = start_ns
        self.initial_message = None
        self.dropped = []
        self.closed = False
        self.lock = threading.RLock()

    def timestamp(self, now_ns):
        return max(now_ns - self.start_ns, self.log.last_timestamp)

    def record(self, kind, direction, payload, now_ns):
        if kind is PayloadKind.Initial:
            try:
                self.log.set_initial(decode_tag_data(payload))
            except ParseError as exc:
                logger.warning("session %d: undecodable initial data: %s",
                               self.id, exc)
        else:
            self.log.append(Apdu(payload, direction,
                                 self.timestamp(now_ns)))

    def __len__(self):
        return len(self.members)


class RelayHub:
    """
    Transport independent relay logic: sessions, the plugin pipeline and
    broadcasting.

    Parameters
    ----------
    pipeline : Pipeline or NoneType
        Plugins applied to every message. The default is the empty
        pipeline.
    clock : VirtualClock, WallClock or NoneType
        Clock for log timestamps. The default is a wall clock.
    log_dir : str, Path or NoneType
        Directory receiving a pcapng file per closed session.
    """

    def __init__(self, pipeline=None, clock=None, log_dir=None,
                 tsresol=DEFAULT_TSRESOL):
        self.pipeline = pipeline if pipeline is not None else Pipeline()
        self.clock = clock or WallClock()
        self.log_dir = None if log_dir is None else Path(log_dir)
        self.tsresol = tsresol
        self.sessions = {}
        self.closed_sessions = []
        self._members = {}
        self._lock = threading.RLock()

    # message dispatch
    def handle_message(self, conn, msg):
        if msg.msg_type is MsgType.Join:
            return self.handle_join(conn, msg.session_id, msg.role)
        if msg.msg_type in (MsgType.ApduData, MsgType.InitialData):
            return self.handle_data(conn, msg)
        if msg.msg_type is MsgType.Leave:
            return self.handle_leave(conn)
        if msg.msg_type is MsgType.Error:
            logger.warning("peer %s reported: %s", conn, msg.text)
        return None

    def _fail(self, conn, reason):
        logger.warning("closing %s: %s", conn, reason)
        conn.send(WireMessage.error(reason))
        self.handle_leave(conn)
        conn.close()

    def handle_join(self, conn, session_id, role):
        role = EndpointRole(role)
        with self._lock:
            if conn in self._members:
                self._fail(conn, "connection already joined session %d"
                           % self._members[conn].id)
                return None
        while True:
            with self._lock:
                session = self.sessions.get(session_id)
                if session is None or session.closed:
                    session = Session(session_id, self.clock.now_ns())
                    self.sessions[session_id] = session
            with session.lock:
                # the last member may have left since the lookup
                if session.closed:
                    continue
                session.members[conn] = role
                with self._lock:
                    self._members[conn] = session
                logger.info("%s joined session %d as %s (%d members)", conn,
                            session_id, role.name, len(session))
                # late joiners get the tag data read so far
                if session.initial_message is not None:
                    conn.send(session.initial_message)
            return session

    def handle_data(self, conn, msg):
        with self._lock:
            session = self._members.get(conn)
        if session is None:
            self._fail(conn, "data before Join")
            return []
        if msg.msg_type is MsgType.InitialData:
            kind, direction, payload = (PayloadKind.Initial,
                                        Direction.PiccToPcd, msg.payload)
        else:
            kind, direction, payload = (PayloadKind.Apdu, msg.direction,
                                        msg.data)
        with session.lock:
            session.record(kind, direction, payload, self.clock.now_ns())
            logger.debug("session %d %s %s %s", session.id, kind.name,
                         direction.label, payload.hex())
            ctx = PluginContext(session.id, self.clock,
                                respond=lambda k, d, p: self._respond(
                                    session, conn, k, d, p))
            outputs = verdict_payloads(
                self.pipeline.run(ctx, kind, direction, payload))
            if not outputs:
                session.dropped.append((kind, direction, payload))
                logger.info("session %d: pipeline dropped %s message",
                            session.id, kind.name)
                return []
            recipients = [m for m in session.members if m is not conn]
            for out in outputs:
                if kind is PayloadKind.Initial:
                    out_msg = WireMessage.initial(out)
                    session.initial_message = out_msg
                else:
                    out_msg = WireMessage.apdu(direction, out)
                # never echo to the sender
                for member in recipients:
                    member.send(out_msg)
        return recipients

    def _respond(self, session, conn, kind, direction, payload):
        session.record(kind, direction, payload, self.clock.now_ns())
        if kind is PayloadKind.Initial:
            conn.send(WireMessage.initial(payload))
        else:
            conn.send(WireMessage.apdu(direction, payload))

    def handle_leave(self, conn):
        with self._lock:
            session = self._members.pop(conn, None)
            if session is None:
                return None
        with session.lock:
            role = session.members.pop(conn, None)
            logger.info("%s left session %d", conn, session.id)
            for member in session.members:
                member.send(WireMessage.leave(role))
            # a closed session never takes members again
            empty = session.closed = not session.members
        if empty:
            self.close_session(session)
        return session

    def close_session(self, session):
        with self._lock:
            if self.sessions.get(session.id) is session:
                del self.sessions[session.id]
            self.closed_sessions.append(session)
        if self.log_dir is not None:
            path = self.log_dir / ("session-%03d-%d.pcapng"
                                   % (session.id, session.log.created))
            self.log_dir.mkdir(parents=True, exist_ok=True)
            write_log(path, session.log, tsresol=self.tsresol)
            logger.info("session %d log written to %s", session.id, path)

    def session(self, session_id):
        return self.sessions.get(session_id)

    def member_count(self, session_id):
        session = self.sessions.get(session_id)
        return 0 if session is None else len(session)


# %% TCP transport

class TcpConnection:
    """Hub side of a TCP client."""

    def __init__(self, sock, address):
        self.sock = sock
        self.address = address
        self.closed = False
        self._send_lock = threading.Lock()

    def send(self, msg):
        if self.closed:
            return
        try:
            with self._send_lock:
                self.sock.sendall(msg.encode())
        except OSError as exc:
            logger.warning("send to %s failed: %s", self, exc)
            self.closed = True

    def close(self):
        if not self.closed:
            self.closed = True
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass

    def __repr__(self):
        return "tcp:%s:%s" % self.address[:2]


class _RelayRequestHandler(socketserver.BaseRequestHandler):

    def handle(self):
        hub = self.server.hub
        conn = TcpConnection(self.request, self.client_address)
        decoder = FrameDecoder()
        self.request.settimeout(self.server.idle_timeout)
        try:
            while not conn.closed:
                data = self.request.recv(4096)
                if not data:
                    break
                for msg in decoder.feed(data):
                    hub.handle_message(conn, msg)
                    if conn.closed:
                        break
        except socket.timeout:
            logger.info("%s idle for %gs, closing", conn,
                        self.server.idle_timeout)
        except ProtocolError as exc:
            logger.warning("%s sent a malformed frame: %s", conn, exc)
            conn.send(WireMessage.error(str(exc)))
        except OSError as exc:
            logger.error("connection %s failed: %s", conn, exc)
        finally:
            hub.handle_leave(conn)
            conn.close()


class RelayServer(socketserver.ThreadingTCPServer):
    """Threaded TCP front end of a RelayHub."""
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, hub, idle_timeout=IDLE_TIMEOUT):
        self.hub = hub
        self.idle_timeout = idle_timeout
        try:
            super().__init__(address, _RelayRequestHandler)
        except OSError as exc:
            raise StartupError("cannot listen on %s:%s: %s"
                               % (address[0], address[1], exc)) from exc

    @property
    def address(self):
        return self.server_address[:2]

    def start(self):
        """Serve from a daemon thread."""
        thread = threading.Thread(target=self.serve_forever, daemon=True,
                                  name="nfclab-relay")
        thread.start()
        return thread


def parse_address(text, default_host="127.0.0.1"):
    """`host:port` or `port` to a (host, port) tuple."""
    if isinstance(text, tuple):
        return text
    host, sep, port = str(text).rpartition(":")
    try:
        port = int(port)
    except ValueError:
        raise ValueError("address must look like host:port, got %s"
                         % text) from None
    if not 0 <= port <= 0xFFFF:
        raise ValueError("port must be within [0, 65535], got %s" % port)
    return (host or default_host) if sep else default_host, port


def run_server(listen_address, pipeline=None, log_dir=None, background=False,
               idle_timeout=IDLE_TIMEOUT):
    """
    Start a relay server. Blocks unless `background` is set, in which case
    the running server is returned.
    """
    hub = RelayHub(pipeline=pipeline, log_dir=log_dir)
    server = RelayServer(parse_address(listen_address), hub, idle_timeout)
    logger.info("relay listening on %s:%d with %d plugins",
                server.address[0], server.address[1], len(hub.pipeline))
    if background:
        server.start()
        return server
    try:
        server.serve_forever()
    finally:
        server.server_close()
    return server


class TcpLink:
    """
    Endpoint side of a TCP relay connection. A reader thread queues the
    incoming messages and keeps the connection alive with pings.
    """

    def __init__(self, address, timeout=5.0, clock=None):
        host, port = parse_address(address)
        try:
            self.sock = socket.create_connection((host, port),
                                                 timeout=timeout)
        except OSError as exc:
            raise StartupError("cannot reach relay %s:%d: %s"
                               % (host, port, exc)) from exc
        self.clock = clock or WallClock()
        self.closed = False
        self.on_deliver = None
        self._inbox = queue.Queue()
        self._send_lock = threading.Lock()
        self.sock.settimeout(PING_INTERVAL)
        self._reader = threading.Thread(target=self._read_loop, daemon=True,
                                        name="nfclab-link")
        self._reader.start()

    def _read_loop(self):
        decoder = FrameDecoder()
        try:
            while True:
                try:
                    data = self.sock.recv(4096)
                except socket.timeout:
                    self._send(WireMessage.ping())
                    continue
                if not data:
                    break
                for msg in decoder.feed(data):
                    self._inbox.put(msg)
        except (OSError, ProtocolError) as exc:
            if not self.closed:
                logger.warning("relay link failed: %s", exc)
        finally:
            self._inbox.put(None)

    def _send(self, msg):
        with self._send_lock:
            self.sock.sendall(msg.encode())

    def send(self, msg, after=0.0):
        if after > 0:
            self.clock.advance(after)
        try:
            self._send(msg)
        except OSError as exc:
            self.closed = True
            logger.warning("relay link send failed: %s", exc)

    def poll(self, timeout=None):
        """Next message, or None on timeout or closed link."""
        if self.closed and self._inbox.empty():
            return None
        try:
            msg = self._inbox.get(timeout=timeout)
        except queue.Empty:
            return None
        if msg is None:
            self.closed = True
        return msg

    def close(self):
        if self.closed:
            return
        self.closed = True
        try:
            self._send(WireMessage.leave())
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


# %% Loopback transport

class LoopbackNetwork:
    """
    Discrete event network in one thread. Every link has an uplink and a
    downlink delay model; messages on one link are delivered in order.

    Parameters
    ----------
    pipeline : Pipeline or NoneType
        Plugins of the hub all links connect to.
    clock : VirtualClock or WallClock or NoneType
        The default is a VirtualClock starting at 0.
    random_state : int, RandomState or NoneType
        Source of the sampled link delays.
    """

    def __init__(self, pipeline=None, clock=None, random_state=None,
                 log_dir=None):
        self.clock = clock or VirtualClock()
        self.hub = RelayHub(pipeline, clock=self.clock, log_dir=log_dir)
        self.random_state = check_random_state(random_state)
        self._events = []
        self._seq = itertools.count()

    def connect(self, uplink=ZERO_DELAY, downlink=None, name=None):
        uplink = delay_from_spec(uplink)
        downlink = uplink if downlink is None else delay_from_spec(downlink)
        return LoopbackLink(self, uplink, downlink, name)

    def schedule(self, at_ns, callback):
        heapq.heappush(self._events, (int(at_ns), next(self._seq), callback))

    @property
    def pending(self):
        return len(self._events)

    def step(self):
        if not self._events:
            return False
        at_ns, _, callback = heapq.heappop(self._events)
        self.clock.advance_to(at_ns)
        callback()
        return True

    def run(self, until_ns=None, predicate=None):
        """
        Process events in time order until `predicate` holds, no event is
        left before `until_ns` or the queue is empty. Returns whether the
        predicate holds.
        """
        while True:
            if predicate is not None and predicate():
                return True
            if not self._events or (until_ns is not None and
                                    self._events[0][0] > until_ns):
                break
            self.step()
        if until_ns is not None:
            self.clock.advance_to(until_ns)
        return predicate is not None and predicate()


class _HubSide:
    """What the hub holds for a loopback link."""

    def __init__(self, link):
        self.link = link

    def send(self, msg):
        self.link._deliver(msg)

    def close(self):
        self.link.remote_closed = True

    def __repr__(self):
        return "loop:%s" % self.link.name


class LoopbackLink:
    """Endpoint side of a loopback connection."""
    _names = itertools.count(1)

    def __init__(self, network, uplink, downlink, name=None):
        self.network = network
        self.uplink = uplink
        self.downlink = downlink
        self.name = name or "link%d" % next(self._names)
        self.hub_side = _HubSide(self)
        self.inbox = deque()
        self.on_deliver = None
        self.closed = False
        self.remote_closed = False
        self._up_last = 0
        self._down_last = 0

    @property
    def clock(self):
        return self.network.clock

    def _arrival(self, model, last, after=0.0):
        delay = after + model.sample(self.network.random_state)
        at = self.clock.now_ns() + int(round(delay * 1e9))
        # FIFO per direction
        return max(at, last)

    def send(self, msg, after=0.0):
        if self.closed:
            return
        at = self._arrival(self.uplink, self._up_last, after)
        self._up_last = at
        hub = self.network.hub
        self.network.schedule(
            at, lambda: hub.handle_message(self.hub_side, msg))

    def _deliver(self, msg):
        at = self._arrival(self.downlink, self._down_last)
        self._down_last = at
        self.network.schedule(at, lambda: self._arrive(msg))

    def _arrive(self, msg):
        if self.closed:
            return
        if self.on_deliver is not None:
            self.on_deliver(msg)
        else:
            self.inbox.append(msg)

    def poll(self, timeout=None):
        """Next delivered message, running the network at most `timeout`
        seconds of simulated time."""
        if not self.inbox:
            until = None if timeout is None else \
                self.clock.now_ns() + int(round(timeout * 1e9))
            self.network.run(until, lambda: bool(self.inbox))
        return self.inbox.popleft() if self.inbox else None

    def close(self):
        if self.closed:
            return
        at = self._arrival(self.uplink, self._up_last)
        hub = self.network.hub
        self.network.schedule(at, lambda: hub.handle_leave(self.hub_side))
        self.closed = True
