"""
nfclab: NFC protocol laboratory.

Python implementation of a hardware-free NFC relay, replay and clone toolkit.

Definition of the simulated devices: reader and tag role endpoints, the
clone emitter, the replay engine and the serverless direct transport.

"""

# import modules
import enum
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

from nfclab._core import (Apdu, CardModel, CardRemovedError, Direction,
                          LogMode, ParseError, SessionLog, TimeoutEvent,
                          UnknownRequestError, VirtualClock)
from nfclab._nci import (NciConfigGuard, SimulatedNfcc, decode_tag_data,
                         encode_tag_data, profile_from_tag)
from nfclab._relay import (EndpointRole, LoopbackNetwork, MsgType, TcpLink,
                           WireMessage)
from nfclab._timing import ZERO_DELAY

logger = logging.getLogger(__name__)


def _ns(seconds):
    return int(round(seconds * 1e9))


class _Recorder:
    """Log with timestamps relative to its creation on a given clock."""

    def __init__(self, clock, mode, initial=None):
        self.clock = clock
        self.log = SessionLog(mode, initial=initial)
        self._start = clock.now_ns()

    def record(self, payload, direction, at_ns=None):
        at_ns = self.clock.now_ns() if at_ns is None else at_ns
        timestamp = max(at_ns - self._start, self.log.last_timestamp)
        self.log.append(Apdu(payload, direction, timestamp))
        return timestamp


# %% Card models

class ScriptedResponder(CardModel):
    """
    Card answering from a request to response table.

    Parameters
    ----------
    table : mapping or sequence of pairs
        Request bytes to response bytes; requests must be unique.
    static_data : StaticTagData or NoneType
        Tag data posted on join.
    processing_delay : float
        Seconds per answer. The default is 0.
    """

    def __init__(self, table, static_data=None, processing_delay=0.0):
        items = table.items() if hasattr(table, "items") else table
        self.table = {}
        for request, response in items:
            request = bytes(request)
            if request in self.table:
                raise ValueError("request %s given twice" % request.hex())
            self.table[request] = bytes(response)
        self.static_data = static_data
        self.processing_delay = processing_delay

    def transceive(self, payload):
        try:
            return self.table[bytes(payload)]
        except KeyError:
            raise UnknownRequestError("no scripted answer for %s"
                                      % bytes(payload).hex()) from None

    @classmethod
    def from_text(cls, text, **kwargs):
        """Lines of `request_hex: response_hex`, `#` starts a comment."""
        pairs = []
        for number, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            request, sep, response = line.partition(":")
            if not sep:
                raise ValueError("line %d must look like request: response"
                                 % number)
            pairs.append((bytes.fromhex(request), bytes.fromhex(response)))
        return cls(pairs, **kwargs)

    @classmethod
    def from_file(cls, path, **kwargs):
        return cls.from_text(Path(path).read_text(), **kwargs)


# %% Replay

class ReplayMode(enum.Enum):
    IndexBased = "index"
    DataBased = "data"


@dataclass
class ReplayDivergence:
    """Live request that differs from the logged one it is paired with."""
    index: int
    expected: bytes
    received: bytes


@dataclass
class ReplaySelector:
    """Replay mode, log cursor and the side being replayed."""
    mode: ReplayMode = ReplayMode.DataBased
    side: Direction = Direction.PiccToPcd
    cursor: int = 0
    divergences: List[ReplayDivergence] = field(default_factory=list)

    def __post_init__(self):
        self.mode = ReplayMode(self.mode)
        self.side = Direction(self.side)
        if self.cursor < 0:
            raise ValueError("cursor must be non-negative, got %s"
                             % self.cursor)


def replay_respond(sel, log, request, out_log=None):
    """
    Logged answer of side `sel.side` to `request`, or None.

    Index based replay returns the next entry of the replayed side after the
    cursor and records a divergence when the request differs from the
    logged one. Data based replay returns the entry following the first
    logged request with identical bytes.
    """
    if request.direction is sel.side:
        raise ValueError("request direction must be opposite to the "
                         "replayed side %s" % sel.side.label)
    entries = log.entries
    found = None
    if sel.mode is ReplayMode.IndexBased:
        start = sel.cursor
        for index in range(start, len(entries)):
            if entries[index].direction is not sel.side:
                continue
            expected = next((entries[j] for j in range(index - 1, start - 1,
                                                         -1)
                             if entries[j].direction is not sel.side), None)
            if expected is not None and expected.payload != request.payload:
                divergence = ReplayDivergence(index, expected.payload,
                                              request.payload)
                sel.divergences.append(divergence)
                logger.warning("replay diverges at entry %d: logged %s, got "
                               "%s", index, expected.payload.hex(),
                               request.payload.hex())
            sel.cursor = index + 1
            found = entries[index]
            break
        else:
            sel.cursor = len(entries)
    else:
        for index in range(len(entries) - 1):
            entry = entries[index]
            if entry.direction is not sel.side and \
                    entry.payload == request.payload and \
                    entries[index + 1].direction is sel.side:
                found = entries[index + 1]
                break
    response = None if found is None else Apdu(found.payload, sel.side,
                                               request.timestamp)
    if out_log is not None:
        out_log.append(request)
        if response is not None:
            out_log.append(response)
    return response


class ReplayEngine:
    """
    Replays one side of a log against live requests and records the replay
    traffic in a fresh log.
    """

    def __init__(self, log, mode=ReplayMode.DataBased,
                 side=Direction.PiccToPcd, clock=None):
        self.source = log
        self.sel = ReplaySelector(ReplayMode(mode), Direction(side))
        self.clock = clock or VirtualClock()
        self._recorder = _Recorder(self.clock, LogMode.Replay, log.initial)

    @property
    def log(self):
        return self._recorder.log

    @property
    def divergences(self):
        return self.sel.divergences

    def respond(self, payload):
        """Replayed answer payload, or None."""
        log = self._recorder.log
        timestamp = max(self.clock.now_ns() - self._recorder._start,
                        log.last_timestamp)
        request = Apdu(payload, self.sel.side.opposite, timestamp)
        response = replay_respond(self.sel, self.source, request, log)
        if response is None:
            logger.debug("replay has no answer for %s", request.payload.hex())
            return None
        return response.payload


class LogBackedCard(CardModel):
    """Card model answering from a recorded log."""

    def __init__(self, log, mode=ReplayMode.DataBased, processing_delay=0.0,
                 clock=None):
        self.engine = ReplayEngine(log, mode, Direction.PiccToPcd, clock)
        self.static_data = log.initial
        self.processing_delay = processing_delay

    def transceive(self, payload):
        return self.engine.respond(payload)


# %% Direct transport

class DirectTransport:
    """
    A PCD talking to a card without any relay in between. Answers arrive
    after the card's processing delay on the transport's clock.
    """

    def __init__(self, card, clock=None):
        self.card = card
        self.clock = clock or VirtualClock()
        self._recorder = _Recorder(self.clock, LogMode.Relay,
                                   getattr(card, "static_data", None))
        self._pending = None

    @property
    def log(self):
        return self._recorder.log

    def transceive(self, payload, timeout=None):
        payload = bytes(payload)
        self._recorder.record(payload, Direction.PcdToPicc)
        try:
            response = self.card.transceive(payload)
        except (CardRemovedError, UnknownRequestError) as exc:
            logger.warning("card gave no answer: %s", exc)
            response = None
        self._pending = None
        if response is not None:
            due = self.clock.now_ns() + _ns(self.card.delay_for(payload))
            self._pending = (bytes(response), due)
        return self.wait(timeout)

    def wait(self, timeout=None):
        now = self.clock.now_ns()
        limit = None if timeout is None else now + _ns(timeout)
        if self._pending is not None and (limit is None or
                                          self._pending[1] <= limit):
            response, due = self._pending
            self._pending = None
            self.clock.advance_to(due)
            self._recorder.record(response, Direction.PiccToPcd)
            return response
        if limit is not None:
            self.clock.advance_to(limit)
        return None


# %% Reader role

class ReaderEndpoint:
    """
    Device holding a card: posts its static data on join, forwards every
    request from the server to the card and posts the answer.
    """

    def __init__(self, link, session_id, card, registry=None):
        self.link = link
        self.session_id = session_id
        self.registry = registry
        self.running = True
        self.errors = []
        self._recorder = _Recorder(link.clock, LogMode.Relay)
        link.send(WireMessage.join(session_id, EndpointRole.Reader))
        self.present(card)

    @property
    def log(self):
        return self._recorder.log

    def present(self, card):
        """Put `card` in the field and announce its static data."""
        self.card = card
        data = getattr(card, "static_data", None)
        if data is not None:
            self.log.set_initial(data)
            self.link.send(WireMessage.initial(
                encode_tag_data(data, self.registry)))

    def attach(self):
        """Handle messages as they arrive (loopback links)."""
        self.link.on_deliver = self.handle
        return self

    def handle(self, msg):
        if not self.running:
            return
        if msg.msg_type is MsgType.ApduData:
            if msg.direction is not Direction.PcdToPicc:
                return
            self._answer(msg.data)
        elif msg.msg_type is MsgType.Leave:
            logger.info("reader endpoint: peer %s left",
                        msg.role.name if msg.role else "member")
        elif msg.msg_type is MsgType.Error:
            logger.warning("reader endpoint: server reported %s", msg.text)
            self.errors.append(msg.text)

    def _answer(self, request):
        self._recorder.record(request, Direction.PcdToPicc)
        try:
            response = self.card.transceive(request)
        except CardRemovedError as exc:
            logger.warning("card removed: %s", exc)
            self.link.send(WireMessage.error("card removed"))
            self.stop()
            return
        except UnknownRequestError as exc:
            logger.warning("%s", exc)
            self.link.send(WireMessage.error(str(exc)))
            return
        if response is None:
            return
        delay = self.card.delay_for(request)
        self.link.send(WireMessage.apdu(Direction.PiccToPcd, response),
                       after=delay)
        self._recorder.record(response, Direction.PiccToPcd,
                              self.link.clock.now_ns() + _ns(delay))

    def serve(self, poll_interval=1.0):
        """Blocking loop for links without callbacks."""
        while self.running and not self.link.closed:
            msg = self.link.poll(poll_interval)
            if msg is not None:
                self.handle(msg)
        return self.log

    def stop(self):
        self.running = False
        self.link.close()


def run_reader_endpoint(link, session_id, card, registry=None):
    """
    Run a reader-role endpoint. On a loopback link it is attached and
    answers while the network runs; on a TCP link this call blocks until
    the link closes. Returns the endpoint's log.
    """
    endpoint = ReaderEndpoint(link, session_id, card, registry)
    if isinstance(link, TcpLink):
        return endpoint.serve()
    endpoint.attach()
    return endpoint.log


# %% Tag role

class TagEndpoint:
    """
    Device emulating a tag towards a local reader. Requests of the reader
    are posted to the server, the broadcast answer is returned.

    Parameters
    ----------
    link : LoopbackLink or TcpLink
        Connection to the relay.
    session_id : int
        Session to join.
    deadline : float or NoneType
        Seconds to wait for an answer before recording a timeout.
    preset : StaticTagData or NoneType
        Identity to emulate instead of the one read by the peer.
    """

    def __init__(self, link, session_id, deadline=None, preset=None,
                 registry=None):
        self.link = link
        self.session_id = session_id
        if deadline is not None and not deadline > 0:
            raise ValueError("deadline must be positive, got %s" % deadline)
        self.deadline = deadline
        self.registry = registry
        self.nfcc = SimulatedNfcc(registry)
        self.initial = None
        self.profile = None
        self.preset = preset is not None
        self.timeouts: List[TimeoutEvent] = []
        self.peer_errors = []
        self._recorder = _Recorder(link.clock, LogMode.Relay)
        self._request = None
        link.send(WireMessage.join(session_id, EndpointRole.Tag))
        if preset is not None:
            self.apply_initial(preset)

    @property
    def clock(self):
        return self.link.clock

    @property
    def log(self):
        return self._recorder.log

    def apply_initial(self, data):
        """Configure the emulated identity from static tag data."""
        self.profile = profile_from_tag(data, self.registry)
        self.nfcc.set_config(self.profile)
        self.initial = data
        self.log.set_initial(data)
        logger.info("tag endpoint emulates %s %s", data.tech.name,
                    (data.identifier or b"").hex())

    def identity(self):
        if self.initial is None:
            return None
        return self.nfcc.identity(self.initial.tech)

    def _control(self, msg):
        if msg.msg_type is MsgType.InitialData:
            if self.preset:
                logger.debug("keeping preset identity")
                return
            try:
                self.apply_initial(decode_tag_data(msg.payload,
                                                   self.registry))
            except ParseError as exc:
                logger.warning("undecodable initial data: %s", exc)
        elif msg.msg_type is MsgType.Leave:
            logger.info("tag endpoint: peer %s left",
                        msg.role.name if msg.role else "member")
        elif msg.msg_type is MsgType.Error:
            logger.warning("tag endpoint: server reported %s", msg.text)
            self.peer_errors.append(msg.text)

    def wait_initial(self, timeout=None):
        """Static data of the peer's card, once it has arrived."""
        end = None if timeout is None else self.clock.now_ns() + _ns(timeout)
        while self.initial is None:
            remaining = None if end is None else \
                (end - self.clock.now_ns()) / 1e9
            if remaining is not None and remaining <= 0:
                break
            msg = self.link.poll(remaining)
            if msg is None:
                break
            self._control(msg)
        return self.initial

    def _drain(self):
        # late answers to earlier requests are discarded
        while True:
            msg = self.link.poll(0)
            if msg is None:
                return
            if msg.msg_type is MsgType.ApduData:
                logger.debug("discarding stale answer %s", msg.data.hex())
            else:
                self._control(msg)

    def _limit(self, timeout):
        limits = [t for t in (timeout, self.deadline) if t is not None]
        return min(limits) if limits else None

    def transceive(self, payload, timeout=None):
        payload = bytes(payload)
        self._drain()
        self._request = payload
        self._recorder.record(payload, Direction.PcdToPicc)
        self.link.send(WireMessage.apdu(Direction.PcdToPicc, payload))
        return self.wait(timeout)

    def wait(self, timeout=None):
        """Keep waiting for the answer to the last request."""
        limit = self._limit(timeout)
        start = self.clock.now_ns()
        end = None if limit is None else start + _ns(limit)
        while True:
            remaining = None if end is None else \
                (end - self.clock.now_ns()) / 1e9
            if remaining is not None and remaining <= 0:
                break
            msg = self.link.poll(remaining)
            if msg is None:
                break
            if msg.msg_type is MsgType.ApduData and \
                    msg.direction is Direction.PiccToPcd:
                self._recorder.record(msg.data, Direction.PiccToPcd)
                return msg.data
            self._control(msg)
        waited = (self.clock.now_ns() - start) / 1e9
        event = TimeoutEvent(self._recorder.log.last_timestamp,
                             self._request or b"", waited,
                             {"limit": limit})
        self.timeouts.append(event)
        logger.warning("no answer to %s within %s s",
                       (self._request or b"").hex(), limit)
        return None

    def close(self):
        self.link.close()


def run_tag_endpoint(link, session_id, reader_model, deadline=None,
                     preset=None, initial_timeout=None, registry=None):
    """
    Run a tag-role endpoint: wait for the peer's static data (unless
    `preset` is given), apply its clone profile and let `reader_model`, a
    callable taking a transport, talk through the relay. Returns the
    endpoint's log.
    """
    endpoint = TagEndpoint(link, session_id, deadline, preset, registry)
    if preset is None:
        endpoint.wait_initial(initial_timeout)
    reader_model(endpoint)
    return endpoint.log


class ScriptedReader:
    """Reader model sending fixed requests under a timeout policy."""

    def __init__(self, requests, policy=None):
        self.requests = [bytes(r) for r in requests]
        self.policy = policy
        self.results = []

    def __call__(self, transport):
        for request in self.requests:
            if self.policy is None:
                response = transport.transceive(request)
                self.results.append(response)
            else:
                self.results.append(
                    self.policy.exchange(transport, request).response)
        return self.results


class LogReplayReader:
    """
    Reader model replaying the PCD side of a log.

    The first logged command opens the exchange. Every live card answer is
    then fed to `replay_respond` to pick the next command, by position in
    index based replay or by matching the logged answer in data based
    replay. Stops when the card stays silent or the log has no follow up.
    """

    def __init__(self, log, mode=ReplayMode.DataBased, policy=None):
        if isinstance(mode, ReplaySelector):
            sel = mode
        else:
            sel = ReplaySelector(ReplayMode(mode), Direction.PcdToPicc)
        if sel.side is not Direction.PcdToPicc:
            raise ValueError("a replayed reader sends pcd entries, got %s"
                             % sel.side.label)
        self.log = log
        self.sel = sel
        self.policy = policy
        self.sent = []
        self.results = []

    @property
    def divergences(self):
        return self.sel.divergences

    def _send(self, transport, command):
        if self.policy is None:
            return transport.transceive(command)
        return self.policy.exchange(transport, command).response

    def __call__(self, transport):
        entries = self.log.entries
        first = next((i for i, e in enumerate(entries)
                      if e.direction is Direction.PcdToPicc), None)
        if first is None:
            logger.warning("log holds no reader command to replay")
            return self.results
        self.sel.cursor = first + 1
        command = entries[first].payload
        # data based replay may cycle, one command per entry at most
        for _ in range(len(entries)):
            self.sent.append(command)
            response = self._send(transport, command)
            self.results.append(response)
            if response is None:
                break
            following = replay_respond(
                self.sel, self.log, Apdu(response, Direction.PiccToPcd))
            if following is None:
                break
            command = following.payload
        return self.results


# %% Clone mode

class CloneEndpoint:
    """
    Emulated static identity without APDU support. Configuration the system
    applies while cloning is filtered so the clone profile survives, and
    the held back values are restored on close.
    """

    def __init__(self, data, nfcc=None, registry=None, clock=None):
        self.data = data
        self.nfcc = nfcc or SimulatedNfcc(registry)
        self.stream = profile_from_tag(data, registry)
        self.guard = NciConfigGuard(self.stream)
        self.clock = clock or VirtualClock()
        self.unanswered = []
        self.closed = False
        self._recorder = _Recorder(self.clock, LogMode.Clone, data)
        self.nfcc.set_config(self.stream)
        logger.info("clone active for %s %s", data.tech.name,
                    (data.identifier or b"").hex())

    @property
    def log(self):
        return self._recorder.log

    @property
    def identity(self):
        return self.nfcc.identity(self.data.tech)

    def configure(self, incoming):
        """Apply a configuration from the system, protecting the clone."""
        forwarded = self.guard.filter(incoming)
        self.nfcc.set_config(forwarded)
        return forwarded

    def transceive(self, payload, timeout=None):
        self._recorder.record(bytes(payload), Direction.PcdToPicc)
        self.unanswered.append(bytes(payload))
        logger.info("clone leaves %s unanswered", bytes(payload).hex())
        return self.wait(timeout)

    def wait(self, timeout=None):
        if timeout is not None:
            self.clock.advance(timeout)
        return None

    def close(self):
        """Restore the controller and return the stream applied."""
        restore = self.guard.restore_stream()
        self.nfcc.set_config(restore)
        self.closed = True
        return restore


def run_clone(data, nfcc=None, registry=None):
    """Emulated identity for `data`, see CloneEndpoint."""
    return CloneEndpoint(data, nfcc, registry)


# %% Advanced replay

def open_link(server, uplink=ZERO_DELAY, downlink=None):
    """Link to a loopback network or to a TCP relay at `host:port`."""
    if isinstance(server, LoopbackNetwork):
        return server.connect(uplink, downlink)
    return TcpLink(server)


def advanced_replay(server, session_id, sel, log, reader_model,
                    tag_link=ZERO_DELAY, reader_link=ZERO_DELAY,
                    processing_delay=0.0, deadline=None, card=None):
    """
    Replay over the server, so every replayed payload passes the server's
    pipeline. Returns the requester side log.

    Replaying the PICC side, a log-backed reader-role endpoint answers the
    requests `reader_model` sends through a tag-role endpoint. Replaying
    the PCD side, the reader-role endpoint holds the live `card` and a
    LogReplayReader drives the tag-role endpoint; `reader_model` is unused.
    """
    if sel.side is Direction.PcdToPicc and card is None:
        raise ValueError("replaying the reader side needs a live card")
    link = open_link(server, reader_link)
    preset = log.initial
    if sel.side is Direction.PcdToPicc:
        reader_model = LogReplayReader(log, sel)
        preset = card.static_data
    else:
        card = LogBackedCard(log, sel.mode, processing_delay,
                             clock=link.clock)
        card.engine.sel = sel
    reader = ReaderEndpoint(link, session_id, card)
    thread = None
    if isinstance(reader.link, TcpLink):
        thread = threading.Thread(target=reader.serve, daemon=True,
                                  name="nfclab-replay")
        thread.start()
    else:
        reader.attach()
    tag = TagEndpoint(open_link(server, tag_link), session_id, deadline,
                      preset=preset)
    try:
        reader_model(tag)
    finally:
        tag.close()
        reader.stop()
        if thread is not None:
            thread.join(timeout=5.0)
    return tag.log
