"""
nfclab: NFC protocol laboratory.

Python implementation of a hardware-free NFC relay, replay and clone toolkit.

Definition of the server side plugin pipeline, the built-in plugins and the
out-of-process plugin protocol.

"""

# import modules
import enum
import logging
import os
import select
import struct
import subprocess
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from nfclab._core import (Direction, LogMode, ParseError, PluginError,
                          ProtocolAbort, SessionLog, Apdu, VirtualClock)
from nfclab._desfire import (CMD_SELECT_APPLICATION, STATUS_ILLEGAL_COMMAND,
                             LockVariant, new_pcd_state, new_picc_state,
                             pcd_step, picc_step, uid_candidates)
from nfclab._nci import decode_tag_data

logger = logging.getLogger(__name__)

# first bytes an out-of-process plugin writes to its standard output
OOP_HANDSHAKE = b"NFCP\x01"
OOP_TIMEOUT = 2.0
_LENGTH = struct.Struct(">I")


class PayloadKind(enum.IntEnum):
    """What a plugin is looking at."""
    Initial = 0x01
    Apdu = 0x02


# %% Verdicts

@dataclass(frozen=True)
class Pass:
    payload: bytes
    code = 0


@dataclass(frozen=True)
class _Drop:
    code = 1

    def __repr__(self):
        return "Drop"


Drop = _Drop()


@dataclass(frozen=True)
class Replace:
    payloads: Tuple[bytes, ...]
    code = 2

    def __post_init__(self):
        payloads = tuple(bytes(p) for p in self.payloads)
        if not payloads:
            raise ValueError("Replace needs at least one payload")
        object.__setattr__(self, "payloads", payloads)


def verdict_payloads(verdict):
    """Payloads a verdict lets through, in order."""
    if isinstance(verdict, Pass):
        return [verdict.payload]
    if isinstance(verdict, Replace):
        return list(verdict.payloads)
    return []


# %% Plugin interface

class PluginContext:
    """
    What a plugin sees of its session: the session id, the server clock and
    a way to answer the endpoint the current message came from.
    """

    def __init__(self, session_id=0, clock=None, respond=None):
        self.session_id = session_id
        self.clock = clock or VirtualClock()
        self._respond = respond

    def respond(self, kind, direction, payload):
        if self._respond is None:
            raise PluginError("this context cannot inject messages")
        self._respond(PayloadKind(kind), Direction(direction), bytes(payload))


class Plugin:
    """
    Base class of in-process plugins. `process` returns a verdict and must
    not be invoked reentrantly.
    """
    name = "plugin"

    def __init__(self, **config):
        self.config = config

    def process(self, ctx, kind, direction, payload):
        raise NotImplementedError

    def close(self):
        pass

    def __repr__(self):
        return "<%s %s>" % (type(self).__name__, self.name)


class IdentityPlugin(Plugin):
    name = "identity"

    def process(self, ctx, kind, direction, payload):
        return Pass(payload)


class DropAllPlugin(Plugin):
    name = "drop-all"

    def process(self, ctx, kind, direction, payload):
        return Drop


class XorPlugin(Plugin):
    """XORs every APDU byte with `mask` (0xFF by default)."""
    name = "xor-ff"

    def __init__(self, mask="ff", **config):
        super().__init__(mask=mask, **config)
        self.mask = int(mask, 16) if isinstance(mask, str) else int(mask)
        if not 0 <= self.mask <= 0xFF:
            raise ValueError("mask must be a byte, got %s" % mask)

    def process(self, ctx, kind, direction, payload):
        if kind is not PayloadKind.Apdu:
            return Pass(payload)
        return Pass(bytes(b ^ self.mask for b in payload))


class UpperPlugin(Plugin):
    """Upper-cases ASCII letters of APDUs."""
    name = "upper"

    def process(self, ctx, kind, direction, payload):
        if kind is not PayloadKind.Apdu:
            return Pass(payload)
        return Pass(bytes(payload).upper())


class LogPlugin(Plugin):
    """Pass-through that records everything into a per-session log."""
    name = "log"

    def __init__(self, **config):
        super().__init__(**config)
        self.logs: Dict[int, SessionLog] = {}
        self.rows: List[tuple] = []
        self._start = {}

    def log_for(self, session_id):
        return self.logs.get(session_id)

    def process(self, ctx, kind, direction, payload):
        session_id = ctx.session_id
        now = ctx.clock.now_ns()
        if session_id not in self.logs:
            self.logs[session_id] = SessionLog(LogMode.Relay)
            self._start[session_id] = now
        log = self.logs[session_id]
        timestamp = max(now - self._start[session_id], log.last_timestamp)
        self.rows.append((kind, direction, bytes(payload), timestamp))
        if kind is PayloadKind.Initial:
            try:
                log.set_initial(decode_tag_data(payload))
            except ParseError as exc:
                logger.warning("log plugin cannot decode initial data: %s",
                               exc)
        else:
            log.append(Apdu(payload, direction, timestamp))
        return Pass(payload)


def _key(value):
    key = bytes.fromhex(value) if isinstance(value, str) else bytes(value)
    if len(key) != 16:
        raise ValueError("key must be 16 bytes, got %d" % len(key))
    return key


class WalkByPcdPlugin(Plugin):
    """
    PCD role of the cylinder unlocking procedure inside the server. Talks to
    the reader-role endpoint holding a transponder and collects the
    credential it releases, no cylinder involved.

    Every InitialData message (a transponder entering the field) starts a
    new run.
    """
    name = "walkby"

    def __init__(self, key, variant="flawed", **config):
        super().__init__(key=key, variant=variant, **config)
        self.key = _key(key)
        self.variant = LockVariant(variant)
        self.uids: List[bytes] = []
        self.failures: List[ProtocolAbort] = []
        self._runs = {}

    def process(self, ctx, kind, direction, payload):
        if kind is PayloadKind.Initial:
            state = new_pcd_state(self.key, self.variant)
            self._runs[ctx.session_id] = state
            _, outgoing = pcd_step(state)
            ctx.respond(PayloadKind.Apdu, Direction.PcdToPicc, outgoing)
            return Pass(payload)
        state = self._runs.get(ctx.session_id)
        if state is None or direction is not Direction.PiccToPcd:
            return Pass(payload)
        try:
            _, outgoing = pcd_step(state, payload)
        except ProtocolAbort as abort:
            logger.info("walk-by run failed: %s", abort)
            self.failures.append(abort)
            del self._runs[ctx.session_id]
            return Drop
        if outgoing is None:
            logger.info("walk-by obtained credential %s",
                        state.credential.hex())
            self.uids.append(state.credential)
            del self._runs[ctx.session_id]
        else:
            ctx.respond(PayloadKind.Apdu, Direction.PcdToPicc, outgoing)
        return Drop


class BruteForcePlugin(Plugin):
    """
    PICC role with guessed UIDs, answering a cylinder behind a tag-role
    endpoint. Each Select Application starts the next candidate.
    """
    name = "bruteforce"

    def __init__(self, key, start_uid=None, stride=1, random_state=None,
                 **config):
        super().__init__(key=key, start_uid=start_uid, stride=stride,
                         **config)
        self.key = _key(key)
        if isinstance(start_uid, str):
            start_uid = bytes.fromhex(start_uid)
        self.start_uid = start_uid
        self.stride = int(stride)
        self.random_state = random_state
        self._candidates = uid_candidates(start_uid, self.stride)
        self.attempts: List[bytes] = []
        self.state = None
        self.exhausted = False

    @property
    def current(self):
        return self.attempts[-1] if self.attempts else None

    def process(self, ctx, kind, direction, payload):
        if kind is not PayloadKind.Apdu or \
                direction is not Direction.PcdToPicc:
            return Pass(payload)
        if payload[:1] == bytes([CMD_SELECT_APPLICATION]):
            uid = next(self._candidates, None)
            if uid is None:
                self.exhausted = True
                self.state = None
            else:
                self.attempts.append(uid)
                self.state = new_picc_state(self.key, uid,
                                            random_state=self.random_state)
        if self.state is None:
            reply = bytes([STATUS_ILLEGAL_COMMAND])
        else:
            try:
                _, reply = picc_step(self.state, payload)
            except ProtocolAbort as abort:
                reply = bytes([abort.status or STATUS_ILLEGAL_COMMAND])
        ctx.respond(PayloadKind.Apdu, Direction.PiccToPcd, reply)
        return Drop


BUILTINS = {cls.name: cls for cls in (IdentityPlugin, DropAllPlugin,
                                      XorPlugin, UpperPlugin, LogPlugin,
                                      WalkByPcdPlugin, BruteForcePlugin)}


# %% Out-of-process plugins

def encode_request(kind, direction, payload):
    body = bytes([int(kind), int(direction)]) + bytes(payload)
    return _LENGTH.pack(len(body)) + body


def encode_reply(verdict):
    if isinstance(verdict, Pass):
        return bytes([0]) + _LENGTH.pack(len(verdict.payload)) + \
            verdict.payload
    if isinstance(verdict, Replace):
        out = bytearray([2, len(verdict.payloads)])
        for payload in verdict.payloads:
            out += _LENGTH.pack(len(payload)) + payload
        return bytes(out)
    return bytes([1])


class _Pipe:
    """Reads exact byte counts from a child's stdout with a deadline."""

    def __init__(self, stream, deadline):
        self.fd = stream.fileno()
        self.deadline = deadline

    def read(self, n):
        out = bytearray()
        while len(out) < n:
            remaining = self.deadline - time.monotonic()
            if remaining <= 0:
                raise PluginError("plugin timed out")
            ready, _, _ = select.select([self.fd], [], [], remaining)
            if not ready:
                raise PluginError("plugin timed out")
            chunk = os.read(self.fd, n - len(out))
            if not chunk:
                raise PluginError("plugin closed its output")
            out += chunk
        return bytes(out)


def read_reply(pipe):
    code = pipe.read(1)[0]
    if code == 0:
        (length,) = _LENGTH.unpack(pipe.read(4))
        return Pass(pipe.read(length))
    if code == 1:
        return Drop
    if code == 2:
        count = pipe.read(1)[0]
        if count == 0:
            raise PluginError("Replace reply without payloads")
        payloads = []
        for _ in range(count):
            (length,) = _LENGTH.unpack(pipe.read(4))
            payloads.append(pipe.read(length))
        return Replace(tuple(payloads))
    raise PluginError("unknown verdict code %d" % code)


class OutOfProcessPlugin(Plugin):
    """
    Plugin living in a child process, spoken to over its standard streams.

    Parameters
    ----------
    command : str or list of str
        Executable path, or a full argument vector.
    timeout : float
        Seconds to wait for the handshake and for every reply. The default
        is 2.0.
    """

    def __init__(self, command, timeout=OOP_TIMEOUT, name=None, **config):
        super().__init__(**config)
        self.command = [command] if isinstance(command, str) else \
            list(command)
        self.timeout = float(timeout)
        self.name = name or os.path.basename(self.command[-1])
        self.process_ = None

    def start(self):
        try:
            self.process_ = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        except OSError as exc:
            raise PluginError("cannot start %s: %s" % (self.command, exc)) \
                from exc
        hello = _Pipe(self.process_.stdout,
                      time.monotonic() + self.timeout).read(
                          len(OOP_HANDSHAKE))
        if hello != OOP_HANDSHAKE:
            self.close()
            raise PluginError("bad handshake %r" % hello)
        logger.debug("started plugin %s (pid %d)", self.name,
                     self.process_.pid)
        return self

    def call(self, kind, direction, payload):
        if self.process_ is None or self.process_.poll() is not None:
            self.start()
        try:
            self.process_.stdin.write(encode_request(kind, direction,
                                                     payload))
            self.process_.stdin.flush()
            return read_reply(_Pipe(self.process_.stdout,
                                    time.monotonic() + self.timeout))
        except (OSError, PluginError, struct.error) as exc:
            # the stream is out of sync, start over on the next call
            self.close()
            if isinstance(exc, PluginError):
                raise
            raise PluginError(str(exc)) from exc

    def process(self, ctx, kind, direction, payload):
        return self.call(kind, direction, payload)

    def close(self):
        if self.process_ is None:
            return
        try:
            self.process_.stdin.close()
        except OSError:
            pass
        try:
            self.process_.wait(timeout=self.timeout)
        except subprocess.TimeoutExpired:
            self.process_.kill()
            self.process_.wait()
        self.process_ = None


def oop_plugin_call(command, kind, direction, payload, timeout=OOP_TIMEOUT):
    """Single request to a freshly started out-of-process plugin."""
    plugin = OutOfProcessPlugin(command, timeout=timeout)
    try:
        return plugin.start().call(PayloadKind(kind), Direction(direction),
                                   payload)
    finally:
        plugin.close()


# %% Descriptors

class PluginKind(enum.Enum):
    InProcess = "in-process"
    OutOfProcess = "out-of-process"


@dataclass
class PluginDescriptor:
    """How to build one plugin of a pipeline."""
    name: str
    kind: PluginKind = PluginKind.InProcess
    executable: Optional[str] = None
    config: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_token(cls, token, options=None):
        """A built-in name, or `@/path/to/executable`."""
        options = options or {}
        if token.startswith("@"):
            path = token[1:]
            name = os.path.basename(path)
            return cls(name, PluginKind.OutOfProcess, path,
                       dict(options.get(name, {})))
        if token not in BUILTINS:
            raise ValueError("unknown plugin %s, expected one of %s or "
                             "@path" % (token, ", ".join(sorted(BUILTINS))))
        return cls(token, config=dict(options.get(token, {})))

    def build(self):
        if self.kind is PluginKind.OutOfProcess:
            return OutOfProcessPlugin(self.executable, name=self.name,
                                      **self.config)
        return BUILTINS[self.name](**self.config)


def parse_plugin_options(items):
    """`name.key=value` strings to a nested mapping."""
    options = {}
    for item in items or ():
        target, sep, value = item.partition("=")
        name, dot, key = target.partition(".")
        if not sep or not dot or not name or not key:
            raise ValueError("plugin option must look like name.key=value, "
                             "got %s" % item)
        options.setdefault(name, {})[key] = value
    return options


# %% Pipeline

class Pipeline:
    """
    Ordered plugin chain.

    Parameters
    ----------
    plugins : list
        Plugin objects or descriptors, invoked left to right.
    fail_open : bool
        On a plugin crash, pass that plugin's input on instead of dropping
        the message. The default is False.
    """

    def __init__(self, plugins=(), fail_open=False):
        self.plugins = [p.build() if isinstance(p, PluginDescriptor) else p
                        for p in plugins]
        names = [p.name for p in self.plugins]
        if len(set(names)) != len(names):
            raise ValueError("plugin names must be unique, got %s" % names)
        self.fail_open = fail_open
        self.crashes = 0

    @classmethod
    def from_tokens(cls, tokens, options=None, fail_open=False):
        return cls([PluginDescriptor.from_token(t, options) for t in tokens],
                   fail_open=fail_open)

    def run(self, ctx, kind, direction, payload):
        outputs = self._run_from(0, ctx, PayloadKind(kind),
                                 Direction(direction), bytes(payload))
        if not outputs:
            return Drop
        if len(outputs) == 1:
            return Pass(outputs[0])
        return Replace(tuple(outputs))

    def _run_from(self, index, ctx, kind, direction, payload):
        for position in range(index, len(self.plugins)):
            plugin = self.plugins[position]
            try:
                verdict = plugin.process(ctx, kind, direction, payload)
                if not isinstance(verdict, (Pass, _Drop, Replace)):
                    raise PluginError("%r returned %r" % (plugin, verdict))
            except Exception as exc:
                self.crashes += 1
                if not self.fail_open:
                    logger.error("plugin %s crashed, dropping message: %s",
                                 plugin.name, exc)
                    return []
                logger.warning("plugin %s crashed, passing message on: %s",
                               plugin.name, exc)
                continue
            if verdict is Drop or isinstance(verdict, _Drop):
                logger.debug("plugin %s dropped %s", plugin.name,
                             payload.hex())
                return []
            if isinstance(verdict, Replace):
                # every replacement runs through the rest of the chain
                outputs = []
                for replacement in verdict.payloads:
                    outputs += self._run_from(position + 1, ctx, kind,
                                              direction, replacement)
                return outputs
            payload = verdict.payload
        return [payload]

    def find(self, name):
        for plugin in self.plugins:
            if plugin.name == name:
                return plugin
        raise KeyError(name)

    def close(self):
        for plugin in self.plugins:
            plugin.close()

    def __len__(self):
        return len(self.plugins)


def run_pipeline(plugins, kind, direction, payload, ctx=None,
                 fail_open=False):
    """Run `payload` through `plugins` and return the verdict."""
    pipeline = plugins if isinstance(plugins, Pipeline) else \
        Pipeline(plugins, fail_open=fail_open)
    return pipeline.run(ctx or PluginContext(), kind, direction, payload)
