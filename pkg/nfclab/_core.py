"""
nfclab: NFC protocol laboratory.

Python implementation of a hardware-free NFC relay, replay and clone toolkit.

Definition of shared domain types, exceptions, clocks and the frame waiting
time helpers.

"""

# import modules
import enum
import logging
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)


# %% Exceptions

class NfcLabError(Exception):
    """Base class of all nfclab errors."""


class OrderingError(NfcLabError, ValueError):
    """Raised when a log entry would move time backwards."""


class ParseError(NfcLabError, ValueError):
    """Raised when a binary structure cannot be decoded."""

    def __init__(self, message, offset=None):
        self.offset = offset
        self.message = message
        if offset is not None:
            message = "%s (at byte offset %d)" % (message, offset)
        super().__init__(message)


class UnsupportedFrameError(ParseError):
    """Raised for ISO 14443 blocks other than I-blocks."""


class ValidationError(NfcLabError, ValueError):
    """Raised for illegal tag data or configuration streams."""


class ProtocolError(NfcLabError):
    """Violation of the relay wire protocol."""


class StartupError(NfcLabError):
    """A server could not bind or a client could not connect."""


class PluginError(NfcLabError):
    """A plugin crashed or answered with a malformed reply."""


class CryptoError(NfcLabError):
    """Base class of secure channel failures."""


class AuthenticationFailure(CryptoError):
    """Message authentication failed."""


class FormatFailure(AuthenticationFailure):
    """Decrypted data carried an invalid padding."""


class ProtocolAbort(NfcLabError):
    """A lock protocol participant aborted the run."""

    def __init__(self, stage, reason, status=None):
        self.stage = stage
        self.reason = reason
        self.status = status
        super().__init__("aborted at %s: %s" % (stage, reason))


class CardRemovedError(NfcLabError):
    """The card left the field during a transaction."""


class UnknownRequestError(NfcLabError):
    """A card model has no answer for a request."""


# %% Enumerations

class Direction(enum.IntEnum):
    """Direction of an APDU, with its stable one byte code."""
    PcdToPicc = 0x01
    PiccToPcd = 0x02

    @property
    def opposite(self):
        return (Direction.PiccToPcd if self is Direction.PcdToPicc
                else Direction.PcdToPicc)

    @property
    def label(self):
        return "pcd" if self is Direction.PcdToPicc else "picc"

    @classmethod
    def from_label(cls, label):
        # accept both the short labels and the member names
        label = str(label).lower()
        if label in ("pcd", "pcdtopicc", "reader"):
            return cls.PcdToPicc
        if label in ("picc", "picctopcd", "tag"):
            return cls.PiccToPcd
        raise ValueError("direction must be pcd or picc, got %s" % label)


class TagTech(enum.IntEnum):
    """Tag technologies that can be emulated."""
    NfcA = 0x01
    NfcB = 0x02
    NfcF = 0x03

    @property
    def prefix(self):
        return {TagTech.NfcA: "LA_", TagTech.NfcB: "LB_",
                TagTech.NfcF: "LF_"}[self]

    @property
    def letter(self):
        return self.prefix[1]

    @classmethod
    def from_letter(cls, letter):
        letter = str(letter).upper()
        for tech in cls:
            if tech.letter == letter:
                return tech
        raise ValueError("tech must be one of a, b or f, got %s" % letter)


class LogMode(enum.Enum):
    """Mode a session log was recorded in."""
    Relay = "relay"
    Replay = "replay"
    Clone = "clone"
    Imported = "imported"


# static tag data fields per technology, listen mode parameters of NCI
TECH_FIELDS = {
    TagTech.NfcA: ("NFCID1", "SEL_INFO", "BIT_FRAME_SDD",
                   "PLATFORM_CONFIG", "HIST_BY"),
    TagTech.NfcB: ("NFCID0", "APPLICATION_DATA", "SFGI", "SENSB_INFO",
                   "ADC_FO", "H_INFO_RSP"),
    TagTech.NfcF: ("T3T_IDENTIFIERS_1", "T3T_FLAGS", "T3T_PMM"),
}

# admissible NFCID1 lengths (single, double and triple size)
NFCID1_LENGTHS = (4, 7, 10)


# %% Value types

@dataclass(frozen=True)
class Apdu:
    """
    One APDU payload with its direction and a timestamp in nanoseconds
    relative to the start of the log.
    """
    payload: bytes
    direction: Direction
    timestamp: int = 0

    def __post_init__(self):
        # normalize the payload to immutable bytes
        payload = bytes(self.payload)
        if len(payload) < 1:
            raise ValidationError("APDU payload must not be empty")
        object.__setattr__(self, "payload", payload)
        object.__setattr__(self, "direction", Direction(self.direction))
        # timestamps are integral nanoseconds
        if isinstance(self.timestamp, (bool, float)) or not isinstance(
                self.timestamp, (int, np.integer)):
            raise ValidationError("timestamp must be an integer number of "
                                  "nanoseconds, got %s" % self.timestamp)
        if self.timestamp < 0:
            raise ValidationError("timestamp must be non-negative, got %s"
                                  % self.timestamp)
        object.__setattr__(self, "timestamp", int(self.timestamp))

    def with_timestamp(self, timestamp):
        return Apdu(self.payload, self.direction, timestamp)

    def __repr__(self):
        return "Apdu(%s %s @%dns)" % (self.direction.label,
                                      self.payload.hex(), self.timestamp)


def _normalize_field_name(tech, name):
    # strip an optional LA_/LB_/LF_ prefix, reject the other technologies
    name = str(name).upper()
    for other in TagTech:
        if name.startswith(other.prefix):
            if other is not tech:
                raise ValidationError("field %s is not legal for %s"
                                      % (name, tech.name))
            name = name[len(other.prefix):]
    if name not in TECH_FIELDS[tech]:
        raise ValidationError("field %s is not legal for %s"
                              % (name, tech.name))
    return name


@dataclass(frozen=True)
class StaticTagData:
    """
    Technology tagged initialization data of a tag, kept as an ordered
    sequence of (field name, value) pairs.
    """
    tech: TagTech
    fields: Tuple[Tuple[str, bytes], ...] = ()

    def __post_init__(self):
        tech = TagTech(self.tech)
        object.__setattr__(self, "tech", tech)
        # accept mappings as well as pair sequences
        items = (self.fields.items() if hasattr(self.fields, "items")
                 else self.fields)
        normalized = []
        seen = set()
        for name, value in items:
            name = _normalize_field_name(tech, name)
            if name in seen:
                raise ValidationError("field %s given twice" % name)
            seen.add(name)
            value = bytes(value)
            if len(value) > 255:
                raise ValidationError("field %s longer than 255 bytes"
                                      % name)
            if name == "NFCID1" and len(value) not in NFCID1_LENGTHS:
                raise ValidationError("NFCID1 must be 4, 7 or 10 bytes, "
                                      "got %d" % len(value))
            normalized.append((name, value))
        object.__setattr__(self, "fields", tuple(normalized))

    def get(self, name, default=None):
        name = _normalize_field_name(self.tech, name)
        for key, value in self.fields:
            if key == name:
                return value
        return default

    def names(self):
        return [name for name, _ in self.fields]

    def as_dict(self):
        return dict(self.fields)

    @property
    def identifier(self):
        """NFCID1, NFCID0 or the first T3T identifier, if present."""
        key = {TagTech.NfcA: "NFCID1", TagTech.NfcB: "NFCID0",
               TagTech.NfcF: "T3T_IDENTIFIERS_1"}[self.tech]
        return self.get(key)

    def to_dict(self):
        return {"tech": self.tech.letter,
                "fields": {name: value.hex() for name, value in self.fields}}

    @classmethod
    def from_dict(cls, data):
        return cls(TagTech.from_letter(data["tech"]),
                   [(name, bytes.fromhex(value))
                    for name, value in data["fields"].items()])


class FwtIndex(int):
    """Frame waiting time integer, 0 <= i <= 14."""

    def __new__(cls, i):
        if isinstance(i, bool) or not isinstance(i, (int, np.integer)):
            raise ValueError("FWT index must be an integer, got %s" % i)
        if not FWT_MIN_INDEX <= i <= FWT_MAX_INDEX:
            raise ValueError("FWT index must be within [0, 14], got %s" % i)
        return super().__new__(cls, int(i))


# %% Session logs

class SessionLog:
    """
    Ordered traffic log of one session. Built by a single writer.

    Parameters
    ----------
    mode : LogMode
        Mode the log is recorded in.
    created : int or NoneType
        Wall-clock creation time in nanoseconds since the epoch. The default
        is None, which uses the current time.
    initial : StaticTagData or NoneType
        Static tag data exchanged before the APDU traffic.
    """

    def __init__(self, mode=LogMode.Relay, created=None, initial=None,
                 entries=None):
        self.mode = LogMode(mode)
        self.created = int(time.time_ns() if created is None else created)
        self.initial = initial
        self.entries: List[Apdu] = []
        for apdu in entries or ():
            self.append(apdu)

    def append(self, apdu):
        # entries must be non-decreasing in time, equal stamps allowed
        if self.entries and apdu.timestamp < self.entries[-1].timestamp:
            raise OrderingError(
                "timestamp %d precedes last entry at %d"
                % (apdu.timestamp, self.entries[-1].timestamp))
        self.entries.append(apdu)
        return self

    def set_initial(self, data):
        """Store static tag data; only the first record is kept."""
        if self.initial is not None:
            if self.initial != data:
                logger.warning("log already holds initial data, ignoring "
                               "new record for %s", data.tech.name)
            return False
        self.initial = data
        return True

    @property
    def last_timestamp(self):
        return self.entries[-1].timestamp if self.entries else 0

    def requests(self):
        return [a for a in self.entries if a.direction is Direction.PcdToPicc]

    def responses(self):
        return [a for a in self.entries if a.direction is Direction.PiccToPcd]

    def traffic(self):
        """Direction and payload pairs, without timing."""
        return [(a.direction, a.payload) for a in self.entries]

    def __len__(self):
        return len(self.entries)

    def __iter__(self) -> Iterator[Apdu]:
        return iter(self.entries)

    def __repr__(self):
        return "SessionLog(mode=%s, entries=%d, initial=%s)" % (
            self.mode.value, len(self.entries),
            None if self.initial is None else self.initial.tech.name)

    # JSON representation of the log store
    def to_dict(self):
        return {
            "mode": self.mode.value,
            "created": self.created,
            "initial": None if self.initial is None else self.initial.to_dict(),
            "entries": [{"t": a.timestamp, "dir": a.direction.label,
                         "data": a.payload.hex()} for a in self.entries],
        }

    @classmethod
    def from_dict(cls, data):
        initial = data.get("initial")
        return cls(
            mode=LogMode(data.get("mode", LogMode.Imported.value)),
            created=data.get("created"),
            initial=None if initial is None else StaticTagData.from_dict(
                initial),
            entries=[Apdu(bytes.fromhex(e["data"]),
                          Direction.from_label(e["dir"]), int(e["t"]))
                     for e in data.get("entries", [])])


def append_entry(log, apdu):
    """Append `apdu` to `log`, raising OrderingError on time regression."""
    return log.append(apdu)


# %% Frame waiting time

FWT_MIN_INDEX = 0
FWT_MAX_INDEX = 14
# 256 * 16 carrier cycles at 13.56 MHz
FWT_BASE = Fraction(256 * 16, 13560000)


def fwt_seconds(i):
    """Frame waiting time FWT_i in seconds."""
    i = FwtIndex(i)
    # evaluate exactly, round once
    return float(FWT_BASE * 2 ** int(i))


def min_fwt_index_covering(latency):
    """Smallest FWT index whose window covers `latency` seconds, or None."""
    if latency < 0:
        raise ValueError("latency must be non-negative, got %s" % latency)
    for i in range(FWT_MIN_INDEX, FWT_MAX_INDEX + 1):
        if fwt_seconds(i) >= latency:
            return FwtIndex(i)
    return None


# %% Clocks

class VirtualClock:
    """Simulated clock in integer nanoseconds, advanced explicitly."""

    def __init__(self, start_ns=0):
        self._now = int(start_ns)

    def now_ns(self):
        return self._now

    def now(self):
        return self._now / 1e9

    def advance(self, seconds):
        if seconds < 0:
            raise ValueError("cannot advance by %s seconds" % seconds)
        self._now += int(round(seconds * 1e9))
        return self._now

    def advance_to(self, ns):
        # never move backwards
        self._now = max(self._now, int(ns))
        return self._now


class WallClock:
    """Monotonic wall clock; advancing it sleeps."""

    def __init__(self):
        self._start = time.monotonic_ns()

    def now_ns(self):
        return time.monotonic_ns() - self._start

    def now(self):
        return self.now_ns() / 1e9

    def advance(self, seconds):
        if seconds > 0:
            time.sleep(seconds)
        return self.now_ns()

    def advance_to(self, ns):
        remaining = int(ns) - self.now_ns()
        if remaining > 0:
            time.sleep(remaining / 1e9)
        return self.now_ns()


def make_clock(kind):
    """Build a clock from its name, virtual or wall."""
    if kind in (None, "virtual"):
        return VirtualClock()
    if kind == "wall":
        return WallClock()
    raise ValueError("clock must be virtual or wall, got %s" % kind)


# %% Card models

class CardModel:
    """
    Local stand-in for a tag behind a reader-role endpoint.

    Subclasses set `static_data` and implement `transceive`, which returns
    the response bytes or None when the card stays silent.
    """
    static_data: Optional[StaticTagData] = None
    processing_delay = 0.0

    def transceive(self, payload):
        raise NotImplementedError

    def delay_for(self, payload):
        """Seconds the card needs to answer `payload`."""
        return self.processing_delay


@dataclass
class TimeoutEvent:
    """A request whose reply missed its deadline."""
    timestamp: int
    request: bytes
    waited: float
    notes: dict = field(default_factory=dict)
