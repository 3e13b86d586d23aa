"""
nfclab: NFC protocol laboratory.

Python implementation of a hardware-free NFC relay, replay and clone toolkit.

Definition of the NCI CORE_SET_CONFIG stream codec, the parameter registry,
clone profiles and the simulated NFC controller.

"""

# import modules
import logging
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional, Tuple

from nfclab._core import (TECH_FIELDS, ParseError, StaticTagData, TagTech,
                          ValidationError)

logger = logging.getLogger(__name__)

# environment variable naming an alternative registry file
REGISTRY_ENV = "NFCLAB_NCI_REGISTRY"
DEFAULT_REGISTRY_PATH = Path(__file__).parent / "data" / "nci_params.txt"

# every symbol the registry has to map
KNOWN_SYMBOLS = tuple(tech.prefix + name for tech in TagTech
                      for name in TECH_FIELDS[tech])

MAX_ENTRIES = 255
MAX_VALUE_LENGTH = 255


# %% Registry

class NciRegistry:
    """
    Bijective mapping between symbolic NCI parameter names and their one
    byte wire ids.
    """

    def __init__(self, mapping):
        by_symbol = {}
        by_id = {}
        for symbol, wire_id in dict(mapping).items():
            symbol = str(symbol).upper()
            # check the symbol is one of the listen mode parameters
            if symbol not in KNOWN_SYMBOLS:
                raise ValueError("unknown NCI parameter symbol %s" % symbol)
            if not isinstance(wire_id, int) or not 0 <= wire_id <= 0xFF:
                raise ValueError("wire id of %s must be a byte, got %s"
                                 % (symbol, wire_id))
            # raise value error on a non bijective mapping
            if wire_id in by_id:
                raise ValueError("wire id 0x%02X used by %s and %s"
                                 % (wire_id, by_id[wire_id], symbol))
            by_symbol[symbol] = wire_id
            by_id[wire_id] = symbol
        missing = [s for s in KNOWN_SYMBOLS if s not in by_symbol]
        if missing:
            raise ValueError("registry lacks %s" % ", ".join(missing))
        self._by_symbol = by_symbol
        self._by_id = by_id

    @classmethod
    def parse(cls, text, source="<string>"):
        """Parse `SYMBOL=0xNN` lines, `#` starts a comment."""
        mapping = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError("%s:%d: expected SYMBOL=0xNN, got %r"
                                 % (source, lineno, line))
            symbol, value = (part.strip() for part in line.split("=", 1))
            try:
                wire_id = int(value, 0)
            except ValueError:
                raise ValueError("%s:%d: bad wire id %r"
                                 % (source, lineno, value)) from None
            if symbol in mapping:
                raise ValueError("%s:%d: %s defined twice"
                                 % (source, lineno, symbol))
            mapping[symbol] = wire_id
        return cls(mapping)

    @classmethod
    def load(cls, path):
        path = Path(path)
        return cls.parse(path.read_text(), source=str(path))

    def wire_id(self, symbol):
        try:
            return self._by_symbol[str(symbol).upper()]
        except KeyError:
            raise ValidationError("unknown NCI parameter %s" % symbol) from None

    def symbol(self, wire_id):
        """Symbol of a wire id, None for ids outside the registry."""
        return self._by_id.get(wire_id)

    def symbols(self):
        return dict(self._by_symbol)

    def __eq__(self, other):
        return isinstance(other, NciRegistry) and \
            self._by_symbol == other._by_symbol

    def __hash__(self):
        return hash(tuple(sorted(self._by_symbol.items())))


@lru_cache(maxsize=None)
def _load_registry(path):
    logger.debug("loading NCI registry from %s", path)
    return NciRegistry.load(path)


def default_registry():
    """Registry from NFCLAB_NCI_REGISTRY, or the packaged defaults."""
    return _load_registry(os.environ.get(REGISTRY_ENV,
                                         str(DEFAULT_REGISTRY_PATH)))


# %% Stream types

@dataclass(frozen=True)
class NciParam:
    """A parameter id; `name` is None for ids unknown to the registry."""
    wire_id: int
    name: Optional[str] = None

    def __post_init__(self):
        if not isinstance(self.wire_id, int) or not 0 <= self.wire_id <= 0xFF:
            raise ValidationError("wire id must be a byte, got %s"
                                  % self.wire_id)

    @classmethod
    def of(cls, key, registry=None):
        """Build from a symbol or a raw wire id."""
        registry = registry or default_registry()
        if isinstance(key, NciParam):
            return key
        if isinstance(key, int):
            return cls(key, registry.symbol(key))
        return cls(registry.wire_id(key), str(key).upper())

    @property
    def is_raw(self):
        return self.name is None

    def __str__(self):
        return self.name or "0x%02X" % self.wire_id


@dataclass(frozen=True)
class NciConfigEntry:
    """One TLV of a configuration stream."""
    param: NciParam
    value: bytes

    def __post_init__(self):
        value = bytes(self.value)
        if len(value) > MAX_VALUE_LENGTH:
            raise ValidationError("value of %s longer than %d bytes"
                                  % (self.param, MAX_VALUE_LENGTH))
        object.__setattr__(self, "value", value)

    @property
    def wire_id(self):
        return self.param.wire_id

    def encode(self):
        return bytes([self.wire_id, len(self.value)]) + self.value


@dataclass(frozen=True)
class NciConfigStream:
    """Ordered CORE_SET_CONFIG parameter list without duplicate ids."""
    entries: Tuple[NciConfigEntry, ...] = ()

    def __post_init__(self):
        entries = tuple(self.entries)
        # check the entry count fits the count byte
        if len(entries) > MAX_ENTRIES:
            raise ValidationError("stream holds %d entries, at most %d "
                                  "allowed" % (len(entries), MAX_ENTRIES))
        seen = set()
        for entry in entries:
            if entry.wire_id in seen:
                raise ValidationError("duplicate parameter %s in stream"
                                      % entry.param)
            seen.add(entry.wire_id)
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_pairs(cls, pairs, registry=None):
        """Build from (symbol or wire id, value) pairs."""
        registry = registry or default_registry()
        return cls(tuple(NciConfigEntry(NciParam.of(key, registry),
                                        bytes(value))
                         for key, value in pairs))

    def ids(self):
        return [entry.wire_id for entry in self.entries]

    def get(self, key, registry=None):
        wire_id = NciParam.of(key, registry).wire_id
        for entry in self.entries:
            if entry.wire_id == wire_id:
                return entry.value
        return None

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __repr__(self):
        return "NciConfigStream(%s)" % ", ".join(
            "%s=%s" % (e.param, e.value.hex()) for e in self.entries)


EMPTY_STREAM = NciConfigStream()


# %% Codec

def encode_stream(stream):
    """Count byte followed by id, length and value of every entry."""
    return bytes([len(stream)]) + b"".join(e.encode() for e in stream)


def decode_stream(data, registry=None):
    """Decode a CORE_SET_CONFIG parameter stream."""
    registry = registry or default_registry()
    data = bytes(data)
    if not data:
        raise ParseError("empty configuration stream", offset=0)
    count = data[0]
    offset = 1
    entries = []
    seen = set()
    for _ in range(count):
        # check id and length bytes are present
        if offset + 2 > len(data):
            raise ParseError("truncated parameter header",
                             offset=min(offset + 1, len(data)))
        wire_id, length = data[offset], data[offset + 1]
        start = offset + 2
        # check the declared value length
        if start + length > len(data):
            raise ParseError("parameter 0x%02X declares %d value bytes, %d "
                             "available" % (wire_id, length,
                                            len(data) - start),
                             offset=start)
        if wire_id in seen:
            raise ParseError("duplicate parameter 0x%02X" % wire_id,
                             offset=offset)
        seen.add(wire_id)
        entries.append(NciConfigEntry(NciParam(wire_id,
                                               registry.symbol(wire_id)),
                                      data[start:start + length]))
        offset = start + length
    # raise on bytes the count byte does not cover
    if offset != len(data):
        raise ParseError("count byte declares %d entries but %d bytes "
                         "remain" % (count, len(data) - offset),
                         offset=offset)
    return NciConfigStream(tuple(entries))


def encode_tag_data(data, registry=None):
    """Static tag data as a tech byte followed by NCI shaped TLVs."""
    registry = registry or default_registry()
    out = bytearray([int(data.tech)])
    for name, value in data.fields:
        out += bytes([registry.wire_id(data.tech.prefix + name), len(value)])
        out += value
    return bytes(out)


def decode_tag_data(blob, registry=None):
    """Inverse of encode_tag_data."""
    registry = registry or default_registry()
    blob = bytes(blob)
    if not blob:
        raise ParseError("empty static tag data", offset=0)
    try:
        tech = TagTech(blob[0])
    except ValueError:
        raise ParseError("unknown technology code 0x%02X" % blob[0],
                         offset=0) from None
    offset = 1
    fields = []
    while offset < len(blob):
        if offset + 2 > len(blob):
            raise ParseError("truncated tag data field", offset=offset)
        wire_id, length = blob[offset], blob[offset + 1]
        if offset + 2 + length > len(blob):
            raise ParseError("tag data field 0x%02X overruns record"
                             % wire_id, offset=offset + 2)
        symbol = registry.symbol(wire_id)
        if symbol is None or not symbol.startswith(tech.prefix):
            raise ParseError("field id 0x%02X not legal for %s"
                             % (wire_id, tech.name), offset=offset)
        fields.append((symbol, blob[offset + 2:offset + 2 + length]))
        offset += 2 + length
    try:
        return StaticTagData(tech, fields)
    except ValidationError as exc:
        raise ParseError(str(exc), offset=0) from exc


# %% Clone profiles

def profile_from_tag(data, registry=None):
    """Configuration stream that makes the controller emulate `data`."""
    registry = registry or default_registry()
    entries = []
    for name, value in data.fields:
        # check each field against its technology row
        if name not in TECH_FIELDS[data.tech]:
            raise ValidationError("field %s is not legal for %s"
                                  % (name, data.tech.name))
        symbol = data.tech.prefix + name
        entries.append(NciConfigEntry(NciParam(registry.wire_id(symbol),
                                               symbol), value))
    return NciConfigStream(tuple(entries))


def merge_protect(custom, incoming):
    """
    Split `incoming` into the entries that may reach the controller and
    the ones that would overwrite a protected custom value.
    """
    protected = set(custom.ids())
    forwarded = tuple(e for e in incoming if e.wire_id not in protected)
    rejected = tuple(e for e in incoming if e.wire_id in protected)
    return NciConfigStream(forwarded), NciConfigStream(rejected)


def restore_snapshot(*rejected):
    """
    Stream to apply after clone mode ends: accumulated rejected values,
    later values superseding earlier ones for the same id.
    """
    latest = {}
    for stream in rejected:
        for entry in stream:
            # dict keeps the first-seen order of each id
            latest[entry.wire_id] = entry
    return NciConfigStream(tuple(latest.values()))


class NciConfigGuard:
    """Protects a custom profile across several incoming configurations."""

    def __init__(self, custom):
        self.custom = custom
        self.rejected = []

    def filter(self, incoming):
        forwarded, rejected = merge_protect(self.custom, incoming)
        if len(rejected):
            logger.debug("holding back %d protected parameters",
                         len(rejected))
            self.rejected.append(rejected)
        return forwarded

    def restore_stream(self):
        return restore_snapshot(*self.rejected)


class SimulatedNfcc:
    """
    Configuration store of an emulated NFC controller. Streams are applied
    the way CORE_SET_CONFIG would apply them.
    """

    def __init__(self, registry=None):
        self.registry = registry or default_registry()
        self._config = {}
        self.history = []

    def set_config(self, stream):
        for entry in stream:
            self._config[entry.wire_id] = entry
        self.history.append(stream)
        logger.debug("NFCC applied %s", stream)
        return self

    def current(self):
        return NciConfigStream(tuple(self._config.values()))

    def value(self, key):
        entry = self._config.get(NciParam.of(key, self.registry).wire_id)
        return None if entry is None else entry.value

    def identity(self, tech):
        """Static tag data the controller currently emulates for `tech`."""
        fields = []
        for name in TECH_FIELDS[tech]:
            value = self.value(tech.prefix + name)
            if value is not None:
                fields.append((name, value))
        return StaticTagData(tech, fields)
