"""
nfclab: NFC protocol laboratory.

Python implementation of a hardware-free NFC relay, replay and clone toolkit.

Definition of the pcapng log codec: ISO 14443 framing of APDUs and static
tag data records on a user defined link type.

"""

# import modules
import enum
import logging
import re
import struct
from dataclasses import dataclass
from pathlib import Path

from nfclab._core import (Apdu, Direction, LogMode, ParseError, SessionLog,
                          UnsupportedFrameError)
from nfclab._nci import decode_tag_data, encode_tag_data

logger = logging.getLogger(__name__)

# block types
SHB_TYPE = 0x0A0D0D0A
IDB_TYPE = 0x00000001
EPB_TYPE = 0x00000006
BYTE_ORDER_MAGIC = 0x1A2B3C4D

# link types
LINKTYPE_ISO_14443 = 264
LINKTYPE_USER0 = 147
SUPPORTED_LINKTYPES = (LINKTYPE_ISO_14443, LINKTYPE_USER0)

# options
OPT_ENDOFOPT = 0
OPT_COMMENT = 1
OPT_SHB_USERAPPL = 4
OPT_IF_NAME = 2
OPT_IF_TSRESOL = 9

# ISO 14443 capture pseudo-header
ISO14443_VERSION = 0x00
ISO14443_HEADER = struct.Struct(">BBH")

# I-block protocol control byte: b8 b7 = 00, b6 = 0, b2 = 1
PCB_I_BLOCK = 0x02
PCB_I_BLOCK_MASK = 0xE2
PCB_BLOCK_NUMBER = 0x01
PCB_NAD_FOLLOWING = 0x04
PCB_CID_FOLLOWING = 0x08

DEFAULT_TSRESOL = 6
USERAPPL = "nfclab"


class FrameEvent(enum.IntEnum):
    """Event byte of the ISO 14443 pseudo-header."""
    DataPcdToPiccCrcDropped = 0xFA
    DataPiccToPcdCrcDropped = 0xFB
    FieldOn = 0xFC
    FieldOff = 0xFD
    DataPcdToPicc = 0xFE
    DataPiccToPcd = 0xFF


# data events and the direction they encode
EVENT_DIRECTION = {
    FrameEvent.DataPcdToPiccCrcDropped: Direction.PcdToPicc,
    FrameEvent.DataPiccToPcdCrcDropped: Direction.PiccToPcd,
    FrameEvent.DataPcdToPicc: Direction.PcdToPicc,
    FrameEvent.DataPiccToPcd: Direction.PiccToPcd,
}
DIRECTION_EVENT = {
    Direction.PcdToPicc: FrameEvent.DataPcdToPiccCrcDropped,
    Direction.PiccToPcd: FrameEvent.DataPiccToPcdCrcDropped,
}


# %% ISO 14443 frames

def is_i_block(pcb):
    return pcb & PCB_I_BLOCK_MASK == PCB_I_BLOCK


@dataclass(frozen=True)
class Iso14443Frame:
    """Pseudo-header event plus body (PCB byte and APDU)."""
    event: FrameEvent
    body: bytes

    def __post_init__(self):
        object.__setattr__(self, "event", FrameEvent(self.event))
        object.__setattr__(self, "body", bytes(self.body))

    @property
    def pcb(self):
        return self.body[0] if self.body else None

    def to_bytes(self):
        return ISO14443_HEADER.pack(ISO14443_VERSION, self.event,
                                    len(self.body)) + self.body

    @classmethod
    def from_bytes(cls, data, offset=0):
        """Parse a captured packet; `offset` is used for error reports."""
        data = bytes(data)
        if len(data) < ISO14443_HEADER.size:
            raise ParseError("ISO 14443 packet shorter than its header",
                             offset=offset)
        version, event, length = ISO14443_HEADER.unpack_from(data)
        if version != ISO14443_VERSION:
            raise ParseError("unsupported ISO 14443 header version %d"
                             % version, offset=offset)
        try:
            event = FrameEvent(event)
        except ValueError:
            raise ParseError("unknown ISO 14443 event 0x%02X" % event,
                             offset=offset + 1) from None
        body = data[ISO14443_HEADER.size:]
        if len(body) != length:
            raise ParseError("ISO 14443 header declares %d bytes, packet "
                             "holds %d" % (length, len(body)),
                             offset=offset + 2)
        return cls(event, body)


def encode_frame(apdu, block_number=0):
    """Wrap an APDU in an I-block with the CRC-dropped event of its
    direction."""
    pcb = PCB_I_BLOCK | (block_number & PCB_BLOCK_NUMBER)
    return Iso14443Frame(DIRECTION_EVENT[apdu.direction],
                         bytes([pcb]) + apdu.payload)


def decode_frame(frame, timestamp=0):
    """Recover the APDU of an I-block frame."""
    if frame.event not in EVENT_DIRECTION:
        raise UnsupportedFrameError("event %s carries no data"
                                    % frame.event.name)
    if len(frame.body) < 2:
        raise ParseError("frame body must hold a PCB and a payload",
                         offset=0)
    pcb = frame.body[0]
    if not is_i_block(pcb):
        raise UnsupportedFrameError("PCB 0x%02X is not an I-block" % pcb,
                                    offset=0)
    # skip optional CID and NAD bytes
    start = 1
    if pcb & PCB_CID_FOLLOWING:
        start += 1
    if pcb & PCB_NAD_FOLLOWING:
        start += 1
    payload = frame.body[start:]
    if not payload:
        raise ParseError("I-block without payload", offset=start)
    return Apdu(payload, EVENT_DIRECTION[frame.event], timestamp)


# %% Block writer

def pad32(data):
    return data + b"\x00" * (-len(data) % 4)


def _option(code, value):
    return struct.pack("<HH", code, len(value)) + pad32(value)


def _block(block_type, body):
    body = pad32(body)
    total = 12 + len(body)
    return struct.pack("<II", block_type, total) + body + \
        struct.pack("<I", total)


def _section_header(comment):
    body = struct.pack("<IHHq", BYTE_ORDER_MAGIC, 1, 0, -1)
    body += _option(OPT_SHB_USERAPPL, USERAPPL.encode())
    body += _option(OPT_COMMENT, comment.encode())
    body += _option(OPT_ENDOFOPT, b"")
    return _block(SHB_TYPE, body)


def _interface(link_type, name, tsresol):
    body = struct.pack("<HHI", link_type, 0, 0)
    body += _option(OPT_IF_NAME, name.encode())
    # microseconds are the default resolution
    if tsresol != DEFAULT_TSRESOL:
        body += _option(OPT_IF_TSRESOL, bytes([tsresol]))
    body += _option(OPT_ENDOFOPT, b"")
    return _block(IDB_TYPE, body)


def _packet(interface_id, ticks, data):
    body = struct.pack("<IIIII", interface_id, ticks >> 32,
                       ticks & 0xFFFFFFFF, len(data), len(data))
    body += pad32(data)
    return _block(EPB_TYPE, body)


# interface ids inside exported files
ISO_INTERFACE = 0
USER0_INTERFACE = 1


def export_log(log, tsresol=DEFAULT_TSRESOL):
    """
    Serialize a session log as a pcapng file image.

    Parameters
    ----------
    log : SessionLog
        Log to export.
    tsresol : int
        Decimal timestamp resolution exponent, 6 for microseconds (the
        default) up to 9 for nanoseconds.

    Returns
    -------
    bytes
        The pcapng file.
    """
    # check resolution
    if not isinstance(tsresol, int) or not 0 <= tsresol <= 9:
        raise ValueError("tsresol must be an integer within [0, 9], got %s"
                         % tsresol)
    unit = 10 ** (9 - tsresol)
    base = log.created // unit
    out = bytearray(_section_header("created_ns=%d;mode=%s"
                                    % (log.created, log.mode.value)))
    out += _interface(LINKTYPE_ISO_14443, "iso14443", tsresol)
    out += _interface(LINKTYPE_USER0, "tagdata", tsresol)
    # static tag data precedes the APDU traffic
    if log.initial is not None:
        out += _packet(USER0_INTERFACE, base, encode_tag_data(log.initial))
    block_number = 0
    for apdu in log:
        frame = encode_frame(apdu, block_number)
        out += _packet(ISO_INTERFACE, base + apdu.timestamp // unit,
                       frame.to_bytes())
        # block number toggles once per exchange
        if apdu.direction is Direction.PiccToPcd:
            block_number ^= 1
    logger.debug("exported %d APDUs at resolution 1e-%d", len(log), tsresol)
    return bytes(out)


# %% Block reader

class _Interface:
    def __init__(self, link_type, units_per_second):
        self.link_type = link_type
        self.units_per_second = units_per_second

    def to_ns(self, ticks):
        return ticks * 10 ** 9 // self.units_per_second


def _parse_options(data, order, offset):
    # yields (code, value, value offset) until the end of options
    pos = 0
    while pos + 4 <= len(data):
        code, length = struct.unpack_from(order + "HH", data, pos)
        if code == OPT_ENDOFOPT:
            return
        if pos + 4 + length > len(data):
            raise ParseError("option %d overruns its block" % code,
                             offset=offset + pos)
        yield code, data[pos + 4:pos + 4 + length], offset + pos
        pos += 4 + length + (-length % 4)


def _resolution(value, offset):
    if len(value) != 1:
        raise ParseError("if_tsresol must be one byte", offset=offset)
    exponent = value[0] & 0x7F
    # high bit selects a power of two
    return 2 ** exponent if value[0] & 0x80 else 10 ** exponent


_CREATED_RE = re.compile(r"created_ns=(\d+)")


def import_log(data):
    """
    Parse a pcapng file image into a session log in Imported mode.
    """
    data = bytes(data)
    if len(data) < 28 or struct.unpack_from("<I", data, 0)[0] != SHB_TYPE:
        raise ParseError("not a pcapng section header", offset=0)
    order = None
    interfaces = []
    created = None
    initial = None
    packets = []
    offset = 0
    while offset < len(data):
        if offset + 12 > len(data):
            raise ParseError("truncated block header", offset=offset)
        block_type = struct.unpack_from(
            "<I" if order is None else order + "I", data, offset)[0]
        if block_type == SHB_TYPE:
            # byte order of the section follows from the magic
            magic = data[offset + 8:offset + 12]
            if struct.unpack("<I", magic)[0] == BYTE_ORDER_MAGIC:
                order = "<"
            elif struct.unpack(">I", magic)[0] == BYTE_ORDER_MAGIC:
                order = ">"
            else:
                raise ParseError("bad byte order magic", offset=offset + 8)
            interfaces = []
        total = struct.unpack_from(order + "I", data, offset + 4)[0]
        # check the block length fields
        if total < 12 or total % 4:
            raise ParseError("invalid block length %d" % total,
                             offset=offset + 4)
        if offset + total > len(data):
            raise ParseError("block of %d bytes truncated" % total,
                             offset=offset)
        trailer = struct.unpack_from(order + "I", data,
                                     offset + total - 4)[0]
        if trailer != total:
            raise ParseError("trailing block length %d differs from %d"
                             % (trailer, total),
                             offset=offset + total - 4)
        body = data[offset + 8:offset + total - 4]
        body_offset = offset + 8

        if block_type == SHB_TYPE:
            if len(body) < 16:
                raise ParseError("section header too short", offset=offset)
            major = struct.unpack_from(order + "H", body, 4)[0]
            if major != 1:
                raise ParseError("unsupported pcapng version %d" % major,
                                 offset=body_offset + 4)
            for code, value, _ in _parse_options(body[16:], order,
                                                 body_offset + 16):
                if code == OPT_COMMENT:
                    match = _CREATED_RE.search(value.decode(errors="replace"))
                    if match:
                        created = int(match.group(1))
        elif block_type == IDB_TYPE:
            if len(body) < 8:
                raise ParseError("interface block too short", offset=offset)
            link_type = struct.unpack_from(order + "H", body, 0)[0]
            units = 10 ** DEFAULT_TSRESOL
            for code, value, opt_offset in _parse_options(
                    body[8:], order, body_offset + 8):
                if code == OPT_IF_TSRESOL:
                    units = _resolution(value, opt_offset)
            interfaces.append(_Interface(link_type, units))
        elif block_type == EPB_TYPE:
            if len(body) < 20:
                raise ParseError("packet block too short", offset=offset)
            if_id, high, low, captured, _ = struct.unpack_from(
                order + "IIIII", body, 0)
            if if_id >= len(interfaces):
                raise ParseError("packet references undefined interface %d"
                                 % if_id, offset=body_offset)
            if 20 + captured > len(body):
                raise ParseError("packet data truncated",
                                 offset=body_offset + 20)
            iface = interfaces[if_id]
            if iface.link_type not in SUPPORTED_LINKTYPES:
                raise ParseError("unsupported link type %d"
                                 % iface.link_type, offset=body_offset)
            packet = body[20:20 + captured]
            ticks = (high << 32) | low
            if iface.link_type == LINKTYPE_USER0:
                record = decode_tag_data(packet)
                if initial is None:
                    initial = (record, iface, ticks)
                else:
                    logger.warning("ignoring additional static tag data "
                                   "record at offset %d", offset)
            else:
                frame = Iso14443Frame.from_bytes(packet, body_offset + 20)
                if frame.event in (FrameEvent.FieldOn, FrameEvent.FieldOff):
                    logger.debug("skipping field event at offset %d", offset)
                else:
                    packets.append((frame, iface, ticks, body_offset + 20))
        else:
            logger.debug("skipping block type 0x%08X at offset %d",
                         block_type, offset)
        offset += total

    # foreign files without a creation comment start at their first record
    if created is None:
        if initial is not None:
            created = initial[1].to_ns(initial[2])
        elif packets:
            created = packets[0][1].to_ns(packets[0][2])
        else:
            created = 0
    log = SessionLog(mode=LogMode.Imported, created=created,
                     initial=None if initial is None else initial[0])
    for frame, iface, ticks, packet_offset in packets:
        # timestamps relative to the creation time, aligned to the resolution
        unit_ns = max(10 ** 9 // iface.units_per_second, 1)
        base = (created // unit_ns) * unit_ns
        timestamp = max(iface.to_ns(ticks) - base, 0)
        try:
            apdu = decode_frame(frame, timestamp)
        except UnsupportedFrameError as exc:
            raise UnsupportedFrameError(exc.message,
                                        offset=packet_offset) from exc
        except ParseError as exc:
            raise ParseError(exc.message, offset=packet_offset) from exc
        log.append(apdu)
    return log


# %% Files

def write_log(path, log, tsresol=DEFAULT_TSRESOL):
    path = Path(path)
    path.write_bytes(export_log(log, tsresol=tsresol))
    logger.info("wrote %d APDUs to %s", len(log), path)
    return path


def read_log(path):
    return import_log(Path(path).read_bytes())
