"""
nfclab: NFC protocol laboratory.

Unit tests of the pcapng export and import.

"""

# import modules
import struct
import tempfile
import unittest
from pathlib import Path

from nfclab._core import (Apdu, Direction, LogMode, ParseError, SessionLog,
                          StaticTagData, TagTech, UnsupportedFrameError)
from nfclab._pcapng import (EPB_TYPE, IDB_TYPE, LINKTYPE_ISO_14443,
                            LINKTYPE_USER0, SHB_TYPE, FrameEvent,
                            Iso14443Frame, _interface, _packet,
                            _section_header, decode_frame, encode_frame,
                            export_log, import_log, read_log, write_log)
from nfclab._utils import make_session_log

try:
    from scapy.utils import PcapNgReader
except ImportError:
    PcapNgReader = None


def blocks(data):
    """(type, body) of every block in a little endian file."""
    out = []
    offset = 0
    while offset < len(data):
        block_type, total = struct.unpack_from("<II", data, offset)
        out.append((block_type, data[offset + 8:offset + total - 4]))
        offset += total
    return out


class TestFrames(unittest.TestCase):

    def test_encode_select(self):
        frame = encode_frame(Apdu(bytes.fromhex("00a40400"),
                                  Direction.PcdToPicc))
        self.assertEqual(frame.event, FrameEvent.DataPcdToPiccCrcDropped)
        self.assertEqual(frame.event, 0xFA)
        self.assertEqual(frame.body, bytes.fromhex("0200a40400"))
        self.assertEqual(frame.to_bytes(), bytes.fromhex("00fa00050200a40400"))

    def test_decode_inverse(self):
        apdu = Apdu(bytes.fromhex("9100"), Direction.PiccToPcd, 42)
        self.assertEqual(decode_frame(encode_frame(apdu, 1), 42), apdu)

    def test_non_i_block(self):
        frame = Iso14443Frame(FrameEvent.DataPiccToPcdCrcDropped,
                              bytes.fromhex("c0"))
        with self.assertRaises(ParseError):
            decode_frame(frame)
        frame = Iso14443Frame(FrameEvent.DataPiccToPcdCrcDropped,
                              bytes.fromhex("c0aa"))
        with self.assertRaises(UnsupportedFrameError):
            decode_frame(frame)

    def test_cid_skipped(self):
        frame = Iso14443Frame(FrameEvent.DataPcdToPicc,
                              bytes.fromhex("0a0190"))
        self.assertEqual(decode_frame(frame).payload, b"\x90")


class TestExport(unittest.TestCase):

    def test_empty_log(self):
        data = export_log(SessionLog(created=0))
        types = [t for t, _ in blocks(data)]
        self.assertEqual(types, [SHB_TYPE, IDB_TYPE, IDB_TYPE])

    def test_single_request(self):
        log = SessionLog(created=0)
        log.append(Apdu(bytes.fromhex("5a010000"), Direction.PcdToPicc))
        packets = [b for t, b in blocks(export_log(log)) if t == EPB_TYPE]
        self.assertEqual(len(packets), 1)
        if_id, _, _, captured, _ = struct.unpack_from("<IIIII", packets[0])
        frame = Iso14443Frame.from_bytes(packets[0][20:20 + captured])
        self.assertEqual(if_id, 0)
        self.assertEqual(decode_frame(frame).direction, Direction.PcdToPicc)
        self.assertEqual(decode_frame(frame).payload,
                         bytes.fromhex("5a010000"))

    def test_initial_first(self):
        log = make_session_log(n_exchanges=3, seed=3)
        packets = [b for t, b in blocks(export_log(log)) if t == EPB_TYPE]
        self.assertEqual(len(packets), 7)
        interfaces = [struct.unpack_from("<I", p)[0] for p in packets]
        self.assertEqual(interfaces, [1, 0, 0, 0, 0, 0, 0])
        link_types = [struct.unpack_from("<H", b)[0]
                      for t, b in blocks(export_log(log)) if t == IDB_TYPE]
        self.assertEqual(link_types, [LINKTYPE_ISO_14443, LINKTYPE_USER0])

    def test_bad_resolution(self):
        with self.assertRaises(ValueError):
            export_log(SessionLog(), tsresol=10)


class TestImport(unittest.TestCase):

    def assertSameLog(self, copy, log):
        self.assertEqual(copy.entries, log.entries)
        self.assertEqual(copy.initial, log.initial)
        self.assertEqual(copy.created, log.created)

    def test_round_trip(self):
        for seed in range(200):
            log = make_session_log(n_exchanges=seed % 12,
                                   initial=seed % 3 != 0,
                                   tech=TagTech(seed % 3 + 1), seed=seed)
            copy = import_log(export_log(log))
            self.assertIs(copy.mode, LogMode.Imported)
            self.assertSameLog(copy, log)

    def test_nanosecond_resolution(self):
        log = make_session_log(resolution_ns=1, seed=11)
        self.assertSameLog(import_log(export_log(log, tsresol=9)), log)

    def test_bad_magic(self):
        data = bytearray(export_log(make_session_log(seed=1)))
        data[0:4] = b"GARB"
        with self.assertRaises(ParseError) as cm:
            import_log(bytes(data))
        self.assertEqual(cm.exception.offset, 0)

    def test_truncated(self):
        data = export_log(make_session_log(seed=2))
        with self.assertRaises(ParseError):
            import_log(data[:-6])

    def test_unknown_event(self):
        packet = bytes([0x00, 0x42, 0x00, 0x02, 0x02, 0x90])
        data = _section_header("created_ns=0;mode=relay") + \
            _interface(LINKTYPE_ISO_14443, "iso14443", 6) + \
            _packet(0, 0, packet)
        with self.assertRaises(ParseError) as cm:
            import_log(data)
        self.assertIn("0x42", str(cm.exception))

    def test_unknown_link_type(self):
        data = _section_header("created_ns=0;mode=relay") + \
            _interface(1, "ethernet", 6) + _packet(0, 0, b"\x00" * 14)
        with self.assertRaises(ParseError):
            import_log(data)

    def test_foreign_file_without_comment(self):
        packet = encode_frame(Apdu(b"\x90\x00", Direction.PiccToPcd))
        data = _section_header("captured elsewhere") + \
            _interface(LINKTYPE_ISO_14443, "iso14443", 6) + \
            _packet(0, 1000, packet.to_bytes()) + \
            _packet(0, 1500, packet.to_bytes())
        log = import_log(data)
        self.assertEqual(log.created, 1000 * 1000)
        self.assertEqual([a.timestamp for a in log], [0, 500_000])

    def test_files(self):
        log = make_session_log(seed=5)
        with tempfile.TemporaryDirectory() as tmp:
            path = write_log(Path(tmp) / "session.pcapng", log)
            self.assertSameLog(read_log(path), log)

    @unittest.skipIf(PcapNgReader is None, "scapy is not installed")
    def test_external_reader(self):
        log = SessionLog(created=1_600_000_000 * 10**9,
                         initial=StaticTagData(TagTech.NfcA,
                                               [("NFCID1", bytes(7))]))
        log.append(Apdu(bytes.fromhex("00a40400"), Direction.PcdToPicc, 0))
        log.append(Apdu(bytes.fromhex("9000"), Direction.PiccToPcd, 3000))
        with tempfile.TemporaryDirectory() as tmp:
            path = write_log(Path(tmp) / "session.pcapng", log)
            with PcapNgReader(str(path)) as reader:
                packets = [bytes(p) for p in reader]
        self.assertEqual(len(packets), 3)
        self.assertEqual(packets[1], bytes.fromhex("00fa00050200a40400"))
        self.assertEqual(packets[2], bytes.fromhex("00fb0003029000"))


if __name__ == '__main__':
    unittest.main()
