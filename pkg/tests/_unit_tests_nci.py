"""
nfclab: NFC protocol laboratory.

Unit tests of the NCI configuration codec, clone profiles and the merge of
protected parameters.

"""

# import modules
import unittest

import numpy as np

from nfclab._core import ParseError, StaticTagData, TagTech, ValidationError
from nfclab._nci import (EMPTY_STREAM, NciConfigGuard, NciConfigStream,
                         NciRegistry, SimulatedNfcc, decode_stream,
                         decode_tag_data, default_registry, encode_stream,
                         encode_tag_data, merge_protect, profile_from_tag,
                         restore_snapshot)
from nfclab._utils import make_static_tag_data


def random_stream(rng, max_entries=8, ids=None):
    ids = np.arange(256) if ids is None else np.asarray(ids)
    n = int(rng.integers(0, min(max_entries, len(ids)) + 1))
    chosen = rng.choice(ids, size=n, replace=False)
    return NciConfigStream.from_pairs(
        [(int(wire_id), rng.bytes(int(rng.integers(0, 12))))
         for wire_id in chosen])


class TestRegistry(unittest.TestCase):

    def test_packaged_ids(self):
        registry = default_registry()
        self.assertEqual(registry.wire_id("LA_NFCID1"), 0x33)
        self.assertEqual(registry.symbol(0x51), "LF_T3T_PMM")
        self.assertIsNone(registry.symbol(0xEE))

    def test_not_bijective(self):
        text = "\n".join("%s=0x%02X" % (s, 0x10 + i) for i, s in
                         enumerate(default_registry().symbols()))
        NciRegistry.parse(text)
        with self.assertRaises(ValueError):
            NciRegistry.parse(text.replace("0x10", "0x11"))

    def test_incomplete(self):
        with self.assertRaises(ValueError):
            NciRegistry.parse("LA_NFCID1=0x33")


class TestCodec(unittest.TestCase):

    def test_empty(self):
        self.assertEqual(encode_stream(EMPTY_STREAM), b"\x00")
        self.assertEqual(len(decode_stream(b"\x00")), 0)

    def test_single_entry(self):
        stream = NciConfigStream.from_pairs(
            [("LA_NFCID1", bytes.fromhex("04a1b2c3"))])
        self.assertEqual(encode_stream(stream),
                         bytes.fromhex("0133 0404a1b2c3".replace(" ", "")))

    def test_two_entries(self):
        stream = NciConfigStream.from_pairs([("LA_SEL_INFO", b"\x20"),
                                             ("LA_NFCID1", b"\x01\x02")])
        self.assertEqual(encode_stream(stream),
                         bytes.fromhex("02320120330201 02".replace(" ", "")))

    def test_declared_length(self):
        with self.assertRaises(ParseError) as cm:
            decode_stream(bytes.fromhex("013305aa"))
        self.assertEqual(cm.exception.offset, 3)

    def test_count_mismatch(self):
        with self.assertRaises(ParseError):
            decode_stream(bytes.fromhex("02330101"))
        with self.assertRaises(ParseError):
            decode_stream(bytes.fromhex("0033"))
        with self.assertRaises(ParseError):
            decode_stream(bytes.fromhex("023301013301 02".replace(" ", "")))

    def test_round_trip(self):
        rng = np.random.default_rng(123)
        for _ in range(10000):
            stream = random_stream(rng)
            self.assertEqual(decode_stream(encode_stream(stream)), stream)

    def test_tag_data(self):
        for seed in range(30):
            data = make_static_tag_data(TagTech(seed % 3 + 1), seed)
            self.assertEqual(decode_tag_data(encode_tag_data(data)), data)
        with self.assertRaises(ParseError):
            decode_tag_data(bytes([0x01, 0x38, 0x01, 0x00]))


class TestProfiles(unittest.TestCase):

    def test_nfca(self):
        data = StaticTagData(TagTech.NfcA, [("NFCID1", bytes(7))])
        stream = profile_from_tag(data)
        self.assertEqual(stream.ids(), [0x33])
        self.assertEqual(stream.get("LA_NFCID1"), bytes(7))

    def test_nfcf(self):
        data = StaticTagData(TagTech.NfcF, [("T3T_PMM", bytes(8)),
                                            ("T3T_FLAGS", b"\x00\x01")])
        stream = profile_from_tag(data)
        self.assertEqual(len(stream), 2)
        self.assertTrue(all(e.param.name.startswith("LF_") for e in stream))

    def test_cross_tech(self):
        with self.assertRaises(ValidationError):
            profile_from_tag(StaticTagData(TagTech.NfcA,
                                           [("LB_NFCID0", bytes(4))]))

    def test_nfcc_identity(self):
        data = make_static_tag_data(TagTech.NfcB, seed=4)
        nfcc = SimulatedNfcc().set_config(profile_from_tag(data))
        self.assertEqual(nfcc.identity(TagTech.NfcB), data)


class TestMerge(unittest.TestCase):

    def setUp(self):
        self.custom = NciConfigStream.from_pairs([("LA_NFCID1", bytes(7))])
        self.incoming = NciConfigStream.from_pairs(
            [("LA_NFCID1", b"\x01\x02\x03\x04"), ("LA_SEL_INFO", b"\x00")])

    def test_protect(self):
        forwarded, rejected = merge_protect(self.custom, self.incoming)
        self.assertEqual(forwarded.ids(), [0x32])
        self.assertEqual(rejected.ids(), [0x33])

    def test_trivial(self):
        forwarded, rejected = merge_protect(EMPTY_STREAM, self.incoming)
        self.assertEqual(forwarded, self.incoming)
        self.assertEqual(len(rejected), 0)
        forwarded, rejected = merge_protect(self.custom, EMPTY_STREAM)
        self.assertEqual((len(forwarded), len(rejected)), (0, 0))

    def test_partition_law(self):
        rng = np.random.default_rng(7)
        ids = np.arange(0x30, 0x60)
        for _ in range(10000):
            custom = random_stream(rng, 6, ids)
            incoming = random_stream(rng, 10, ids)
            forwarded, rejected = merge_protect(custom, incoming)
            self.assertEqual(sorted(forwarded.ids() + rejected.ids()),
                             sorted(incoming.ids()))
            self.assertFalse(set(forwarded.ids()) & set(custom.ids()))
            self.assertTrue(set(rejected.ids()) <= set(custom.ids()))

    def test_restore_last_wins(self):
        first = NciConfigStream.from_pairs([("LA_NFCID1", b"\x01" * 4),
                                            ("LA_SEL_INFO", b"\x00")])
        second = NciConfigStream.from_pairs([("LA_NFCID1", b"\x02" * 4)])
        restore = restore_snapshot(first, second)
        self.assertEqual(restore.ids(), [0x33, 0x32])
        self.assertEqual(restore.get("LA_NFCID1"), b"\x02" * 4)

    def test_restore_trivial(self):
        self.assertEqual(len(restore_snapshot()), 0)
        self.assertEqual(len(restore_snapshot(EMPTY_STREAM)), 0)
        self.assertEqual(restore_snapshot(self.custom), self.custom)

    def test_guard(self):
        guard = NciConfigGuard(self.custom)
        guard.filter(self.incoming)
        guard.filter(NciConfigStream.from_pairs([("LA_NFCID1", b"\xaa" * 4)]))
        self.assertEqual(guard.restore_stream().get("LA_NFCID1"),
                         b"\xaa" * 4)


if __name__ == '__main__':
    unittest.main()
