"""
nfclab: NFC protocol laboratory.

Unit tests of the plugin pipeline, the built-in plugins and out-of-process
plugins.

"""

# import modules
import sys
import tempfile
import textwrap
import unittest
from pathlib import Path

import numpy as np

from nfclab._core import Direction, PluginError, StaticTagData, TagTech
from nfclab._desfire import LockKeys, LockTransponder
from nfclab._nci import encode_tag_data
from nfclab._pcapng import export_log, import_log
from nfclab._plugins import (BruteForcePlugin, Drop, DropAllPlugin,
                             IdentityPlugin, LogPlugin, OutOfProcessPlugin,
                             Pass, PayloadKind, Pipeline, Plugin,
                             PluginContext, PluginDescriptor, PluginKind,
                             Replace, UpperPlugin, WalkByPcdPlugin, XorPlugin,
                             oop_plugin_call, parse_plugin_options,
                             run_pipeline)

PCD = Direction.PcdToPicc
PICC = Direction.PiccToPcd
APDU = PayloadKind.Apdu
KEY = bytes(range(16))
UID = bytes.fromhex("04a1b2c3d4e5f6")

HOST = [sys.executable, "-m", "nfclab._plugin_host"]

# scripted children speaking the out-of-process protocol
CHILD_HEADER = """
import struct, sys, time
out = sys.stdout.buffer
out.write(b"NFCP\\x01")
out.flush()
while True:
    header = sys.stdin.buffer.read(4)
    if len(header) < 4:
        break
    body = sys.stdin.buffer.read(struct.unpack(">I", header)[0])
    payload = body[2:]
"""
CHILD_REPLIES = {
    "drop": "out.write(bytes([1]))",
    "replace": "out.write(bytes([2, 2]) + struct.pack('>I', len(payload))"
               " + payload + struct.pack('>I', 1) + b'\\x00')",
    "garbage": "out.write(bytes([7]))",
    "sleepy": "time.sleep(5)",
}


class Crashing(Plugin):
    name = "crashing"

    def process(self, ctx, kind, direction, payload):
        raise RuntimeError("boom")


class TestPipeline(unittest.TestCase):

    def test_empty(self):
        self.assertEqual(run_pipeline([], APDU, PCD, b"x"), Pass(b"x"))

    def test_drop_all(self):
        for payload in (b"\x00", b"abc"):
            self.assertIs(run_pipeline([DropAllPlugin()], APDU, PCD,
                                       payload), Drop)

    def test_xor_involution(self):
        plugins = [XorPlugin(), XorPlugin()]
        plugins[1].name = "xor-again"
        self.assertEqual(run_pipeline(plugins, APDU, PCD, b"\x12\x34"),
                         Pass(b"\x12\x34"))
        self.assertEqual(run_pipeline([XorPlugin(mask="0f")], APDU, PCD,
                                      b"\xf0"), Pass(b"\xff"))

    def test_unique_names(self):
        with self.assertRaises(ValueError):
            Pipeline([IdentityPlugin(), IdentityPlugin()])

    def test_initial_untouched(self):
        blob = b"\x01\x33\x04abcd"
        self.assertEqual(run_pipeline([UpperPlugin()], PayloadKind.Initial,
                                      PICC, blob), Pass(blob))
        self.assertEqual(run_pipeline([UpperPlugin()], APDU, PICC, b"ab"),
                         Pass(b"AB"))

    def test_crash_policy(self):
        self.assertIs(run_pipeline([Crashing()], APDU, PCD, b"x"), Drop)
        pipeline = Pipeline([Crashing(), UpperPlugin()], fail_open=True)
        self.assertEqual(run_pipeline(pipeline, APDU, PCD, b"x"), Pass(b"X"))
        self.assertEqual(pipeline.crashes, 1)

    def test_replace_runs_rest_of_chain(self):
        class Split(Plugin):
            name = "split"

            def process(self, ctx, kind, direction, payload):
                return Replace((payload[:1], payload[1:]))
        verdict = run_pipeline([Split(), UpperPlugin()], APDU, PCD, b"ab")
        self.assertEqual(verdict, Replace((b"A", b"B")))

    def test_tokens(self):
        options = parse_plugin_options(["xor-ff.mask=01"])
        pipeline = Pipeline.from_tokens(["xor-ff", "log"], options)
        self.assertEqual(pipeline.find("xor-ff").mask, 1)
        descriptor = PluginDescriptor.from_token("@/opt/plugins/echo")
        self.assertIs(descriptor.kind, PluginKind.OutOfProcess)
        with self.assertRaises(ValueError):
            PluginDescriptor.from_token("no-such-plugin")
        with self.assertRaises(ValueError):
            parse_plugin_options(["mask=01"])


class TestLogPlugin(unittest.TestCase):

    def test_rows(self):
        plugin = LogPlugin()
        ctx = PluginContext(session_id=3)
        for i in range(1000):
            payload = bytes([i % 256, 0x00])
            self.assertEqual(plugin.process(ctx, APDU, PCD, payload),
                             Pass(payload))
        self.assertEqual(len(plugin.rows), 1000)
        self.assertEqual(len(plugin.log_for(3)), 1000)

    def test_initial_record(self):
        plugin = LogPlugin()
        ctx = PluginContext(session_id=1)
        data = StaticTagData(TagTech.NfcA, [("NFCID1", UID)])
        plugin.process(ctx, PayloadKind.Initial, PICC, encode_tag_data(data))
        plugin.process(ctx, APDU, PCD, b"\x5a\x01\x00\x00")
        log = import_log(export_log(plugin.log_for(1)))
        self.assertEqual(log.initial, data)
        self.assertEqual(len(log), 1)


class TestLockPlugins(unittest.TestCase):

    def run_walkby(self, plugin, transponder):
        sent = []
        ctx = PluginContext(1, respond=lambda k, d, p: sent.append(p))
        plugin.process(ctx, PayloadKind.Initial, PICC,
                       encode_tag_data(transponder.static_data))
        for _ in range(10):
            if not sent:
                break
            request = sent.pop()
            plugin.process(ctx, APDU, PICC, transponder.transceive(request))

    def test_walkby_reads_uids(self):
        plugin = WalkByPcdPlugin(KEY.hex())
        second = bytes.fromhex("04a1b2c3d4f3d2")
        for uid in (UID, second):
            self.run_walkby(plugin, LockTransponder(LockKeys(KEY, uid)))
        self.assertEqual(plugin.uids, [UID, second])

    def test_walkby_wrong_key(self):
        plugin = WalkByPcdPlugin(bytes(16))
        self.run_walkby(plugin, LockTransponder(LockKeys(KEY, UID)))
        self.assertEqual(plugin.uids, [])
        self.assertEqual(len(plugin.failures), 1)

    def test_bruteforce_candidates(self):
        plugin = BruteForcePlugin(KEY, start_uid=UID.hex(), stride=4)
        replies = []
        ctx = PluginContext(1, respond=lambda k, d, p: replies.append(p))
        for _ in range(2):
            self.assertIs(plugin.process(ctx, APDU, PCD,
                                         bytes.fromhex("5a010000")), Drop)
        self.assertEqual(replies, [b"\x00", b"\x00"])
        self.assertEqual(int.from_bytes(plugin.current, "big"),
                         int.from_bytes(UID, "big") + 8)


class TestOutOfProcess(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def child(self, reply):
        path = Path(self.tmp.name) / ("%s.py" % reply)
        body = CHILD_HEADER + textwrap.indent(CHILD_REPLIES[reply] +
                                              "\nout.flush()", "    ")
        path.write_text(body)
        return [sys.executable, str(path)]

    def test_hosted_builtin(self):
        self.assertEqual(oop_plugin_call(HOST + ["identity"], APDU, PCD,
                                         b"\x90\x00"), Pass(b"\x90\x00"))
        self.assertEqual(oop_plugin_call(HOST + ["xor-ff", "mask=0f"], APDU,
                                         PCD, b"\xf0"), Pass(b"\xff"))

    def test_hosted_identity_matches_in_process(self):
        rng = np.random.default_rng(2024)
        hosted = Pipeline([OutOfProcessPlugin(HOST + ["identity"],
                                              name="identity-child")])
        local = Pipeline([IdentityPlugin()])
        try:
            hosted.plugins[0].start()
            pid = hosted.plugins[0].process_.pid
            for _ in range(10 ** 4):
                kind = (APDU, PayloadKind.Initial)[rng.integers(2)]
                direction = (PCD, PICC)[rng.integers(2)]
                payload = rng.bytes(int(rng.integers(1, 262)))
                self.assertEqual(
                    run_pipeline(hosted, kind, direction, payload),
                    run_pipeline(local, kind, direction, payload))
            # one child served every request
            self.assertEqual(hosted.plugins[0].process_.pid, pid)
            self.assertEqual(hosted.crashes, 0)
        finally:
            hosted.close()

    def test_drop(self):
        self.assertIs(oop_plugin_call(self.child("drop"), APDU, PCD, b"x"),
                      Drop)

    def test_replace(self):
        self.assertEqual(oop_plugin_call(self.child("replace"), APDU, PCD,
                                         b"\x01\x02"),
                         Replace((b"\x01\x02", b"\x00")))

    def test_malformed_reply(self):
        with self.assertRaises(PluginError):
            oop_plugin_call(self.child("garbage"), APDU, PCD, b"x")

    def test_timeout(self):
        plugin = OutOfProcessPlugin(self.child("sleepy"), timeout=0.3,
                                    name="sleepy")
        pipeline = Pipeline([plugin])
        try:
            self.assertIs(run_pipeline(pipeline, APDU, PCD, b"x"), Drop)
        finally:
            pipeline.close()
        self.assertEqual(pipeline.crashes, 1)

    def test_crash_fail_open(self):
        plugin = OutOfProcessPlugin(HOST + ["upper", "--crash-after", "1"],
                                    name="upper-child")
        pipeline = Pipeline([plugin], fail_open=True)
        try:
            self.assertEqual(run_pipeline(pipeline, APDU, PCD, b"ab"),
                             Pass(b"AB"))
            self.assertEqual(run_pipeline(pipeline, APDU, PCD, b"cd"),
                             Pass(b"cd"))
            # restarted after the crash
            self.assertEqual(run_pipeline(pipeline, APDU, PCD, b"ef"),
                             Pass(b"EF"))
        finally:
            pipeline.close()
        self.assertEqual(pipeline.crashes, 1)


if __name__ == '__main__':
    unittest.main()
