"""
nfclab: NFC protocol laboratory.

Unit tests of the AES primitives, the secure channel and the two flavors of
the unlocking handshake.

"""

# import modules
import unittest

import numpy as np
from Crypto.Cipher import AES
from Crypto.Util.strxor import strxor

from nfclab._core import AuthenticationFailure, ProtocolAbort
from nfclab._desfire import (LockKeys, LockTransponder, LockVariant,
                             SecureChannel, cbc_dec, cbc_enc, cmac,
                             derive_session_key, int_to_uid, new_pcd_state,
                             new_picc_state, pcd_step, picc_step, rot,
                             uid_candidates, uid_to_int)

KEY = bytes(range(16))
UID = bytes.fromhex("04a1b2c3d4e5f6")


def handshake(key=KEY, picc_key=None, variant=LockVariant.FlawedLock,
              static_r_a=bytes(16), forced_r_b=None, seed=None):
    """Run PCD and PICC against each other, returns both states."""
    pcd = new_pcd_state(key, variant, static_r_a, random_state=seed)
    picc = new_picc_state(picc_key or key, UID, forced_r_b,
                          random_state=None if seed is None else seed + 1)
    _, outgoing = pcd_step(pcd)
    while outgoing is not None:
        _, answer = picc_step(picc, outgoing)
        _, outgoing = pcd_step(pcd, answer)
    return pcd, picc


class TestPrimitives(unittest.TestCase):

    def test_known_answer(self):
        key = bytes.fromhex("000102030405060708090a0b0c0d0e0f")
        plain = bytes.fromhex("00112233445566778899aabbccddeeff")
        self.assertEqual(cbc_enc(key, bytes(16), plain).hex(),
                         "69c4e0d86a7b0430d8cdb78070b4c55a")

    def test_inverse(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            key, iv = rng.bytes(16), rng.bytes(16)
            plain = rng.bytes(16 * int(rng.integers(1, 5)))
            self.assertEqual(cbc_dec(key, iv, cbc_enc(key, iv, plain)), plain)

    def test_chaining(self):
        rng = np.random.default_rng(2)
        key, iv, plain = rng.bytes(16), rng.bytes(16), rng.bytes(32)
        first = cbc_enc(key, iv, plain[:16])
        second = cbc_enc(key, first, plain[16:])
        self.assertEqual(cbc_enc(key, iv, plain), first + second)

    def test_bad_lengths(self):
        with self.assertRaises(ValueError):
            cbc_enc(KEY, bytes(16), bytes(15))
        with self.assertRaises(ValueError):
            cbc_dec(bytes(8), bytes(16), bytes(16))

    def test_rot(self):
        block = bytes(range(1, 17))
        self.assertEqual(rot(block), bytes(range(2, 17)) + b"\x01")
        rotated = block
        for _ in range(16):
            rotated = rot(rotated)
        self.assertEqual(rotated, block)
        self.assertEqual(rot(b"\x07" * 16), b"\x07" * 16)

    def test_session_key(self):
        self.assertEqual(derive_session_key(bytes(range(16)),
                                            bytes(range(16, 32))).hex(),
                         "00010203101112130c0d0e0f1c1d1e1f")
        nonce = bytes(range(16))
        k_s = derive_session_key(nonce, nonce)
        self.assertEqual(k_s[0:4], k_s[4:8])
        self.assertEqual(k_s[8:12], k_s[12:16])
        with self.assertRaises(ValueError):
            derive_session_key(bytes(15), bytes(16))

    def test_cmac_vector(self):
        key = bytes.fromhex("2b7e151628aed2a6abf7158809cf4f3c")
        self.assertEqual(cmac(key, b"").hex(), "bb1d6929e9593728")


class TestSecureChannel(unittest.TestCase):

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            k_s = rng.bytes(16)
            sender, receiver = SecureChannel(k_s), SecureChannel(k_s)
            for size in (7, 16, 30):
                message = rng.bytes(size)
                self.assertEqual(receiver.adec(sender.aenc(message)),
                                 message)

    def test_bit_flips(self):
        rng = np.random.default_rng(4)
        k_s = rng.bytes(16)
        ciphertext = SecureChannel(k_s).aenc(UID)
        for _ in range(100):
            position = int(rng.integers(0, 8 * len(ciphertext)))
            flipped = bytearray(ciphertext)
            flipped[position // 8] ^= 1 << (position % 8)
            with self.assertRaises(AuthenticationFailure):
                SecureChannel(k_s).adec(bytes(flipped))

    def test_iv_chaining(self):
        channel = SecureChannel(KEY)
        self.assertNotEqual(channel.aenc(UID), channel.aenc(UID))


class TestHandshake(unittest.TestCase):

    def test_honest_flawed(self):
        pcd, picc = handshake(seed=10)
        self.assertEqual(pcd.stage, "done")
        self.assertEqual(pcd.credential, UID)
        self.assertEqual(pcd.k_s, picc.k_s)

    def test_honest_correct(self):
        first, picc = handshake(variant=LockVariant.CorrectDesfire, seed=10)
        second, _ = handshake(variant=LockVariant.CorrectDesfire, seed=20)
        self.assertEqual(first.credential, UID)
        self.assertEqual(first.k_s, picc.k_s)
        self.assertNotEqual(first.m5, second.m5)

    def test_xor_deviation(self):
        rng = np.random.default_rng(5)
        for seed in range(1000):
            key, r_a = rng.bytes(16), rng.bytes(16)
            pcd, picc = handshake(key, static_r_a=r_a, seed=seed)
            # decrypt the first block of m5 the way the PICC does, IV = m4
            p1 = strxor(AES.new(key, AES.MODE_ECB).decrypt(pcd.m5[:16]),
                        picc.m4)
            self.assertEqual(p1, strxor(r_a, pcd.m4))
            self.assertEqual(picc.r_a_prime, p1)

    def test_determinism(self):
        r_b = bytes(range(100, 116))
        first, _ = handshake(forced_r_b=r_b, seed=1)
        second, _ = handshake(forced_r_b=r_b, seed=2)
        for name in ("m4", "m5", "m6", "m7", "k_s"):
            self.assertEqual(getattr(first, name), getattr(second, name))

    def test_correct_not_deterministic(self):
        r_b = bytes(range(100, 116))
        seen = set()
        for seed in range(10 ** 4):
            pcd, _ = handshake(variant=LockVariant.CorrectDesfire,
                               forced_r_b=r_b, seed=3 * seed)
            seen.add(pcd.m5)
        self.assertEqual(len(seen), 10 ** 4)

    def test_wrong_key(self):
        with self.assertRaises(ProtocolAbort) as cm:
            handshake(picc_key=bytes(16), seed=3)
        self.assertEqual(cm.exception.stage, "auth-m5")

    def test_unexpected_command(self):
        picc = new_picc_state(KEY, UID)
        with self.assertRaises(ProtocolAbort):
            picc_step(picc, b"\x51")


class TestTransponder(unittest.TestCase):

    def test_removed(self):
        card = LockTransponder(LockKeys(KEY, UID))
        self.assertEqual(card.static_data.identifier, UID)
        self.assertEqual(card.transceive(bytes.fromhex("5a010000")), b"\x00")
        self.assertEqual(card.transceive(b"\x51"), b"\x1c")


class TestUids(unittest.TestCase):

    def test_conversion(self):
        self.assertEqual(int_to_uid(uid_to_int(UID)), UID)
        with self.assertRaises(ValueError):
            int_to_uid(1 << 56)

    def test_candidates(self):
        candidates = uid_candidates(UID, stride=2)
        self.assertEqual(uid_to_int(next(candidates)), uid_to_int(UID) + 2)
        self.assertEqual(next(uid_candidates()), bytes.fromhex(
            "04000000000000"))
        with self.assertRaises(ValueError):
            next(uid_candidates(stride=0))


if __name__ == '__main__':
    unittest.main()
