"""
nfclab: NFC protocol laboratory.

Python implementation of a hardware-free NFC relay, replay and clone toolkit.

Definition of the DESFire style cryptography (AES-128 CBC, CMAC secure
channel) and of the PCD and PICC state machines of the cylinder unlocking
procedure.

"""

# import modules
import enum
import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional

from Crypto.Cipher import AES
from Crypto.Hash import CMAC
from Crypto.Util.strxor import strxor
from sklearn.utils import check_random_state

from nfclab._core import (AuthenticationFailure, CardModel, CardRemovedError,
                          FormatFailure, ProtocolAbort, StaticTagData,
                          TagTech)

logger = logging.getLogger(__name__)

# %% Constants

BLOCK_SIZE = 16
ZERO_IV = bytes(BLOCK_SIZE)

# DESFire native command bytes
CMD_SELECT_APPLICATION = 0x5A
CMD_AUTHENTICATE_AES = 0xAA
CMD_ADDITIONAL_FRAME = 0xAF
CMD_GET_CARD_UID = 0x51

# DESFire status bytes
STATUS_OK = 0x00
STATUS_ADDITIONAL_FRAME = 0xAF
STATUS_AUTHENTICATION_ERROR = 0xAE
STATUS_ILLEGAL_COMMAND = 0x1C
STATUS_APPLICATION_NOT_FOUND = 0xA0

# application 1, three bytes LSB first
LOCK_AID = bytes([0x01, 0x00, 0x00])
LOCK_KEY_NUMBER = 0x00

# secure messaging conventions of DESFire EV1
CMAC_LENGTH = 8
PADDING_START = 0x80

UID_LENGTH = 7

# ISO-DEP compliant SAK of the emulated transponder
TRANSPONDER_SEL_INFO = bytes([0x20])


class LockVariant(enum.Enum):
    """Flawed lock protocol or the unmodified DESFire authentication."""
    FlawedLock = "flawed"
    CorrectDesfire = "correct"


class Role(enum.Enum):
    Pcd = "pcd"
    Picc = "picc"


# %% Primitives

def _check_blocks(data, what):
    if len(data) == 0 or len(data) % BLOCK_SIZE:
        raise ValueError("%s length must be a positive multiple of 16, got "
                         "%d" % (what, len(data)))


def _check_key(key):
    if len(key) != 16:
        raise ValueError("AES-128 key must be 16 bytes, got %d" % len(key))


def cbc_enc(key, iv, plaintext):
    """AES-128 CBC encryption without padding."""
    _check_key(key)
    _check_blocks(plaintext, "plaintext")
    return AES.new(bytes(key), AES.MODE_CBC, iv=bytes(iv)).encrypt(
        bytes(plaintext))


def cbc_dec(key, iv, ciphertext):
    """AES-128 CBC decryption without padding."""
    _check_key(key)
    _check_blocks(ciphertext, "ciphertext")
    return AES.new(bytes(key), AES.MODE_CBC, iv=bytes(iv)).decrypt(
        bytes(ciphertext))


def rot(block):
    """Rotate a 16 byte nonce left by one byte."""
    if len(block) != BLOCK_SIZE:
        raise ValueError("rot expects 16 bytes, got %d" % len(block))
    block = bytes(block)
    return block[1:] + block[:1]


def derive_session_key(r_a_prime, r_b):
    """Session key from bytes 1-4 and 13-16 of both nonces."""
    if len(r_a_prime) != BLOCK_SIZE or len(r_b) != BLOCK_SIZE:
        raise ValueError("nonces must be 16 bytes, got %d and %d"
                         % (len(r_a_prime), len(r_b)))
    return (bytes(r_a_prime[0:4]) + bytes(r_b[0:4]) +
            bytes(r_a_prime[12:16]) + bytes(r_b[12:16]))


def cmac(key, message, length=CMAC_LENGTH):
    mac = CMAC.new(bytes(key), msg=bytes(message), ciphermod=AES)
    return mac.digest()[:length]


def pad(data):
    """0x80 followed by zeros up to the next block boundary."""
    data = bytes(data) + bytes([PADDING_START])
    return data + bytes(-len(data) % BLOCK_SIZE)


def unpad(data):
    stripped = bytes(data).rstrip(b"\x00")
    if not stripped or stripped[-1] != PADDING_START:
        raise FormatFailure("invalid padding")
    return stripped[:-1]


class SecureChannel:
    """
    CMAC protected AES-128 CBC channel keyed with a session key. The IV is
    chained to the last ciphertext block of every operation.
    """

    def __init__(self, k_s, iv=ZERO_IV, mac_length=CMAC_LENGTH):
        _check_key(k_s)
        self.k_s = bytes(k_s)
        self.iv = bytes(iv)
        self.mac_length = mac_length
        self.sent = 0
        self.received = 0

    def aenc(self, message):
        message = bytes(message)
        data = pad(message + cmac(self.k_s, message, self.mac_length))
        ciphertext = cbc_enc(self.k_s, self.iv, data)
        self.iv = ciphertext[-BLOCK_SIZE:]
        self.sent += 1
        return ciphertext

    def adec(self, ciphertext):
        ciphertext = bytes(ciphertext)
        if not ciphertext or len(ciphertext) % BLOCK_SIZE:
            raise FormatFailure("ciphertext length %d is not a multiple of "
                                "16" % len(ciphertext))
        data = unpad(cbc_dec(self.k_s, self.iv, ciphertext))
        self.iv = ciphertext[-BLOCK_SIZE:]
        if len(data) < self.mac_length:
            raise FormatFailure("message shorter than its CMAC")
        message, tag = data[:-self.mac_length], data[-self.mac_length:]
        if cmac(self.k_s, message, self.mac_length) != tag:
            raise AuthenticationFailure("CMAC mismatch")
        self.received += 1
        return message


# %% Protocol state

@dataclass
class LockKeys:
    """Pre-shared key, UID and optional authorization token."""
    k: bytes
    uid: Optional[bytes] = None
    token: Optional[bytes] = None

    def __post_init__(self):
        _check_key(self.k)
        self.k = bytes(self.k)
        if self.uid is not None:
            self.uid = bytes(self.uid)
            if len(self.uid) != UID_LENGTH:
                raise ValueError("UID must be 7 bytes, got %d"
                                 % len(self.uid))
        if self.token is not None:
            self.token = bytes(self.token)

    @property
    def credential(self):
        """What the transponder sends inside the secure channel."""
        return self.token if self.token is not None else self.uid


@dataclass
class AuthState:
    """PCD or PICC side of one unlocking run."""
    role: Role
    key: bytes
    variant: LockVariant = LockVariant.FlawedLock
    stage: str = "start"
    r_a: Optional[bytes] = None
    r_b: Optional[bytes] = None
    r_a_prime: Optional[bytes] = None
    iv_a: bytes = ZERO_IV
    iv_b: bytes = ZERO_IV
    m4: Optional[bytes] = None
    m5: Optional[bytes] = None
    m6: Optional[bytes] = None
    m7: Optional[bytes] = None
    k_s: Optional[bytes] = None
    channel: Optional[SecureChannel] = None
    credential: Optional[bytes] = None
    static_r_a: bytes = ZERO_IV
    random_r_a: bool = False
    forced_r_b: Optional[bytes] = None
    aid: bytes = LOCK_AID
    random_state: object = None
    transcript: List[bytes] = field(default_factory=list)

    @property
    def authenticated(self):
        return self.k_s is not None


def new_pcd_state(key, variant=LockVariant.FlawedLock, static_r_a=ZERO_IV,
                  random_r_a=False, random_state=None):
    return AuthState(Role.Pcd, bytes(key), LockVariant(variant),
                     stage="start", static_r_a=bytes(static_r_a),
                     random_r_a=random_r_a,
                     random_state=check_random_state(random_state))


def new_picc_state(key, credential, forced_r_b=None, random_state=None):
    return AuthState(Role.Picc, bytes(key), stage="idle",
                     credential=bytes(credential), forced_r_b=forced_r_b,
                     random_state=check_random_state(random_state))


def _nonce(state):
    return state.random_state.bytes(BLOCK_SIZE)


def _status(incoming, stage, expected):
    # check a status byte answer, abort on anything else
    if not incoming:
        raise ProtocolAbort(stage, "empty response")
    if incoming[0] != expected:
        raise ProtocolAbort(stage, "status 0x%02X" % incoming[0])


# %% PCD

def pcd_step(state, incoming=None):
    """
    Advance the PCD by one message.

    Parameters
    ----------
    state : AuthState
        PCD state, mutated in place.
    incoming : bytes or NoneType
        Response to the previous command, None for the first step.

    Returns
    -------
    (AuthState, bytes or NoneType)
        The state and the next command, None once the credential is read.
    """
    stage = state.stage
    if incoming is not None:
        state.transcript.append(bytes(incoming))

    if stage == "start":
        outgoing = bytes([CMD_SELECT_APPLICATION]) + state.aid
        state.stage = "select"

    elif stage == "select":
        _status(incoming, stage, STATUS_OK)
        outgoing = bytes([CMD_AUTHENTICATE_AES, LOCK_KEY_NUMBER])
        state.stage = "auth-m4"

    elif stage == "auth-m4":
        _status(incoming, stage, STATUS_ADDITIONAL_FRAME)
        if len(incoming) != 1 + BLOCK_SIZE:
            raise ProtocolAbort(stage, "m4 must be 16 bytes")
        state.m4 = m4 = bytes(incoming[1:])
        state.r_b = cbc_dec(state.key, state.iv_a, m4)
        # the lock keeps IV_A at zero for m5
        if state.variant is LockVariant.CorrectDesfire:
            state.iv_a = m4
        if state.variant is LockVariant.CorrectDesfire or state.random_r_a:
            state.r_a = _nonce(state)
        else:
            state.r_a = state.static_r_a
        state.m5 = cbc_enc(state.key, state.iv_a, state.r_a + rot(state.r_b))
        state.iv_a = state.m5[BLOCK_SIZE:]
        outgoing = bytes([CMD_ADDITIONAL_FRAME]) + state.m5
        state.stage = "auth-m6"

    elif stage == "auth-m6":
        _status(incoming, stage, STATUS_OK)
        if len(incoming) != 1 + BLOCK_SIZE:
            raise ProtocolAbort(stage, "m6 must be 16 bytes")
        state.m6 = m6 = bytes(incoming[1:])
        r_a_prime_star = cbc_dec(state.key, state.iv_a, m6)
        state.iv_a = m6
        # reconcile with the nonce the PICC decrypted under IV = m4
        if state.variant is LockVariant.FlawedLock:
            state.r_a_prime = strxor(state.r_a, state.m4)
        else:
            state.r_a_prime = state.r_a
        if rot(state.r_a_prime) != r_a_prime_star:
            raise ProtocolAbort(stage, "rot(r_A') mismatch")
        state.k_s = derive_session_key(state.r_a_prime, state.r_b)
        state.channel = SecureChannel(state.k_s)
        outgoing = bytes([CMD_GET_CARD_UID])
        state.stage = "get-uid"

    elif stage == "get-uid":
        _status(incoming, stage, STATUS_OK)
        state.m7 = bytes(incoming[1:])
        try:
            state.credential = state.channel.adec(state.m7)
        except AuthenticationFailure as exc:
            raise ProtocolAbort(stage, str(exc)) from exc
        outgoing = None
        state.stage = "done"

    else:
        raise ProtocolAbort(stage, "protocol already finished")

    if outgoing is not None:
        state.transcript.append(outgoing)
    return state, outgoing


# %% PICC

def _reset_auth(state):
    state.r_b = state.r_a_prime = state.k_s = state.channel = None
    state.m4 = state.m5 = state.m6 = state.m7 = None
    state.iv_b = ZERO_IV


def picc_step(state, incoming):
    """
    Answer one PCD command. Raises ProtocolAbort carrying the status byte
    the card reports.
    """
    incoming = bytes(incoming)
    stage = state.stage
    state.transcript.append(incoming)
    if not incoming:
        raise ProtocolAbort(stage, "empty command", STATUS_ILLEGAL_COMMAND)
    command = incoming[0]

    if command == CMD_SELECT_APPLICATION:
        # selecting an application drops any authentication
        _reset_auth(state)
        if incoming[1:4] != state.aid or len(incoming) != 4:
            state.stage = "idle"
            outgoing = bytes([STATUS_APPLICATION_NOT_FOUND])
        else:
            state.stage = "selected"
            outgoing = bytes([STATUS_OK])

    elif command == CMD_AUTHENTICATE_AES and stage in ("selected",
                                                       "authenticated"):
        _reset_auth(state)
        if incoming[1:] != bytes([LOCK_KEY_NUMBER]):
            state.stage = "selected"
            raise ProtocolAbort("auth-m4", "no key %s" % incoming[1:].hex(),
                                STATUS_AUTHENTICATION_ERROR)
        if state.forced_r_b is not None:
            state.r_b = bytes(state.forced_r_b)
        else:
            state.r_b = _nonce(state)
        state.m4 = cbc_enc(state.key, ZERO_IV, state.r_b)
        state.iv_b = state.m4
        outgoing = bytes([STATUS_ADDITIONAL_FRAME]) + state.m4
        state.stage = "auth-m5"

    elif command == CMD_ADDITIONAL_FRAME and stage == "auth-m5":
        if len(incoming) != 1 + 2 * BLOCK_SIZE:
            state.stage = "selected"
            raise ProtocolAbort(stage, "m5 must be 32 bytes",
                                STATUS_AUTHENTICATION_ERROR)
        state.m5 = m5 = incoming[1:]
        plain = cbc_dec(state.key, state.iv_b, m5)
        r_a_prime, r_b_star = plain[:BLOCK_SIZE], plain[BLOCK_SIZE:]
        if rot(state.r_b) != r_b_star:
            state.stage = "selected"
            raise ProtocolAbort(stage, "rot(r_B) mismatch",
                                STATUS_AUTHENTICATION_ERROR)
        state.r_a_prime = r_a_prime
        state.iv_b = m5[BLOCK_SIZE:]
        state.m6 = cbc_enc(state.key, state.iv_b, rot(r_a_prime))
        state.iv_b = state.m6
        state.k_s = derive_session_key(r_a_prime, state.r_b)
        state.channel = SecureChannel(state.k_s)
        outgoing = bytes([STATUS_OK]) + state.m6
        state.stage = "authenticated"

    elif command == CMD_GET_CARD_UID and stage == "authenticated":
        if len(incoming) != 1:
            raise ProtocolAbort(stage, "unexpected parameters",
                                STATUS_ILLEGAL_COMMAND)
        state.m7 = state.channel.aenc(state.credential)
        outgoing = bytes([STATUS_OK]) + state.m7

    else:
        raise ProtocolAbort(stage, "unexpected command 0x%02X" % command,
                            STATUS_ILLEGAL_COMMAND)

    state.transcript.append(outgoing)
    return state, outgoing


# %% Transponder card model

class LockTransponder(CardModel):
    """
    PICC of the locking system, usable as the card behind a reader-role
    endpoint.

    Parameters
    ----------
    keys : LockKeys
        Key, UID and optional token of the transponder.
    forced_r_b : bytes or NoneType
        Fixed PICC nonce, used to study protocol determinism.
    processing_delay : float
        Seconds the card needs per command. The default is 0.004.
    random_state : int, RandomState or NoneType
        Source of the PICC nonces.
    """

    def __init__(self, keys, forced_r_b=None, processing_delay=0.004,
                 random_state=None):
        self.keys = keys
        self.forced_r_b = forced_r_b
        self.processing_delay = processing_delay
        self.random_state = check_random_state(random_state)
        self.present = True
        self.static_data = StaticTagData(
            TagTech.NfcA, [("NFCID1", keys.uid),
                           ("SEL_INFO", TRANSPONDER_SEL_INFO)])
        self.authentications = []
        self.reset()

    @property
    def credential(self):
        return self.keys.credential

    @property
    def uid(self):
        return self.keys.uid

    def reset(self):
        self.state = new_picc_state(self.keys.k, self.credential,
                                    forced_r_b=self.forced_r_b,
                                    random_state=self.random_state)

    def remove(self):
        self.present = False

    def insert(self):
        self.present = True
        self.reset()

    def transceive(self, payload):
        if not self.present:
            raise CardRemovedError("transponder left the field")
        try:
            _, outgoing = picc_step(self.state, payload)
        except ProtocolAbort as abort:
            logger.debug("transponder %s", abort)
            status = abort.status or STATUS_ILLEGAL_COMMAND
            return bytes([status])
        if self.state.stage == "authenticated" and \
                payload[:1] == bytes([CMD_ADDITIONAL_FRAME]):
            self.authentications.append(
                replace(self.state, transcript=list(self.state.transcript)))
        return outgoing


# %% UID arithmetic

NXP_MANUFACTURER = 0x04


def uid_to_int(uid):
    return int.from_bytes(bytes(uid), "big")


def int_to_uid(value):
    if not 0 <= value < 1 << (8 * UID_LENGTH):
        raise ValueError("UID value out of range, got %s" % value)
    return int(value).to_bytes(UID_LENGTH, "big")


def uid_candidates(known_uid=None, stride=1, manufacturer=NXP_MANUFACTURER):
    """
    Candidate UIDs of a serial fleet: ascending from the neighbour of
    `known_uid`, else from the first UID of the manufacturer.
    """
    if isinstance(stride, bool) or not isinstance(stride, int) or \
            stride < 1:
        raise ValueError("stride must be a positive integer, got %s"
                         % stride)
    if known_uid is not None:
        value = uid_to_int(known_uid) + stride
    else:
        value = manufacturer << (8 * (UID_LENGTH - 1))
    # stay within the manufacturer's block
    high = (uid_to_int(known_uid) >> 48 if known_uid is not None
            else manufacturer)
    limit = (high + 1) << (8 * (UID_LENGTH - 1))
    while value < limit:
        yield int_to_uid(value)
        value += stride
