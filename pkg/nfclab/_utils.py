"""
Data generators for nfclab
"""

# import modules
import numpy as np

from nfclab._core import (Apdu, Direction, LogMode, SessionLog, StaticTagData,
                          TagTech, TECH_FIELDS)


# neighbouring UIDs of the examined transponder fleet
FLEET_GAP = 3596


def make_uid_fleet(n_transponders=2, gap=FLEET_GAP, base_uid=None,
                   seed=None):
    """
    Generate serial 7 byte UIDs of NXP transponders.

    Parameters
    ----------
    n_transponders : int
        Number of UIDs. The default is 2.
    gap : int
        Numerical difference between neighbouring UIDs. The default is 3596.
    base_uid : bytes or NoneType
        First UID. If None, a random UID with manufacturer byte 0x04 is
        drawn. The default is None.
    seed : int or NoneType
        Set seed for reproducability. The default is None.

    Returns
    -------
    uids : list of bytes
        UIDs in ascending order, all starting with 0x04.
    """
    if n_transponders < 1:
        raise ValueError("n_transponders must be at least 1, got %s"
                         % n_transponders)
    if gap < 1:
        raise ValueError("gap must be positive, got %s" % gap)
    if base_uid is None:
        rng = np.random.default_rng(seed)
        # leave room for the fleet below the next manufacturer block
        room = (1 << 48) - gap * n_transponders
        base = (0x04 << 48) + int(rng.integers(0, room))
    else:
        base = int.from_bytes(bytes(base_uid), "big")
    uids = [(base + k * gap).to_bytes(7, "big")
            for k in range(n_transponders)]
    if uids[-1][0] != 0x04:
        raise ValueError("fleet leaves the NXP UID block")
    return uids


def make_static_tag_data(tech=TagTech.NfcA, seed=None):
    """Random static tag data with every field of `tech`."""
    rng = np.random.default_rng(seed)
    tech = TagTech(tech)
    fields = []
    for name in TECH_FIELDS[tech]:
        if name == "NFCID1":
            length = int(rng.choice([4, 7, 10]))
        else:
            length = int(rng.integers(1, 9))
        fields.append((name, rng.bytes(length)))
    return StaticTagData(tech, fields)


def make_session_log(n_exchanges=10, initial=True, tech=TagTech.NfcA,
                     max_payload=32, resolution_ns=1000, seed=None):
    """
    Generate a request/response log with random payloads.

    Parameters
    ----------
    n_exchanges : int
        Number of request and response pairs. The default is 10.
    initial : bool
        Whether to include static tag data. The default is True.
    tech : TagTech
        Technology of the static tag data. The default is NfcA.
    max_payload : int
        Largest payload size in bytes. The default is 32.
    resolution_ns : int
        Timestamps are multiples of this value. The default is 1000, the
        resolution of exported pcapng files.
    seed : int or NoneType
        Set seed for reproducability. The default is None.

    Returns
    -------
    log : SessionLog
        Log with 2 * n_exchanges entries.
    """
    rng = np.random.default_rng(seed)
    created = int(rng.integers(1_500_000_000, 2_000_000_000)) * 10**9 + \
        int(rng.integers(0, 10**9))
    log = SessionLog(LogMode.Relay, created=created,
                     initial=make_static_tag_data(
                         tech, int(rng.integers(2**31))) if initial else None)
    t = 0
    for _ in range(n_exchanges):
        for direction in (Direction.PcdToPicc, Direction.PiccToPcd):
            t += int(rng.integers(0, 5000)) * resolution_ns
            size = int(rng.integers(1, max_payload + 1))
            log.append(Apdu(rng.bytes(size), direction, t))
    return log
