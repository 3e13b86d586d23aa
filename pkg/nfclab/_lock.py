"""
nfclab: NFC protocol laboratory.

Python implementation of a hardware-free NFC relay, replay and clone toolkit.

Definition of the lock cylinder, lock deployments with their mitigations and
the relay, replay, walk-by and brute-force attacks against them.

"""

# import modules
import logging
from dataclasses import dataclass, field
from typing import List, Optional

from sklearn.utils import check_random_state

from nfclab._core import ProtocolAbort, SessionLog, VirtualClock
from nfclab._desfire import (LockKeys, LockTransponder, LockVariant, ZERO_IV,
                             new_pcd_state, pcd_step, uid_candidates)
from nfclab._endpoints import (DirectTransport, LogBackedCard, ReaderEndpoint,
                               ReplayMode, TagEndpoint)
from nfclab._plugins import BruteForcePlugin, Pipeline, WalkByPcdPlugin
from nfclab._relay import LoopbackNetwork
from nfclab._timing import (LENIENT_POLICY, LinkProfile, MandatoryTimeout,
                            RELAY, ZERO_DELAY)
from nfclab._utils import FLEET_GAP, make_uid_fleet

logger = logging.getLogger(__name__)


# key shared by every installation of the vendor, known from its software
VENDOR_KEY = bytes.fromhex("6b3f1c0e9a2d7745e0c1b8f25a9d3e71")
# timeout the cylinder applies to every command
UNLOCK_TIMEOUT = 1.8
# attempts per second of a brute-force run against a real cylinder
BRUTEFORCE_RATE = 3.0
DEFAULT_TRY_LIMIT = 5


# %% Cylinder

@dataclass
class UnlockOutcome:
    """Result of one unlocking attempt of a cylinder."""
    unlocked: bool
    stage: str
    reason: str = ""
    elapsed: float = 0.0
    credential: Optional[bytes] = None
    authenticated: bool = False
    state: object = field(default=None, repr=False)
    max_exchange: float = 0.0

    def to_dict(self):
        return {"unlocked": self.unlocked, "stage": self.stage,
                "reason": self.reason, "elapsed": self.elapsed,
                "max_exchange": self.max_exchange,
                "credential": None if self.credential is None
                else self.credential.hex(),
                "authenticated": self.authenticated}


class LockCylinder:
    """
    PCD of the locking system. Authenticates a transponder, reads its
    credential over the secure channel and opens if the credential is
    authorized.

    Parameters
    ----------
    key : bytes
        16 byte AES key shared with the transponders.
    authorized : iterable of bytes
        Credentials (UIDs or tokens) that open this cylinder.
    variant : LockVariant or str
        Protocol flavor, flawed or correct. The default is flawed.
    static_r_a : bytes
        Nonce of the flawed variant. The default is 16 zero bytes.
    random_r_a : bool
        Draw a fresh r_A per run even in the flawed variant.
    policy : MandatoryTimeout or FwtRetransmit or NoneType
        Timeout of every command. The default is a 1.8 s mandatory timeout.
    max_tries : int or NoneType
        Failed attempts before the cylinder locks out. None disables the
        limit.
    random_state : int, RandomState or NoneType
        Source of the random nonces.
    """

    def __init__(self, key, authorized=(), variant=LockVariant.FlawedLock,
                 static_r_a=ZERO_IV, random_r_a=False, policy=None,
                 max_tries=None, random_state=None):
        self.key = bytes(key)
        self.authorized = set(bytes(c) for c in authorized)
        self.variant = LockVariant(variant)
        self.static_r_a = bytes(static_r_a)
        self.random_r_a = random_r_a
        self.policy = policy or MandatoryTimeout(UNLOCK_TIMEOUT)
        if max_tries is not None and max_tries < 1:
            raise ValueError("max_tries must be positive, got %s" % max_tries)
        self.max_tries = max_tries
        self.random_state = check_random_state(random_state)
        self.failed_tries = 0
        self.history: List[UnlockOutcome] = []

    @property
    def locked_out(self):
        return self.max_tries is not None and \
            self.failed_tries >= self.max_tries

    def authorize(self, credential):
        self.authorized.add(bytes(credential))

    def revoke(self, credential):
        self.authorized.discard(bytes(credential))

    def reset_lockout(self):
        self.failed_tries = 0

    def _finish(self, outcome):
        if not outcome.unlocked and outcome.stage != "lockout":
            self.failed_tries += 1
            if self.locked_out:
                logger.warning("cylinder locked out after %d failed tries",
                               self.failed_tries)
        self.history.append(outcome)
        return outcome

    def unlock(self, transport):
        """
        Run the unlocking procedure over `transport`.

        Parameters
        ----------
        transport : DirectTransport or TagEndpoint or CloneEndpoint
            Anything with `transceive`, `wait` and `clock`.

        Returns
        -------
        outcome : UnlockOutcome
            Whether the cylinder opened, the stage reached and the elapsed
            time on the transport's clock.
        """
        clock = transport.clock
        start = clock.now_ns()
        if self.locked_out:
            return self._finish(UnlockOutcome(False, "lockout",
                                              "too many failed tries"))
        state = new_pcd_state(self.key, self.variant, self.static_r_a,
                              self.random_r_a, self.random_state)
        # elapsed time of every exchange, each bounded by the policy
        exchanges = []

        def outcome(unlocked, stage, reason=""):
            return UnlockOutcome(unlocked, stage, reason,
                                 (clock.now_ns() - start) / 1e9,
                                 state.credential, state.authenticated,
                                 state, max(exchanges, default=0.0))

        try:
            _, outgoing = pcd_step(state)
            while outgoing is not None:
                stage = state.stage
                result = self.policy.exchange(transport, outgoing)
                exchanges.append(result.elapsed)
                if result.timed_out:
                    raise ProtocolAbort(stage, "no answer within %s"
                                        % self.policy)
                _, outgoing = pcd_step(state, result.response)
        except ProtocolAbort as abort:
            logger.info("cylinder %s", abort)
            return self._finish(outcome(False, abort.stage, abort.reason))

        if state.credential not in self.authorized:
            logger.info("credential %s not authorized",
                        state.credential.hex())
            return self._finish(outcome(False, "authorize",
                                        "credential not authorized"))
        logger.info("cylinder opened for %s", state.credential.hex())
        return self._finish(outcome(True, "done"))


# %% Deployments

@dataclass
class LockMitigations:
    """
    Countermeasures of a deployment, each aimed at one attack: random r_A
    against replay, a per deployment key against walk-by, random tokens
    and a try limit against brute force.
    """
    random_ra: bool = False
    per_deploy_key: bool = False
    random_token: bool = False
    try_limit: Optional[int] = None

    NAMES = ("random-ra", "per-deploy-key", "random-token", "try-limit")

    @classmethod
    def from_names(cls, names):
        """Build from names such as `random-ra` or `try-limit=3`."""
        if isinstance(names, str):
            names = [n for n in names.split(",") if n.strip()]
        mitigations = cls()
        for name in names:
            name, _, value = name.strip().partition("=")
            if name not in cls.NAMES:
                raise ValueError("mitigation must be one of %s, got %s"
                                 % (", ".join(cls.NAMES), name))
            if name == "try-limit":
                mitigations.try_limit = int(value) if value else \
                    DEFAULT_TRY_LIMIT
            else:
                setattr(mitigations, name.replace("-", "_"), True)
        return mitigations

    def names(self):
        out = [name for name in self.NAMES[:3]
               if getattr(self, name.replace("-", "_"))]
        if self.try_limit is not None:
            out.append("try-limit=%d" % self.try_limit)
        return out


@dataclass
class LockDeployment:
    """A cylinder and the transponders issued for it."""
    key: bytes
    cylinder: LockCylinder
    transponders: List[LockTransponder]
    mitigations: LockMitigations

    @property
    def uids(self):
        return [t.uid for t in self.transponders]

    def new_cylinder(self, random_state=None):
        """Cylinder of the same installation, with fresh try counters."""
        old = self.cylinder
        return LockCylinder(self.key, old.authorized, old.variant,
                            old.static_r_a, old.random_r_a, old.policy,
                            old.max_tries, random_state)


def build_deployment(n_transponders=2, variant=LockVariant.FlawedLock,
                     mitigations=None, gap=FLEET_GAP, base_uid=None,
                     policy=None, processing_delay=0.004, random_state=None):
    """
    Set up one installation: a serial fleet of transponders, all authorized
    on one cylinder.

    Parameters
    ----------
    n_transponders : int
        Size of the fleet. The default is 2.
    variant : LockVariant or str
        Protocol flavor of the cylinder. The default is flawed.
    mitigations : LockMitigations, iterable of str or NoneType
        Enabled countermeasures. The default is None, no countermeasure.
    gap : int
        UID distance of neighbouring transponders. The default is 3596.
    base_uid : bytes or NoneType
        UID of the first transponder. The default is None, random.
    policy : timeout policy or NoneType
        Timeout policy of the cylinder.
    processing_delay : float
        Per command delay of the transponders. The default is 0.004.
    random_state : int, RandomState or NoneType
        Set seed for reproducability.

    Returns
    -------
    deployment : LockDeployment
    """
    random_state = check_random_state(random_state)
    if mitigations is None:
        mitigations = LockMitigations()
    elif not isinstance(mitigations, LockMitigations):
        mitigations = LockMitigations.from_names(mitigations)
    key = random_state.bytes(16) if mitigations.per_deploy_key \
        else VENDOR_KEY
    uids = make_uid_fleet(n_transponders, gap, base_uid,
                          seed=random_state.randint(2**31))
    transponders = []
    for uid in uids:
        token = random_state.bytes(16) if mitigations.random_token else None
        transponders.append(LockTransponder(
            LockKeys(key, uid, token), processing_delay=processing_delay,
            random_state=random_state.randint(2**31)))
    cylinder = LockCylinder(
        key, [t.credential for t in transponders], variant,
        random_r_a=mitigations.random_ra, policy=policy,
        max_tries=mitigations.try_limit,
        random_state=random_state.randint(2**31))
    logger.info("deployment with %d transponders, mitigations: %s",
                n_transponders, ", ".join(mitigations.names()) or "none")
    return LockDeployment(key, cylinder, transponders, mitigations)


def honest_unlock(cylinder, transponder, clock=None):
    """Unlock with the transponder in the field; returns outcome and log."""
    transport = DirectTransport(transponder, clock)
    outcome = cylinder.unlock(transport)
    return outcome, transport.log


# %% Attack outcomes

@dataclass
class RelayOutcome:
    unlocked: bool
    elapsed: float
    outcome: UnlockOutcome
    log: SessionLog = field(repr=False, default=None)
    max_exchange: float = 0.0

    def to_dict(self):
        return {"attack": "relay", "unlocked": self.unlocked,
                "elapsed": self.elapsed, "max_exchange": self.max_exchange,
                "outcome": self.outcome.to_dict()}


@dataclass
class ReplayOutcome:
    unlocked: bool
    outcome: UnlockOutcome
    # the cylinder saw the recorded PICC messages byte for byte
    identical: bool
    divergences: int = 0
    log: SessionLog = field(repr=False, default=None)

    def to_dict(self):
        return {"attack": "replay", "unlocked": self.unlocked,
                "identical": self.identical,
                "divergences": self.divergences,
                "outcome": self.outcome.to_dict()}


@dataclass
class WalkByOutcome:
    uid: Optional[bytes]
    stage: str
    reason: str = ""

    @property
    def success(self):
        return self.uid is not None

    def to_dict(self):
        return {"attack": "walkby",
                "uid": None if self.uid is None else self.uid.hex(),
                "stage": self.stage, "reason": self.reason}


@dataclass
class BruteForceOutcome:
    found_uid: Optional[bytes]
    attempts: int
    simulated_elapsed: float
    locked_out: bool = False
    exhausted: bool = False

    @property
    def success(self):
        return self.found_uid is not None

    def to_dict(self):
        return {"attack": "bruteforce",
                "found_uid": None if self.found_uid is None
                else self.found_uid.hex(),
                "attempts": self.attempts,
                "simulated_elapsed": self.simulated_elapsed,
                "locked_out": self.locked_out, "exhausted": self.exhausted}


# %% Attacks

def _link_profile(link):
    if link is None:
        return LinkProfile("direct-relay", ZERO_DELAY)
    if isinstance(link, LinkProfile):
        if link.mode != RELAY:
            raise ValueError("relay attack needs a relay profile, got %s"
                             % link.mode)
        return link
    return LinkProfile.constant("constant", float(link))


def attack_relay(cylinder, transponder, link=None, pipeline=None,
                 session_id=1, random_state=None):
    """
    Open `cylinder` with a transponder that is far away: a tag-role
    endpoint sits at the cylinder, a reader-role endpoint at the
    transponder, both connected through a loopback relay.

    Parameters
    ----------
    cylinder : LockCylinder
        Target PCD.
    transponder : CardModel
        Legitimate transponder held by the victim.
    link : LinkProfile, float or NoneType
        Delay of every hop. A float is a constant delay in seconds per hop.
        The default is None, no delay.
    pipeline : Pipeline or NoneType
        Plugins of the relay.
    session_id : int
        Relay session. The default is 1.
    random_state : int, RandomState or NoneType
        Source of the hop delays.

    Returns
    -------
    outcome : RelayOutcome
    """
    profile = _link_profile(link)
    network = LoopbackNetwork(pipeline, random_state=random_state)
    reader = ReaderEndpoint(network.connect(profile.reader_link,
                                            name="victim"),
                            session_id, transponder).attach()
    tag = TagEndpoint(network.connect(profile.tag_link, name="cylinder"),
                      session_id)
    if tag.wait_initial() is None:
        logger.warning("relay never received the transponder's identity")
    outcome = cylinder.unlock(tag)
    tag.close()
    reader.stop()
    network.run()
    logger.info("relay over %s: %s after %.3f s", profile.name,
                "opened" if outcome.unlocked else "refused", outcome.elapsed)
    return RelayOutcome(outcome.unlocked, outcome.elapsed, outcome, tag.log,
                        outcome.max_exchange)


def attack_replay(recorded, cylinder, mode=ReplayMode.DataBased):
    """
    Replay the PICC side of a recorded unlocking run to a fresh run of
    `cylinder`.

    Parameters
    ----------
    recorded : SessionLog
        Log of an earlier run between a cylinder and a transponder.
    cylinder : LockCylinder
        PCD to open.
    mode : ReplayMode or str
        How the recorded answers are selected. The default is data based.

    Returns
    -------
    outcome : ReplayOutcome
    """
    card = LogBackedCard(recorded, ReplayMode(mode))
    transport = DirectTransport(card)
    outcome = cylinder.unlock(transport)
    identical = [a.payload for a in transport.log.responses()] == \
        [a.payload for a in recorded.responses()]
    return ReplayOutcome(outcome.unlocked, outcome, identical,
                         len(card.engine.divergences), transport.log)


def attack_walkby(key, transponder, variant=LockVariant.FlawedLock,
                  clock=None):
    """
    Play the cylinder towards a transponder passing by and read its UID.

    Parameters
    ----------
    key : bytes
        The vendor key.
    transponder : CardModel
        Transponder within reach.
    variant : LockVariant or str
        Protocol flavor to speak. The default is flawed.

    Returns
    -------
    outcome : WalkByOutcome
    """
    state = new_pcd_state(key, variant)
    transport = DirectTransport(transponder, clock)
    try:
        _, outgoing = pcd_step(state)
        while outgoing is not None:
            stage = state.stage
            result = LENIENT_POLICY.exchange(transport, outgoing)
            if result.timed_out:
                raise ProtocolAbort(stage, "transponder did not answer")
            _, outgoing = pcd_step(state, result.response)
    except ProtocolAbort as abort:
        logger.info("walk-by failed: %s", abort)
        return WalkByOutcome(None, abort.stage, abort.reason)
    return WalkByOutcome(state.credential, state.stage)


def walkby_via_server(key, transponders, link=None, variant="flawed",
                      session_id=1, random_state=None):
    """
    Walk-by through the relay: the PCD runs as a server plugin and every
    transponder presented to the reader-role endpoint is read out.

    Returns
    -------
    outcomes : list of WalkByOutcome
        One outcome per transponder, in order.
    """
    profile = _link_profile(link)
    plugin = WalkByPcdPlugin(key, variant=variant)
    network = LoopbackNetwork(Pipeline([plugin]), random_state=random_state)
    outcomes = []
    reader = None
    for transponder in transponders:
        n_uids, n_failures = len(plugin.uids), len(plugin.failures)
        if reader is None:
            reader = ReaderEndpoint(network.connect(profile.reader_link),
                                    session_id, transponder).attach()
        else:
            reader.present(transponder)
        network.run(predicate=lambda: len(plugin.uids) > n_uids or
                    len(plugin.failures) > n_failures)
        if len(plugin.uids) > n_uids:
            outcomes.append(WalkByOutcome(plugin.uids[-1], "done"))
        elif len(plugin.failures) > n_failures:
            abort = plugin.failures[-1]
            outcomes.append(WalkByOutcome(None, abort.stage, abort.reason))
        else:
            outcomes.append(WalkByOutcome(None, "start", "no answer"))
    if reader is not None:
        reader.stop()
    network.run()
    return outcomes


def attack_bruteforce(cylinder, key=VENDOR_KEY, known_uid=None, stride=1,
                      rate_per_s=BRUTEFORCE_RATE, max_attempts=None,
                      via_server=False, random_state=None):
    """
    Guess the UID of an authorized transponder by presenting candidate UIDs
    of a serial fleet, one unlocking run each.

    Parameters
    ----------
    cylinder : LockCylinder
        Target PCD.
    key : bytes
        Key the emulated transponders authenticate with. The default is the
        vendor key.
    known_uid : bytes or NoneType
        A UID of the fleet; candidates start at its neighbour. The default
        is None, the first NXP UID.
    stride : int
        Distance of two candidates. The default is 1.
    rate_per_s : float
        Attempts per second the real cylinder allows. The default is 3.
    max_attempts : int or NoneType
        Give up after this many attempts. The default is None.
    via_server : bool
        Answer the cylinder from a relay plugin behind a tag-role endpoint
        instead of a local transponder model.
    random_state : int, RandomState or NoneType
        Source of the transponder nonces.

    Returns
    -------
    outcome : BruteForceOutcome
        Attempt k tests known_uid + k * stride and takes k / rate_per_s
        simulated seconds.
    """
    if not rate_per_s > 0:
        raise ValueError("rate_per_s must be positive, got %s" % rate_per_s)
    random_state = check_random_state(random_state)
    interval = 1.0 / rate_per_s
    if via_server:
        plugin = BruteForcePlugin(key, start_uid=known_uid, stride=stride,
                                  random_state=random_state)
        network = LoopbackNetwork(Pipeline([plugin]))
        clock = network.clock
        tag = TagEndpoint(network.connect(), session_id=1)

        def attempt(uid):
            return cylinder.unlock(tag), plugin.current
        candidates = uid_candidates(known_uid, stride)
    else:
        clock = VirtualClock()

        def attempt(uid):
            transponder = LockTransponder(LockKeys(key, uid),
                                          processing_delay=0.0,
                                          random_state=random_state)
            return cylinder.unlock(DirectTransport(transponder, clock)), uid
        candidates = uid_candidates(known_uid, stride)

    attempts = 0
    found = None
    locked_out = exhausted = False
    for uid in candidates:
        if max_attempts is not None and attempts >= max_attempts:
            break
        clock.advance_to(int(round(attempts * interval * 1e9)))
        outcome, tried = attempt(uid)
        if outcome.stage == "lockout":
            locked_out = True
            break
        attempts += 1
        if outcome.unlocked:
            found = tried
            break
    else:
        exhausted = True
    if via_server:
        tag.close()
        network.run()
    if found is not None:
        logger.info("brute force found %s after %d attempts", found.hex(),
                    attempts)
    return BruteForceOutcome(found, attempts, attempts * interval,
                             locked_out, exhausted)
