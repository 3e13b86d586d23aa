"""
nfclab: NFC protocol laboratory.

Python implementation of a hardware-free NFC relay, replay and clone toolkit.

Definition of link delay models, link profiles and the response timeout
policies of a PCD.

"""

# import modules
import logging
import math
import re
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import stats
from sklearn.utils import check_random_state

from nfclab._core import FWT_MAX_INDEX, FwtIndex, fwt_seconds

logger = logging.getLogger(__name__)

# retransmissions a PCD performs before giving up
DEFAULT_MAX_ATTEMPTS = 3

_DURATION_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*"
                          r"(s|ms|us|ns)?\s*$")
_UNIT_SECONDS = {None: 1.0, "s": 1.0, "ms": 1e-3, "us": 1e-6, "ns": 1e-9}


def parse_duration(text):
    """Seconds from a string such as `360ms`, `0.5s` or `250us`."""
    match = _DURATION_RE.match(str(text))
    if match is None:
        raise ValueError("duration must look like 10ms, 0.5s or 250us, got "
                         "%s" % text)
    return float(match.group(1)) * _UNIT_SECONDS[match.group(2)]


# %% Delay models

class DelayModel:
    """One-way delay distribution of a network hop, in seconds."""

    def sample(self, random_state=None):
        raise NotImplementedError

    @property
    def mean(self):
        raise NotImplementedError


@dataclass(frozen=True)
class ConstantDelay(DelayModel):
    seconds: float = 0.0

    def __post_init__(self):
        if not self.seconds >= 0:
            raise ValueError("delay must be non-negative, got %s"
                             % self.seconds)

    def sample(self, random_state=None):
        return float(self.seconds)

    @property
    def mean(self):
        return float(self.seconds)

    def __str__(self):
        return "const(%gms)" % (self.seconds * 1e3)


@dataclass(frozen=True)
class NormalDelay(DelayModel):
    """Normal delay truncated at zero."""
    loc: float
    scale: float

    def __post_init__(self):
        if not self.loc >= 0:
            raise ValueError("loc must be non-negative, got %s" % self.loc)
        if not self.scale > 0:
            raise ValueError("scale must be positive, got %s" % self.scale)

    def _dist(self):
        return stats.truncnorm(a=-self.loc / self.scale, b=np.inf,
                               loc=self.loc, scale=self.scale)

    def sample(self, random_state=None):
        random_state = check_random_state(random_state)
        return float(self._dist().rvs(random_state=random_state))

    @property
    def mean(self):
        return float(self._dist().mean())

    def __str__(self):
        return "normal(%gms, %gms)" % (self.loc * 1e3, self.scale * 1e3)


class EmpiricalDelay(DelayModel):
    """Resamples measured delays."""

    def __init__(self, samples):
        samples = np.asarray(samples, dtype=float)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("samples must be a non-empty 1-d sequence")
        if np.any(samples < 0):
            raise ValueError("samples must be non-negative")
        self.samples = samples

    def sample(self, random_state=None):
        random_state = check_random_state(random_state)
        return float(random_state.choice(self.samples))

    @property
    def mean(self):
        return float(self.samples.mean())

    def __str__(self):
        return "empirical(n=%d)" % self.samples.size


def delay_from_spec(spec):
    """
    Delay model from its command line form: `10ms`, `const:10ms`,
    `normal:12ms,2ms` or `empirical:1ms,2ms,5ms`.
    """
    if isinstance(spec, DelayModel):
        return spec
    kind, _, rest = str(spec).partition(":")
    if not rest:
        return ConstantDelay(parse_duration(kind))
    values = [parse_duration(v) for v in rest.split(",")]
    if kind == "const" and len(values) == 1:
        return ConstantDelay(values[0])
    if kind == "normal" and len(values) == 2:
        return NormalDelay(*values)
    if kind == "empirical":
        return EmpiricalDelay(values)
    raise ValueError("unknown delay model %s" % spec)


ZERO_DELAY = ConstantDelay(0.0)


# %% Link profiles

# how a profile reaches the card
DIRECT = "direct"
REPLAY = "replay"
RELAY = "relay"


@dataclass(frozen=True)
class LinkProfile:
    """
    Network setup between a reader and a card.

    `tag_link` is the hop between the tag-role endpoint and the server,
    `reader_link` the hop between the server and the reader-role endpoint.
    A relayed exchange crosses four hops.
    """
    name: str
    tag_link: DelayModel = ZERO_DELAY
    reader_link: Optional[DelayModel] = None
    mode: str = RELAY
    replay_processing: float = 0.0

    def __post_init__(self):
        if self.mode not in (DIRECT, REPLAY, RELAY):
            raise ValueError("mode must be direct, replay or relay, got %s"
                             % self.mode)
        if self.reader_link is None:
            object.__setattr__(self, "reader_link", self.tag_link)
        if self.replay_processing < 0:
            raise ValueError("replay_processing must be non-negative, got "
                             "%s" % self.replay_processing)

    @property
    def hops(self) -> Tuple[DelayModel, ...]:
        if self.mode != RELAY:
            return ()
        return (self.tag_link, self.reader_link, self.reader_link,
                self.tag_link)

    @property
    def mean_round_trip(self):
        return sum(hop.mean for hop in self.hops)

    @classmethod
    def constant(cls, name, seconds):
        """Relay profile with the same constant delay on every hop."""
        return cls(name, ConstantDelay(seconds))

    def describe(self):
        if self.mode == DIRECT:
            return "direct"
        if self.mode == REPLAY:
            return "local replay, %gms" % (self.replay_processing * 1e3)
        return "relay, tag %s, reader %s" % (self.tag_link, self.reader_link)


def default_profiles():
    """Synthetic profiles for the evaluated relay configurations."""
    bluetooth = NormalDelay(0.012, 0.002)
    return {
        "TAG": LinkProfile("TAG", mode=DIRECT),
        "RP": LinkProfile("RP", mode=REPLAY, replay_processing=0.0005),
        "BT": LinkProfile("BT", bluetooth),
        "BW": LinkProfile("BW", bluetooth, NormalDelay(0.020, 0.006)),
        "WH": LinkProfile("WH", NormalDelay(0.025, 0.012)),
        "WA": LinkProfile("WA", NormalDelay(0.035, 0.025)),
    }


# %% Timeout policies

@dataclass
class ExchangeResult:
    """Outcome of one command/response exchange under a timeout policy."""
    response: Optional[bytes]
    elapsed: float
    attempts: int = 1

    @property
    def ok(self):
        return self.response is not None

    @property
    def timed_out(self):
        return self.response is None


@dataclass(frozen=True)
class FwtRetransmit:
    """
    ISO 14443 behavior: after each FWT window the PCD retransmits, up to
    `max_attempts` windows in total. An answer to an earlier transmission
    is still accepted.
    """
    index: int
    max_attempts: int = DEFAULT_MAX_ATTEMPTS

    def __post_init__(self):
        FwtIndex(self.index)
        if isinstance(self.max_attempts, bool) or self.max_attempts < 1:
            raise ValueError("max_attempts must be a positive integer, got "
                             "%s" % self.max_attempts)

    @property
    def window(self):
        return fwt_seconds(self.index)

    def windows(self):
        return [self.window] * self.max_attempts

    @property
    def budget(self):
        return self.window * self.max_attempts

    def exchange(self, transport, payload):
        start = transport.clock.now_ns()
        response = transport.transceive(payload, timeout=self.window)
        attempts = 1
        while response is None and attempts < self.max_attempts:
            logger.debug("FWT_%d expired, retransmitting", self.index)
            response = transport.wait(self.window)
            attempts += 1
        return ExchangeResult(response,
                              (transport.clock.now_ns() - start) / 1e9,
                              attempts)

    def __str__(self):
        return "FwtRetransmit(FWT_%d x %d)" % (self.index, self.max_attempts)


@dataclass(frozen=True)
class MandatoryTimeout:
    """Single hard deadline, late responses are rejected."""
    deadline: float

    def __post_init__(self):
        if not self.deadline > 0:
            raise ValueError("deadline must be positive, got %s"
                             % self.deadline)

    def windows(self):
        return [self.deadline]

    @property
    def budget(self):
        return self.deadline

    def exchange(self, transport, payload):
        start = transport.clock.now_ns()
        response = transport.transceive(payload, timeout=self.deadline)
        return ExchangeResult(response,
                              (transport.clock.now_ns() - start) / 1e9)

    def __str__(self):
        return "MandatoryTimeout(%gs)" % self.deadline


def enforce_timeout(policy, latency):
    """
    Outcome of an exchange whose response arrives after `latency` seconds
    (None if it never arrives) under `policy`.
    """
    if latency is not None and latency < 0:
        raise ValueError("latency must be non-negative, got %s" % latency)
    if isinstance(policy, FwtRetransmit):
        if latency is None or latency > policy.budget:
            return ExchangeResult(None, policy.budget, policy.max_attempts)
        attempts = max(1, math.ceil(latency / policy.window))
        return ExchangeResult(b"", latency, attempts)
    if isinstance(policy, MandatoryTimeout):
        if latency is None or latency > policy.deadline:
            return ExchangeResult(None, policy.deadline)
        return ExchangeResult(b"", latency)
    raise ValueError("policy must be FwtRetransmit or MandatoryTimeout, got "
                     "%s" % policy)


def policy_from_spec(spec):
    """`fwt:<i>[x<attempts>]` or `timeout:<duration>`."""
    if isinstance(spec, (FwtRetransmit, MandatoryTimeout)):
        return spec
    kind, _, rest = str(spec).partition(":")
    if kind == "fwt":
        index, _, attempts = rest.partition("x")
        return FwtRetransmit(int(index),
                             int(attempts) if attempts else
                             DEFAULT_MAX_ATTEMPTS)
    if kind == "timeout":
        return MandatoryTimeout(parse_duration(rest))
    raise ValueError("policy must be fwt:<i> or timeout:<duration>, got %s"
                     % spec)


# the most lenient single window a PCD can negotiate
LENIENT_POLICY = MandatoryTimeout(fwt_seconds(FWT_MAX_INDEX))
