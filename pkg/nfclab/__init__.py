"""
 Description
 ----------------------------
 A Python laboratory for NFC relay, replay and clone attacks that needs no
 NFC hardware. Readers, tags and the relay server between them are
 simulated: APDU traffic is relayed through a server with a plugin pipeline
 for inspecting and rewriting messages, recorded into session logs that
 export to pcapng, replayed from either side, and tag identities are cloned
 through a model of the NFC controller configuration (NCI). Network latency
 is injected per hop on a virtual clock, so timing experiments are exact and
 reproducible.

 The package ships a case study of a door locking system built on a flawed
 variant of the DESFire EV1 mutual authentication. The lock cylinder, its
 transponders and four attacks (relay, replay, walk-by and UID brute force)
 are implemented together with the countermeasures that defeat them, and a
 latency benchmark relates relay configurations to the ISO 14443 frame
 waiting time.

 Installation
 ----------------------------
 To install the `nfclab` package run
 ```
 pip install nfclab
 ```
 in the terminal. `nfclab` requires the following dependencies:

 * numpy (>=1.21.0)
 * pandas (>=1.3.5)
 * scipy (>=1.7.2)
 * scikit-learn (>=1.0.2)
 * joblib (>=1.0.1)
 * plotnine (>=0.8.0)
 * pycryptodome (>=3.15.0)

 The unit tests additionally use scapy to validate exported pcapng files.

 The implementation relies on Python 3 and is compatible with
 version 3.8, 3.9 and 3.10.

 Examples
 ----------------------------

 The following examples demonstrate the basic usage of the `nfclab`
 package.
 ```
 # load nfclab package
 import nfclab

 # a lock installation with two transponders
 deployment = nfclab.build_deployment(random_state=123)
 cylinder, victim = deployment.cylinder, deployment.transponders[0]

 # relay the transponder with 360 ms per network hop
 nfclab.attack_relay(cylinder, victim, link=0.36)

 # record an honest run and replay it to the cylinder
 outcome, recorded = nfclab.honest_unlock(cylinder, victim)
 nfclab.attack_replay(recorded, cylinder)

 # export the recorded run for Wireshark
 nfclab.write_log("unlock.pcapng", recorded)

 # measure relay latencies against the frame waiting time
 bench = nfclab.LatencyBenchmark(profiles=["TAG", "RP", "BT", "WA"],
                                 random_state=123)
 bench.run()
 bench.summary()
 bench.plot()
 ```

 The same functionality is available on the command line, see
 `nfclab --help`.

 Release Notes
 ----------------------------

 * Version 0.1.0: Initial release of nfclab python package

 Authors
 ----------------------------
 nfclab developers
"""

from nfclab.LatencyBenchmark import LatencyBenchmark
from nfclab._core import (Apdu, Direction, LogMode, SessionLog, StaticTagData,
                          TagTech, VirtualClock, fwt_seconds,
                          min_fwt_index_covering, NfcLabError)
from nfclab._pcapng import export_log, import_log, read_log, write_log
from nfclab._nci import merge_protect, profile_from_tag, restore_snapshot
from nfclab._plugins import Pipeline, run_pipeline
from nfclab._relay import LoopbackNetwork, run_server
from nfclab._endpoints import (advanced_replay, run_clone,
                               run_reader_endpoint, run_tag_endpoint)
from nfclab._lock import (LockCylinder, LockMitigations, attack_bruteforce,
                          attack_relay, attack_replay, attack_walkby,
                          build_deployment, honest_unlock)
from nfclab._timing import LinkProfile, default_profiles, enforce_timeout
from nfclab._bench import box_stats, classify_fwt, run_benchmark
from nfclab._utils import (make_session_log, make_static_tag_data,
                           make_uid_fleet)
__all__ = ["LatencyBenchmark", "Apdu", "Direction", "LogMode", "SessionLog",
           "StaticTagData", "TagTech", "VirtualClock", "fwt_seconds",
           "min_fwt_index_covering", "NfcLabError", "export_log",
           "import_log", "read_log", "write_log", "merge_protect",
           "profile_from_tag", "restore_snapshot", "Pipeline",
           "run_pipeline", "LoopbackNetwork", "run_server",
           "advanced_replay", "run_clone", "run_reader_endpoint",
           "run_tag_endpoint", "LockCylinder", "LockMitigations",
           "attack_bruteforce", "attack_relay", "attack_replay",
           "attack_walkby", "build_deployment", "honest_unlock",
           "LinkProfile", "default_profiles", "enforce_timeout",
           "box_stats", "classify_fwt", "run_benchmark", "make_session_log",
           "make_static_tag_data", "make_uid_fleet"]
__version__ = "0.1.0"
__module__ = 'nfclab'
__author__ = "nfclab developers"
__copyright__ = "Copyright (c) 2026, nfclab developers"
__license__ = "MIT License"
