"""
nfclab: NFC protocol laboratory.

Python implementation of a hardware-free NFC relay, replay and clone toolkit.

Overview and Testing of examples from documentation, followed by the unit
tests of every module.

"""

"""
Basic example using default settings
"""
# load nfclab package
import os
import sys
import tempfile
import unittest

import nfclab

# a lock installation with two transponders
deployment = nfclab.build_deployment(random_state=123)
cylinder, victim = deployment.cylinder, deployment.transponders[0]

# relay the transponder with 360 ms per network hop
nfclab.attack_relay(cylinder, victim, link=0.36)

# record an honest run and replay it to the cylinder
outcome, recorded = nfclab.honest_unlock(cylinder, victim)
nfclab.attack_replay(recorded, cylinder)

# export the recorded run for Wireshark and read it back
with tempfile.TemporaryDirectory() as tmp:
    path = os.path.join(tmp, "unlock.pcapng")
    nfclab.write_log(path, recorded)
    nfclab.read_log(path)

"""
LatencyBenchmark()
"""
# measure relay latencies against the frame waiting time
bench = nfclab.LatencyBenchmark(profiles=["TAG", "RP", "BT", "WA"],
                                n_runs=20, n_jobs=-1, random_state=123)
bench.run()
bench.summary()
bench.box_stats()
bench.classify()
bench.plot()

"""
Lock attacks
"""
# read a UID while the victim walks by, then open with a forged transponder
walkby = nfclab.attack_walkby(deployment.key, victim)

# guess the neighbouring UID of the fleet
nfclab.attack_bruteforce(cylinder, known_uid=deployment.uids[0],
                         random_state=123)

# the countermeasures
guarded = nfclab.build_deployment(
    mitigations=nfclab.LockMitigations.from_names("random-ra,try-limit=5"),
    random_state=123)
_, recorded = nfclab.honest_unlock(guarded.cylinder, guarded.transponders[0])
nfclab.attack_replay(recorded, guarded.new_cylinder())

"""
Clone and NCI configuration
"""
data = nfclab.make_static_tag_data(seed=123)
clone = nfclab.run_clone(data)
clone.identity
clone.close()

"""
Unit tests
"""
suite = unittest.TestLoader().discover(start_dir=os.path.dirname(
    os.path.abspath(__file__)), pattern="_unit_tests_*.py")
result = unittest.TextTestRunner(verbosity=2).run(suite)
sys.exit(not result.wasSuccessful())
