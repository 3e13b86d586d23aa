"""
nfclab: NFC protocol laboratory.

Python implementation of a hardware-free NFC relay, replay and clone toolkit.

Showcase application of the lock case study and the latency benchmark.
"""

# import modules
import nfclab

# lock installation with the vendor key and two serial transponders
deployment = nfclab.build_deployment(n_transponders=2, variant="flawed",
                                     random_state=1)
cylinder, victim = deployment.cylinder, deployment.transponders[0]

# relay attack: opens as long as every command answers within 1.8 s
for delay in (0.0, 0.36, 2.5):
    print(delay, nfclab.attack_relay(cylinder, victim, link=delay).unlocked)

# replay attack against the flawed and the correct variant
for variant in ("flawed", "correct"):
    installation = nfclab.build_deployment(variant=variant, random_state=1)
    _, recorded = nfclab.honest_unlock(installation.cylinder,
                                       installation.transponders[0])
    replay = nfclab.attack_replay(recorded, installation.new_cylinder())
    print(variant, replay.unlocked, replay.outcome.stage)

# walk-by: the vendor key reveals the UID, which is the credential
walkby = nfclab.attack_walkby(deployment.key, victim)
print(walkby.uid.hex())

# brute force from a known UID of the same fleet
bruteforce = nfclab.attack_bruteforce(cylinder, known_uid=deployment.uids[0],
                                      random_state=1)
print(bruteforce.attempts, round(bruteforce.simulated_elapsed / 60, 1))

# latency benchmark over the default link profiles
bench = nfclab.LatencyBenchmark(n_runs=20, n_jobs=-1, random_state=1)
bench.run()
# print summary of the benchmark
bench.summary()
# classification per command
bench.classify()
# plot latencies against the frame waiting times
bench.plot()
