"""
nfclab: NFC protocol laboratory.

Python implementation of a hardware-free NFC relay, replay and clone toolkit.

Definition of the command line interface.

"""

# import modules
import argparse
import json
import logging
import os
import sys
from pathlib import Path

from nfclab import __version__
from nfclab._bench import BenchCard
from nfclab._core import (LogMode, NfcLabError, SessionLog, StaticTagData,
                          TagTech)
from nfclab._desfire import LockKeys, LockTransponder, LockVariant
from nfclab._endpoints import (DirectTransport, LogBackedCard,
                               LogReplayReader, ReplayMode, ReplaySelector,
                               ScriptedReader, ScriptedResponder,
                               advanced_replay, run_clone,
                               run_reader_endpoint, run_tag_endpoint)
from nfclab._lock import (LockCylinder, LockMitigations, VENDOR_KEY,
                          attack_bruteforce, attack_relay, attack_replay,
                          attack_walkby, build_deployment, honest_unlock,
                          walkby_via_server)
from nfclab._pcapng import DEFAULT_TSRESOL, read_log, write_log
from nfclab._plugins import Pipeline, parse_plugin_options
from nfclab._relay import TcpLink, run_server
from nfclab._store import LogStore
from nfclab._timing import (LinkProfile, default_profiles, delay_from_spec,
                            parse_duration, policy_from_spec)
from nfclab.LatencyBenchmark import LatencyBenchmark

logger = logging.getLogger(__name__)


SEED_ENV = "NFCLAB_SEED"
DEFAULT_LISTEN = "127.0.0.1:5566"
DEFAULT_UID = "04a1b2c3d4e5f6"

# exit statuses
EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_NEGATIVE = 3


# %% Helpers

def _hex(text):
    try:
        return bytes.fromhex(text)
    except ValueError:
        raise argparse.ArgumentTypeError("not a hex string: %s" % text) \
            from None


def _emit(record, path=None):
    text = json.dumps(record, indent=2)
    if path is None:
        print(text)
    else:
        Path(path).write_text(text + "\n")


def load_log(spec, store):
    """A log from a store id, a pcapng file or a JSON file."""
    spec = str(spec)
    if spec.isdigit():
        return store.load(int(spec))
    path = Path(spec)
    if path.suffix == ".pcapng":
        return read_log(path)
    return SessionLog.from_dict(json.loads(path.read_text()))


def build_card(spec, args, store):
    """`lock`, `bench`, `scripted:<file>` or `log:<file or id>`."""
    kind, _, rest = spec.partition(":")
    if kind == "lock":
        return LockTransponder(LockKeys(args.key, args.uid),
                               random_state=args.seed)
    if kind == "bench":
        return BenchCard()
    if kind == "scripted" and rest:
        return ScriptedResponder.from_file(rest)
    if kind == "log" and rest:
        return LogBackedCard(load_log(rest, store),
                             ReplayMode(getattr(args, "mode", "data")))
    raise ValueError("card must be lock, bench, scripted:<file> or "
                     "log:<file>, got %s" % spec)


def build_pcd(spec, args, requests=()):
    """`lock`, `scripted:<file>` (one hex request per line) or the given
    requests."""
    policy = None if args.policy is None else policy_from_spec(args.policy)
    if spec == "lock":
        cylinder = LockCylinder(args.key, [args.uid], policy=policy,
                                random_state=args.seed)
        return lambda transport: cylinder.unlock(transport)
    if spec.startswith("scripted:"):
        lines = Path(spec[len("scripted:"):]).read_text().splitlines()
        requests = [bytes.fromhex(line.split("#")[0])
                    for line in lines if line.split("#")[0].strip()]
    elif spec != "log":
        raise ValueError("pcd must be lock, log or scripted:<file>, got %s"
                         % spec)
    return ScriptedReader(requests, policy)


def _pipeline(args):
    tokens = [t for t in (args.plugins or "").split(",") if t]
    return Pipeline.from_tokens(tokens, parse_plugin_options(args.plugin_opt),
                                fail_open=args.fail_open)


# %% Subcommands

def cmd_server(args, store):
    pipeline = _pipeline(args)
    try:
        run_server(args.listen, pipeline, args.log_dir,
                   idle_timeout=args.idle_timeout)
    except KeyboardInterrupt:
        logger.info("relay stopped")
    finally:
        pipeline.close()
    return EXIT_OK


def cmd_endpoint(args, store):
    link = TcpLink(args.server)
    if args.role == "reader":
        card = build_card(args.card, args, store)
        log = run_reader_endpoint(link, args.session, card)
    else:
        log = run_tag_endpoint(link, args.session, build_pcd(args.pcd, args),
                               deadline=args.deadline,
                               initial_timeout=args.initial_timeout)
        link.close()
    log_id = store.save(log)
    _emit({"role": args.role, "session": args.session, "log": log_id,
           "entries": len(log)})
    return EXIT_OK


def cmd_replay(args, store):
    log = load_log(args.log, store)
    mode = ReplayMode(args.mode)
    if args.side == "tag":
        # the logged answers serve a live reader
        pcd = build_pcd(args.pcd, args, [a.payload for a in log.requests()])
        sel = ReplaySelector(mode)
        if args.server is None:
            card = LogBackedCard(log, mode)
            card.engine.sel = sel
            transport = DirectTransport(card)
            pcd(transport)
            replayed = transport.log
        else:
            replayed = advanced_replay(args.server, args.session, sel, log,
                                       pcd, deadline=args.deadline)
        divergences = len(sel.divergences)
    else:
        # the logged requests are sent to a card, its answers pick the next
        reader = LogReplayReader(log, mode, None if args.policy is None
                                 else policy_from_spec(args.policy))
        if args.server is None:
            transport = DirectTransport(build_card(args.card, args, store))
            reader(transport)
            replayed = transport.log
        else:
            link = TcpLink(args.server)
            replayed = run_tag_endpoint(link, args.session, reader,
                                        deadline=args.deadline,
                                        initial_timeout=args.deadline)
            link.close()
        divergences = len(reader.divergences)
    replayed.mode = LogMode.Replay
    log_id = store.save(replayed)
    _emit({"side": args.side, "mode": mode.value, "log": log_id,
           "entries": len(replayed), "divergences": divergences})
    return EXIT_OK


def cmd_clone(args, store):
    if args.log is not None:
        data = load_log(args.log, store).initial
        if data is None:
            raise NfcLabError("log %s has no static tag data" % args.log)
    else:
        fields = []
        for item in args.field or ():
            name, sep, value = item.partition("=")
            if not sep:
                raise ValueError("field must look like NAME=hex, got %s"
                                 % item)
            fields.append((name, bytes.fromhex(value)))
        data = StaticTagData(TagTech.from_letter(args.tech), fields)
    clone = run_clone(data)
    identity = clone.identity
    stream = clone.stream
    restore = clone.close()
    _emit({"identity": identity.to_dict(),
           "config": [[str(e.param), e.value.hex()] for e in stream],
           "restore": [[str(e.param), e.value.hex()] for e in restore]})
    return EXIT_OK


def cmd_export(args, store):
    log = load_log(args.log, store)
    write_log(args.out, log, tsresol=args.tsresol)
    logger.info("exported %r to %s", log, args.out)
    return EXIT_OK


def cmd_import(args, store):
    log = read_log(args.file)
    log_id = store.save(log)
    _emit({"log": log_id, "mode": log.mode.value, "entries": len(log),
           "initial": None if log.initial is None else log.initial.to_dict()})
    return EXIT_OK


def _relay_profile(args):
    if args.profile is not None:
        profiles = default_profiles()
        if args.profile.upper() not in profiles:
            raise ValueError("profile must be one of %s, got %s"
                             % (", ".join(profiles), args.profile))
        return profiles[args.profile.upper()]
    return LinkProfile("custom", delay_from_spec(args.delay))


def cmd_lockdemo(args, store):
    deployment = build_deployment(
        n_transponders=2, variant=args.variant,
        mitigations=LockMitigations.from_names(args.mitigations or ""),
        random_state=args.seed)
    victim = deployment.transponders[0]
    transcript = None

    if args.scenario == "honest":
        outcome, transcript = honest_unlock(deployment.cylinder, victim)
        record = dict(outcome.to_dict(), attack="honest")
        success = outcome.unlocked
    elif args.scenario == "relay":
        result = attack_relay(deployment.cylinder, victim,
                              _relay_profile(args), random_state=args.seed)
        record, success, transcript = result.to_dict(), result.unlocked, \
            result.log
    elif args.scenario == "replay":
        _, recorded = honest_unlock(deployment.cylinder, victim)
        result = attack_replay(recorded, deployment.new_cylinder(args.seed),
                               ReplayMode(args.replay_mode))
        record, success, transcript = result.to_dict(), result.unlocked, \
            result.log
    elif args.scenario == "walkby":
        if args.via_server:
            outcomes = walkby_via_server(VENDOR_KEY, deployment.transponders,
                                         variant=args.variant,
                                         random_state=args.seed)
            record = {"attack": "walkby",
                      "outcomes": [o.to_dict() for o in outcomes]}
            success = all(o.success for o in outcomes)
        else:
            result = attack_walkby(VENDOR_KEY, victim, args.variant)
            record, success = result.to_dict(), result.success
            if success:
                # a transponder carrying the stolen UID opens the door
                forged = LockTransponder(LockKeys(VENDOR_KEY, result.uid))
                opened, transcript = honest_unlock(deployment.cylinder,
                                                   forged)
                record["forged_unlock"] = opened.unlocked
                success = opened.unlocked
    else:
        known = victim.uid if args.known_uid is None else args.known_uid
        result = attack_bruteforce(
            deployment.cylinder, known_uid=known, stride=args.stride,
            rate_per_s=args.rate, max_attempts=args.max_attempts,
            via_server=args.via_server, random_state=args.seed)
        record, success = result.to_dict(), result.success

    record["variant"] = LockVariant(args.variant).value
    record["mitigations"] = deployment.mitigations.names()
    if transcript is not None and args.pcapng is not None:
        write_log(args.pcapng, transcript)
        record["transcript"] = str(args.pcapng)
    _emit(record, args.out)
    return EXIT_OK if success else EXIT_NEGATIVE


def cmd_bench(args, store):
    profiles = [p for item in args.profile or ["TAG,RP,BT,BW,WH,WA"]
                for p in item.split(",") if p]
    bench = LatencyBenchmark(profiles=profiles, n_runs=args.runs,
                             policy=args.policy, n_jobs=args.jobs,
                             random_state=args.seed).run()
    if args.out is None:
        sys.stdout.write(bench.to_csv())
    else:
        bench.to_csv(args.out)
        script = bench.gnuplot_script(Path(args.out).name)
        Path(args.out).with_suffix(".gp").write_text(script)
    if args.json is not None:
        bench.to_json(args.json)
    if not args.quiet:
        bench.summary()
    return EXIT_OK


# %% Parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="nfclab",
        description="Hardware-free NFC relay, replay and clone laboratory.")
    parser.add_argument("--version", action="version",
                        version="nfclab %s" % __version__)
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="more log output, repeatable")
    parser.add_argument("--seed", type=int,
                        default=os.environ.get(SEED_ENV),
                        help="random seed (default: $%s)" % SEED_ENV)
    parser.add_argument("--store", default=None,
                        help="log store directory")
    sub = parser.add_subparsers(dest="command", required=True)

    def lock_options(p):
        p.add_argument("--key", type=_hex, default=VENDOR_KEY,
                       help="16 byte AES key in hex")
        p.add_argument("--uid", type=_hex, default=bytes.fromhex(DEFAULT_UID),
                       help="7 byte transponder UID in hex")
        p.add_argument("--policy", default=None,
                       help="timeout policy, fwt:<i>[x<n>] or "
                            "timeout:<duration>")

    p = sub.add_parser("server", help="run a relay server")
    p.add_argument("--listen", default=DEFAULT_LISTEN)
    p.add_argument("--plugins", default="",
                   help="comma separated plugins, built-in names or @path")
    p.add_argument("--plugin-opt", action="append", default=[],
                   metavar="NAME.KEY=VALUE")
    p.add_argument("--fail-open", action="store_true",
                   help="pass messages on when a plugin crashes")
    p.add_argument("--log-dir", type=Path, default=None)
    p.add_argument("--idle-timeout", type=parse_duration, default=30.0)
    p.set_defaults(func=cmd_server)

    p = sub.add_parser("endpoint", help="run a reader or tag endpoint")
    p.add_argument("--role", choices=["reader", "tag"], required=True)
    p.add_argument("--server", default=DEFAULT_LISTEN)
    p.add_argument("--session", type=int, default=1)
    p.add_argument("--card", default="lock",
                   help="lock, bench, scripted:<file> or log:<file>")
    p.add_argument("--pcd", default="lock",
                   help="reader model of the tag role: lock or "
                        "scripted:<file>")
    p.add_argument("--deadline", type=parse_duration, default=None)
    p.add_argument("--initial-timeout", type=parse_duration, default=10.0)
    lock_options(p)
    p.set_defaults(func=cmd_endpoint)

    p = sub.add_parser("replay", help="replay one side of a log")
    p.add_argument("--log", required=True, help="store id or file")
    p.add_argument("--side", choices=["tag", "reader"], default="tag")
    p.add_argument("--mode", choices=["index", "data"], default="data")
    p.add_argument("--server", default=None)
    p.add_argument("--session", type=int, default=1)
    p.add_argument("--card", default="lock")
    p.add_argument("--pcd", default="log",
                   help="log (the logged requests), lock or "
                        "scripted:<file>")
    p.add_argument("--deadline", type=parse_duration, default=None)
    lock_options(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("clone", help="emulate static tag data")
    p.add_argument("--tech", choices=["a", "b", "f"], default="a")
    p.add_argument("--field", action="append", metavar="NAME=HEX")
    p.add_argument("--log", default=None,
                   help="take the static data of a stored log")
    p.set_defaults(func=cmd_clone)

    p = sub.add_parser("export", help="write a log as pcapng")
    p.add_argument("--log", required=True, help="store id or file")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--tsresol", type=int, choices=[6, 9],
                   default=DEFAULT_TSRESOL)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("import", help="read a pcapng file into the store")
    p.add_argument("file", type=Path)
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("lockdemo", help="lock case study")
    p.add_argument("scenario", choices=["honest", "relay", "replay",
                                        "walkby", "bruteforce"])
    p.add_argument("--variant", choices=["flawed", "correct"],
                   default="flawed")
    p.add_argument("--mitigations", default="",
                   help="comma separated: " +
                        ", ".join(LockMitigations.NAMES))
    p.add_argument("--delay", default="0",
                   help="relay delay per hop, e.g. 360ms or normal:12ms,2ms")
    p.add_argument("--profile", default=None,
                   help="relay over a default link profile instead")
    p.add_argument("--replay-mode", choices=["index", "data"],
                   default="data")
    p.add_argument("--via-server", action="store_true",
                   help="run walk-by or brute force as relay plugins")
    p.add_argument("--known-uid", type=_hex, default=None)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--rate", type=float, default=3.0,
                   help="brute force attempts per second")
    p.add_argument("--max-attempts", type=int, default=10000)
    p.add_argument("--out", type=Path, default=None,
                   help="JSON outcome file (default: stdout)")
    p.add_argument("--pcapng", type=Path, default=None,
                   help="transcript file")
    p.set_defaults(func=cmd_lockdemo)

    p = sub.add_parser("bench", help="latency benchmark")
    p.add_argument("--profile", action="append",
                   help="profiles, comma separated or repeated; one of "
                        "TAG, RP, BT, BW, WH, WA")
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--policy", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", type=Path, default=None,
                   help="CSV file, a gnuplot script is written next to it")
    p.add_argument("--json", type=Path, default=None)
    p.add_argument("--quiet", action="store_true",
                   help="no summary table")
    p.set_defaults(func=cmd_bench)
    return parser


def cli_main(argv=None):
    """
    Run the nfclab command line.

    Returns
    -------
    status : int
        0 on success, 1 on runtime errors, 2 on usage errors, 3 when an
        attack or unlock did not succeed.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(
        level=[logging.WARNING, logging.INFO, logging.DEBUG][
            min(args.verbose, 2)],
        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.seed is not None:
        args.seed = int(args.seed)
    store = LogStore(args.store)
    try:
        return args.func(args, store)
    except (NfcLabError, ValueError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return EXIT_ERROR
