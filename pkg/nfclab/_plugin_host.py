"""
Host a built-in plugin as an out-of-process plugin.

    python -m nfclab._plugin_host xor-ff mask=0f

Speaks the out-of-process protocol on stdin/stdout: the handshake first,
then one reply per length-prefixed request.
"""

# import modules
import argparse
import logging
import struct
import sys

from nfclab._core import Direction
from nfclab._plugins import (BUILTINS, Drop, OOP_HANDSHAKE, PayloadKind,
                             PluginContext, encode_reply)

logger = logging.getLogger(__name__)

_LENGTH = struct.Struct(">I")


def _read_exact(stream, n):
    data = stream.read(n)
    if len(data) < n:
        return None
    return data


def serve(plugin, stdin, stdout, crash_after=None):
    """Answer requests until stdin closes. Returns the number handled."""
    stdout.write(OOP_HANDSHAKE)
    stdout.flush()
    # injected messages have no way back over this protocol
    ctx = PluginContext(respond=lambda *args: logger.warning(
        "plugin %s tried to inject a message", plugin.name))
    handled = 0
    while True:
        header = _read_exact(stdin, _LENGTH.size)
        if header is None:
            return handled
        (length,) = _LENGTH.unpack(header)
        body = _read_exact(stdin, length)
        if body is None or length < 2:
            logger.error("truncated request")
            return handled
        if crash_after is not None and handled >= crash_after:
            raise SystemExit(1)
        try:
            verdict = plugin.process(ctx, PayloadKind(body[0]),
                                     Direction(body[1]), body[2:])
        except ValueError as exc:
            logger.error("bad request: %s", exc)
            verdict = Drop
        stdout.write(encode_reply(verdict))
        stdout.flush()
        handled += 1


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="python -m nfclab._plugin_host",
        description="Run a built-in nfclab plugin over stdin/stdout.")
    parser.add_argument("plugin", choices=sorted(BUILTINS))
    parser.add_argument("options", nargs="*", metavar="key=value")
    parser.add_argument("--crash-after", type=int, default=None,
                        help="exit after this many requests")
    args = parser.parse_args(argv)
    config = dict(item.split("=", 1) for item in args.options)
    plugin = BUILTINS[args.plugin](**config)
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING)
    serve(plugin, sys.stdin.buffer, sys.stdout.buffer, args.crash_after)
    return 0


if __name__ == "__main__":
    sys.exit(main())
