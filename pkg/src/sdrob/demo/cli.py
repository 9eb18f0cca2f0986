"""Command-line entry points for the demo services.

    sdrob-demo kv --port 7000 --workers 2
    sdrob-demo kv --port 7001 --no-domains        # baseline build
    sdrob-demo parser --port 7002
    sdrob-demo sealed --variant 3
"""

import argparse
import signal
import sys
import threading

from ..config import Config
from ..runtime import Runtime


def _serve_forever(server, banner: str):
    server.start()
    print(banner, flush=True)
    stop = threading.Event()

    def on_signal(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, on_signal)
    signal.signal(signal.SIGTERM, on_signal)
    try:
        while not stop.is_set():
            stop.wait(0.5)
    finally:
        server.stop()


def cmd_kv(args) -> int:
    from .kv import KvServer
    rt = None
    if not args.no_domains:
        rt = Runtime(Config.from_env())
    server = KvServer(rt, host=args.host, port=args.port, workers=args.workers,
                      no_domains=args.no_domains,
                      handler_heap=args.handler_heap)
    backend = rt.backend_name if rt else "none"
    _serve_forever(server, f"kv listening on {server.host}:{server.port} "
                           f"workers={args.workers} backend={backend}")
    return 0


def cmd_parser(args) -> int:
    from .parser import ParserServer
    rt = Runtime(Config.from_env())
    server = ParserServer(rt, host=args.host, port=args.port)
    _serve_forever(server, f"parser listening on {server.host}:{server.port} "
                           f"backend={rt.backend_name}")
    return 0


def cmd_sealed(args) -> int:
    from .sealed import reference_mac, sealed_session
    rt = Runtime(Config.from_env())
    key = b"demo-key"
    chunks = [b"The quick brown fox ", b"jumps over ", b"the lazy dog"]
    tags = {}
    for variant in (1, 2, 3) if args.variant == 0 else (args.variant,):
        with sealed_session(rt, variant) as sess:
            tags[variant] = sess.mac(key, chunks)
        print(f"variant {variant}: {tags[variant].hex()}")
    expect = reference_mac(key, chunks)
    ok = all(tag == expect for tag in tags.values())
    print(f"reference: {expect.hex()}  ({'match' if ok else 'MISMATCH'})")
    return 0 if ok else 1


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="sdrob-demo",
                                 description="resilient demo services")
    sub = ap.add_subparsers(dest="cmd", required=True)

    kv = sub.add_parser("kv", help="key-value cache server")
    kv.add_argument("--host", default="127.0.0.1")
    kv.add_argument("--port", type=int, default=0)
    kv.add_argument("--workers", type=int, default=1)
    kv.add_argument("--no-domains", action="store_true",
                    help="baseline build without sandboxing")
    kv.add_argument("--handler-heap", type=int, default=1024 * 1024)
    kv.set_defaults(fn=cmd_kv)

    pr = sub.add_parser("parser", help="request parsing service")
    pr.add_argument("--host", default="127.0.0.1")
    pr.add_argument("--port", type=int, default=0)
    pr.set_defaults(fn=cmd_parser)

    se = sub.add_parser("sealed", help="sealed MAC library self-check")
    se.add_argument("--variant", type=int, default=0, choices=(0, 1, 2, 3),
                    help="buffer-passing design (0 = all)")
    se.set_defaults(fn=cmd_sealed)

    args = ap.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
