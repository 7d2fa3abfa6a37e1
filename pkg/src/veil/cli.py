"""Command line: serve, connect, sniff, shapesim, bench, certgen.

Exit status is 0 on success, 1 on a protocol or validation failure and 2 on
a usage or configuration error.
"""

import argparse
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path
from typing import List, Optional

from . import certs
from .bench import HUNDRED_MEGABITS, run_bench, run_wallclock_bench
from .handshake import ClientConfig, Mode, ServerConfig
from .lab.capture import ParseError as CaptureParseError
from .lab.capture import capture_read, sniff_report
from .lab.shaper import ShaperConfig, parse_rate, parse_rate_map
from .lab.sim import LinkSim, simulate_transfer
from .wire import InvalidHostName, validate_host_name

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

logger = logging.getLogger("veil")

_RECORD_ATTRS = set(vars(logging.makeLogRecord({}))) | {"message", "asctime"}


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        line = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        line.update({k: v for k, v in vars(record).items() if k not in _RECORD_ATTRS})
        return json.dumps(line, default=str)


def setup_logging() -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root = logging.getLogger("veil")
    root.handlers[:] = [handler]
    root.setLevel(os.environ.get("VEIL_LOG", "INFO").upper())
    root.propagate = False


class UsageError(Exception):
    pass


def _host_name(text: str) -> str:
    try:
        return validate_host_name(text)
    except InvalidHostName as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _rate(text: str) -> float:
    try:
        return parse_rate(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _address(text: str):
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


# commands


def cmd_serve(args: argparse.Namespace) -> int:
    from .net import CaptureSink, VeilServer

    try:
        store = certs.store_load(args.store)
    except (certs.CertError, OSError) as exc:
        print(f"veil serve: cannot load store {args.store}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    config = ServerConfig(store, legacy_only=args.legacy_only)
    sink = CaptureSink(args.capture) if args.capture else None
    try:
        server = VeilServer((args.host, args.port), config, sink)
    except OSError as exc:
        print(f"veil serve: cannot listen on {args.host}:{args.port}: {exc}", file=sys.stderr)
        return EXIT_USAGE

    def drain(signum: int) -> None:
        logger.info("draining", extra={"event": "draining", "signal": signum})
        server.shutdown()

    def stop(signum, frame) -> None:
        # no I/O in the handler itself: it may interrupt a write to stderr
        threading.Thread(target=drain, args=(signum,), daemon=True).start()

    signal.signal(signal.SIGTERM, stop)
    signal.signal(signal.SIGINT, stop)
    logger.info(
        "ready",
        extra={"event": "ready", "host": server.server_address[0], "port": server.server_address[1],
               "default": store.default.doc.subject_name, "named": list(store.named),
               "legacy_only": args.legacy_only},
    )
    try:
        server.serve_forever()
    finally:
        server.server_close()
        if sink is not None:
            sink.close()
    logger.info("stopped", extra={"event": "stopped"})
    return EXIT_OK


def cmd_connect(args: argparse.Namespace) -> int:
    from .net import CaptureSink, connect

    if args.mode == "masked" and args.sni is None:
        raise UsageError("masked mode needs --sni")
    cfg = ClientConfig(args.sni, Mode(args.mode), expect_front_name=args.expect_front_name, seed=args.seed)
    host, port = args.target
    sink = CaptureSink(args.capture) if args.capture else None
    try:
        report = connect(host, port, cfg, os.urandom(args.payload), timeout=args.timeout, sink=sink)
    except OSError as exc:
        print(f"veil connect: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    finally:
        if sink is not None:
            sink.close()
    for alert in report.alerts:
        print(f"alert: {alert}")
    if report.fell_back:
        print("fallback: legacy handshake")
    for phase, subject, seconds in report.phases:
        print(f"phase {phase}: certificate {subject} ({seconds * 1000:.1f} ms)")
    print(f"established sni: {report.established_sni or '-'}")
    if report.error:
        print(f"error: {report.error}")
        return EXIT_FAILURE
    print(f"payload: {report.payload_bytes} bytes echoed {'ok' if report.echoed_ok else 'MISMATCH'}")
    return EXIT_OK if report.ok else EXIT_FAILURE


def cmd_sniff(args: argparse.Namespace) -> int:
    try:
        events = capture_read(args.capture)
    except (CaptureParseError, OSError, UnicodeDecodeError) as exc:
        print(f"veil sniff: {args.capture}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for line in sniff_report(events):
        print(line)
    return EXIT_OK


def _demo_store(seed: int, sni: str) -> certs.CertStore:
    return certs.CertStore.build(
        certs.generate_self_signed("front.example", 30, rng_seed=f"front-{seed}"),
        certs.generate_self_signed(sni, 30, rng_seed=f"named-{seed}"),
    )


def cmd_shapesim(args: argparse.Namespace) -> int:
    rates = {}
    if args.rate_map:
        try:
            rates = parse_rate_map(Path(args.rate_map).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"rate map {args.rate_map}: {exc}") from None
    try:
        shaper = ShaperConfig(rates, args.default_rate, args.bucket_depth)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = simulate_transfer(
        ClientConfig(args.sni, Mode(args.mode), seed=args.seed),
        ServerConfig(_demo_store(args.seed, args.sni), seed=args.seed),
        shaper,
        LinkSim(args.capacity, args.delay_ms),
        args.payload,
        record_capture=False,
    )
    rows = ["t_seconds,throughput_bps"]
    if args.payload:
        rows += [f"{t:g},{bps:.0f}" for t, bps in report.timeline]
    text = "\n".join(rows) + "\n"
    if args.csv == "-":
        sys.stdout.write(text)
    else:
        Path(args.csv).write_text(text)
    label = report.flow.label()
    print(
        f"mode={report.mode} classification={label} steady_state_bps={report.steady_state_throughput():.0f}",
        file=sys.stderr if args.csv == "-" else sys.stdout,
    )
    if report.error:
        print(f"error: {report.error}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    if args.wallclock:
        report = run_wallclock_bench(args.payload, args.repeats, args.seed)
    else:
        report = run_bench(args.payload, args.repeats, args.capacity, args.delay_ms, args.seed)
    data = report.as_dict()
    if args.json:
        print(json.dumps(data))
        return EXIT_OK
    for key, value in data.items():
        print(f"{key}: {value:.6g}" if isinstance(value, float) else f"{key}: {value}")
    return EXIT_OK


def cmd_certgen(args: argparse.Namespace) -> int:
    try:
        doc, keypair = certs.generate_self_signed(args.subject, args.days, rng_seed=args.seed)
    except (certs.InvalidSubject, ValueError) as exc:
        raise UsageError(f"--subject: {exc}") from None
    out = Path(args.out)
    entries = []
    if out.exists():
        try:
            entries = certs.parse_entries(out.read_text(encoding="ascii"))
        except (certs.ParseError, UnicodeDecodeError) as exc:
            raise UsageError(f"{out}: {exc}") from None
    new = certs.CertEntry(doc, keypair)
    kept = []
    for role, entry in entries:
        if entry.doc.subject_name == args.subject:
            logger.warning("replacing certificate", extra={"event": "replaced", "subject": args.subject})
            continue
        if args.default and role == "default":
            logger.warning("demoting previous default",
                           extra={"event": "default_replaced", "subject": entry.doc.subject_name})
            role = "named"
        kept.append((role, entry))
    if args.default:
        kept.insert(0, ("default", new))
    else:
        kept.append(("named", new))
    kept.sort(key=lambda item: item[0] != "default")
    blocks = [certs.format_entry(entry, role, entry.keypair is not None) for role, entry in kept]
    out.write_text("\n".join(blocks), encoding="ascii")
    print(f"{'default' if args.default else 'named'} certificate for {args.subject} written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="veil", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run a fronting server")
    p.add_argument("--store", required=True, help="certificate store file")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8443, help="listen port (default 8443; 443 needs privileges)")
    p.add_argument("--legacy-only", action="store_true", help="answer SNI-less hellos with the fallback alert")
    p.add_argument("--capture", help="append wire bytes to this capture file")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("connect", help="connect, handshake and echo a payload")
    p.add_argument("target", type=_address, help="host:port")
    p.add_argument("--sni", type=_host_name, help="intended server name")
    p.add_argument("--mode", choices=[m.value for m in Mode], default="masked")
    p.add_argument("--expect-front-name", type=_host_name,
                   help="require this subject on the first-handshake certificate")
    p.add_argument("--payload", type=int, default=1024, help="bytes to echo after the handshake")
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--capture", help="append wire bytes to this capture file")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_connect)

    p = sub.add_parser("sniff", help="classify the flows in a capture file")
    p.add_argument("capture")
    p.set_defaults(func=cmd_sniff)

    p = sub.add_parser("shapesim", help="simulate a shaped transfer, write a throughput CSV")
    p.add_argument("--rate-map", help="file of 'host rate' lines, e.g. 'video.example 1M'")
    p.add_argument("--default-rate", type=_rate, default=1e9, help="rate for unclassified flows (bit/s)")
    p.add_argument("--mode", choices=[m.value for m in Mode], default="masked")
    p.add_argument("--payload", type=int, default=10_000_000, help="bytes to download")
    p.add_argument("--csv", default="-", help="output path, '-' for stdout")
    p.add_argument("--sni", type=_host_name, default="video.example")
    p.add_argument("--capacity", type=_rate, default=2.5e6, help="bottleneck capacity (bit/s)")
    p.add_argument("--delay-ms", type=float, default=10.0)
    p.add_argument("--bucket-depth", type=int, default=ShaperConfig().bucket_depth)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_shapesim)

    p = sub.add_parser(
        "bench",
        help="overhead of the second handshake",
        description="Compare legacy and masked transfer times. --payload is in bytes: "
        "100 megabits is 12500000 bytes (the default), 100 megabytes is 100000000.",
    )
    p.add_argument("--payload", type=int, default=HUNDRED_MEGABITS)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--capacity", type=_rate, default=10e6, help="simulated link capacity (bit/s)")
    p.add_argument("--delay-ms", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--wallclock", action="store_true", help="use loopback TCP and real time instead")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("certgen", help="create or extend a certificate store")
    p.add_argument("--subject", required=True)
    p.add_argument("--days", type=int, default=30)
    p.add_argument("--out", required=True)
    p.add_argument("--default", action="store_true", help="make this the store's default certificate")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_certgen)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except OSError as exc:
        print(f"veil {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
