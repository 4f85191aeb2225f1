"""Command-line entry points: casd, gatewayd, audit, bench, camsim."""
from __future__ import annotations

import argparse
import asyncio
import logging
import os
import sys
import time
from pathlib import Path

from . import audit, bench
from .cas import LocalStore, StoreServer, open_store
from .chunks import DEFAULT_INTERVAL_MS, generate_stream
from .daemon import CameraClient, GatewayDaemon, HelloRejected, fetch_ledger, load_config
from .framing import parse_address
from .identity import generate_identity, load_seed, save_seed
from .ledger import Ledger, LedgerFormatError, load_ledger

EXIT_ERROR = 3


def _logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def casd_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="casd", description="Content-addressed chunk store")
    ap.add_argument("--root", required=True, help="store directory")
    ap.add_argument("--listen", default="127.0.0.1:7000", help="host:port")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    _logging(args.verbose)

    async def run():
        server = StoreServer(LocalStore(args.root))
        host, port = await server.start(*parse_address(args.listen))
        logging.info("casd serving %s on %s:%d", args.root, host, port)
        await server.serve_forever()

    try:
        asyncio.run(run())
    except KeyboardInterrupt:
        pass
    return 0


def gatewayd_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="gatewayd", description="Video ledger gateway")
    ap.add_argument("--config", help="INI config file")
    ap.add_argument("--listen", help="host:port, overrides the config")
    ap.add_argument("--gen-key", metavar="PATH",
                    help="write a new 32-byte key seed to PATH, print its public key and exit")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    if args.gen_key:
        ident = generate_identity()
        save_seed(ident, args.gen_key)
        print(ident.device_id)
        return 0
    if not args.config:
        ap.error("--config is required")
    _logging(args.verbose)
    config = load_config(args.config, args.listen)

    async def run():
        daemon = GatewayDaemon(config)
        host, port = await daemon.start()
        logging.info("gateway %s listening on %s:%d", config.identity.device_id[:16], host, port)
        try:
            await daemon.serve_forever()
        finally:
            await daemon.close()

    try:
        asyncio.run(run())
    except KeyboardInterrupt:
        pass
    return 0


def _read_ledger(spec: str) -> Ledger:
    if not os.path.exists(spec):
        try:
            parse_address(spec)
        except ValueError:
            raise FileNotFoundError(spec) from None
        return Ledger.from_bytes(fetch_ledger(spec))
    return load_ledger(spec)


def audit_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="audit", description="Verify ledger and stored footage")
    sub = ap.add_subparsers(dest="cmd", required=True)
    vc = sub.add_parser("verify-chain", help="structural ledger audit")
    vv = sub.add_parser("verify-video", help="check stored chunks against the ledger")
    for p in (vc, vv):
        p.add_argument("--ledger", required=True,
                       help="ledger file (binary or JSON export) or a gateway host:port")
        p.add_argument("--format", choices=("text", "json"), default="text")
    vv.add_argument("--store", required=True, help="store host:port or local store directory")
    vv.add_argument("--device", required=True, help="camera public key, 64 hex chars")
    vv.add_argument("--from", dest="from_seq", type=int, default=0)
    vv.add_argument("--to", dest="to_seq", type=int, default=None, help="inclusive")
    ap.add_argument("--export-json", metavar="PATH", help="also write the ledger as JSON")
    args = ap.parse_args(argv)
    try:
        ledger = _read_ledger(args.ledger)
        if args.export_json:
            import json
            Path(args.export_json).write_text(json.dumps(ledger.to_json(), indent=1) + "\n")
        if args.cmd == "verify-chain":
            report = audit.verify_chain(ledger)
        else:
            report = audit.verify_video(ledger, open_store(args.store), bytes.fromhex(args.device),
                                        args.from_seq, args.to_seq)
    except LedgerFormatError as exc:
        print(f"audit: corrupt ledger: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError, audit.AuditError) as exc:
        print(f"audit: {exc}", file=sys.stderr)
        return EXIT_ERROR
    sys.stdout.buffer.write(audit.export_report(report, args.format))
    return report.exit_code


def bench_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="bench", description="Transaction latency benchmark")
    sub = ap.add_subparsers(dest="cmd", required=True)
    run = sub.add_parser("run")
    run.add_argument("--plan", help="JSON plan file; defaults reproduce the 1..32 camera sweep")
    run.add_argument("--out", default="results.csv")
    run.add_argument("--plot", help="figure path (default: CSV path with .svg)")
    run.add_argument("--no-plot", action="store_true")
    run.add_argument("--baseline", type=int, default=1)
    pl = sub.add_parser("plot")
    pl.add_argument("--csv", required=True)
    pl.add_argument("--out", required=True, help="figure path, e.g. latency.svg")
    args = ap.parse_args(argv)
    _logging(False)
    if args.cmd == "plot":
        bench.plot(bench.read_csv(args.csv), args.out)
        return 0
    plan = bench.ExperimentPlan.from_file(args.plan) if args.plan else bench.ExperimentPlan()
    result = bench.run_experiment(plan, out_csv=args.out)
    print(f"host: {result.host}")
    print("cameras  mean_ms  ratio")
    try:
        for count, mean, ratio in bench.summarize(result, args.baseline):
            print(f"{count:>7}  {mean:7.3f}  {ratio:5.2f}")
    except ValueError as exc:
        print(f"(no scaling table: {exc})")
    if not args.no_plot:
        fig = args.plot or str(Path(args.out).with_suffix(".svg"))
        bench.plot(bench.read_csv(args.out), fig)
        print(f"wrote {args.out} and {fig}")
    return 1 if result.dirty else 0


def camsim_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="camsim", description="Stream synthetic chunks to a gateway")
    ap.add_argument("--gateway", required=True, help="host:port")
    ap.add_argument("--key", help="camera key seed file (created if missing)")
    ap.add_argument("--duration-ms", type=int, default=30 * 60 * 1000)
    ap.add_argument("--interval-ms", type=int, default=DEFAULT_INTERVAL_MS)
    ap.add_argument("--payload-bytes", type=int, default=512 * 1024)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--realtime", action="store_true", help="sleep one interval between chunks")
    args = ap.parse_args(argv)
    if args.key and os.path.exists(args.key):
        cam = load_seed(args.key)
    else:
        cam = generate_identity()
        if args.key:
            save_seed(cam, args.key)
    for attempt in range(5):
        try:
            client = CameraClient(args.gateway, cam.public_key)
            break
        except HelloRejected as exc:
            print(f"camsim: {exc}", file=sys.stderr)
            time.sleep(exc.retry_after_ms / 1000)
    else:
        return EXIT_ERROR
    print(f"camera {cam.device_id} admitted")
    n = 0
    for frame in generate_stream(args.duration_ms, args.interval_ms,
                                 payload_bytes=args.payload_bytes, seed=args.seed):
        status, seq, _ = client.send_chunk(frame)
        n += status == "receipt"
        if args.realtime:
            time.sleep(args.interval_ms / 1000)
    client.close()
    print(f"{n} transactions recorded")
    return 0
