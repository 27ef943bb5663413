"""Command-line front end: compose, bench, kv and fs verbs.

Exit codes: 0 success, 2 configuration error, 3 runtime IO error.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import compose
from .bench import WORKLOADS, run_workload
from .component import ComponentRef
from .errors import ComancheError, ConfigError, DeviceIoError, NotFound
from .interfaces import IKVSTORE_IID, IVFS_IID
from .vfs import VfsFacade

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _load_config(path: str) -> compose.StackConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return compose.parse_config(fh.read())


def _find_kv(handle: compose.StackHandle) -> ComponentRef:
    view = handle.root.query_interface(IKVSTORE_IID)
    if view is not None:
        return view
    for spec in handle.config.components:
        candidate = handle.refs[spec.id].query_interface(IKVSTORE_IID)
        if candidate is not None:
            return candidate
    raise ConfigError("stack has no KV component")


def cmd_compose(args) -> int:
    config = _load_config(args.config)
    if args.check:
        print(f"ok: {len(config.components)} components, root={config.root_id()}")
        return EXIT_OK
    root = compose.instantiate(config)
    print(f"ok: instantiated, root={config.root_id()} "
          f"({type(root.instance).__name__})")
    root.release()
    return EXIT_OK


def cmd_bench(args) -> int:
    config = _load_config(args.config)
    if config.service.mode == "SHM" and args.clients > 1:
        raise ConfigError("SHM segments are single-client; use --clients 1")
    with compose.build_stack(config) as handle:
        service = handle.start_service()
        op_log = open(args.op_log, "w") if args.op_log else None
        try:
            if args.clients == 1:
                reports = [run_workload(
                    service.port(), workload=args.workload, qd=args.qd,
                    io_size=args.io_size, duration_s=args.duration,
                    seed=args.seed, max_ops=args.ops, op_log=op_log)]
            else:
                import threading
                reports = [None] * args.clients
                def drive(i):
                    reports[i] = run_workload(
                        service.port(), workload=args.workload, qd=args.qd,
                        io_size=args.io_size, duration_s=args.duration,
                        seed=args.seed + i, max_ops=args.ops)
                threads = [threading.Thread(target=drive, args=(i,))
                           for i in range(args.clients)]
                for t in threads:
                    t.start()
                for t in threads:
                    t.join()
        finally:
            if op_log:
                op_log.close()
    report = dict(reports[0])
    report["mode"] = config.service.mode
    report["clients"] = args.clients
    if args.clients > 1:
        report["total_ops"] = sum(r["total_ops"] for r in reports)
        report["iops"] = round(sum(r["iops"] for r in reports), 1)
        report["per_client"] = reports
    text = json.dumps(report, indent=2)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def _read_value(args) -> bytes:
    if args.file:
        with open(args.file, "rb") as fh:
            return fh.read()
    return sys.stdin.buffer.read()


def cmd_kv(args) -> int:
    config = _load_config(args.config)
    with compose.build_stack(config) as handle:
        kv = _find_kv(handle)
        try:
            if args.verb == "format":
                kv.format()
                print("formatted")
            elif args.verb == "put":
                kv.put(args.key.encode(), _read_value(args))
            elif args.verb == "get":
                value = kv.get(args.key.encode())
                if args.file:
                    with open(args.file, "wb") as fh:
                        fh.write(value)
                else:
                    sys.stdout.buffer.write(value)
            elif args.verb == "ls":
                prefix = (args.key or "").encode()
                for key in kv.list(prefix):
                    print(key.decode(errors="replace"))
            elif args.verb == "rm":
                kv.erase(args.key.encode())
            elif args.verb == "dump":
                print(kv.dump())
        finally:
            kv.release()
    return EXIT_OK


def cmd_fs(args) -> int:
    config = _load_config(args.config)
    with compose.build_stack(config) as handle:
        kv = _find_kv(handle)
        facade = VfsFacade()
        fs = ComponentRef(facade, IVFS_IID)
        fs.bind(kv)
        try:
            if args.verb == "ls":
                for name, kind in fs.list(args.path):
                    print(f"{name}\t{kind}")
            elif args.verb == "stat":
                print(json.dumps(fs.stat(args.path)))
            elif args.verb == "rm":
                fs.remove(args.path)
            elif args.verb == "mv":
                fs.rename(args.path, args.dest, overwrite=args.force)
            elif args.verb == "cp":
                fs.copy(args.path, args.dest, overwrite=args.force)
            elif args.verb == "read":
                device = kv.device
                length = args.length if args.length is not None else \
                    fs.stat(args.path)["size"] - args.offset
                length = max(length, 0)
                if length:
                    buf = device.allocate_io_buffer(length)
                    moved = fs.read(args.path, args.offset, length, buf)
                    sys.stdout.buffer.write(bytes(buf.view[0:moved]))
                    device.free_io_buffer(buf)
            elif args.verb == "write":
                data = _read_value(args)
                device = kv.device
                buf = device.allocate_io_buffer(max(len(data), 1))
                buf.view[0:len(data)] = data
                fs.write(args.path, args.offset, len(data), buf)
                device.free_io_buffer(buf)
        finally:
            fs.release()
            kv.release()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="comanche",
        description="Compose and drive storage stacks from the command line")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compose", help="validate or instantiate a stack config")
    p.add_argument("--config", required=True)
    p.add_argument("--check", action="store_true",
                   help="validate only, do not instantiate devices")
    p.set_defaults(fn=cmd_compose)

    p = sub.add_parser("bench", help="run a workload and report latency/IOPS")
    p.add_argument("--config", required=True)
    p.add_argument("--workload", choices=WORKLOADS, default="randread")
    p.add_argument("--qd", type=int, default=1)
    p.add_argument("--io-size", type=int, default=4096)
    p.add_argument("--duration", type=float, default=5.0)
    p.add_argument("--report", help="write the JSON report here as well")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--clients", type=int, default=1)
    p.add_argument("--ops", type=int, help="stop after N ops instead of the duration")
    p.add_argument("--op-log", help="write one line per submitted op")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("kv", help="key-value verbs against a composed stack")
    p.add_argument("verb", choices=["format", "put", "get", "ls", "rm", "dump"])
    p.add_argument("key", nargs="?", default="")
    p.add_argument("--config", required=True)
    p.add_argument("--file", help="value file for put/get (default stdin/stdout)")
    p.set_defaults(fn=cmd_kv)

    p = sub.add_parser("fs", help="filesystem-style verbs over the KV store")
    p.add_argument("verb", choices=["ls", "stat", "rm", "mv", "cp", "read", "write"])
    p.add_argument("path")
    p.add_argument("dest", nargs="?")
    p.add_argument("--config", required=True)
    p.add_argument("--offset", type=int, default=0)
    p.add_argument("--length", type=int)
    p.add_argument("--file")
    p.add_argument("--force", action="store_true", help="allow overwriting dest")
    p.set_defaults(fn=cmd_fs)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DeviceIoError, NotFound, ComancheError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
