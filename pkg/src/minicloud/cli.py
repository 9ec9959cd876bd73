"""``platform`` command line.

Server roles: ``platform master --config FILE`` and ``platform worker
--master HOST:PORT``. Everything else is a thin client over the management
API; point it with --api/--token or PLATFORM_API/PLATFORM_TOKEN.

Exit codes: 0 success, 2 validation error, 3 authorization error, 4 remote
or connectivity failure.
"""

from __future__ import annotations

import argparse
import json
import os
import signal
import sys
import time
from pathlib import Path

from .errors import PlatformError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_AUTH = 3
EXIT_REMOTE = 4


def _print(doc) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True, default=str))


def _exit_code(exc: PlatformError) -> int:
    status = exc.details.get("status")
    if exc.code in ("Unauthorized", "NotAuthorized") or status in (401, 403):
        return EXIT_AUTH
    if exc.code == "RemoteFailure" or (isinstance(status, int) and status >= 500):
        return EXIT_REMOTE
    if status is None and exc.code in ("RemoteFailure", "Timeout"):
        return EXIT_REMOTE
    return EXIT_VALIDATION


def _client(args):
    from .client import PlatformClient
    api = args.api or os.environ.get("PLATFORM_API", "")
    token = args.token or os.environ.get("PLATFORM_TOKEN", "")
    if not api:
        print("error: --api or PLATFORM_API required", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)
    return PlatformClient(api, token)


def cmd_master(args) -> int:
    from .config import load_config
    from .master import Master

    config = load_config(args.config)
    state_dir = Path(args.state_dir) if args.state_dir else None
    master = Master(config, state_dir=state_dir)
    master.start()
    endpoints = {"tcp": f"{master.tcp_address[0]}:{master.tcp_address[1]}",
                 "api_url": master.api_url, "state_dir": str(master.state_dir)}
    _print(endpoints)
    sys.stdout.flush()

    def on_signal(signum, frame):
        master.stop_requested.set()

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    try:
        while not master.stop_requested.wait(0.2):
            pass
    finally:
        master.stop()
    return EXIT_OK


def cmd_worker(args) -> int:
    from .worker import WorkerAgent

    host, _, port = args.master.partition(":")
    agent = WorkerAgent(
        master_host=host, master_port=int(port), api_url=args.api,
        token=args.token or os.environ.get("PLATFORM_TOKEN", ""),
        node_id=args.node_id, capacity=args.capacity,
        labels=tuple(l for l in (args.labels or "").split(",") if l),
        pool_id=args.pool)

    def on_signal(signum, frame):
        agent.stop()

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    return agent.run()


def cmd_submit(args) -> int:
    client = _client(args)
    if args.file:
        body = json.loads(Path(args.file).read_text(encoding="utf-8"))
    elif args.json:
        body = json.loads(args.json)
    else:
        print("error: provide --file or --json", file=sys.stderr)
        return EXIT_VALIDATION
    qos = body.get("qos") or {}
    if args.deadline is not None:
        qos["deadline"] = time.time() + args.deadline
    if qos:
        body["qos"] = qos
    if args.model:
        body["model_kind"] = args.model
    if args.name:
        body["name"] = args.name
    app_id = client.submit_application(
        body.get("model_kind", "Task"),
        units=body.get("units"), sweep=body.get("sweep"),
        mapreduce=body.get("mapreduce"), qos=body.get("qos"),
        name=body.get("name", ""))
    if args.wait:
        doc = client.wait_app(app_id, timeout=args.timeout)
        _print(doc)
    else:
        _print({"app_id": app_id})
    return EXIT_OK


def cmd_status(args) -> int:
    client = _client(args)
    _print(client.app_status(args.app_id, include_units=not args.summary))
    return EXIT_OK


def cmd_results(args) -> int:
    client = _client(args)
    doc = client.fetch_results(args.app_id)
    if args.save:
        out_dir = Path(args.save)
        out_dir.mkdir(parents=True, exist_ok=True)
        for ref in doc.get("outputs", []):
            content = client.stage_out(ref)
            name = ref.get("logical_name") or ref["digest"][:16]
            (out_dir / name).write_bytes(content)
        for entry in doc.get("results", []):
            value = entry.get("value")
            if isinstance(value, dict) and "file" in value:
                content = client.stage_out(value["file"])
                name = value["file"].get("logical_name") or value["file"]["digest"][:16]
                (out_dir / name).write_bytes(content)
    _print(doc)
    return EXIT_OK


def cmd_admin(args) -> int:
    client = _client(args)
    params = {}
    for pair in args.params:
        key, _, raw = pair.partition("=")
        try:
            params[key] = json.loads(raw)
        except json.JSONDecodeError:
            params[key] = raw
    _print(client.admin(args.command, **params))
    return EXIT_OK


def cmd_nodes(args) -> int:
    _print(_client(args).nodes())
    return EXIT_OK


def cmd_pools(args) -> int:
    _print(_client(args).pools())
    return EXIT_OK


def cmd_usage(args) -> int:
    _print(_client(args).usage_report())
    return EXIT_OK


def cmd_billing(args) -> int:
    _print(_client(args).billing(args.user))
    return EXIT_OK


def cmd_events(args) -> int:
    _print(_client(args).events(since=args.since, limit=args.limit))
    return EXIT_OK


def cmd_catalog(args) -> int:
    _print(_client(args).catalog())
    return EXIT_OK


def cmd_cancel(args) -> int:
    _print(_client(args).cancel_app(args.app_id))
    return EXIT_OK


def _add_client_args(parser) -> None:
    parser.add_argument("--api", default=None, help="management API base URL")
    parser.add_argument("--token", default=None, help="bearer token")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="platform",
                                     description="desk-scale cloud application platform")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("master", help="run the master container")
    p.add_argument("--config", required=True)
    p.add_argument("--state-dir", default=None)
    p.set_defaults(fn=cmd_master)

    p = sub.add_parser("worker", help="run a worker container")
    p.add_argument("--master", required=True, help="master TCP address host:port")
    p.add_argument("--api", required=True, help="master API URL (file staging)")
    p.add_argument("--token", default=None, help="worker token")
    p.add_argument("--node-id", default=None)
    p.add_argument("--capacity", type=int, default=1)
    p.add_argument("--labels", default="")
    p.add_argument("--pool", default=None)
    p.set_defaults(fn=cmd_worker)

    p = sub.add_parser("submit", help="submit an application")
    _add_client_args(p)
    p.add_argument("--model", choices=["Task", "Thread", "MapReduce"], default=None)
    p.add_argument("--file", help="JSON request body file")
    p.add_argument("--json", help="inline JSON request body")
    p.add_argument("--name", default="")
    p.add_argument("--deadline", type=float, default=None,
                   help="QoS deadline, seconds from now")
    p.add_argument("--wait", action="store_true")
    p.add_argument("--timeout", type=float, default=None)
    p.set_defaults(fn=cmd_submit)

    p = sub.add_parser("status", help="application status")
    _add_client_args(p)
    p.add_argument("app_id")
    p.add_argument("--summary", action="store_true", help="omit per-unit detail")
    p.set_defaults(fn=cmd_status)

    p = sub.add_parser("results", help="fetch results of a terminal application")
    _add_client_args(p)
    p.add_argument("app_id")
    p.add_argument("--save", help="directory for result files")
    p.set_defaults(fn=cmd_results)

    p = sub.add_parser("cancel", help="cancel an application")
    _add_client_args(p)
    p.add_argument("app_id")
    p.set_defaults(fn=cmd_cancel)

    p = sub.add_parser("admin", help="administrative command")
    _add_client_args(p)
    p.add_argument("command")
    p.add_argument("params", nargs="*", metavar="key=value")
    p.set_defaults(fn=cmd_admin)

    for name, fn in (("nodes", cmd_nodes), ("pools", cmd_pools),
                     ("usage", cmd_usage), ("catalog", cmd_catalog)):
        p = sub.add_parser(name)
        _add_client_args(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("billing")
    _add_client_args(p)
    p.add_argument("user")
    p.set_defaults(fn=cmd_billing)

    p = sub.add_parser("events")
    _add_client_args(p)
    p.add_argument("--since", type=int, default=0)
    p.add_argument("--limit", type=int, default=1000)
    p.set_defaults(fn=cmd_events)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except PlatformError as exc:
        print(json.dumps(exc.to_doc()), file=sys.stderr)
        return _exit_code(exc)
    except KeyboardInterrupt:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
