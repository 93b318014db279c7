"""Command-line client.

Subcommands: submit, status, fetch, abort, list, broker, reserve, serve.
Exit codes mirror the federation's rejection taxonomy so scripts can
branch on them: 0 ok, 2 rejected-unverified, 3 rejected-unauthorized,
4 rejected-unsatisfiable, 5 transport failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .client import ClientSession, RejectionError, TransportError

EXIT_CODES = {
    "rejected-unverified": 2,
    "rejected-unauthorized": 3,
    "rejected-unsatisfiable": 4,
}

TERMINAL_STATES = {"Done", "Failed", "Aborted", "NotRun"}


def render_tree(node: dict, indent: str = "") -> str:
    """Status recursion tree as indented text."""
    bits = [f"{indent}{node['id']} [{node['kind']}] {node['state']}"]
    if node.get("exit_code") is not None:
        bits[0] += f" exit={node['exit_code']}"
    if node.get("detail"):
        bits[0] += f" ({node['detail']})"
    for child in node.get("children", ()):
        bits.append(render_tree(child, indent + "  "))
    return "\n".join(bits)


def _session(args) -> ClientSession:
    return ClientSession(
        home=Path(args.home) if args.home else None,
        keystore=Path(args.keystore) if args.keystore else None,
        identity=args.identity,
        anchors=Path(args.anchors) if args.anchors else None,
    )


def cmd_submit(args) -> int:
    session = _session(args)
    handle = session.submit(
        Path(args.workflow), gateway=args.gateway, vsite=args.vsite,
        agreement_id=args.agreement, title=args.title or Path(args.workflow).stem,
    )
    print(f"submitted: job {handle.job_id} at {handle.vsite} via {handle.usite}")
    if not args.wait:
        return 0
    deadline = time.time() + args.wait
    while time.time() < deadline:
        tree = session.status(handle)
        if tree["state"] in TERMINAL_STATES:
            print(render_tree(tree))
            return 0 if tree["state"] == "Done" else 1
        time.sleep(0.5)
    print("timeout waiting for terminal state", file=sys.stderr)
    return 1


def cmd_status(args) -> int:
    session = _session(args)
    handle = session.find_handle(args.job)
    tree = session.status(handle)
    if args.json:
        print(json.dumps(tree, indent=2))
    else:
        print(render_tree(tree))
    return 0


def cmd_fetch(args) -> int:
    session = _session(args)
    handle = session.find_handle(args.job)
    dest = session.fetch(handle, args.task, stream=args.stream,
                         dest=Path(args.output) if args.output else None)
    print(f"wrote {dest}")
    return 0


def cmd_abort(args) -> int:
    session = _session(args)
    handle = session.find_handle(args.job)
    body = session.abort(handle)
    print(f"abort requested: {body.get('state', 'ok')}")
    return 0


def cmd_list(args) -> int:
    session = _session(args)
    for h in session.ledger():
        print(f"{h.job_id}  {h.vsite:<12} via {h.usite:<8} {h.title}")
    return 0


def cmd_broker(args) -> int:
    from .ajo import ResourceRequest
    from .workflow import parse_memory

    session = _session(args)
    request = ResourceRequest(
        processors=args.processors,
        runtime_limit=args.runtime,
        memory=parse_memory(args.memory, "--memory"),
        required_software=tuple(args.software or ()),
    )
    matches = session.broker(request, gateways=args.gateway or None)
    if not matches:
        print("no matching offers")
        return 1
    for m in matches:
        print(f"{m.vsite_name:<16} cost={m.cost:.3f}")
    return 0


def cmd_reserve(args) -> int:
    session = _session(args)
    vsites = [v.strip() for v in args.sites.split(",") if v.strip()]
    agreement = session.reserve(
        vsites, processors=args.processors, duration=args.duration,
        gateways=args.gateway or None,
    )
    if agreement.state != "CONFIRMED":
        print(f"reservation failed: {agreement.failure}", file=sys.stderr)
        return 1
    print(f"agreement {agreement.agreement_id} confirmed: "
          f"start={agreement.start:.0f} end={agreement.end:.0f} sites={','.join(agreement.sites)}")
    return 0


def cmd_serve(args) -> int:
    from .bridge import BridgeServer

    session = _session(args)
    server = BridgeServer(session, host=args.bind, port=args.port,
                          ui_dir=Path(args.ui) if args.ui else None)
    server.start()
    print(f"bridge listening on http://{args.bind}:{server.port}/", flush=True)
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gridlet", description="grid client")
    parser.add_argument("--home", help="session directory (default $GRIDLET_HOME or ~/.gridlet)")
    parser.add_argument("--keystore", help="PKCS#12 file or directory (default <home>/keystore)")
    parser.add_argument("--identity", help="signer DN when the keystore holds several")
    parser.add_argument("--anchors", help="trust anchor directory (default <home>/anchors)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("submit", help="compile, sign and submit a workflow document")
    p.add_argument("workflow", help="JSON or XML workflow document")
    p.add_argument("--gateway", required=True, help="usite name or host:port")
    p.add_argument("--vsite", required=True)
    p.add_argument("--agreement", help="attach a confirmed reservation agreement id")
    p.add_argument("--title")
    p.add_argument("--wait", type=float, help="poll until terminal, up to SECONDS")
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("status", help="show the status recursion tree")
    p.add_argument("job", help="job id (prefix accepted)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_status)

    p = sub.add_parser("fetch", help="download a task's stdout/stderr")
    p.add_argument("job")
    p.add_argument("task", help="task path, e.g. group/task")
    p.add_argument("--stream", choices=["stdout", "stderr"], default="stdout")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("abort", help="cancel a job")
    p.add_argument("job")
    p.set_defaults(func=cmd_abort)

    p = sub.add_parser("list", help="ledger of submitted jobs")
    p.set_defaults(func=cmd_list)

    p = sub.add_parser("broker", help="rank matching vsites by estimated cost")
    p.add_argument("--processors", type=int, default=1)
    p.add_argument("--runtime", type=int, default=300, help="seconds")
    p.add_argument("--memory", default="256M")
    p.add_argument("--software", nargs="*")
    p.add_argument("--gateway", action="append", help="restrict to these gateways (repeatable)")
    p.set_defaults(func=cmd_broker)

    p = sub.add_parser("reserve", help="co-allocate a common window across vsites")
    p.add_argument("--sites", required=True, help="comma-separated vsite names")
    p.add_argument("--processors", type=int, default=1, help="per site")
    p.add_argument("--duration", type=float, required=True, help="seconds")
    p.add_argument("--gateway", action="append")
    p.set_defaults(func=cmd_reserve)

    p = sub.add_parser("serve", help="local HTTP/JSON bridge for the dashboard")
    p.add_argument("--port", type=int, default=8070)
    p.add_argument("--bind", default="127.0.0.1")
    p.add_argument("--ui", help="serve this directory at /ui/")
    p.set_defaults(func=cmd_serve)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except RejectionError as exc:
        print(f"rejected: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.code, 1)
    except TransportError as exc:
        print(f"transport failure: {exc}", file=sys.stderr)
        return 5
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
