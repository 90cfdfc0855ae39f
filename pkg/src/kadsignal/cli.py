"""Command-line entry points.

``kadnode`` runs one DHT node over real UDP, optionally serving browser
clients over WebSocket, and answers put/get/ping commands on a local
TCP control socket so a shell can poke at a running node. ``kadsim``
runs the simulation scenarios and writes metric reports.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import socket
import sys
from functools import partial

from .harness import (
    SCENARIOS,
    ConfigError,
    ExperimentConfig,
    export_report,
    run_experiment,
)
from .node import KademliaNode, NodeConfig
from .overlay import Gateway
from .routing import id_from_hex, id_to_hex, node_id_from_name
from .transport import UdpReactor

log = logging.getLogger(__name__)

DEFAULT_CONTROL = "127.0.0.1:4710"
CONTROL_TIMEOUT = 15.0


def _host_port(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port:
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    try:
        return host, int(port)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad port in {text!r}") from exc


# -- node daemon -----------------------------------------------------------


def load_config_file(path: str) -> dict[str, str]:
    """Flat key-value options, one `name = value` per line, # comments."""
    options: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            name, sep, value = line.partition("=")
            if not sep:
                name, _, value = line.partition(" ")
            options[name.strip().replace("-", "_")] = value.strip()
    return options


async def _control_session(node: KademliaNode, reader, writer) -> None:
    loop = asyncio.get_event_loop()
    try:
        while True:
            line = await reader.readline()
            if not line:
                return
            try:
                request = json.loads(line)
            except ValueError:
                request = {}
            reply = await _control_dispatch(node, request, loop)
            writer.write(json.dumps(reply, sort_keys=True).encode() + b"\n")
            await writer.drain()
    except (ConnectionError, asyncio.IncompleteReadError):
        pass
    finally:
        writer.close()


async def _control_dispatch(node: KademliaNode, request: dict, loop) -> dict:
    cmd = request.get("cmd")
    if cmd == "info":
        return {
            "ok": True,
            "id": id_to_hex(node.id),
            "address": node.address,
            "contacts": node.table.contact_count(),
        }
    if cmd == "put":
        key = node_id_from_name(str(request.get("key", "")))
        value = str(request.get("value", "")).encode()
        ttl = request.get("ttl")
        done = loop.create_future()
        try:
            node.store(key, value, done.set_result, ttl=ttl)
        except ValueError as exc:
            return {"ok": False, "error": str(exc)}
        outcome = await done
        if outcome.ok:
            return {"ok": True, "acks": outcome.acks, "targets": outcome.targets, "key": id_to_hex(key)}
        return {"ok": False, "error": outcome.error}
    if cmd == "get":
        key = node_id_from_name(str(request.get("key", "")))
        done = loop.create_future()
        node.iterative_find_value(key, done.set_result)
        result = await done
        if result.ok:
            return {"ok": True, "value": result.value.decode(errors="replace"), "ttl": result.value_ttl}
        return {"ok": False, "error": result.error}
    if cmd == "ping":
        done = loop.create_future()
        node.ping_addr(str(request.get("addr", "")), done.set_result)
        contact = await done
        if contact is not None:
            return {"ok": True, "id": id_to_hex(contact.id)}
        return {"ok": False, "error": "no answer"}
    return {"ok": False, "error": f"unknown command {cmd!r}"}


def _cmd_run(args) -> int:
    file_opts = load_config_file(args.config) if args.config else {}

    def pick(name: str, default=None):
        flag = getattr(args, name)
        return flag if flag is not None else file_opts.get(name, default)

    listen = pick("listen")
    if listen is None:
        print("kadnode run: --listen (or a config file entry) is required", file=sys.stderr)
        return 2
    node_id = pick("id")
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)

    reactor = UdpReactor()
    asyncio.set_event_loop(reactor.loop)
    node = KademliaNode(
        reactor,
        NodeConfig(k=int(pick("k", 20)), alpha=int(pick("alpha", 3)), rpc_timeout=2.0),
        node_id=id_from_hex(node_id) if node_id is not None else None,
    )
    address = node.start(listen)
    print(f"node {id_to_hex(node.id)} listening on {address}", flush=True)

    control_host, control_port = _host_port(pick("control", DEFAULT_CONTROL))
    control = reactor.loop.run_until_complete(
        asyncio.start_server(partial(_control_session, node), control_host, control_port)
    )
    print("control on %s:%d" % control.sockets[0].getsockname()[:2], flush=True)

    ws_server = None
    ws_listen = pick("ws_listen")
    if ws_listen is not None:
        from .gateway_ws import serve_gateway

        ws_host, ws_port = _host_port(ws_listen)
        gateway = Gateway(node)
        ws_server = reactor.loop.run_until_complete(serve_gateway(gateway, ws_host, ws_port))
        print("gateway on ws://%s:%d/ws" % ws_server.sockets[0].getsockname()[:2], flush=True)

    bootstrap = pick("bootstrap")
    if bootstrap is not None:
        def joined(report) -> None:
            if report.ok:
                print(f"joined via {bootstrap}: {report.contacts_learned} contacts", flush=True)
            else:
                print(f"join via {bootstrap} failed: {report.error}", flush=True)

        node.join_addr(bootstrap, joined)

    try:
        reactor.loop.run_forever()
    except KeyboardInterrupt:
        pass
    finally:
        node.stop()
        control.close()
        if ws_server is not None:
            ws_server.close()
        reactor.close()
    return 0


def _control_request(control: str, payload: dict) -> dict:
    host, port = _host_port(control)
    with socket.create_connection((host, port), timeout=CONTROL_TIMEOUT) as sock:
        sock.sendall(json.dumps(payload).encode() + b"\n")
        buf = b""
        while not buf.endswith(b"\n"):
            chunk = sock.recv(65536)
            if not chunk:
                break
            buf += chunk
    return json.loads(buf)


def _cmd_put(args) -> int:
    payload = {"cmd": "put", "key": args.key, "value": args.value}
    if args.ttl is not None:
        payload["ttl"] = args.ttl
    reply = _control_request(args.control, payload)
    if reply.get("ok"):
        print(f"stored on {reply['acks']}/{reply['targets']} nodes (key {reply['key']})")
        return 0
    print(f"put failed: {reply.get('error')}", file=sys.stderr)
    return 1


def _cmd_get(args) -> int:
    reply = _control_request(args.control, {"cmd": "get", "key": args.key})
    if reply.get("ok"):
        print(reply["value"])
        return 0
    print(f"get failed: {reply.get('error')}", file=sys.stderr)
    return 1


def _cmd_ping(args) -> int:
    reply = _control_request(args.control, {"cmd": "ping", "addr": args.addr})
    if reply.get("ok"):
        print(f"alive: {reply['id']}")
        return 0
    print("no answer", file=sys.stderr)
    return 1


def main_node(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="kadnode", description="Run and poke one DHT node.")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a node until interrupted")
    run_p.add_argument("--listen", help="UDP host:port to serve the DHT protocol on")
    run_p.add_argument("--bootstrap", help="host:port of an existing node to join through")
    run_p.add_argument("--id", help="node id as 40 hex chars (default: random)")
    run_p.add_argument("--k", type=int, help="bucket capacity (default 20)")
    run_p.add_argument("--alpha", type=int, help="lookup parallelism (default 3)")
    run_p.add_argument("--config", help="flat key=value config file; flags override it")
    run_p.add_argument("--ws-listen", dest="ws_listen", help="host:port for the WebSocket gateway")
    run_p.add_argument("--control", help=f"control socket host:port (default {DEFAULT_CONTROL})")
    run_p.add_argument("-v", "--verbose", action="store_true")
    run_p.set_defaults(fn=_cmd_run)

    for name, fn in (("put", _cmd_put), ("get", _cmd_get), ("ping", _cmd_ping)):
        cmd_p = sub.add_parser(name, help=f"{name} via a running node's control socket")
        if name == "put":
            cmd_p.add_argument("key")
            cmd_p.add_argument("value")
            cmd_p.add_argument("--ttl", type=int)
        elif name == "get":
            cmd_p.add_argument("key")
        else:
            cmd_p.add_argument("addr", help="host:port of the node to ping")
        cmd_p.add_argument("--control", default=DEFAULT_CONTROL)
        cmd_p.set_defaults(fn=fn)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConnectionError, socket.timeout, OSError) as exc:
        print(f"kadnode: {exc}", file=sys.stderr)
        return 1


# -- simulation CLI -----------------------------------------------------------


def _latency(text: str) -> tuple[float, float]:
    low, _, high = text.partition(":")
    try:
        return float(low), float(high)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected MIN:MAX milliseconds, got {text!r}") from exc


def _experiment_config(args, **overrides) -> ExperimentConfig:
    fields = {
        "scenario": args.scenario,
        "n_nodes": args.nodes,
        "trials": args.trials,
        "seed": args.seed,
        "k": args.k,
        "alpha": args.alpha,
        "latency_min_ms": args.latency[0],
        "latency_max_ms": args.latency[1],
        "loss_rate": args.loss,
        "churn_rate": args.churn,
        "session_duration": args.duration,
    }
    fields.update(overrides)
    return ExperimentConfig(**fields)


def _run_one(cfg: ExperimentConfig, out: str, fmt: str | None) -> list[str]:
    fmt = fmt or ("json" if out.endswith(".json") else "csv")
    report = run_experiment(cfg)
    export_report(report, out, format=fmt)
    agg = report.aggregates
    print(
        f"{cfg.scenario} n={cfg.n_nodes} trials={cfg.trials} seed={cfg.seed}: "
        f"failure_rate={agg['failure_rate']:.4f} messages={agg['messages_total']} -> {out}"
    )
    for violation in report.violations:
        print(f"  INVARIANT VIOLATED: {violation}", file=sys.stderr)
    return report.violations


_SWEEP_PARAMS = {
    "nodes": ("n_nodes", int),
    "trials": ("trials", int),
    "seed": ("seed", int),
    "loss": ("loss_rate", float),
    "churn": ("churn_rate", float),
}


def main_sim(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="kadsim", description="Run simulated experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--scenario", required=True, choices=SCENARIOS)
        p.add_argument("--nodes", type=int, default=64)
        p.add_argument("--trials", type=int, default=100)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--loss", type=float, default=0.0)
        p.add_argument("--latency", type=_latency, default=(10.0, 50.0), metavar="MIN:MAX")
        p.add_argument("--churn", type=float, default=0.0)
        p.add_argument("--duration", type=float, default=60.0, help="session seconds (survival)")
        p.add_argument("--k", type=int, default=20)
        p.add_argument("--alpha", type=int, default=3)
        p.add_argument("--out", required=True, help="report file to write")
        p.add_argument("--format", choices=("csv", "json"), help="default: by --out extension")

    run_p = sub.add_parser("run", help="one experiment, one report")
    add_common(run_p)

    sweep_p = sub.add_parser("sweep", help="one report per value of a swept parameter")
    add_common(sweep_p)
    sweep_p.add_argument(
        "--param",
        required=True,
        metavar="NAME=V1,V2,...",
        help=f"parameter to sweep; one of {sorted(_SWEEP_PARAMS)}",
    )

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            violations = _run_one(_experiment_config(args), args.out, args.format)
            return 1 if violations else 0

        name, _, raw_values = args.param.partition("=")
        if name not in _SWEEP_PARAMS or not raw_values:
            print(f"kadsim: --param must be NAME=V1,V2 with NAME in {sorted(_SWEEP_PARAMS)}", file=sys.stderr)
            return 2
        field, cast = _SWEEP_PARAMS[name]
        root, ext = os.path.splitext(args.out)
        failed = False
        for raw in raw_values.split(","):
            value = cast(raw)
            cfg = _experiment_config(args, **{field: value})
            out = f"{root}-{name}{raw}{ext or '.csv'}"
            if _run_one(cfg, out, args.format):
                failed = True
        return 1 if failed else 0
    except ConfigError as exc:
        print(f"kadsim: {exc}", file=sys.stderr)
        return 2
