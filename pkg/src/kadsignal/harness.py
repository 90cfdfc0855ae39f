"""Deterministic experiment runner over the simulated network.

Five scenarios measure what a deployment would care about: how lookup
cost grows with network size, how long a signaling handshake takes, how
often it fails under datagram loss, how long established sessions last,
and whether routing heals after mass departure. Every run is a pure
function of its config: same seed, same report, byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
import zlib
from dataclasses import asdict, dataclass
from random import Random

from .node import KademliaNode, NodeConfig
from .overlay import Gateway, LocalPipe
from .routing import random_node_id
from .transport import SimConfig, SimNetwork

SCENARIOS = (
    "lookup_scaling",
    "connection_time",
    "failure_rate",
    "session_survival",
    "churn_recovery",
)

KEEPALIVE_PERIOD = 5.0
CONNECT_TIMEOUT = 10.0
REGISTER_TIMEOUT = 30.0
BLOB_SIZE = 1024

# One signaling exchange: offer plus two candidates, answered in kind.
_A_KINDS = ("offer", "candidate", "candidate")
_B_KINDS = ("answer", "candidate", "candidate")
EXCHANGE_ENVELOPES = len(_A_KINDS) + len(_B_KINDS)


class ConfigError(ValueError):
    """An experiment parameter is out of range."""


@dataclass(slots=True)
class ExperimentConfig:
    scenario: str
    n_nodes: int
    trials: int = 100
    seed: int = 0
    k: int = 20
    alpha: int = 3
    latency_min_ms: float = 10.0
    latency_max_ms: float = 50.0
    loss_rate: float = 0.0
    churn_rate: float = 0.0
    session_duration: float = 60.0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; pick one of {SCENARIOS}")
        if self.n_nodes < 2:
            raise ConfigError("n_nodes must be >= 2")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not 1 <= self.alpha <= self.k:
            raise ConfigError("need 1 <= alpha <= k")
        if not 0.0 <= self.latency_min_ms <= self.latency_max_ms:
            raise ConfigError("need 0 <= latency_min_ms <= latency_max_ms")
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ConfigError("loss_rate must be within [0, 1]")
        if not 0.0 <= self.churn_rate < 1.0:
            raise ConfigError("churn_rate must be within [0, 1)")
        if self.session_duration <= 0:
            raise ConfigError("session_duration must be positive")


@dataclass(slots=True)
class TrialRecord:
    """One trial's measurements; fields not meaningful for a scenario stay None."""

    trial: int
    established: bool | None = None
    connection_time_ms: float | None = None
    hops: int | None = None
    messages: int = 0
    survival_s: float | None = None
    success: bool | None = None

    @property
    def ok(self) -> bool:
        if self.established is not None:
            return self.established
        if self.success is not None:
            return self.success
        return True

    def as_dict(self) -> dict:
        return {
            "trial": self.trial,
            "established": self.established,
            "connection_time_ms": self.connection_time_ms,
            "hops": self.hops,
            "messages": self.messages,
            "survival_s": self.survival_s,
            "success": self.success,
        }


@dataclass(slots=True)
class MetricsReport:
    config: dict
    trials: list[TrialRecord]
    aggregates: dict
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass(slots=True)
class ConnectionOutcome:
    established: bool
    elapsed_ms: float
    hops: int | None
    messages: int
    session_id: str | None


@dataclass(slots=True)
class PeerHandle:
    """A registered client attached to one gateway."""

    gateway: Gateway
    conn: object
    pipe: LocalPipe
    name: str


# -- analytic oracle -------------------------------------------------------


def exchange_failure_probability(
    loss_rate: float, envelopes: int = EXCHANGE_ENVELOPES, sends_per_envelope: int = 4
) -> float:
    """Chance the scripted exchange never completes, from the retry tree.

    Each envelope is transmitted up to sends_per_envelope times (RPC
    retry times application re-send); it reaches the receiving gateway
    iff any request datagram survives, because acknowledgement loss only
    causes a duplicate that the receiver absorbs. The exchange fails iff
    at least one envelope never arrives. Walked as an explicit tree
    rather than a closed form so tests can check against it.
    """

    def undelivered(sends_left: int) -> float:
        if sends_left == 0:
            return 1.0
        return loss_rate * undelivered(sends_left - 1)

    p_envelope = undelivered(sends_per_envelope)
    return 1.0 - (1.0 - p_envelope) ** envelopes


# -- network construction ----------------------------------------------------


def build_sim_network(cfg: ExperimentConfig, tag: str = "") -> tuple[SimNetwork, list[KademliaNode]]:
    """Bring up n nodes and join them sequentially through one seed node.

    The bootstrap phase always runs loss-free; the configured loss rate
    applies from the moment this returns. Node maintenance timers are
    pushed out to a day so experiments control when refresh happens.
    """
    base = f"{cfg.seed}{tag}"
    sim = SimNetwork(
        SimConfig(
            latency_min_ms=cfg.latency_min_ms,
            latency_max_ms=cfg.latency_max_ms,
            loss_rate=0.0,
            seed=zlib.crc32(f"net:{base}".encode()),
        )
    )
    node_cfg = NodeConfig(k=cfg.k, alpha=cfg.alpha, refresh_interval=86400.0)
    id_rng = Random(f"{base}:ids")
    nodes = [
        KademliaNode(sim, node_cfg, node_id=random_node_id(id_rng), rng=Random(f"{base}:rpc:{i}"))
        for i in range(cfg.n_nodes)
    ]
    for node in nodes:
        node.start()
    bootstrap = nodes[0].contact()
    for node in nodes[1:]:
        box: dict = {}
        node.join(bootstrap, lambda report: box.setdefault("report", report))
        if not sim.run_until(lambda: "report" in box, max_time=120.0) or not box["report"].ok:
            raise RuntimeError(f"bootstrap join failed for node {node.address}")
    sim.config.loss_rate = cfg.loss_rate
    return sim, nodes


# -- signaling measurements -------------------------------------------------


def synthetic_blob(trial: int, kind: str, index: int) -> str:
    head = json.dumps({"kind": kind, "n": index, "trial": trial}, sort_keys=True)
    return (head + " ").ljust(BLOB_SIZE, "x")


def attach_peer(sim: SimNetwork, gateway: Gateway, name: str) -> PeerHandle | None:
    """Attach and register one scripted client; None if registration failed."""
    pipe = LocalPipe()
    conn = gateway.attach(pipe)
    gateway.on_client_frame(conn, {"op": "register", "name": name})
    sim.run_until(
        lambda: any(f["op"] in ("registered", "error") for f in pipe.frames),
        max_time=REGISTER_TIMEOUT,
    )
    if any(f["op"] == "registered" for f in pipe.frames):
        return PeerHandle(gateway, conn, pipe, name)
    gateway.detach(conn)
    return None


def measure_connection(
    sim: SimNetwork,
    peer_a: PeerHandle,
    peer_b: PeerHandle,
    trial: int = 0,
    timeout: float = CONNECT_TIMEOUT,
) -> ConnectionOutcome:
    """Drive one full signaling exchange from A to B and time it.

    A connects by name, then sends an offer and two candidates; B answers
    in kind the moment the offer lands. Established means both endpoints
    hold the complete remote set: all three frames, verbatim blobs, in
    order. A resolution failure ends the trial at the failure, not at the
    timeout; a relay loss mid-exchange runs the clock out honestly.
    """
    expect_b = [(kind, synthetic_blob(trial, kind, i)) for i, kind in enumerate(_A_KINDS, 1)]
    expect_a = [(kind, synthetic_blob(trial, kind, i)) for i, kind in enumerate(_B_KINDS, 1)]
    state: dict = {"sid": None, "a_got": [], "b_got": [], "done_at": None, "failed_at": None, "hops": None}
    messages_before = sim.messages_sent

    def maybe_done() -> None:
        if state["done_at"] is None and state["a_got"] == expect_a and state["b_got"] == expect_b:
            state["done_at"] = sim.now()

    def a_frame(frame: dict) -> None:
        op = frame.get("op")
        if op == "session" and state["sid"] is None:
            state["sid"] = frame["session"]
            state["hops"] = peer_a.gateway.last_resolve_rounds
            for seq, (kind, blob) in enumerate(expect_b, 1):
                peer_a.gateway.on_client_frame(
                    peer_a.conn,
                    {"op": "signal", "session": state["sid"], "kind": kind, "seq": seq, "blob": blob},
                )
        elif op == "signal" and frame["session"] == state["sid"]:
            state["a_got"].append((frame["kind"], frame["blob"]))
            maybe_done()
        elif op == "error" and state["sid"] is None:
            # could not even open a session; later relay errors are not fatal
            state["failed_at"] = sim.now()
            state["hops"] = peer_a.gateway.last_resolve_rounds

    def b_frame(frame: dict) -> None:
        if frame.get("op") != "signal":
            return
        state["b_got"].append((frame["kind"], frame["blob"]))
        if frame["kind"] == "offer":
            for seq, (kind, blob) in enumerate(expect_a, 1):
                peer_b.gateway.on_client_frame(
                    peer_b.conn,
                    {"op": "signal", "session": frame["session"], "kind": kind, "seq": seq, "blob": blob},
                )
        maybe_done()

    peer_a.pipe.on_frame = a_frame
    peer_b.pipe.on_frame = b_frame
    started_at = sim.now()
    peer_a.gateway.on_client_frame(peer_a.conn, {"op": "connect", "to": peer_b.name})
    sim.run_until(
        lambda: state["done_at"] is not None or state["failed_at"] is not None, max_time=timeout
    )
    peer_a.pipe.on_frame = None
    peer_b.pipe.on_frame = None

    established = state["done_at"] is not None
    ended_at = state["done_at"] if established else (state["failed_at"] or sim.now())
    return ConnectionOutcome(
        established=established,
        elapsed_ms=(ended_at - started_at) * 1000.0,
        hops=state["hops"],
        messages=sim.messages_sent - messages_before,
        session_id=state["sid"],
    )


def measure_session_survival(
    sim: SimNetwork,
    peer_a: PeerHandle,
    peer_b: PeerHandle,
    session_id: str,
    duration: float,
    churn_rate: float = 0.0,
    dht_nodes: tuple | list = (),
    rng: Random | None = None,
) -> float:
    """Keep the established session alive with keepalives; time to first drop.

    Both sides send one keepalive envelope per 5 s window. A direction is
    dropped when two consecutive windows pass with nothing received; the
    session survives until the first drop or the full duration. Churn
    kills the given fraction of other DHT nodes at random times, sparing
    both gateways, which is exactly what the relay path should shrug off.
    """
    rng = rng or Random(f"survival:{session_id}")
    start = sim.now()
    windows = math.ceil(duration / KEEPALIVE_PERIOD)
    arrivals_a: list[float] = []
    arrivals_b: list[float] = []

    def watch(sink):
        def on_frame(frame: dict) -> None:
            if frame.get("op") == "signal" and frame.get("blob") == "keepalive":
                sink.append(sim.now())
        return on_frame

    peer_a.pipe.on_frame = watch(arrivals_a)
    peer_b.pipe.on_frame = watch(arrivals_b)

    def send_keepalive(peer: PeerHandle, seq: int) -> None:
        peer.gateway.on_client_frame(
            peer.conn,
            {"op": "signal", "session": session_id, "kind": "candidate", "seq": seq, "blob": "keepalive"},
        )

    base_seq = len(_A_KINDS)  # the handshake used seq 1..3 on each side
    for i in range(windows):
        for peer in (peer_a, peer_b):
            sim.call_later(
                i * KEEPALIVE_PERIOD, lambda p=peer, s=base_seq + 1 + i: send_keepalive(p, s)
            )

    if churn_rate > 0.0:
        spared = {id(peer_a.gateway.node), id(peer_b.gateway.node)}
        eligible = [n for n in dht_nodes if n.running and id(n) not in spared]
        for victim in rng.sample(eligible, round(churn_rate * len(eligible))):
            sim.call_later(rng.uniform(0.0, duration), victim.stop)

    sim.advance_clock(start + duration + 1.0)
    peer_a.pipe.on_frame = None
    peer_b.pipe.on_frame = None

    def first_drop(arrivals: list[float]) -> float | None:
        got = [False] * (windows + 1)
        for ts in arrivals:
            w = math.ceil((ts - start) / KEEPALIVE_PERIOD - 1e-9)
            if 0 < w <= windows:
                got[w] = True
        for i in range(2, windows + 1):
            if not got[i - 1] and not got[i]:
                return i * KEEPALIVE_PERIOD
        return None

    drops = [d for d in (first_drop(arrivals_a), first_drop(arrivals_b)) if d is not None]
    return min(duration, *drops) if drops else duration


# -- scenario runners ---------------------------------------------------------


def _lookup_rows(sim: SimNetwork, nodes: list[KademliaNode], cfg: ExperimentConfig) -> list[TrialRecord]:
    live = [n for n in nodes if n.running]
    rng = Random(f"{cfg.seed}:queries")
    rows = []
    for t in range(cfg.trials):
        querier = rng.choice(live)
        target = random_node_id(rng)
        messages_before = sim.messages_sent
        box: dict = {}
        querier.iterative_find_node(target, lambda r: box.setdefault("result", r))
        sim.run_until(lambda: "result" in box, max_time=120.0)
        sim.run_until_idle(max_time=5.0)
        result = box.get("result")
        expected = sorted((n.id for n in live if n is not querier), key=lambda i: i ^ target)[: cfg.k]
        got = [c.id for c in result.contacts] if result is not None and result.ok else None
        rows.append(
            TrialRecord(
                trial=t,
                hops=result.rounds if result is not None else None,
                messages=sim.messages_sent - messages_before,
                success=got == expected,
            )
        )
    return rows


def _run_lookup_scaling(cfg: ExperimentConfig) -> list[TrialRecord]:
    sim, nodes = build_sim_network(cfg)
    return _lookup_rows(sim, nodes, cfg)


def _run_churn_recovery(cfg: ExperimentConfig) -> list[TrialRecord]:
    sim, nodes = build_sim_network(cfg)
    kill_rng = Random(f"{cfg.seed}:kill")
    for victim in kill_rng.sample(nodes, round(cfg.churn_rate * len(nodes))):
        victim.stop()
    survivors = [n for n in nodes if n.running]
    # one full refresh cycle: every occupied bucket is overdue by now
    overdue = sim.now() + 86400.0 + 1.0
    for node in survivors:
        node.refresh_buckets(now=overdue)
    sim.run_until_idle(max_time=600.0)
    return _lookup_rows(sim, nodes, cfg)


def _signaling_trial(
    sim: SimNetwork,
    nodes: list[KademliaNode],
    gateways: list[Gateway],
    cfg: ExperimentConfig,
    trial: int,
    pick: Random,
    kill_rng: Random,
    with_survival: bool,
) -> TrialRecord:
    messages_before = sim.messages_sent
    gw_a, gw_b = pick.sample(gateways, 2)
    peer_a = attach_peer(sim, gw_a, f"peer-a-{trial}")
    peer_b = attach_peer(sim, gw_b, f"peer-b-{trial}")
    outcome = None
    survival = None
    if peer_a is not None and peer_b is not None:
        outcome = measure_connection(sim, peer_a, peer_b, trial=trial)
        if with_survival and outcome.established:
            survival = measure_session_survival(
                sim,
                peer_a,
                peer_b,
                outcome.session_id,
                cfg.session_duration,
                churn_rate=cfg.churn_rate,
                dht_nodes=nodes,
                rng=kill_rng,
            )
    for peer in (peer_a, peer_b):
        if peer is not None:
            peer.gateway.detach(peer.conn)
    sim.run_until_idle(max_time=20.0)

    established = outcome is not None and outcome.established
    return TrialRecord(
        trial=trial,
        established=established,
        connection_time_ms=outcome.elapsed_ms if outcome is not None else None,
        hops=outcome.hops if outcome is not None else None,
        messages=sim.messages_sent - messages_before,
        survival_s=survival,
        success=(survival >= cfg.session_duration) if survival is not None else None,
    )


def _run_signaling(cfg: ExperimentConfig, with_survival: bool) -> list[TrialRecord]:
    pick = Random(f"{cfg.seed}:pairs")
    kill_rng = Random(f"{cfg.seed}:churn")
    fresh_network_per_trial = with_survival and cfg.churn_rate > 0.0
    if not fresh_network_per_trial:
        sim, nodes = build_sim_network(cfg)
        gateways = [Gateway(n) for n in nodes]
    rows = []
    for t in range(cfg.trials):
        if fresh_network_per_trial:
            sim, nodes = build_sim_network(cfg, tag=f":trial{t}")
            gateways = [Gateway(n) for n in nodes]
        rows.append(_signaling_trial(sim, nodes, gateways, cfg, t, pick, kill_rng, with_survival))
    return rows


_RUNNERS = {
    "lookup_scaling": _run_lookup_scaling,
    "connection_time": lambda cfg: _run_signaling(cfg, with_survival=False),
    "failure_rate": lambda cfg: _run_signaling(cfg, with_survival=False),
    "session_survival": lambda cfg: _run_signaling(cfg, with_survival=True),
    "churn_recovery": _run_churn_recovery,
}


# -- aggregation and invariants ----------------------------------------------


def _p95(values: list) -> float:
    ordered = sorted(values)
    return ordered[math.ceil(0.95 * len(ordered)) - 1]


def summarize(trials: list[TrialRecord]) -> dict:
    connection = [t.connection_time_ms for t in trials if t.established and t.connection_time_ms is not None]
    hops = [t.hops for t in trials if t.hops is not None]
    survival = [t.survival_s for t in trials if t.survival_s is not None]
    failures = sum(1 for t in trials if not t.ok)
    return {
        "trials": len(trials),
        "failures": failures,
        "failure_rate": failures / len(trials) if trials else 0.0,
        "messages_total": sum(t.messages for t in trials),
        "connection_time_ms": {
            "min": min(connection),
            "median": statistics.median(connection),
            "p95": _p95(connection),
            "max": max(connection),
        }
        if connection
        else None,
        "hops": {"median": statistics.median(hops), "max": max(hops)} if hops else None,
        "survival_s": {
            "min": min(survival),
            "median": statistics.median(survival),
            "max": max(survival),
        }
        if survival
        else None,
    }


def _violations(cfg: ExperimentConfig, rows: list[TrialRecord], agg: dict) -> list[str]:
    found = []
    if cfg.scenario in ("lookup_scaling", "churn_recovery") and cfg.loss_rate == 0.0:
        missed = sum(1 for r in rows if not r.success)
        if missed:
            found.append(f"{missed}/{len(rows)} lookups missed the global k-closest set at loss=0")
    if cfg.scenario == "lookup_scaling" and agg["hops"] is not None:
        median_bound = math.ceil(math.log2(cfg.n_nodes)) + 2
        max_bound = 2 * math.log2(cfg.n_nodes)
        if agg["hops"]["median"] > median_bound:
            found.append(f"median hops {agg['hops']['median']} above bound {median_bound}")
        if agg["hops"]["max"] > max_bound:
            found.append(f"max hops {agg['hops']['max']} above bound {max_bound:.1f}")
    if cfg.scenario in ("connection_time", "failure_rate"):
        floor_ms = 2.0 * cfg.latency_min_ms
        too_fast = sum(
            1 for r in rows if r.established and r.connection_time_ms is not None and r.connection_time_ms < floor_ms
        )
        if too_fast:
            found.append(f"{too_fast} trials beat the physical floor of {floor_ms} ms")
        analytic = exchange_failure_probability(cfg.loss_rate)
        sigma = math.sqrt(analytic * (1.0 - analytic) / len(rows))
        ceiling = 0.0 if cfg.loss_rate == 0.0 else max(0.05, analytic + 3.0 * sigma)
        if agg["failure_rate"] > ceiling + 1e-12:
            found.append(
                f"failure rate {agg['failure_rate']:.4f} above ceiling {ceiling:.4f} "
                f"(analytic {analytic:.6f})"
            )
    if cfg.scenario == "session_survival" and cfg.churn_rate == 0.0 and cfg.loss_rate == 0.0:
        dropped = sum(
            1 for r in rows if not r.established or (r.survival_s or 0.0) < cfg.session_duration
        )
        if dropped:
            found.append(f"{dropped} sessions dropped with zero churn and zero loss")
    return found


def run_experiment(cfg: ExperimentConfig) -> MetricsReport:
    rows = _RUNNERS[cfg.scenario](cfg)
    aggregates = summarize(rows)
    return MetricsReport(
        config=asdict(cfg),
        trials=rows,
        aggregates=aggregates,
        violations=_violations(cfg, rows, aggregates),
    )


# -- export -------------------------------------------------------------------

_CSV_COLUMNS = [
    "row",
    "trial",
    "established",
    "connection_time_ms",
    "hops",
    "messages",
    "survival_s",
    "success",
    "failure_rate",
    "connection_ms_min",
    "connection_ms_median",
    "connection_ms_p95",
    "connection_ms_max",
    "hops_median",
    "hops_max",
    "survival_s_min",
    "survival_s_median",
    "survival_s_max",
    "messages_total",
]


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)  # shortest round-trip form; float(cell) == value
    return str(value)


def render_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_CSV_COLUMNS)
    for r in report.trials:
        writer.writerow(
            [
                "trial",
                r.trial,
                _cell(r.established),
                _cell(r.connection_time_ms),
                _cell(r.hops),
                r.messages,
                _cell(r.survival_s),
                _cell(r.success),
            ]
            + [""] * 11
        )
    if not report.trials:
        return buf.getvalue()
    agg = report.aggregates
    conn = agg["connection_time_ms"] or {}
    hops = agg["hops"] or {}
    surv = agg["survival_s"] or {}
    writer.writerow(
        ["aggregate"]
        + [""] * 7
        + [
            _cell(agg["failure_rate"]),
            _cell(conn.get("min")),
            _cell(conn.get("median")),
            _cell(conn.get("p95")),
            _cell(conn.get("max")),
            _cell(hops.get("median")),
            _cell(hops.get("max")),
            _cell(surv.get("min")),
            _cell(surv.get("median")),
            _cell(surv.get("max")),
            _cell(agg["messages_total"]),
        ]
    )
    return buf.getvalue()


def render_json(report: MetricsReport) -> str:
    payload = {
        "config": report.config,
        "aggregates": report.aggregates,
        "trials": [t.as_dict() for t in report.trials],
        "violations": report.violations,
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def export_report(report: MetricsReport, path: str, format: str = "csv") -> None:
    if format == "csv":
        text = render_csv(report)
    elif format == "json":
        text = render_json(report)
    else:
        raise ConfigError(f"unknown report format {format!r}; use csv or json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
