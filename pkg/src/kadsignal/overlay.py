"""Peer presence and signaling relay on top of the DHT.

A gateway is a DHT node that additionally serves browser peers. Each
registered peer name hashes to a key under which the gateway stores a
presence record (who serves this peer, and how fresh that claim is).
Calling a peer means resolving its presence record, then relaying
opaque signaling envelopes gateway-to-gateway with SIGNAL_RELAY; the
gateways are relays only, never mailboxes: an envelope for an absent
peer is refused, not queued.

Presence records carry a millisecond timestamp as their sequence
number. A peer that reconnects through a different gateway therefore
wins any comparison against its older record; exact ties go to the
numerically larger gateway ID.
"""

from __future__ import annotations

import json
import logging
from collections import Counter, deque
from dataclasses import dataclass, field

from kadsignal.node import NOT_FOUND, KademliaNode, LookupResult, StoreResult
from kadsignal.protocol import (
    MAX_BLOB,
    MAX_PEER_NAME,
    RELAY_FAIL,
    RELAY_NO_SUCH_PEER,
    RELAY_OK,
    SESSION_ID_HEX_LEN,
    SIGNAL_KINDS,
    RpcMessage,
    SignalEnvelope,
    relay_fail_body,
)
from kadsignal.routing import Contact, id_from_hex, id_to_hex, node_id_from_name

log = logging.getLogger(__name__)

PRESENCE_TTL = 60
PRESENCE_REFRESH = 30.0

ERR_PEER_NOT_FOUND = "PEER_NOT_FOUND"
ERR_RELAY_FAILED = "RELAY_FAILED"
ERR_REGISTER_FAILED = "REGISTER_FAILED"
ERR_BAD_REQUEST = "BAD_REQUEST"

_HEX = frozenset("0123456789abcdef")


def peer_key(name: str) -> int:
    """DHT key for a peer name (SHA-1 of its UTF-8 bytes)."""
    return node_id_from_name(name)


@dataclass(slots=True, frozen=True)
class PresenceRecord:
    """One claim that ``gateway`` currently serves the peer behind ``peer_key``."""

    peer_key: int
    gateway_id: int
    gateway_addr: str
    seq: int

    def encode(self) -> bytes:
        obj = {
            "gateway_addr": self.gateway_addr,
            "gateway_id": id_to_hex(self.gateway_id),
            "peer_key": id_to_hex(self.peer_key),
            "seq": self.seq,
        }
        return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")

    @classmethod
    def decode(cls, raw: bytes) -> PresenceRecord | None:
        """Parse a stored record; None for anything that is not one."""
        try:
            obj = json.loads(raw.decode("utf-8"))
            if set(obj) != {"gateway_addr", "gateway_id", "peer_key", "seq"}:
                return None
            seq = obj["seq"]
            if type(seq) is not int or seq < 0:
                return None
            addr = obj["gateway_addr"]
            if not isinstance(addr, str) or not 1 <= len(addr) <= 256:
                return None
            return cls(
                peer_key=id_from_hex(obj["peer_key"]),
                gateway_id=id_from_hex(obj["gateway_id"]),
                gateway_addr=addr,
                seq=seq,
            )
        except (ValueError, AttributeError, TypeError):
            return None

    def gateway_contact(self) -> Contact:
        return Contact(self.gateway_id, self.gateway_addr)


def best_presence(records: list[PresenceRecord]) -> PresenceRecord | None:
    """Pick the winning record: highest seq, gateway ID breaking ties."""
    if not records:
        return None
    return max(records, key=lambda r: (r.seq, r.gateway_id))


@dataclass(slots=True)
class ClientConn:
    """One attached client pipe and its registration state."""

    pipe: object
    name: str | None = None
    registered: bool = False
    closed: bool = False
    refresh_timer: object = None

    def send(self, frame: dict) -> None:
        if not self.closed:
            self.pipe.send(frame)


@dataclass(slots=True)
class _Flow:
    """Per-(session, local peer) relay state.

    ``outbox``/``sending`` serialize outbound envelopes so they reach
    the remote gateway in seq order even though each rides its own
    RPC. ``last_seq_in`` enforces strictly increasing delivery of the
    inbound direction and absorbs duplicates from RPC retries; a
    missing seq is surfaced to the client as a visible gap, never
    reordered around.
    """

    sid: str
    local: str
    remote: str
    remote_gateway: Contact
    last_seq_in: int = 0
    outbox: deque = field(default_factory=deque)
    sending: bool = False


class LocalPipe:
    """In-process client endpoint for tests and the simulation harness."""

    def __init__(self, on_frame=None):
        self.frames: list[dict] = []
        self.on_frame = on_frame
        self.closed = False

    def send(self, frame: dict) -> None:
        if self.closed:
            return
        self.frames.append(frame)
        if self.on_frame is not None:
            self.on_frame(frame)

    def close(self) -> None:
        self.closed = True


class Gateway:
    """Signaling front end bound to one DHT node."""

    def __init__(self, node: KademliaNode):
        self.node = node
        self.clients: dict[str, ClientConn] = {}
        self.flows: dict[tuple[str, str], _Flow] = {}
        self.stats: Counter = Counter()
        self.last_resolve_rounds = 0  # lookup depth of the most recent resolve
        node.set_relay_handler(self._on_relay)

    # -- client attachment -------------------------------------------

    def attach(self, pipe) -> ClientConn:
        return ClientConn(pipe=pipe)

    def detach(self, conn: ClientConn) -> None:
        """Drop a client: its sessions die now, its presence via TTL."""
        if conn.closed:
            return
        conn.closed = True
        if conn.refresh_timer is not None:
            conn.refresh_timer.cancel()
            conn.refresh_timer = None
        if conn.name is not None and self.clients.get(conn.name) is conn:
            del self.clients[conn.name]
            for key in [k for k in self.flows if k[1] == conn.name]:
                del self.flows[key]
        conn.pipe.close()

    # -- frame handling ------------------------------------------------

    def handle_client_text(self, conn: ClientConn, text: str | bytes) -> None:
        """Parse one raw client frame and dispatch it."""
        try:
            frame = json.loads(text)
        except (ValueError, UnicodeDecodeError):
            self._error(conn, ERR_BAD_REQUEST, "frame is not valid JSON")
            return
        self.on_client_frame(conn, frame)

    def on_client_frame(self, conn: ClientConn, frame) -> None:
        if conn.closed:
            return
        if not isinstance(frame, dict):
            self._error(conn, ERR_BAD_REQUEST, "frame must be an object")
            return
        op = frame.get("op")
        if op == "register":
            self._register(conn, frame)
        elif op == "connect":
            self._connect(conn, frame)
        elif op == "signal":
            self._signal(conn, frame)
        elif op == "leave":
            self.detach(conn)
        else:
            self._error(conn, ERR_BAD_REQUEST, f"unknown op {op!r}")

    def _error(self, conn: ClientConn, code: str, detail: str) -> None:
        self.stats[f"error:{code}"] += 1
        conn.send({"op": "error", "code": code, "detail": detail})

    # -- registration ----------------------------------------------------

    def _register(self, conn: ClientConn, frame: dict) -> None:
        name = frame.get("name")
        if not isinstance(name, str) or not 1 <= len(name) <= MAX_PEER_NAME:
            self._error(conn, ERR_BAD_REQUEST, "register needs a name of 1..256 chars")
            return
        if conn.name is not None:
            self._error(conn, ERR_BAD_REQUEST, "connection already registered")
            return
        holder = self.clients.get(name)
        if holder is not None and not holder.closed:
            self._error(conn, ERR_REGISTER_FAILED, f"name {name!r} is in use here")
            return

        def stored(result: StoreResult) -> None:
            if conn.closed:
                return
            if result.acks == 0:
                self._error(conn, ERR_REGISTER_FAILED, result.error or "no replicas stored")
                return
            conn.name = name
            conn.registered = True
            self.clients[name] = conn
            self._schedule_presence_refresh(conn)
            self.stats["registered"] += 1
            conn.send({"op": "registered", "replicas": result.acks})

        self._store_presence(name, stored)

    def _store_presence(self, name: str, on_done) -> None:
        record = PresenceRecord(
            peer_key=peer_key(name),
            gateway_id=self.node.id,
            gateway_addr=self.node.address,
            seq=self._presence_seq(),
        )
        self.node.store(
            record.peer_key, record.encode(), on_done, ttl=PRESENCE_TTL, republish=False
        )

    def _presence_seq(self) -> int:
        return int(self.node.reactor.now() * 1000)

    def _schedule_presence_refresh(self, conn: ClientConn) -> None:
        def tick() -> None:
            if conn.closed or not conn.registered:
                return
            self._store_presence(conn.name, None)
            conn.refresh_timer = self.node.reactor.call_later(PRESENCE_REFRESH, tick)

        conn.refresh_timer = self.node.reactor.call_later(PRESENCE_REFRESH, tick)

    # -- resolution --------------------------------------------------------

    def resolve(self, name: str, on_done) -> None:
        """Find who serves ``name``; on_done(PresenceRecord | None | "error")."""
        key = peer_key(name)

        def looked_up(result: LookupResult) -> None:
            self.last_resolve_rounds = result.rounds
            if result.value is not None:
                record = PresenceRecord.decode(result.value)
                if record is not None and record.peer_key == key:
                    on_done(record)
                else:
                    on_done(None)  # replica held garbage under this key
            elif result.error == NOT_FOUND:
                on_done(None)
            else:
                on_done("error")

        self.node.iterative_find_value(key, looked_up)

    # -- calling -------------------------------------------------------------

    def _connect(self, conn: ClientConn, frame: dict) -> None:
        to = frame.get("to")
        if not conn.registered:
            self._error(conn, ERR_BAD_REQUEST, "register before connecting")
            return
        if not isinstance(to, str) or not 1 <= len(to) <= MAX_PEER_NAME:
            self._error(conn, ERR_BAD_REQUEST, "connect needs a peer name")
            return

        def resolved(record) -> None:
            if conn.closed:
                return
            if record == "error":
                self._error(conn, ERR_RELAY_FAILED, f"lookup for {to!r} failed")
                return
            if record is None:
                self._error(conn, ERR_PEER_NOT_FOUND, to)
                return
            sid = format(self.node.rng.getrandbits(128), "032x")
            flow = _Flow(
                sid=sid, local=conn.name, remote=to, remote_gateway=record.gateway_contact()
            )
            self.flows[(sid, conn.name)] = flow
            self.stats["sessions_opened"] += 1
            conn.send({"op": "session", "session": sid, "from": to})

        self.resolve(to, resolved)

    # -- outbound signaling -----------------------------------------------

    def _signal(self, conn: ClientConn, frame: dict) -> None:
        if not conn.registered:
            self._error(conn, ERR_BAD_REQUEST, "register before signaling")
            return
        sid = frame.get("session")
        if not isinstance(sid, str) or len(sid) != SESSION_ID_HEX_LEN or not _HEX.issuperset(sid):
            self._error(conn, ERR_BAD_REQUEST, "bad session id")
            return
        flow = self.flows.get((sid, conn.name))
        if flow is None:
            self._error(conn, ERR_BAD_REQUEST, f"unknown session {sid}")
            return
        kind = frame.get("kind")
        if kind not in SIGNAL_KINDS:
            self._error(conn, ERR_BAD_REQUEST, f"bad signal kind {kind!r}")
            return
        seq = frame.get("seq")
        if type(seq) is not int or seq < 1:
            self._error(conn, ERR_BAD_REQUEST, "seq must be a positive integer")
            return
        blob = frame.get("blob")
        if not isinstance(blob, str):
            self._error(conn, ERR_BAD_REQUEST, "blob must be a string")
            return
        if len(blob.encode("utf-8")) > MAX_BLOB:
            # refused here, before any relay traffic is generated
            self._error(conn, ERR_BAD_REQUEST, f"blob exceeds {MAX_BLOB} bytes")
            return
        envelope = SignalEnvelope(
            from_peer=conn.name,
            to_peer=flow.remote,
            session_id=sid,
            seq=seq,
            kind=kind,
            blob=blob,
        )
        flow.outbox.append(envelope)
        self._pump(flow)

    def _pump(self, flow: _Flow) -> None:
        # one envelope in flight per flow: order is preserved end to end
        if flow.sending or not flow.outbox:
            return
        flow.sending = True
        self._relay(flow, flow.outbox.popleft(), attempt=1, re_resolved=False)

    def _relay(self, flow: _Flow, envelope: SignalEnvelope, attempt: int, re_resolved: bool) -> None:
        def replied(msg: RpcMessage | None) -> None:
            if msg is not None and msg.kind == RELAY_OK:
                self.stats["relayed"] += 1
                self._next(flow)
                return
            if msg is not None and msg.kind == RELAY_FAIL:
                if msg.body["reason"] == RELAY_NO_SUCH_PEER and not re_resolved:
                    self._re_resolve_then_retry(flow, envelope, attempt)
                    return
                code = (
                    ERR_PEER_NOT_FOUND
                    if msg.body["reason"] == RELAY_NO_SUCH_PEER
                    else ERR_RELAY_FAILED
                )
                self._give_up(flow, envelope, code)
                return
            # timed out after the RPC layer's own retry: one fresh attempt
            if attempt < 2:
                self.stats["relay_resend"] += 1
                self._relay(flow, envelope, attempt + 1, re_resolved)
                return
            self._give_up(flow, envelope, ERR_RELAY_FAILED)

        self.node.signal_relay(
            flow.remote_gateway, peer_key(flow.remote), envelope, replied
        )

    def _re_resolve_then_retry(self, flow: _Flow, envelope: SignalEnvelope, attempt: int) -> None:
        # the peer may have moved to another gateway; look again once
        def resolved(record) -> None:
            if record is None or record == "error":
                self._give_up(flow, envelope, ERR_PEER_NOT_FOUND)
                return
            flow.remote_gateway = record.gateway_contact()
            self._relay(flow, envelope, attempt, re_resolved=True)

        self.resolve(flow.remote, resolved)

    def _give_up(self, flow: _Flow, envelope: SignalEnvelope, code: str) -> None:
        self.stats["relay_failed"] += 1
        conn = self.clients.get(flow.local)
        if conn is not None:
            self._error(
                conn, code, f"session {envelope.session_id} seq {envelope.seq} undelivered"
            )
        self._next(flow)  # later envelopes still go out; the peer sees the gap

    def _next(self, flow: _Flow) -> None:
        flow.sending = False
        self._pump(flow)

    # -- inbound relays ------------------------------------------------------

    def _on_relay(self, body: dict, sender: Contact) -> tuple[str, dict]:
        envelope = SignalEnvelope.from_wire(body["envelope"])
        dest_key = id_from_hex(body["dest_key"])
        conn = self.clients.get(envelope.to_peer)
        if (
            conn is None
            or conn.closed
            or not conn.registered
            or peer_key(envelope.to_peer) != dest_key
        ):
            return RELAY_FAIL, relay_fail_body(RELAY_NO_SUCH_PEER)
        flow_key = (envelope.session_id, envelope.to_peer)
        flow = self.flows.get(flow_key)
        if flow is None:
            flow = _Flow(
                sid=envelope.session_id,
                local=envelope.to_peer,
                remote=envelope.from_peer,
                remote_gateway=sender,
            )
            self.flows[flow_key] = flow
            self.stats["sessions_accepted"] += 1
            conn.send(
                {"op": "session", "session": envelope.session_id, "from": envelope.from_peer}
            )
        else:
            flow.remote_gateway = sender  # the far side may have moved gateways
        if envelope.seq <= flow.last_seq_in:
            return RELAY_OK, {}  # duplicate from an RPC retry; already delivered
        flow.last_seq_in = envelope.seq
        conn.send(
            {
                "op": "signal",
                "session": envelope.session_id,
                "kind": envelope.kind,
                "seq": envelope.seq,
                "blob": envelope.blob,
            }
        )
        return RELAY_OK, {}
