"""The Kademlia node: RPC handling, iterative lookups, storage, join, refresh.

One KademliaNode is a pure event-driven state machine. It owns a
routing table, a record store and a table of in-flight RPCs, and it
reacts to exactly three stimuli: an inbound datagram, an RPC timeout,
and a maintenance timer. All I/O goes through the reactor handed to
the constructor, so the same code runs unchanged on the simulated
network and on real UDP sockets.

Public operations are callback-style: they return immediately and
invoke ``on_done`` with a result object once the network has answered.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from random import Random

from kadsignal.protocol import (
    FIND_NODE,
    FIND_VALUE,
    MAX_VALUE,
    NODES,
    PING,
    PONG,
    RELAY_FAIL,
    REQUEST_KINDS,
    SIGNAL_RELAY,
    STORE,
    STORE_OK,
    VALUE,
    DecodeError,
    PendingRequest,
    PendingTable,
    RpcMessage,
    SignalEnvelope,
    contacts_from_body,
    decode,
    encode,
    find_body,
    new_rpc_id,
    nodes_body,
    relay_body,
    relay_fail_body,
    store_body,
    value_body,
    value_from_body,
)
from kadsignal.routing import (
    DEFAULT_ALPHA,
    DEFAULT_K,
    ID_BITS,
    Contact,
    RoutingTable,
    UpdateOutcome,
    id_from_hex,
    random_node_id,
)
from kadsignal.transport import Reactor

log = logging.getLogger(__name__)

NOT_JOINED = "NotJoined"
ALL_QUERIES_FAILED = "AllQueriesFailed"
NOT_FOUND = "NotFound"
STORE_FAILED = "StoreFailed"
JOIN_FAILED = "JoinFailed"

# shortlist entry states during an iterative lookup
_NEW, _INFLIGHT, _OK, _FAILED = range(4)


@dataclass(slots=True)
class NodeConfig:
    k: int = DEFAULT_K
    alpha: int = DEFAULT_ALPHA
    rpc_timeout: float = 1.0
    rpc_retries: int = 1
    record_ttl: int = 3600
    republish_interval: float = 1800.0
    refresh_interval: float = 3600.0

    def __post_init__(self):
        if not 1 <= self.alpha <= self.k:
            raise ValueError("alpha must satisfy 1 <= alpha <= k")
        if self.rpc_timeout <= 0 or self.rpc_retries < 0:
            raise ValueError("bad rpc timing parameters")


@dataclass(slots=True)
class StoredRecord:
    key: int
    value: bytes
    expires_at: float
    stored_at: float
    publisher: int


@dataclass(slots=True)
class LookupResult:
    """Outcome of one iterative lookup.

    ``rounds`` counts the query waves the walk needed, which is the
    hop metric the experiment harness reports. For value lookups,
    ``value`` is set on success and ``error`` is NotFound when the
    walk converged without seeing the key.
    """

    target: int
    contacts: list[Contact] = field(default_factory=list)
    rounds: int = 0
    value: bytes | None = None
    value_ttl: int = 0
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass(slots=True)
class StoreResult:
    acks: int
    targets: int
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass(slots=True)
class JoinReport:
    contacts_learned: int
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _done(cb, result) -> None:
    if cb is not None:
        cb(result)


class _Lookup:
    """One iterative node/value lookup, round-synchronous.

    Each round queries the alpha best unqueried contacts among the k
    closest non-failed shortlist entries and waits for every answer or
    timeout before selecting again. A round that brings nothing closer
    than the best already seen queries every remaining unqueried entry
    of the best k at once, so convergence costs O(log n) rounds instead
    of k/alpha. The walk terminates when the k best have all responded.
    Value lookups short-circuit on the first VALUE response and cache
    the record at the nearest responded contact that did not serve it.
    """

    __slots__ = (
        "node",
        "target",
        "find_value",
        "on_done",
        "entries",
        "rounds",
        "outstanding",
        "finished",
        "closest_seen",
    )

    def __init__(self, node: KademliaNode, target: int, find_value: bool, on_done):
        self.node = node
        self.target = target
        self.find_value = find_value
        self.on_done = on_done
        self.entries: dict[int, list] = {}  # id -> [Contact, state]
        self.rounds = 0
        self.outstanding = 0
        self.finished = False
        self.closest_seen: int | None = None

    def start(self) -> None:
        for contact in self.node.table.closest(self.target, self.node.config.k):
            self.entries[contact.id] = [contact, _NEW]
        if not self.entries:
            self._finish(error=NOT_JOINED)
            return
        self._round()

    def _best(self) -> list[list]:
        alive = [pair for pair in self.entries.values() if pair[1] != _FAILED]
        alive.sort(key=lambda pair: pair[0].id ^ self.target)
        return alive[: self.node.config.k]

    def _round(self) -> None:
        best = self._best()
        batch = [pair for pair in best if pair[1] == _NEW]
        if not batch:
            responded = [pair[0] for pair in best if pair[1] == _OK]
            if not responded:
                self._finish(error=ALL_QUERIES_FAILED)
            elif self.find_value:
                self._finish(contacts=responded, error=NOT_FOUND)
            else:
                self._finish(contacts=responded)
            return
        closest_now = best[0][0].id ^ self.target
        if self.closest_seen is None or closest_now < self.closest_seen:
            batch = batch[: self.node.config.alpha]
        # else: no progress last round, so finish off every unqueried entry
        self.closest_seen = closest_now
        self.rounds += 1
        kind = FIND_VALUE if self.find_value else FIND_NODE
        for pair in batch:
            pair[1] = _INFLIGHT
            self.outstanding += 1
            self.node._send_rpc(
                pair[0].address,
                kind,
                find_body(self.target),
                lambda msg, p=pair: self._on_reply(p, msg),
                dest_id=pair[0].id,
            )

    def _on_reply(self, pair: list, msg: RpcMessage | None) -> None:
        if self.finished:
            return
        self.outstanding -= 1
        if msg is None:
            pair[1] = _FAILED
        else:
            pair[1] = _OK
            if msg.kind == VALUE:
                value, ttl = value_from_body(msg.body)
                self._finish_with_value(value, ttl, source=pair[0])
                return
            for contact in contacts_from_body(msg.body):
                if contact.id != self.node.id and contact.id not in self.entries:
                    self.entries[contact.id] = [contact, _NEW]
        if self.outstanding == 0:
            self._round()

    def _finish_with_value(self, value: bytes, ttl: int, source: Contact) -> None:
        # cache along the path: nearest observed contact that missed it
        for contact, state in self._best():
            if contact.id != source.id:
                self.node._send_rpc(
                    contact.address,
                    STORE,
                    store_body(self.target, value, ttl),
                    None,
                    dest_id=contact.id,
                )
                break
        self._finish(contacts=[source], value=value, value_ttl=ttl)

    def _finish(self, contacts=(), value=None, value_ttl=0, error=None) -> None:
        if self.finished:
            return
        self.finished = True
        _done(
            self.on_done,
            LookupResult(
                target=self.target,
                contacts=list(contacts),
                rounds=self.rounds,
                value=value,
                value_ttl=value_ttl,
                error=error,
            ),
        )


class KademliaNode:
    """One DHT participant; doubles as a relay hop for the signaling overlay."""

    def __init__(
        self,
        reactor: Reactor,
        config: NodeConfig | None = None,
        node_id: int | None = None,
        rng: Random | None = None,
    ):
        self.reactor = reactor
        self.config = config or NodeConfig()
        self.rng = rng or Random()
        self.id = node_id if node_id is not None else random_node_id(self.rng)
        self.table = RoutingTable(self.id, self.config.k)
        self.storage: dict[int, StoredRecord] = {}
        self.pending = PendingTable()
        self.address: str | None = None
        self.stats: Counter = Counter()
        self._publications: dict[int, tuple[bytes, int]] = {}
        self._evicting_buckets: set[int] = set()
        self._relay_handler = None
        self._refresh_timer = None
        self._republish_timer = None

    # -- lifecycle ----------------------------------------------------

    def start(self, address: str | None = None) -> str:
        if self.address is not None:
            raise RuntimeError("node already started")
        self.address = self.reactor.bind(self._on_datagram, address)
        self._refresh_timer = self.reactor.call_later(
            self.config.refresh_interval, self._refresh_tick
        )
        self._republish_timer = self.reactor.call_later(
            self.config.republish_interval, self._republish_tick
        )
        return self.address

    def stop(self) -> None:
        if self.address is not None:
            self.reactor.unbind(self.address)
            self.address = None
        for timer in (self._refresh_timer, self._republish_timer):
            if timer is not None:
                timer.cancel()
        self._refresh_timer = self._republish_timer = None
        for req in self.pending.drain():
            if req.timer is not None:
                req.timer.cancel()

    @property
    def running(self) -> bool:
        return self.address is not None

    def contact(self) -> Contact:
        if self.address is None:
            raise RuntimeError("node is not started")
        now = self.reactor.now()
        return Contact(self.id, self.address, first_seen=now, last_seen=now)

    def set_relay_handler(self, handler) -> None:
        """Install the overlay hook for SIGNAL_RELAY requests.

        ``handler(body, sender)`` must return a ``(kind, body)`` reply
        pair with kind RELAY_OK or RELAY_FAIL. Without a handler every
        relay is answered RELAY_FAIL/NO_SUCH_PEER: a plain DHT node
        forwards nothing.
        """
        self._relay_handler = handler

    # -- inbound ------------------------------------------------------

    def _on_datagram(self, src: str, raw: bytes) -> None:
        try:
            msg = decode(raw)
        except DecodeError as exc:
            self.stats[f"drop:{exc.reason}"] += 1
            return
        now = self.reactor.now()
        if msg.sender_id != self.id:
            self._observe_contact(msg.sender_contact(now))
        if msg.kind in REQUEST_KINDS:
            self.stats[f"handled:{msg.kind}"] += 1
            reply = self.handle_rpc(msg)
            if reply is not None:
                self._send_datagram(msg.sender_addr, reply)
            return
        req = self.pending.match_response(msg)
        if req is None:
            self.stats["drop:unsolicited"] += 1
            return
        if req.timer is not None:
            req.timer.cancel()
        req.on_reply(msg)

    def handle_rpc(self, msg: RpcMessage) -> RpcMessage | None:
        """Compute the response for one request datagram.

        Bodies were schema-checked during decode, so field access is
        safe here. Exposed for direct-drive tests.
        """
        now = self.reactor.now()
        body = msg.body
        if msg.kind == PING:
            return self._reply(msg, PONG, {})
        if msg.kind == STORE:
            key = id_from_hex(body["key"])
            value, ttl = value_from_body(body)
            self.storage[key] = StoredRecord(
                key=key,
                value=value,
                expires_at=now + ttl,
                stored_at=now,
                publisher=msg.sender_id,
            )
            return self._reply(msg, STORE_OK, {})
        if msg.kind == FIND_NODE:
            target = id_from_hex(body["target"])
            closest = self.table.closest(target, self.config.k, exclude={msg.sender_id})
            return self._reply(msg, NODES, nodes_body(closest))
        if msg.kind == FIND_VALUE:
            target = id_from_hex(body["target"])
            record = self._live_record(target, now)
            if record is not None:
                remaining = max(1, round(record.expires_at - now))
                return self._reply(msg, VALUE, value_body(record.value, remaining))
            closest = self.table.closest(target, self.config.k, exclude={msg.sender_id})
            return self._reply(msg, NODES, nodes_body(closest))
        if msg.kind == SIGNAL_RELAY:
            if self._relay_handler is None:
                return self._reply(msg, RELAY_FAIL, relay_fail_body("NO_SUCH_PEER"))
            kind, reply_body = self._relay_handler(body, msg.sender_contact(now))
            return self._reply(msg, kind, reply_body)
        return None

    def _live_record(self, key: int, now: float) -> StoredRecord | None:
        record = self.storage.get(key)
        if record is not None and record.expires_at <= now:
            del self.storage[key]
            return None
        return record

    # -- routing table upkeep -------------------------------------------

    def _observe_contact(self, contact: Contact) -> None:
        """Feed every message sender through the bucket discipline."""
        outcome, eldest = self.table.update_contact(contact)
        if outcome != UpdateOutcome.BUCKET_FULL:
            return
        bucket = (self.id ^ contact.id).bit_length() - 1
        if bucket in self._evicting_buckets:
            return  # probe already under way; this candidate loses
        self._evicting_buckets.add(bucket)

        def verdict(alive: bool) -> None:
            self.table.resolve_eviction(eldest, alive, contact)
            self._evicting_buckets.discard(bucket)

        self.ping_contact(eldest, verdict)

    def ping_contact(self, contact: Contact, on_done=None) -> None:
        """PING a known contact; ``on_done(alive: bool)``."""
        self._send_rpc(
            contact.address,
            PING,
            {},
            None if on_done is None else (lambda msg: on_done(msg is not None)),
            dest_id=contact.id,
        )

    def ping_addr(self, address: str, on_done) -> None:
        """PING a bare address; ``on_done(Contact | None)`` reveals its identity."""
        self._send_rpc(
            address,
            PING,
            {},
            lambda msg: on_done(None if msg is None else msg.sender_contact(self.reactor.now())),
        )

    # -- outbound RPC machinery ------------------------------------------

    def _send_rpc(self, dest_addr: str, kind: str, body: dict, on_reply, dest_id=None) -> None:
        if self.address is None:
            _done(on_reply, None)
            return
        rpc_id = new_rpc_id(self.rng)
        while rpc_id in self.pending:
            rpc_id = new_rpc_id(self.rng)
        msg = RpcMessage(rpc_id, self.id, self.address, kind, body)
        req = PendingRequest(
            rpc_id=rpc_id,
            kind=kind,
            dest_addr=dest_addr,
            dest_id=dest_id,
            payload=encode(msg),
            on_reply=on_reply if on_reply is not None else (lambda m: None),
            issued_at=self.reactor.now(),
            attempts_left=self.config.rpc_retries,
        )
        self.pending.add(req)
        self.stats[f"sent:{kind}"] += 1
        self._transmit(req)

    def _transmit(self, req: PendingRequest) -> None:
        self.reactor.send(self.address, req.dest_addr, req.payload)
        req.timer = self.reactor.call_later(
            self.config.rpc_timeout, lambda: self._rpc_timed_out(req.rpc_id)
        )

    def _rpc_timed_out(self, rpc_id: int) -> None:
        req = self.pending.get(rpc_id)
        if req is None:
            return
        if req.attempts_left > 0 and self.address is not None:
            req.attempts_left -= 1
            self.stats["rpc:retry"] += 1
            self._transmit(req)
            return
        self.pending.pop(rpc_id)
        self.stats["rpc:timeout"] += 1
        if req.dest_id is not None:
            entry = self.table.get(req.dest_id)
            if entry is not None:
                entry.stale = True
        req.on_reply(None)

    def _reply(self, request: RpcMessage, kind: str, body: dict) -> RpcMessage:
        return RpcMessage(request.rpc_id, self.id, self.address, kind, body)

    def _send_datagram(self, dst: str, msg: RpcMessage) -> None:
        self.reactor.send(self.address, dst, encode(msg))

    # -- public operations -------------------------------------------------

    def iterative_find_node(self, target: int, on_done=None) -> None:
        """Walk the network towards ``target``; yields the k closest contacts."""
        self.table.note_lookup(target, self.reactor.now())
        _Lookup(self, target, find_value=False, on_done=on_done).start()

    def iterative_find_value(self, key: int, on_done=None) -> None:
        """Like find_node but returns the stored value if any replica holds it."""
        now = self.reactor.now()
        record = self._live_record(key, now)
        if record is not None:
            _done(
                on_done,
                LookupResult(
                    target=key,
                    contacts=[],
                    rounds=0,
                    value=record.value,
                    value_ttl=max(1, round(record.expires_at - now)),
                ),
            )
            return
        self.table.note_lookup(key, now)
        _Lookup(self, key, find_value=True, on_done=on_done).start()

    def store(self, key: int, value: bytes, on_done=None, ttl: int | None = None, republish: bool = True) -> None:
        """Place ``value`` on the k nodes closest to ``key``.

        With ``republish`` the node re-stores the record every
        republish_interval until stop(), keeping it alive past the TTL
        for as long as the publisher itself stays up.
        """
        if not 1 <= len(value) <= MAX_VALUE:
            raise ValueError(f"value must be 1..{MAX_VALUE} bytes")
        ttl = self.config.record_ttl if ttl is None else ttl
        if ttl < 1:
            raise ValueError("ttl must be positive")
        if republish:
            self._publications[key] = (value, ttl)
        self._store_once(key, value, ttl, on_done)

    def unpublish(self, key: int) -> None:
        """Stop republishing ``key``; existing replicas age out via TTL."""
        self._publications.pop(key, None)

    def _store_once(self, key: int, value: bytes, ttl: int, on_done) -> None:
        def after_lookup(found: LookupResult) -> None:
            if not found.ok or not found.contacts:
                _done(on_done, StoreResult(0, 0, error=found.error or STORE_FAILED))
                return
            targets = found.contacts
            progress = {"acks": 0, "done": 0}

            def on_ack(msg: RpcMessage | None) -> None:
                progress["done"] += 1
                if msg is not None:
                    progress["acks"] += 1
                if progress["done"] == len(targets):
                    error = None if progress["acks"] else STORE_FAILED
                    _done(on_done, StoreResult(progress["acks"], len(targets), error))

            for contact in targets:
                self._send_rpc(
                    contact.address,
                    STORE,
                    store_body(key, value, ttl),
                    on_ack,
                    dest_id=contact.id,
                )

        self.iterative_find_node(key, after_lookup)

    def signal_relay(self, gateway: Contact, dest_key: int, envelope: SignalEnvelope, on_done) -> None:
        """Forward a signaling envelope to the gateway currently serving its target."""
        self._send_rpc(
            gateway.address,
            SIGNAL_RELAY,
            relay_body(dest_key, envelope),
            on_done,
            dest_id=gateway.id,
        )

    def join(self, bootstrap: Contact, on_done=None) -> None:
        """Enter the network through one known node.

        Inserts the bootstrap contact, looks up our own ID to populate
        the buckets between us and it, then refreshes every bucket
        farther than our closest neighbour so the table covers the
        whole ID space. JoinFailed surfaces after the bootstrap's
        final retry times out.
        """
        if bootstrap.id == self.id or self.address is None:
            _done(on_done, JoinReport(0, error=JOIN_FAILED))
            return
        now = self.reactor.now()
        self._observe_contact(Contact(bootstrap.id, bootstrap.address, now, now))

        def after_self_lookup(result: LookupResult) -> None:
            if result.error in (ALL_QUERIES_FAILED, NOT_JOINED):
                log.debug("join via %s failed: %s", bootstrap.address, result.error)
                _done(on_done, JoinReport(0, error=JOIN_FAILED))
                return
            self._refresh_far_buckets(on_done)

        self.iterative_find_node(self.id, after_self_lookup)

    def _refresh_far_buckets(self, on_done) -> None:
        occupied = [i for i, b in enumerate(self.table.buckets) if b.entries]
        indices = list(range(min(occupied) + 1, ID_BITS)) if occupied else []
        remaining = {"n": len(indices)}
        if not indices:
            _done(on_done, JoinReport(self.table.contact_count()))
            return

        def one_done(_result: LookupResult) -> None:
            remaining["n"] -= 1
            if remaining["n"] == 0:
                _done(on_done, JoinReport(self.table.contact_count()))

        for index in indices:
            self.iterative_find_node(self.table.random_id_in_bucket(index, self.rng), one_done)

    def join_addr(self, address: str, on_done=None) -> None:
        """Join knowing only the bootstrap's transport address."""

        def with_identity(contact: Contact | None) -> None:
            if contact is None:
                _done(on_done, JoinReport(0, error=JOIN_FAILED))
            else:
                self.join(contact, on_done)

        self.ping_addr(address, with_identity)

    def refresh_buckets(self, now: float | None = None) -> list[int]:
        """Re-look-up a random ID in every stale, non-empty bucket.

        Returns the refreshed bucket indices. Healing after churn and
        steady-state liveness both come down to this.
        """
        now = self.reactor.now() if now is None else now
        indices = self.table.stale_buckets(now, self.config.refresh_interval)
        for index in indices:
            self.iterative_find_node(self.table.random_id_in_bucket(index, self.rng))
        return indices

    # -- maintenance timers ----------------------------------------------

    def _refresh_tick(self) -> None:
        self.refresh_buckets()
        self._refresh_timer = self.reactor.call_later(
            self.config.refresh_interval, self._refresh_tick
        )

    def _republish_tick(self) -> None:
        for key, (value, ttl) in list(self._publications.items()):
            self._store_once(key, value, ttl, None)
        self._republish_timer = self.reactor.call_later(
            self.config.republish_interval, self._republish_tick
        )
