"""Wire protocol: canonical JSON datagrams for the DHT RPCs and signal relay.

Every message is a single UTF-8 JSON object per datagram with exactly
five top-level fields: rpc_id, sender_id, sender_addr, kind, body.
Encoding is canonical (sorted keys, compact separators) so a given
message has exactly one byte representation. Decoding is strict:
anything that does not match the schema for its kind is rejected with
a typed DecodeError and never reaches the node state machine.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from random import Random

from kadsignal.routing import Contact, id_from_hex, id_to_hex

MAX_DATAGRAM = 64 * 1024
MAX_VALUE = 8 * 1024
MAX_BLOB = 64 * 1024
MAX_CONTACTS = 64
MAX_ADDR_LEN = 256
MAX_PEER_NAME = 256
MAX_TTL = 7 * 24 * 3600

RPC_ID_HEX_LEN = 40
SESSION_ID_HEX_LEN = 32

PING = "PING"
PONG = "PONG"
STORE = "STORE"
STORE_OK = "STORE_OK"
FIND_NODE = "FIND_NODE"
FIND_VALUE = "FIND_VALUE"
NODES = "NODES"
VALUE = "VALUE"
SIGNAL_RELAY = "SIGNAL_RELAY"
RELAY_OK = "RELAY_OK"
RELAY_FAIL = "RELAY_FAIL"

REQUEST_KINDS = frozenset({PING, STORE, FIND_NODE, FIND_VALUE, SIGNAL_RELAY})
RESPONSE_KINDS = frozenset({PONG, STORE_OK, NODES, VALUE, RELAY_OK, RELAY_FAIL})
KINDS = REQUEST_KINDS | RESPONSE_KINDS

# which response kinds may answer each request kind
RESPONSES_FOR = {
    PING: frozenset({PONG}),
    STORE: frozenset({STORE_OK}),
    FIND_NODE: frozenset({NODES}),
    FIND_VALUE: frozenset({NODES, VALUE}),
    SIGNAL_RELAY: frozenset({RELAY_OK, RELAY_FAIL}),
}

RELAY_NO_SUCH_PEER = "NO_SUCH_PEER"
RELAY_FORWARD_FAILED = "FORWARD_FAILED"

SIGNAL_KINDS = frozenset({"offer", "answer", "candidate", "bye"})

_HEX = frozenset("0123456789abcdef")


class ProtocolError(Exception):
    """Attempt to encode a message that violates the wire schema."""


class DecodeError(Exception):
    """Rejected inbound datagram. ``reason`` is one of malformed / unknown_kind / oversize."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


def _malformed(detail: str) -> DecodeError:
    return DecodeError("malformed", detail)


@dataclass(slots=True)
class RpcMessage:
    """One parsed datagram. ``body`` holds wire-shaped fields per kind."""

    rpc_id: int
    sender_id: int
    sender_addr: str
    kind: str
    body: dict

    def sender_contact(self, now: float = 0.0) -> Contact:
        return Contact(self.sender_id, self.sender_addr, first_seen=now, last_seen=now)


def new_rpc_id(rng: Random) -> int:
    return rng.getrandbits(160)


@dataclass(slots=True)
class SignalEnvelope:
    """Opaque signaling payload relayed gateway-to-gateway.

    ``blob`` is carried untouched end to end; the DHT layer never
    inspects it. ``seq`` orders envelopes within one direction of a
    session and doubles as the duplicate filter for retried relays.
    """

    from_peer: str
    to_peer: str
    session_id: str
    seq: int
    kind: str
    blob: str

    def wire(self) -> dict:
        return {
            "from_peer": self.from_peer,
            "to_peer": self.to_peer,
            "session_id": self.session_id,
            "seq": self.seq,
            "kind": self.kind,
            "blob": self.blob,
        }

    @classmethod
    def from_wire(cls, obj: dict) -> SignalEnvelope:
        _check_envelope(obj)
        return cls(
            from_peer=obj["from_peer"],
            to_peer=obj["to_peer"],
            session_id=obj["session_id"],
            seq=obj["seq"],
            kind=obj["kind"],
            blob=obj["blob"],
        )


# -- field validators --------------------------------------------------


def _check_hex(value, width: int, label: str) -> int:
    if not isinstance(value, str) or len(value) != width or not _HEX.issuperset(value):
        raise _malformed(f"{label} must be {width} lowercase hex digits")
    return int(value, 16)


def _check_str(value, label: str, max_len: int, min_len: int = 1) -> str:
    if not isinstance(value, str) or not min_len <= len(value) <= max_len:
        raise _malformed(f"{label} must be a string of {min_len}..{max_len} chars")
    return value


def _check_int(value, label: str, lo: int, hi: int) -> int:
    if type(value) is not int or not lo <= value <= hi:
        raise _malformed(f"{label} must be an integer in [{lo}, {hi}]")
    return value


def _check_keys(body: dict, expected: frozenset[str], kind: str) -> None:
    if set(body) != expected:
        raise _malformed(f"{kind} body must have exactly fields {sorted(expected)}")


def _check_value_b64(value) -> bytes:
    text = _check_str(value, "value_b64", 2 * MAX_VALUE)
    try:
        raw = base64.b64decode(text, validate=True)
    except Exception:
        raise _malformed("value_b64 is not valid base64") from None
    if base64.b64encode(raw).decode("ascii") != text:
        raise _malformed("value_b64 is not canonical base64")
    if not 1 <= len(raw) <= MAX_VALUE:
        raise _malformed(f"value must be 1..{MAX_VALUE} bytes")
    return raw


def _check_envelope(obj) -> None:
    if not isinstance(obj, dict):
        raise _malformed("envelope must be an object")
    _check_keys(
        obj,
        frozenset({"from_peer", "to_peer", "session_id", "seq", "kind", "blob"}),
        "envelope",
    )
    _check_str(obj["from_peer"], "from_peer", MAX_PEER_NAME)
    _check_str(obj["to_peer"], "to_peer", MAX_PEER_NAME)
    _check_hex(obj["session_id"], SESSION_ID_HEX_LEN, "session_id")
    _check_int(obj["seq"], "seq", 1, 1 << 53)
    if obj["kind"] not in SIGNAL_KINDS:
        raise _malformed(f"envelope kind must be one of {sorted(SIGNAL_KINDS)}")
    blob = obj["blob"]
    if not isinstance(blob, str):
        raise _malformed("blob must be a string")
    if len(blob.encode("utf-8")) > MAX_BLOB:
        raise _malformed(f"blob exceeds {MAX_BLOB} bytes")


_EMPTY = frozenset()
_BODY_FIELDS = {
    PING: _EMPTY,
    PONG: _EMPTY,
    STORE_OK: _EMPTY,
    RELAY_OK: _EMPTY,
    STORE: frozenset({"key", "ttl", "value_b64"}),
    FIND_NODE: frozenset({"target"}),
    FIND_VALUE: frozenset({"target"}),
    NODES: frozenset({"contacts"}),
    VALUE: frozenset({"ttl", "value_b64"}),
    SIGNAL_RELAY: frozenset({"dest_key", "envelope"}),
    RELAY_FAIL: frozenset({"reason"}),
}


def validate_body(kind: str, body) -> None:
    """Raise DecodeError unless ``body`` matches the schema for ``kind``."""
    if not isinstance(body, dict):
        raise _malformed("body must be an object")
    _check_keys(body, _BODY_FIELDS[kind], kind)
    if kind == STORE:
        _check_hex(body["key"], 40, "key")
        _check_int(body["ttl"], "ttl", 1, MAX_TTL)
        _check_value_b64(body["value_b64"])
    elif kind in (FIND_NODE, FIND_VALUE):
        _check_hex(body["target"], 40, "target")
    elif kind == NODES:
        contacts = body["contacts"]
        if not isinstance(contacts, list) or len(contacts) > MAX_CONTACTS:
            raise _malformed(f"contacts must be a list of at most {MAX_CONTACTS}")
        seen = set()
        for item in contacts:
            if not isinstance(item, dict) or set(item) != {"id", "addr"}:
                raise _malformed("each contact must have exactly fields id, addr")
            cid = _check_hex(item["id"], 40, "contact id")
            _check_str(item["addr"], "contact addr", MAX_ADDR_LEN)
            if cid in seen:
                raise _malformed("duplicate contact id")
            seen.add(cid)
    elif kind == VALUE:
        _check_int(body["ttl"], "ttl", 1, MAX_TTL)
        _check_value_b64(body["value_b64"])
    elif kind == SIGNAL_RELAY:
        _check_hex(body["dest_key"], 40, "dest_key")
        _check_envelope(body["envelope"])
    elif kind == RELAY_FAIL:
        _check_str(body["reason"], "reason", 64)


def encode(msg: RpcMessage) -> bytes:
    """Canonical bytes for ``msg``; raises ProtocolError on schema or size violations."""
    if msg.kind not in KINDS:
        raise ProtocolError(f"unknown kind {msg.kind!r}")
    try:
        validate_body(msg.kind, msg.body)
    except DecodeError as exc:
        raise ProtocolError(str(exc)) from None
    obj = {
        "rpc_id": id_to_hex(msg.rpc_id),
        "sender_id": id_to_hex(msg.sender_id),
        "sender_addr": msg.sender_addr,
        "kind": msg.kind,
        "body": msg.body,
    }
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    if len(raw) > MAX_DATAGRAM:
        raise ProtocolError(f"encoded message is {len(raw)} bytes, max {MAX_DATAGRAM}")
    return raw


def decode(raw: bytes) -> RpcMessage:
    """Parse one datagram, enforcing the full schema for its kind."""
    if len(raw) > MAX_DATAGRAM:
        raise DecodeError("oversize", f"{len(raw)} bytes")
    try:
        obj = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, ValueError):
        raise _malformed("not a UTF-8 JSON document") from None
    if not isinstance(obj, dict):
        raise _malformed("top level must be an object")
    if set(obj) != {"rpc_id", "sender_id", "sender_addr", "kind", "body"}:
        raise _malformed("wrong top-level fields")
    kind = obj["kind"]
    if not isinstance(kind, str) or kind != kind.upper():
        raise _malformed("kind must be an uppercase string")
    if kind not in KINDS:
        raise DecodeError("unknown_kind", kind[:32])
    rpc_id = _check_hex(obj["rpc_id"], RPC_ID_HEX_LEN, "rpc_id")
    sender_id = _check_hex(obj["sender_id"], 40, "sender_id")
    sender_addr = _check_str(obj["sender_addr"], "sender_addr", MAX_ADDR_LEN)
    validate_body(kind, obj["body"])
    return RpcMessage(rpc_id, sender_id, sender_addr, kind, obj["body"])


# -- body constructors used by the node -------------------------------


def store_body(key: int, value: bytes, ttl: int) -> dict:
    return {
        "key": id_to_hex(key),
        "ttl": ttl,
        "value_b64": base64.b64encode(value).decode("ascii"),
    }


def find_body(target: int) -> dict:
    return {"target": id_to_hex(target)}


def nodes_body(contacts: list[Contact]) -> dict:
    return {"contacts": [c.wire() for c in contacts]}


def value_body(value: bytes, ttl: int) -> dict:
    return {"ttl": ttl, "value_b64": base64.b64encode(value).decode("ascii")}


def relay_body(dest_key: int, envelope: SignalEnvelope) -> dict:
    return {"dest_key": id_to_hex(dest_key), "envelope": envelope.wire()}


def relay_fail_body(reason: str) -> dict:
    return {"reason": reason}


def contacts_from_body(body: dict) -> list[Contact]:
    return [Contact(id_from_hex(item["id"]), item["addr"]) for item in body["contacts"]]


def value_from_body(body: dict) -> tuple[bytes, int]:
    return base64.b64decode(body["value_b64"]), body["ttl"]


# -- in-flight request tracking ----------------------------------------


@dataclass(slots=True)
class PendingRequest:
    """Bookkeeping for one outstanding RPC awaiting its response."""

    rpc_id: int
    kind: str
    dest_addr: str
    dest_id: int | None
    payload: bytes
    on_reply: object  # Callable[[RpcMessage | None], None]
    issued_at: float
    attempts_left: int
    timer: object = None


class PendingTable:
    """Outstanding RPCs keyed by rpc_id; each entry is consumed exactly once."""

    def __init__(self):
        self._entries: dict[int, PendingRequest] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, rpc_id: int) -> bool:
        return rpc_id in self._entries

    def add(self, req: PendingRequest) -> None:
        if req.rpc_id in self._entries:
            raise ValueError(f"rpc_id collision: {req.rpc_id:#x}")
        self._entries[req.rpc_id] = req

    def get(self, rpc_id: int) -> PendingRequest | None:
        return self._entries.get(rpc_id)

    def pop(self, rpc_id: int) -> PendingRequest | None:
        return self._entries.pop(rpc_id, None)

    def match_response(self, resp: RpcMessage) -> PendingRequest | None:
        """Consume and return the request ``resp`` answers, or None.

        None means unsolicited: unknown rpc_id, an id already consumed
        by an earlier (e.g. duplicated) response, or a response kind
        that the original request cannot produce. A kind mismatch does
        not consume the entry, so the legitimate response can still
        arrive.
        """
        req = self._entries.get(resp.rpc_id)
        if req is None or resp.kind not in RESPONSES_FOR[req.kind]:
            return None
        del self._entries[resp.rpc_id]
        return req

    def drain(self) -> list[PendingRequest]:
        """Remove and return everything outstanding (node shutdown)."""
        entries = list(self._entries.values())
        self._entries.clear()
        return entries
