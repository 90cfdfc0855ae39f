"""Gateway behavior: presence, resolution, relay ordering, failure surfacing."""

from __future__ import annotations

import hashlib
import json

import pytest

from helpers import build_network, wait_for
from kadsignal import protocol
from kadsignal.overlay import (
    ERR_BAD_REQUEST,
    ERR_PEER_NOT_FOUND,
    ERR_REGISTER_FAILED,
    ERR_RELAY_FAILED,
    PRESENCE_TTL,
    Gateway,
    LocalPipe,
    PresenceRecord,
    best_presence,
    peer_key,
)
from kadsignal.protocol import SignalEnvelope, relay_body
from kadsignal.routing import Contact, node_id_from_name

OFFER_BLOB = json.dumps({"type": "offer", "sdp": "v=0\r\no=- 46117 2 IN IP4 127.0.0.1\r\n"})
WEIRD_BLOB = '{"sdp":"a=candidate:1 1 UDP 2122252543","note":"\\u00e9\\u4e2d🎥 spaces  and\\ttabs"}'


def make_overlay(n, seed=0, **net_kw):
    sim, nodes = build_network(n, seed=seed, **net_kw)
    gateways = [Gateway(node) for node in nodes]
    return sim, nodes, gateways


def frames_of(pipe, op):
    return [f for f in pipe.frames if f.get("op") == op]


def wait_frame(sim, pipe, op, count=1, max_time=60.0):
    ok = sim.run_until(lambda: len(frames_of(pipe, op)) >= count, max_time=max_time)
    assert ok, f"never saw {count} x {op!r}; got {pipe.frames}"
    return frames_of(pipe, op)[count - 1]


def attach_registered(sim, gateway, name):
    pipe = LocalPipe()
    conn = gateway.attach(pipe)
    gateway.on_client_frame(conn, {"op": "register", "name": name})
    frame = wait_frame(sim, pipe, "registered")
    assert frame["replicas"] >= 1
    return conn, pipe


def send_signal(gateway, conn, sid, kind, seq, blob):
    gateway.on_client_frame(
        conn, {"op": "signal", "session": sid, "kind": kind, "seq": seq, "blob": blob}
    )


# -- presence records ---------------------------------------------------


def test_presence_record_round_trip():
    record = PresenceRecord(peer_key("bob"), 42, "sim:9", 1234)
    assert PresenceRecord.decode(record.encode()) == record


@pytest.mark.parametrize(
    "raw",
    [
        b"",
        b"not json",
        b"[]",
        b'{"gateway_addr":"a","gateway_id":"zz","peer_key":"00","seq":1}',
        json.dumps({"gateway_addr": "a", "gateway_id": "0" * 40, "peer_key": "0" * 40, "seq": -1}).encode(),
        json.dumps({"gateway_addr": "a", "gateway_id": "0" * 40, "peer_key": "0" * 40, "seq": 1, "x": 2}).encode(),
    ],
)
def test_presence_record_rejects_garbage(raw):
    assert PresenceRecord.decode(raw) is None


def test_best_presence_orders_by_seq_then_gateway():
    a = PresenceRecord(1, gateway_id=5, gateway_addr="sim:1", seq=10)
    b = PresenceRecord(1, gateway_id=9, gateway_addr="sim:2", seq=11)
    tie = PresenceRecord(1, gateway_id=9, gateway_addr="sim:2", seq=10)
    assert best_presence([a, b]) is b  # higher seq wins
    assert best_presence([a, tie]) is tie  # tie: larger gateway id wins
    assert best_presence([]) is None


def test_peer_key_is_name_hash():
    assert peer_key("alice") == node_id_from_name("alice")


# -- registration --------------------------------------------------------


def test_register_stores_presence_on_k_nodes():
    sim, nodes, gws = make_overlay(30, seed=61)
    _, pipe = attach_registered(sim, gws[2], "alice")
    assert frames_of(pipe, "registered")[0]["replicas"] == nodes[0].config.k
    holders = sum(1 for n in nodes if peer_key("alice") in n.storage)
    assert holders == nodes[0].config.k


def test_register_name_conflict_on_same_gateway():
    sim, nodes, gws = make_overlay(8, seed=63)
    attach_registered(sim, gws[1], "alice")
    pipe2 = LocalPipe()
    conn2 = gws[1].attach(pipe2)
    gws[1].on_client_frame(conn2, {"op": "register", "name": "alice"})
    err = wait_frame(sim, pipe2, "error")
    assert err["code"] == ERR_REGISTER_FAILED


def test_register_rejects_bad_frames():
    sim, nodes, gws = make_overlay(8, seed=65)
    gw = gws[0]
    for frame in [
        "not a dict",
        {"op": "register"},
        {"op": "register", "name": ""},
        {"op": "register", "name": "x" * 300},
        {"op": "dance"},
    ]:
        pipe = LocalPipe()
        conn = gw.attach(pipe)
        gw.on_client_frame(conn, frame)
        assert frames_of(pipe, "error")[0]["code"] == ERR_BAD_REQUEST

    # double registration on one connection
    conn, pipe = attach_registered(sim, gw, "solo")
    gw.on_client_frame(conn, {"op": "register", "name": "solo2"})
    assert frames_of(pipe, "error")[0]["code"] == ERR_BAD_REQUEST


def test_handle_client_text_parses_json():
    sim, nodes, gws = make_overlay(8, seed=67)
    pipe = LocalPipe()
    conn = gws[0].attach(pipe)
    gws[0].handle_client_text(conn, b"\xff\xfe garbage")
    assert frames_of(pipe, "error")[0]["code"] == ERR_BAD_REQUEST
    gws[0].handle_client_text(conn, json.dumps({"op": "register", "name": "textual"}))
    wait_frame(sim, pipe, "registered")


# -- resolution and connection -------------------------------------------


def test_connect_unknown_peer_yields_not_found_without_relay_traffic():
    sim, nodes, gws = make_overlay(10, seed=71)
    conn, pipe = attach_registered(sim, gws[4], "alice")
    gws[4].on_client_frame(conn, {"op": "connect", "to": "nobody"})
    err = wait_frame(sim, pipe, "error")
    assert err["code"] == ERR_PEER_NOT_FOUND
    assert all(n.stats["sent:SIGNAL_RELAY"] == 0 for n in nodes)
    assert frames_of(pipe, "session") == []


def test_connect_before_register_is_refused():
    sim, nodes, gws = make_overlay(8, seed=73)
    pipe = LocalPipe()
    conn = gws[0].attach(pipe)
    gws[0].on_client_frame(conn, {"op": "connect", "to": "bob"})
    assert frames_of(pipe, "error")[0]["code"] == ERR_BAD_REQUEST


def test_presence_expires_after_client_closes():
    sim, nodes, gws = make_overlay(12, seed=75)
    conn_b, _ = attach_registered(sim, gws[7], "bob")
    gws[7].on_client_frame(conn_b, {"op": "leave"})  # websocket closed
    assert conn_b.closed
    sim.advance_clock(sim.now() + PRESENCE_TTL + 1)

    conn_a, pipe_a = attach_registered(sim, gws[2], "alice")
    gws[2].on_client_frame(conn_a, {"op": "connect", "to": "bob"})
    err = wait_frame(sim, pipe_a, "error")
    assert err["code"] == ERR_PEER_NOT_FOUND


def test_presence_refresh_keeps_record_alive():
    sim, nodes, gws = make_overlay(12, seed=77)
    attach_registered(sim, gws[3], "bob")
    sim.advance_clock(sim.now() + 2 * PRESENCE_TTL + 5)  # far past one TTL
    conn_a, pipe_a = attach_registered(sim, gws[8], "alice")
    gws[8].on_client_frame(conn_a, {"op": "connect", "to": "bob"})
    frame = wait_frame(sim, pipe_a, "session")
    assert frame["from"] == "bob"


# -- the full signaling exchange -------------------------------------------


def run_exchange(sim, gws, gw_a, gw_b, name_a="alice", name_b="bob"):
    """Register two peers, open a session, trade offer/answer + candidates.

    Returns (pipe_a, pipe_b, sid). Asserts ordering and blob opacity.
    """
    conn_a, pipe_a = attach_registered(sim, gw_a, name_a)
    conn_b, pipe_b = attach_registered(sim, gw_b, name_b)

    gw_a.on_client_frame(conn_a, {"op": "connect", "to": name_b})
    sid = wait_frame(sim, pipe_a, "session")["session"]

    a_blobs = [OFFER_BLOB, WEIRD_BLOB, "candidate-two"]
    for seq, (kind, blob) in enumerate(zip(["offer", "candidate", "candidate"], a_blobs), start=1):
        send_signal(gw_a, conn_a, sid, kind, seq, blob)

    session_b = wait_frame(sim, pipe_b, "session")
    assert session_b["session"] == sid and session_b["from"] == name_a
    wait_frame(sim, pipe_b, "signal", count=3)
    got_b = frames_of(pipe_b, "signal")
    assert [f["seq"] for f in got_b] == [1, 2, 3]
    assert [f["kind"] for f in got_b] == ["offer", "candidate", "candidate"]
    # blobs arrive byte-identical: the overlay never parses them
    for frame, blob in zip(got_b, a_blobs):
        assert hashlib.sha256(frame["blob"].encode()).digest() == hashlib.sha256(blob.encode()).digest()

    b_blobs = ["answer-sdp", "b-candidate-1", "b-candidate-2"]
    for seq, (kind, blob) in enumerate(zip(["answer", "candidate", "candidate"], b_blobs), start=1):
        send_signal(gw_b, conn_b, sid, kind, seq, blob)
    wait_frame(sim, pipe_a, "signal", count=3)
    got_a = frames_of(pipe_a, "signal")
    assert [f["seq"] for f in got_a] == [1, 2, 3]
    assert [f["blob"] for f in got_a] == b_blobs
    return pipe_a, pipe_b, sid


def test_full_exchange_between_two_gateways():
    sim, nodes, gws = make_overlay(16, seed=101)
    run_exchange(sim, gws, gws[3], gws[9])


def test_full_exchange_on_one_shared_gateway():
    sim, nodes, gws = make_overlay(10, seed=103)
    run_exchange(sim, gws, gws[5], gws[5])


@pytest.mark.parametrize("n", [8, 64])
def test_exchange_works_at_scale(n):
    sim, nodes, gws = make_overlay(n, seed=200 + n)
    run_exchange(sim, gws, gws[1], gws[n // 2])


def test_reregistration_after_silent_disconnect_wins():
    sim, nodes, gws = make_overlay(14, seed=105)
    # bob's first gateway: the pipe dies without a leave frame
    conn_old, pipe_old = attach_registered(sim, gws[4], "bob")
    pipe_old.closed = True  # ungraceful: the gateway is never told

    sim.advance_clock(sim.now() + 2.0)
    # bob reconnects through another gateway; the fresh store must win
    gws[4].detach(conn_old)  # old gateway notices eventually; order-free
    conn_new, pipe_new = attach_registered(sim, gws[11], "bob")

    conn_a, pipe_a = attach_registered(sim, gws[0], "alice")
    gws[0].on_client_frame(conn_a, {"op": "connect", "to": "bob"})
    sid = wait_frame(sim, pipe_a, "session")["session"]
    send_signal(gws[0], conn_a, sid, "offer", 1, "hello-new-home")
    frame = wait_frame(sim, pipe_new, "signal")
    assert frame["blob"] == "hello-new-home"


# -- relay failure surfacing ------------------------------------------------


def test_relay_to_departed_peer_reports_not_found():
    sim, nodes, gws = make_overlay(12, seed=107)
    conn_a, pipe_a = attach_registered(sim, gws[1], "alice")
    conn_b, _ = attach_registered(sim, gws[6], "bob")
    gws[1].on_client_frame(conn_a, {"op": "connect", "to": "bob"})
    sid = wait_frame(sim, pipe_a, "session")["session"]
    # bob leaves between resolution and the first envelope
    gws[6].detach(conn_b)
    send_signal(gws[1], conn_a, sid, "offer", 1, "too-late")
    err = wait_frame(sim, pipe_a, "error")
    assert err["code"] == ERR_PEER_NOT_FOUND


def test_relay_to_killed_gateway_times_out_within_budget():
    sim, nodes, gws = make_overlay(12, seed=109)
    conn_a, pipe_a = attach_registered(sim, gws[2], "alice")
    _, pipe_b = attach_registered(sim, gws[8], "bob")
    gws[2].on_client_frame(conn_a, {"op": "connect", "to": "bob"})
    sid = wait_frame(sim, pipe_a, "session")["session"]

    nodes[8].stop()  # bob's gateway vanishes
    t0 = sim.now()
    send_signal(gws[2], conn_a, sid, "offer", 1, "void")
    err = wait_frame(sim, pipe_a, "error", max_time=30)
    elapsed = sim.now() - t0
    assert err["code"] == ERR_RELAY_FAILED
    # two application attempts, each waiting out timeout + one RPC retry
    budget = 2 * nodes[2].config.rpc_timeout * 2
    assert elapsed <= budget + 0.2
    assert elapsed >= budget - 0.2


def test_oversize_blob_refused_before_any_relay():
    sim, nodes, gws = make_overlay(10, seed=111)
    conn_a, pipe_a = attach_registered(sim, gws[3], "alice")
    attach_registered(sim, gws[7], "bob")
    gws[3].on_client_frame(conn_a, {"op": "connect", "to": "bob"})
    sid = wait_frame(sim, pipe_a, "session")["session"]
    relay_sends_before = nodes[3].stats["sent:SIGNAL_RELAY"]
    send_signal(gws[3], conn_a, sid, "offer", 1, "x" * (protocol.MAX_BLOB + 1))
    err = frames_of(pipe_a, "error")[0]
    assert err["code"] == ERR_BAD_REQUEST
    assert nodes[3].stats["sent:SIGNAL_RELAY"] == relay_sends_before


def test_signal_frame_validation():
    sim, nodes, gws = make_overlay(10, seed=113)
    conn_a, pipe_a = attach_registered(sim, gws[0], "alice")
    attach_registered(sim, gws[5], "bob")
    gws[0].on_client_frame(conn_a, {"op": "connect", "to": "bob"})
    sid = wait_frame(sim, pipe_a, "session")["session"]
    bad_frames = [
        {"op": "signal", "session": "nope", "kind": "offer", "seq": 1, "blob": ""},
        {"op": "signal", "session": "ab" * 16, "kind": "offer", "seq": 1, "blob": ""},  # unknown sid
        {"op": "signal", "session": sid, "kind": "shout", "seq": 1, "blob": ""},
        {"op": "signal", "session": sid, "kind": "offer", "seq": 0, "blob": ""},
        {"op": "signal", "session": sid, "kind": "offer", "seq": True, "blob": ""},
        {"op": "signal", "session": sid, "kind": "offer", "seq": 1, "blob": 7},
    ]
    for i, frame in enumerate(bad_frames, start=1):
        gws[0].on_client_frame(conn_a, frame)
        assert len(frames_of(pipe_a, "error")) == i
        assert frames_of(pipe_a, "error")[-1]["code"] == ERR_BAD_REQUEST


# -- inbound ordering guard ---------------------------------------------------


def test_inbound_seq_must_increase_and_duplicates_ack_silently():
    sim, nodes, gws = make_overlay(8, seed=115)
    gw = gws[2]
    _, pipe_b = attach_registered(sim, gw, "bob")
    sender = Contact(nodes[5].id, nodes[5].address)

    def push(seq, blob):
        env = SignalEnvelope("alice", "bob", "aa" * 16, seq, "candidate", blob)
        return gw._on_relay(relay_body(peer_key("bob"), env), sender)

    kind, _ = push(2, "second")
    assert kind == protocol.RELAY_OK
    kind, _ = push(1, "first-too-late")  # lower seq after 2: gap stays a gap
    assert kind == protocol.RELAY_OK
    kind, _ = push(2, "second-duplicate")
    assert kind == protocol.RELAY_OK
    kind, _ = push(3, "third")
    assert kind == protocol.RELAY_OK

    delivered = frames_of(pipe_b, "signal")
    assert [f["seq"] for f in delivered] == [2, 3]
    assert [f["blob"] for f in delivered] == ["second", "third"]


def test_inbound_relay_for_unknown_local_peer_refuses():
    sim, nodes, gws = make_overlay(8, seed=117)
    gw = gws[1]
    env = SignalEnvelope("alice", "nobody-here", "bb" * 16, 1, "offer", "")
    kind, body = gw._on_relay(relay_body(peer_key("nobody-here"), env), Contact(1, "sim:1"))
    assert kind == protocol.RELAY_FAIL
    assert body["reason"] == protocol.RELAY_NO_SUCH_PEER


def test_client_facing_frames_match_the_published_shapes():
    # the four frame shapes browsers are written against, exact key sets
    shapes = {
        "registered": {"op", "replicas"},
        "session": {"op", "session", "from"},
        "signal": {"op", "session", "kind", "seq", "blob"},
        "error": {"op", "code", "detail"},
    }
    sim, nodes, gws = make_overlay(10, seed=118)
    pipe_a, pipe_b, _ = run_exchange(sim, gws, gws[2], gws[7])

    # provoke an error frame too
    conn_c, pipe_c = attach_registered(sim, gws[4], "carol")
    gws[4].on_client_frame(conn_c, {"op": "connect", "to": "nobody"})
    wait_frame(sim, pipe_c, "error")

    for pipe in (pipe_a, pipe_b, pipe_c):
        assert pipe.frames
        for frame in pipe.frames:
            assert set(frame) == shapes[frame["op"]], frame
