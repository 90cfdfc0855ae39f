"""Simulated network determinism, latency bounds, loss, churn, partitions."""

from __future__ import annotations

from random import Random

import pytest

from kadsignal.transport import MAX_DATAGRAM, SimConfig, SimNetwork, UdpReactor


def collector():
    received = []
    return received, lambda src, data: received.append((src, data))


# -- delivery and timing ----------------------------------------------


def test_degenerate_latency_delivers_at_exact_offset():
    net = SimNetwork(SimConfig(latency_min_ms=10, latency_max_ms=10))
    received, handler = collector()
    a = net.bind(handler)
    b = net.bind(handler)
    net.send(a, b, b"hello")
    assert net.advance_clock(0.009999) == []
    events = net.advance_clock(0.010)
    assert [e.time_us for e in events] == [10_000]
    assert received == [(a, b"hello")]
    assert net.now() == 0.010


def test_latency_draws_stay_within_bounds():
    net = SimNetwork(SimConfig(latency_min_ms=10, latency_max_ms=50, seed=4))
    _, handler = collector()
    a, b = net.bind(handler), net.bind(handler)
    for _ in range(10_000):
        net.send(a, b, b"x")
    events = net.advance_clock(1.0)
    assert len(events) == 10_000
    assert all(10_000 <= e.time_us <= 50_000 for e in events)
    # uniform draws should spread over the range, not pile up at an edge
    assert min(e.time_us for e in events) < 12_000
    assert max(e.time_us for e in events) > 48_000


def test_total_loss_delivers_nothing():
    net = SimNetwork(SimConfig(loss_rate=1.0))
    received, handler = collector()
    a, b = net.bind(handler), net.bind(handler)
    for _ in range(100):
        net.send(a, b, b"x")
    assert net.advance_clock(10.0) == []
    assert received == []
    assert net.messages_lost == 100


def test_loss_rate_is_roughly_honoured():
    net = SimNetwork(SimConfig(loss_rate=0.25, seed=8))
    received, handler = collector()
    a, b = net.bind(handler), net.bind(handler)
    for _ in range(4000):
        net.send(a, b, b"x")
    net.advance_clock(1.0)
    assert 0.22 < net.messages_lost / 4000 < 0.28
    assert net.messages_delivered + net.messages_lost == 4000


def test_same_instant_events_keep_send_order():
    net = SimNetwork(SimConfig(latency_min_ms=5, latency_max_ms=5))
    received, handler = collector()
    a, b = net.bind(handler), net.bind(handler)
    for i in range(20):
        net.send(a, b, bytes([i]))
    net.advance_clock(1.0)
    assert [data[0] for _, data in received] == list(range(20))


def test_oversize_datagram_refused_at_send():
    net = SimNetwork()
    a = net.bind(lambda s, d: None)
    with pytest.raises(ValueError):
        net.send(a, a, b"x" * (MAX_DATAGRAM + 1))


# -- determinism -------------------------------------------------------


def _scripted_run(seed: int) -> list[str]:
    net = SimNetwork(SimConfig(latency_min_ms=10, latency_max_ms=50, loss_rate=0.1, seed=seed, record_trace=True))
    workload = Random(1234)
    addrs = [net.bind(lambda s, d: None) for _ in range(8)]
    for step in range(500):
        src, dst = workload.sample(addrs, 2)
        net.send(src, dst, f"payload-{step}".encode())
        if step % 50 == 10:
            net.advance_clock(net.now() + 0.02)
    net.run_until_idle()
    return [e.line() for e in net.trace]


def test_identical_seed_identical_trace():
    assert _scripted_run(42) == _scripted_run(42)


def test_different_seed_different_trace():
    assert _scripted_run(42) != _scripted_run(43)


# -- timers ------------------------------------------------------------


def test_timers_fire_in_order_and_cancel():
    net = SimNetwork()
    fired = []
    net.call_later(0.5, lambda: fired.append("b"))
    net.call_later(0.2, lambda: fired.append("a"))
    doomed = net.call_later(0.3, lambda: fired.append("x"))
    doomed.cancel()
    net.call_later(0.5, lambda: fired.append("c"))  # same instant as "b": FIFO
    net.advance_clock(1.0)
    assert fired == ["a", "b", "c"]
    assert net.now() == 1.0


def test_timer_can_reschedule_itself():
    net = SimNetwork()
    ticks = []

    def tick():
        ticks.append(net.now())
        if len(ticks) < 3:
            net.call_later(1.0, tick)

    net.call_later(1.0, tick)
    net.advance_clock(10.0)
    assert ticks == [1.0, 2.0, 3.0]


def test_advance_clock_with_empty_queue_just_moves_time():
    net = SimNetwork()
    assert net.advance_clock(5.0) == []
    assert net.now() == 5.0
    with pytest.raises(ValueError):
        net.advance_clock(4.0)


def test_run_until_times_out_at_deadline():
    net = SimNetwork()
    assert net.run_until(lambda: False, max_time=2.5) is False
    assert net.now() == 2.5
    # a time-based predicate becomes true once the clock lands on the deadline
    assert net.run_until(lambda: net.now() >= 3.0, max_time=1.0) is True


# -- churn and partitions ----------------------------------------------


def test_unbind_drops_in_flight_and_future_traffic():
    net = SimNetwork(SimConfig(latency_min_ms=10, latency_max_ms=10))
    received, handler = collector()
    a, b = net.bind(handler), net.bind(handler)
    net.send(a, b, b"in-flight")
    net.unbind(b)
    net.send(a, b, b"after")
    net.advance_clock(1.0)
    assert received == []
    assert net.messages_dropped == 2  # neither packet found a live handler
    # sends from an unbound address go nowhere as well
    net.send(b, a, b"ghost")
    net.advance_clock(2.0)
    assert received == []


def test_rebound_address_receives_again():
    net = SimNetwork(SimConfig(latency_min_ms=1, latency_max_ms=1))
    received, handler = collector()
    a = net.bind(handler, "sim:a")
    b = net.bind(handler, "sim:b")
    net.unbind(b)
    net.bind(handler, "sim:b")
    net.send(a, b, b"hi")
    net.advance_clock(1.0)
    assert received == [(a, b"hi")]


def test_partitions_block_cross_group_traffic():
    net = SimNetwork(SimConfig(latency_min_ms=1, latency_max_ms=1))
    received, handler = collector()
    a, b, c = (net.bind(handler) for _ in range(3))
    net.set_partitions([{a, b}])
    net.send(a, b, b"same-group")
    net.send(a, c, b"cross")
    net.send(c, a, b"cross-back")
    net.advance_clock(1.0)
    assert [d for _, d in received] == [b"same-group"]
    net.set_partitions(None)
    net.send(a, c, b"healed")
    net.advance_clock(2.0)
    assert received[-1] == (a, b"healed")


def test_implicit_rest_group_communicates_internally():
    net = SimNetwork(SimConfig(latency_min_ms=1, latency_max_ms=1))
    received, handler = collector()
    a, b, c, d = (net.bind(handler) for _ in range(4))
    net.set_partitions([{a}])
    net.send(c, d, b"rest-to-rest")
    net.send(b, a, b"rest-to-isolated")
    net.advance_clock(1.0)
    assert [data for _, data in received] == [b"rest-to-rest"]


# -- UDP reactor basics -------------------------------------------------


def test_udp_reactor_round_trip():
    reactor = UdpReactor()
    try:
        received, handler = collector()
        a = reactor.bind(handler, "127.0.0.1:0")
        b = reactor.bind(handler, "127.0.0.1:0")
        assert a != b and a.startswith("127.0.0.1:")
        reactor.send(a, b, b"ping")
        reactor.send(b, a, b"pong")
        assert reactor.run_until(lambda: len(received) == 2, max_time=5.0)
        sources = {src for src, _ in received}
        assert sources == {a, b}
    finally:
        reactor.close()


def test_udp_timers_and_unbind():
    reactor = UdpReactor()
    try:
        received, handler = collector()
        fired = []
        a = reactor.bind(handler, "127.0.0.1:0")
        b = reactor.bind(handler, "127.0.0.1:0")
        reactor.unbind(b)
        reactor.send(a, b, b"lost")
        reactor.call_later(0.05, lambda: fired.append(reactor.now()))
        assert reactor.run_until(lambda: fired, max_time=5.0)
        assert received == []
    finally:
        reactor.close()
