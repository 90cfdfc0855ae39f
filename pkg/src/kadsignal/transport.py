"""Datagram transports behind one reactor interface.

The node state machine never touches sockets or clocks directly; it
talks to a Reactor, which supplies time, timers, endpoint binding and
datagram sends. Two implementations:

* SimNetwork: a single-threaded discrete-event simulator with a
  virtual clock in integer microseconds. Given a seed and a scripted
  workload it replays byte-for-byte identical traces, which is what
  makes the experiment harness reproducible.
* UdpReactor: real UDP sockets on an asyncio loop, for running actual
  processes on a LAN.

Unbinding an endpoint models churn: traffic towards it is silently
dropped from that point on, exactly like an unplugged box.
"""

from __future__ import annotations

import asyncio
import heapq
import json
import logging
import socket
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from random import Random
from typing import Callable

log = logging.getLogger(__name__)

MAX_DATAGRAM = 64 * 1024

Handler = Callable[[str, bytes], None]


class Reactor(ABC):
    """Time, timers, and datagram I/O for one event loop."""

    @abstractmethod
    def now(self) -> float:
        """Current time in seconds (virtual or wall, per implementation)."""

    @abstractmethod
    def call_later(self, delay: float, fn: Callable[[], None]):
        """Schedule ``fn`` after ``delay`` seconds; returns a handle with cancel()."""

    @abstractmethod
    def bind(self, handler: Handler, address: str | None = None) -> str:
        """Attach a datagram handler; returns the bound address string."""

    @abstractmethod
    def unbind(self, address: str) -> None:
        """Detach an endpoint. Pending traffic towards it is dropped."""

    @abstractmethod
    def send(self, src: str, dst: str, data: bytes) -> None:
        """Fire-and-forget one datagram. Never blocks, never confirms."""


# -- simulated network --------------------------------------------------


@dataclass(slots=True)
class SimConfig:
    """Knobs for one simulated network run."""

    latency_min_ms: float = 10.0
    latency_max_ms: float = 50.0
    loss_rate: float = 0.0
    seed: int = 0
    record_trace: bool = False

    def __post_init__(self):
        if self.latency_min_ms < 0 or self.latency_max_ms < self.latency_min_ms:
            raise ValueError("latency bounds must satisfy 0 <= min <= max")
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError("loss_rate must be within [0, 1]")


@dataclass(slots=True)
class DeliveryEvent:
    """One datagram handed to a handler, as recorded in the trace."""

    time_us: int
    src: str
    dst: str
    size: int
    kind: str
    rpc_id: str

    def line(self) -> str:
        return f"{self.time_us / 1000:.3f},{self.src},{self.dst},{self.kind},{self.rpc_id}"


class SimTimer:
    __slots__ = ("fn", "cancelled")

    def __init__(self, fn: Callable[[], None]):
        self.fn = fn
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


_DELIVER = 0
_TIMER = 1


class SimNetwork(Reactor):
    """Deterministic discrete-event network.

    All state advances only inside advance_clock()/run_until(). Events
    are ordered by (virtual time, insertion sequence), so same-instant
    events keep FIFO order and a given seed always yields the same
    interleaving. Latency is drawn uniformly per packet; loss is an
    independent Bernoulli draw made before the latency draw.
    """

    def __init__(self, config: SimConfig | None = None):
        self.config = config or SimConfig()
        self._rng = Random(f"simnet:{self.config.seed}")
        self._time_us = 0
        self._seq = 0
        self._queue: list[tuple] = []  # (time_us, seq, type, payload)
        self._handlers: dict[str, Handler] = {}
        self._next_endpoint = 1
        self._partitions: list[set[str]] | None = None
        self.messages_sent = 0
        self.messages_delivered = 0
        self.messages_lost = 0
        self.messages_dropped = 0  # no live handler at delivery time
        self.trace: list[DeliveryEvent] = []

    # -- reactor interface ------------------------------------------

    def now(self) -> float:
        return self._time_us / 1e6

    @property
    def now_us(self) -> int:
        return self._time_us

    def call_later(self, delay: float, fn: Callable[[], None]) -> SimTimer:
        if delay < 0:
            raise ValueError("delay must be non-negative")
        timer = SimTimer(fn)
        self._push(self._time_us + round(delay * 1e6), _TIMER, timer)
        return timer

    def bind(self, handler: Handler, address: str | None = None) -> str:
        if address is None:
            address = f"sim:{self._next_endpoint}"
            self._next_endpoint += 1
        if address in self._handlers:
            raise ValueError(f"address already bound: {address}")
        self._handlers[address] = handler
        return address

    def unbind(self, address: str) -> None:
        self._handlers.pop(address, None)

    def send(self, src: str, dst: str, data: bytes) -> None:
        if len(data) > MAX_DATAGRAM:
            raise ValueError(f"datagram of {len(data)} bytes exceeds {MAX_DATAGRAM}")
        self.messages_sent += 1
        if src not in self._handlers:
            # a dead node's lingering timer tried to talk; nothing leaves it
            self.messages_lost += 1
            return
        if not self._can_reach(src, dst):
            self.messages_lost += 1
            return
        if self.config.loss_rate and self._rng.random() < self.config.loss_rate:
            self.messages_lost += 1
            return
        delay_ms = self._rng.uniform(self.config.latency_min_ms, self.config.latency_max_ms)
        self._push(self._time_us + round(delay_ms * 1000), _DELIVER, (src, dst, data))

    # -- partitions ----------------------------------------------------

    def set_partitions(self, groups: list[set[str]] | None) -> None:
        """Split the network into isolated groups of addresses.

        Addresses not named in any group form one implicit extra group.
        Pass None to heal.
        """
        self._partitions = [set(g) for g in groups] if groups else None

    def _can_reach(self, src: str, dst: str) -> bool:
        if not self._partitions:
            return True
        for group in self._partitions:
            if src in group:
                return dst in group
        for group in self._partitions:
            if dst in group:
                return False  # src is in the implicit group, dst is not
        return True

    # -- event loop ----------------------------------------------------

    def _push(self, time_us: int, etype: int, payload) -> None:
        heapq.heappush(self._queue, (time_us, self._seq, etype, payload))
        self._seq += 1

    def advance_clock(self, until: float) -> list[DeliveryEvent]:
        """Run every event due up to virtual time ``until`` (seconds).

        Returns the datagram deliveries that happened, in order. Timer
        callbacks run interleaved at their due times but are not
        reported. The clock ends exactly at ``until`` even if the queue
        ran dry earlier.
        """
        until_us = round(until * 1e6)
        if until_us < self._time_us:
            raise ValueError("cannot advance the clock backwards")
        delivered: list[DeliveryEvent] = []
        while self._queue and self._queue[0][0] <= until_us:
            time_us, _, etype, payload = heapq.heappop(self._queue)
            self._time_us = time_us
            if etype == _TIMER:
                if not payload.cancelled:
                    payload.fn()
                continue
            src, dst, data = payload
            handler = self._handlers.get(dst)
            if handler is None:
                self.messages_dropped += 1
                continue
            self.messages_delivered += 1
            if self.config.record_trace:
                event = self._traced(time_us, src, dst, data)
                self.trace.append(event)
                delivered.append(event)
            else:
                delivered.append(DeliveryEvent(time_us, src, dst, len(data), "", ""))
            handler(src, data)
        self._time_us = until_us
        return delivered

    @staticmethod
    def _traced(time_us: int, src: str, dst: str, data: bytes) -> DeliveryEvent:
        kind, rpc_id = "?", "?"
        try:
            obj = json.loads(data.decode("utf-8"))
            kind = str(obj.get("kind", "?"))
            rpc_id = str(obj.get("rpc_id", "?"))
        except (UnicodeDecodeError, ValueError, AttributeError):
            pass
        return DeliveryEvent(time_us, src, dst, len(data), kind, rpc_id)

    def run_until(self, predicate: Callable[[], bool], max_time: float = 300.0) -> bool:
        """Step events until ``predicate()`` holds; False if time ran out.

        ``max_time`` is an absolute virtual-time ceiling measured from
        now. The predicate is checked between events, so it observes
        every intermediate state.
        """
        deadline_us = self._time_us + round(max_time * 1e6)
        while not predicate():
            if not self._queue or self._queue[0][0] > deadline_us:
                self._time_us = deadline_us
                return predicate()
            self.advance_clock(self._queue[0][0] / 1e6)
        return True

    def run_until_idle(self, max_time: float = 300.0) -> None:
        """Drain the event queue (bounded by ``max_time`` virtual seconds)."""
        deadline_us = self._time_us + round(max_time * 1e6)
        while self._queue and self._queue[0][0] <= deadline_us:
            self.advance_clock(self._queue[0][0] / 1e6)


# -- real UDP -----------------------------------------------------------


class UdpReactor(Reactor):
    """Reactor over real UDP sockets on an asyncio selector loop.

    bind() may be called before the loop runs (setup) or from inside a
    callback; both paths are synchronous because the socket work is
    plain non-blocking syscalls via loop.add_reader.
    """

    def __init__(self, loop: asyncio.AbstractEventLoop | None = None):
        self.loop = loop or asyncio.new_event_loop()
        self._socks: dict[str, tuple[socket.socket, Handler]] = {}

    def now(self) -> float:
        return self.loop.time()

    def call_later(self, delay: float, fn: Callable[[], None]):
        return self.loop.call_later(delay, fn)

    def bind(self, handler: Handler, address: str | None = None) -> str:
        host, _, port = (address or "127.0.0.1:0").rpartition(":")
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.setblocking(False)
        try:
            sock.bind((host, int(port)))
        except OSError:
            sock.close()
            raise
        bound = "%s:%d" % sock.getsockname()[:2]
        self._socks[bound] = (sock, handler)
        self.loop.add_reader(sock.fileno(), self._on_readable, bound)
        return bound

    def unbind(self, address: str) -> None:
        entry = self._socks.pop(address, None)
        if entry is None:
            return
        sock, _ = entry
        self.loop.remove_reader(sock.fileno())
        sock.close()

    def send(self, src: str, dst: str, data: bytes) -> None:
        entry = self._socks.get(src)
        if entry is None:
            return
        host, _, port = dst.rpartition(":")
        try:
            entry[0].sendto(data, (host, int(port)))
        except (OSError, ValueError):
            # UDP semantics: a failed send is indistinguishable from loss
            log.debug("send to %s failed", dst, exc_info=True)

    def _on_readable(self, bound: str) -> None:
        entry = self._socks.get(bound)
        if entry is None:
            return
        sock, handler = entry
        while True:
            try:
                data, addr = sock.recvfrom(MAX_DATAGRAM * 2)
            except (BlockingIOError, InterruptedError):
                return
            except OSError:
                return
            handler("%s:%d" % addr[:2], data)

    # -- loop helpers used by tests and the CLI ----------------------

    def run_until(self, predicate: Callable[[], bool], max_time: float = 10.0) -> bool:
        deadline = self.now() + max_time

        async def waiter() -> bool:
            while not predicate() and self.now() < deadline:
                await asyncio.sleep(0.005)
            return predicate()

        return self.loop.run_until_complete(waiter())

    def sleep(self, duration: float) -> None:
        self.loop.run_until_complete(asyncio.sleep(duration))

    def close(self) -> None:
        for address in list(self._socks):
            self.unbind(address)
