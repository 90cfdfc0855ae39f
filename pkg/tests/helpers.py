"""Shared test plumbing: build simulated networks, wait for callbacks."""

from __future__ import annotations

from random import Random

from kadsignal.node import KademliaNode, NodeConfig
from kadsignal.routing import random_node_id
from kadsignal.transport import SimConfig, SimNetwork


def build_network(
    n: int,
    seed: int = 0,
    k: int = 20,
    alpha: int = 3,
    latency: tuple[float, float] = (10.0, 50.0),
    loss: float = 0.0,
    trace: bool = False,
    refresh_interval: float = 86400.0,
    republish_interval: float = 1800.0,
) -> tuple[SimNetwork, list[KademliaNode]]:
    """Start ``n`` nodes on one simulated network, joined through nodes[0].

    Joins run sequentially, each completing before the next begins, so
    a given seed always produces the identical network.
    """
    sim = SimNetwork(
        SimConfig(
            latency_min_ms=latency[0],
            latency_max_ms=latency[1],
            loss_rate=loss,
            seed=seed,
            record_trace=trace,
        )
    )
    config = NodeConfig(
        k=k,
        alpha=alpha,
        refresh_interval=refresh_interval,
        republish_interval=republish_interval,
    )
    id_rng = Random(f"{seed}:ids")
    nodes = []
    for i in range(n):
        node = KademliaNode(
            sim, config, node_id=random_node_id(id_rng), rng=Random(f"{seed}:rpc:{i}")
        )
        node.start()
        nodes.append(node)
    bootstrap = nodes[0].contact()
    for node in nodes[1:]:
        report = wait_for(sim, lambda cb, node=node: node.join(bootstrap, cb), max_time=120.0)
        assert report.ok, f"join failed while building the network: {report}"
    return sim, nodes


def wait_for(sim: SimNetwork, fire, max_time: float = 60.0):
    """Run ``fire(callback)`` and drive the sim until the callback lands."""
    box: dict = {}
    fire(lambda result: box.setdefault("result", result))
    assert sim.run_until(lambda: "result" in box, max_time=max_time), "operation never completed"
    return box["result"]


def k_closest_ids(ids, target: int, k: int) -> list[int]:
    """Brute-force oracle: the k ids nearest to target, nearest first."""
    return sorted(ids, key=lambda i: i ^ target)[:k]
