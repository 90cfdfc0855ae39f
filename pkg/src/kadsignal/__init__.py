"""Decentralized WebRTC signaling over a Kademlia DHT, plus a deterministic simulation harness."""

from kadsignal.routing import (
    DEFAULT_ALPHA,
    DEFAULT_K,
    Contact,
    RoutingTable,
    bucket_index,
    distance,
    id_from_hex,
    id_to_hex,
    node_id_from_name,
    random_node_id,
)

__all__ = [
    "DEFAULT_ALPHA",
    "DEFAULT_K",
    "Contact",
    "RoutingTable",
    "bucket_index",
    "distance",
    "id_from_hex",
    "id_to_hex",
    "node_id_from_name",
    "random_node_id",
]
