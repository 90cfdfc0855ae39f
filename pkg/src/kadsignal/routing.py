"""Node identity, XOR distance, and the k-bucket routing table.

NodeIDs are 160-bit integers (SHA-1 width). Distance between two IDs is
their bitwise XOR interpreted as an unsigned integer, which gives a
symmetric, unidirectional metric: for any target there is exactly one
ID at each distance, so lookups converge along a single path.

The routing table is a flat array of 160 buckets. Bucket ``i`` holds
contacts whose XOR distance from the table owner has its most
significant bit at position ``i``, i.e. distance in ``[2**i, 2**(i+1))``.
Each bucket keeps at most ``k`` entries ordered least-recently-seen
first, and prefers long-lived entries: a full bucket never admits a new
contact until the eldest has been probed and found dead.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from random import Random
from typing import Iterator

ID_BITS = 160
ID_BYTES = ID_BITS // 8
ID_HEX_LEN = 40
ID_SPACE = 1 << ID_BITS

DEFAULT_K = 20
DEFAULT_ALPHA = 3

_HEX_DIGITS = frozenset("0123456789abcdef")


def random_node_id(rng: Random) -> int:
    """Draw a uniform NodeID from the given RNG."""
    return rng.getrandbits(ID_BITS)


def node_id_from_name(name: str) -> int:
    """Hash an arbitrary UTF-8 name onto the ID space with SHA-1."""
    digest = hashlib.sha1(name.encode("utf-8")).digest()
    return int.from_bytes(digest, "big")


@lru_cache(maxsize=4096)
def id_to_hex(node_id: int) -> str:
    """Render a NodeID as exactly 40 lowercase hex digits, big-endian."""
    if not 0 <= node_id < ID_SPACE:
        raise ValueError(f"node id out of range: {node_id!r}")
    return format(node_id, "040x")


def id_from_hex(text: str) -> int:
    """Parse the canonical 40-lowercase-hex-digit form of a NodeID.

    Rejects anything else: wrong length, uppercase, 0x prefixes,
    surrounding whitespace. The wire format depends on this being
    strict so that every ID has exactly one encoding.
    """
    if not isinstance(text, str) or len(text) != ID_HEX_LEN:
        raise ValueError(f"node id must be {ID_HEX_LEN} hex digits")
    if not _HEX_DIGITS.issuperset(text):
        raise ValueError(f"node id must be lowercase hex: {text!r}")
    return int(text, 16)


def distance(a: int, b: int) -> int:
    """XOR distance between two NodeIDs."""
    return a ^ b


def bucket_index(owner: int, other: int) -> int:
    """Index of the bucket where ``owner``'s table files ``other``.

    This is the position of the most significant differing bit:
    ``floor(log2(owner XOR other))``. Undefined for ``owner == other``;
    a node never stores itself.
    """
    d = owner ^ other
    if d == 0:
        raise ValueError("a node has no bucket for its own id")
    return d.bit_length() - 1


@dataclass(slots=True)
class Contact:
    """A known peer: identity plus the address it last spoke from."""

    id: int
    address: str
    first_seen: float = 0.0
    last_seen: float = 0.0
    stale: bool = False

    def wire(self) -> dict:
        return {"id": id_to_hex(self.id), "addr": self.address}


class UpdateOutcome(Enum):
    INSERTED = "inserted"
    REFRESHED = "refreshed"
    BUCKET_FULL = "bucket_full"


@dataclass(slots=True)
class KBucket:
    """One distance band of the routing table.

    ``entries`` is ordered by recency of contact: head is the
    least-recently-seen live entry, tail the most-recently-seen.
    ``last_lookup`` records the last time a lookup touched this band,
    for staleness-driven refresh.
    """

    capacity: int
    entries: list[Contact] = field(default_factory=list)
    last_lookup: float = 0.0

    def __len__(self) -> int:
        return len(self.entries)

    def eldest(self) -> Contact | None:
        return self.entries[0] if self.entries else None


class RoutingTable:
    """Flat array of 160 k-buckets owned by a single node."""

    def __init__(self, owner: int, k: int = DEFAULT_K):
        if k < 1:
            raise ValueError("k must be positive")
        self.owner = owner
        self.k = k
        self.buckets = [KBucket(capacity=k) for _ in range(ID_BITS)]

    # -- membership ---------------------------------------------------

    def update_contact(self, contact: Contact) -> tuple[UpdateOutcome, Contact | None]:
        """Record that ``contact`` was just heard from.

        Known contact: refresh its address and timestamp and move it to
        the tail. Unknown contact with bucket space: append at the
        tail. Full bucket: nothing changes yet; returns the eldest
        entry so the caller can probe it before deciding (the table
        itself never does I/O).
        """
        if contact.id == self.owner:
            raise ValueError("refusing to store the table owner")
        bucket = self.buckets[bucket_index(self.owner, contact.id)]
        for pos, entry in enumerate(bucket.entries):
            if entry.id == contact.id:
                entry.address = contact.address
                entry.last_seen = max(entry.last_seen, contact.last_seen)
                entry.stale = False
                bucket.entries.append(bucket.entries.pop(pos))
                return UpdateOutcome.REFRESHED, None
        if len(bucket.entries) < bucket.capacity:
            bucket.entries.append(contact)
            return UpdateOutcome.INSERTED, None
        return UpdateOutcome.BUCKET_FULL, bucket.entries[0]

    def resolve_eviction(
        self, eldest: Contact, eldest_alive: bool, candidate: Contact
    ) -> None:
        """Apply the outcome of probing a full bucket's eldest entry.

        Alive: eldest moves to the tail and the candidate is discarded,
        so long-lived nodes are never displaced by new arrivals. Dead:
        eldest is dropped and the candidate takes the freed slot.
        """
        bucket = self.buckets[bucket_index(self.owner, candidate.id)]
        if eldest_alive:
            for pos, entry in enumerate(bucket.entries):
                if entry.id == eldest.id:
                    entry.stale = False
                    bucket.entries.append(bucket.entries.pop(pos))
                    break
            return
        bucket.entries = [e for e in bucket.entries if e.id != eldest.id]
        if len(bucket.entries) < bucket.capacity and all(
            e.id != candidate.id for e in bucket.entries
        ):
            bucket.entries.append(candidate)

    def remove(self, node_id: int) -> bool:
        """Drop a contact outright (e.g. repeated RPC failures)."""
        bucket = self.buckets[bucket_index(self.owner, node_id)]
        before = len(bucket.entries)
        bucket.entries = [e for e in bucket.entries if e.id != node_id]
        return len(bucket.entries) != before

    def get(self, node_id: int) -> Contact | None:
        if node_id == self.owner:
            return None
        for entry in self.buckets[bucket_index(self.owner, node_id)].entries:
            if entry.id == node_id:
                return entry
        return None

    # -- queries ------------------------------------------------------

    def closest(
        self, target: int, count: int, exclude: frozenset[int] | set[int] = frozenset()
    ) -> list[Contact]:
        """The ``count`` known contacts nearest to ``target``.

        Responsive contacts come first, nearest first; contacts marked
        stale only fill whatever slots remain, so a burst of departures
        cannot crowd the living out of replies and lookup seeds.
        """
        if count < 1:
            raise ValueError("count must be positive")
        found = self._scan_bands(target, count, exclude, want_stale=False)
        if len(found) < count:
            found += self._scan_bands(target, count - len(found), exclude, want_stale=True)
        return found

    def _scan_bands(
        self, target: int, count: int, exclude, want_stale: bool
    ) -> list[Contact]:
        """Nearest ``count`` contacts with the given staleness, nearest first.

        Walks buckets in bands of increasing distance from the target
        so it can stop early instead of sorting the whole table. With
        b = bucket_index(owner, target): bucket b holds everything at
        distance < 2**b; buckets below b all land in [2**b, 2**(b+1))
        and must be merged before sorting; buckets above b are
        pairwise-disjoint bands in ascending order.
        """
        if target == self.owner:
            bands: Iterator[list[int]] = ([i] for i in range(ID_BITS))
        else:
            b = bucket_index(self.owner, target)

            def _bands() -> Iterator[list[int]]:
                yield [b]
                yield list(range(b))
                for i in range(b + 1, ID_BITS):
                    yield [i]

            bands = _bands()
        found: list[Contact] = []
        for indices in bands:
            batch = [
                entry
                for i in indices
                for entry in self.buckets[i].entries
                if entry.stale == want_stale and entry.id not in exclude
            ]
            if not batch:
                continue
            batch.sort(key=lambda e: e.id ^ target)
            found.extend(batch)
            if len(found) >= count:
                break
        return found[:count]

    def contacts(self) -> Iterator[Contact]:
        for bucket in self.buckets:
            yield from bucket.entries

    def contact_count(self) -> int:
        return sum(len(b) for b in self.buckets)

    def occupied_buckets(self) -> int:
        return sum(1 for b in self.buckets if b.entries)

    # -- maintenance --------------------------------------------------

    def note_lookup(self, target: int, now: float) -> None:
        """Mark the bucket covering ``target`` as recently searched."""
        if target == self.owner:
            return
        bucket = self.buckets[bucket_index(self.owner, target)]
        bucket.last_lookup = max(bucket.last_lookup, now)

    def stale_buckets(self, now: float, interval: float) -> list[int]:
        """Indices of non-empty buckets not searched within ``interval``."""
        return [
            i
            for i, bucket in enumerate(self.buckets)
            if bucket.entries and now - bucket.last_lookup >= interval
        ]

    def random_id_in_bucket(self, index: int, rng: Random) -> int:
        """A uniform ID whose distance from the owner lands in bucket ``index``."""
        if not 0 <= index < ID_BITS:
            raise ValueError(f"bucket index out of range: {index}")
        return self.owner ^ rng.randrange(1 << index, 1 << (index + 1))

    def check_invariants(self) -> None:
        """Assert structural invariants; test hook, not production path."""
        seen: set[int] = set()
        for i, bucket in enumerate(self.buckets):
            assert len(bucket.entries) <= bucket.capacity, f"bucket {i} overfull"
            for entry in bucket.entries:
                assert entry.id != self.owner, "owner stored in own table"
                assert entry.id not in seen, f"duplicate contact {entry.id:#x}"
                seen.add(entry.id)
                d = distance(self.owner, entry.id)
                assert (1 << i) <= d < (1 << (i + 1)), f"misfiled in bucket {i}"
                assert entry.last_seen >= entry.first_seen
