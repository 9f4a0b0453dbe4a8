"""Address clustering: the multi-input closure heuristic and a minimal,
overlap-trimming variant.

The original method takes the transitive closure of "appears on the
same side of the same transaction": addresses co-spending in one
transaction are assumed to share an owner, and clusters are merged
until fixpoint. That can chain unrelated entities together through
mixing transactions, so the minimal method stops early: each
transaction's address set is its own candidate cluster, identical sets
collapse, and any candidates that still overlap are merged and then
dropped entirely. What survives is mutually exclusive and traceable to
a single transaction each.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field

from .chain import ChainHandle

SOURCES = ("inputs", "outputs", "both")
METHODS = ("original", "minimal")


@dataclass(frozen=True)
class ClusteringConfig:
    source: str
    method: str

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"clustering source must be one of {SOURCES}, "
                             f"got {self.source!r}")
        if self.method not in METHODS:
            raise ValueError(f"clustering method must be one of {METHODS}, "
                             f"got {self.method!r}")


@dataclass(frozen=True)
class Clustering:
    method: str
    source: str
    # Ordered by first appearance in chain order, members likewise.
    clusters: tuple[tuple[str, ...], ...]
    membership: dict[str, int] = field(repr=False)

    def cluster_of(self, address: str) -> frozenset[str] | None:
        """The address's cluster as a set, or None if it has none
        (unseen address, or discarded by the minimal method)."""
        idx = self.membership.get(address)
        if idx is None:
            return None
        return frozenset(self.clusters[idx])

    def members_of(self, address: str) -> tuple[str, ...]:
        """Ordered members of the address's cluster; () if none."""
        idx = self.membership.get(address)
        if idx is None:
            return ()
        return self.clusters[idx]

    def to_json_dict(self) -> dict:
        return {"method": self.method, "source": self.source,
                "clusters": [list(c) for c in self.clusters]}


def cluster_of(clustering: Clustering, address: str) -> frozenset[str] | None:
    return clustering.cluster_of(address)


def _side_sets(chain: ChainHandle, source: str):
    """Per-transaction address tuples for the configured side(s), in
    chain order, duplicates within a side removed (order kept). Sides
    are never merged with each other: co-spending evidence only holds
    within one side."""
    for tx in chain.iter_transactions():
        if source in ("inputs", "both"):
            yield _unique([i.address for i in tx.inputs])
        if source in ("outputs", "both"):
            yield _unique([o.address for o in tx.outputs])


def _unique(addresses: list[str]) -> tuple[str, ...]:
    return tuple(dict.fromkeys(addresses))


class _UnionFind:
    __slots__ = ("parent",)

    def __init__(self):
        self.parent: dict[str, str] = {}

    def add(self, x):
        if x not in self.parent:
            self.parent[x] = x

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def cluster_original(chain: ChainHandle, source: str = "inputs") -> Clustering:
    """Transitive-closure co-occurrence clustering.

    Every address on the configured side(s) lands in exactly one
    cluster; addresses that never co-occur form singletons. Cluster ids
    follow first appearance in chain order.
    """
    ClusteringConfig(source, "original")  # validate source
    uf = _UnionFind()
    order: list[str] = []
    seen: set[str] = set()
    for addresses in _side_sets(chain, source):
        for a in addresses:
            if a not in seen:
                seen.add(a)
                order.append(a)
            uf.add(a)
        for b in addresses[1:]:
            uf.union(addresses[0], b)

    by_root: dict[str, list[str]] = {}
    for a in order:
        by_root.setdefault(uf.find(a), []).append(a)
    clusters = tuple(tuple(members) for members in by_root.values())
    membership = {a: idx for idx, c in enumerate(clusters) for a in c}
    return Clustering(method="original", source=source,
                      clusters=clusters, membership=membership)


def cluster_minimal(chain: ChainHandle, source: str = "inputs") -> Clustering:
    """Prematurely terminated clustering with overlap trimming.

    Stage 1 collects the distinct multi-address side sets, one candidate
    per transaction side, with no cross-transaction merging. Stage 2
    merges candidates that share an address and discards every merged
    group, keeping only candidates that overlap nothing else. The result
    is pairwise disjoint and each cluster equals some transaction's
    side set.
    """
    ClusteringConfig(source, "minimal")  # validate source
    candidates: list[tuple[str, ...]] = []
    index_of: dict[frozenset[str], int] = {}
    for addresses in _side_sets(chain, source):
        if len(addresses) < 2:
            continue
        key = frozenset(addresses)
        if key not in index_of:
            index_of[key] = len(candidates)
            candidates.append(addresses)

    # Overlap components over candidate indices via a shared-address index.
    uf = _UnionFind()
    touching: dict[str, int] = {}
    for idx, members in enumerate(candidates):
        uf.add(idx)
        for a in members:
            if a in touching:
                uf.union(touching[a], idx)
            else:
                touching[a] = idx

    component_size: dict[int, int] = {}
    for idx in range(len(candidates)):
        root = uf.find(idx)
        component_size[root] = component_size.get(root, 0) + 1

    clusters = tuple(members for idx, members in enumerate(candidates)
                     if component_size[uf.find(idx)] == 1)
    membership = {a: idx for idx, c in enumerate(clusters) for a in c}
    return Clustering(method="minimal", source=source,
                      clusters=clusters, membership=membership)


_METHOD_FNS = {"original": cluster_original, "minimal": cluster_minimal}

# Memoized per chain handle so repeated queries reuse one clustering.
_cache: "weakref.WeakKeyDictionary[ChainHandle, dict]" = weakref.WeakKeyDictionary()


def get_clustering(chain: ChainHandle, config: ClusteringConfig) -> Clustering:
    per_chain = _cache.setdefault(chain, {})
    key = (config.method, config.source)
    if key not in per_chain:
        per_chain[key] = _METHOD_FNS[config.method](chain, config.source)
    return per_chain[key]
