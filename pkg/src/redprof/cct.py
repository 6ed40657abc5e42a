"""Process-wide calling context tree with skip-list child indexes.

One tree holds every observed call path for the whole run; identical paths
from different threads share one node chain. Internal nodes are native or
interpreted function frames; leaves are sampled memory accesses. Each
parent indexes its children in a skip list keyed by a stable 64-bit hash of
the frame key, with full-key confirmation on hit so hash collisions never
merge distinct frames.

Skip lists near the root get tall index towers, ones near the leaves stay
short: level_cap(depth) = max(2, 16 - depth // 2).

Concurrency contract: lookups never take a lock; inserts serialize on the
parent's lock only (no lock ordering, hence no deadlock). A concurrent
lookup sees either absence or the final, fully linked child.
"""

from __future__ import annotations

import itertools
import random
import threading
from typing import Iterable, Optional, Sequence

from .errors import HybridMismatch, UnknownPathId
from .frames import AccessLeaf, FrameKey, NativeFrame, PyFrame, stable_key_hash
from .trace import NativeCall, PyCall

__all__ = [
    "AccessLeaf", "CctNode", "CctTree", "FrameKey", "NativeFrame", "PathId",
    "PyFrame", "level_cap", "merge_hybrid_path", "stable_key_hash",
]


def merge_hybrid_path(
    native_stack: Sequence[NativeCall], py_stack: Sequence[PyCall]
) -> list[FrameKey]:
    """Merge a native stack with the interpreted stack it is executing.

    The i-th interpreter eval frame (root to leaf) is replaced by the i-th
    interpreted frame; all other native frames keep their positions. Raises
    HybridMismatch when the two frame counts disagree.
    """
    merged: list[FrameKey] = []
    i = 0
    n_py = len(py_stack)
    for frame in native_stack:
        if frame.interp_eval:
            if i >= n_py:
                raise HybridMismatch(
                    f"{sum(1 for f in native_stack if f.interp_eval)} eval frames "
                    f"but only {n_py} interpreted frames")
            py = py_stack[i]
            merged.append(PyFrame(py.function, py.file, py.line))
            i += 1
        else:
            merged.append(NativeFrame(frame.symbol, frame.module, frame.ip))
    if i != n_py:
        raise HybridMismatch(f"{i} eval frames but {n_py} interpreted frames")
    return merged


def level_cap(depth: int) -> int:
    """Max index-tower height for children of a node at the given depth."""
    return max(2, 16 - depth // 2)


class _SkipEntry:
    """One hash position in a child index; nodes chains equal-hash keys."""

    __slots__ = ("hkey", "nodes", "nxt")

    def __init__(self, hkey: int, level: int):
        self.hkey = hkey
        self.nodes: list[CctNode] = []
        self.nxt: list[Optional[_SkipEntry]] = [None] * level


class _SkipList:
    __slots__ = ("head", "cap", "level", "lock")

    def __init__(self, cap: int):
        self.head = _SkipEntry(-1, cap)
        self.cap = cap
        self.level = 1
        self.lock = threading.Lock()

    def find(self, hkey: int, tree: "CctTree") -> Optional[_SkipEntry]:
        """Lock-free search; counts key comparisons on the owning tree."""
        comparisons = 0
        cur = self.head
        for lvl in range(self.level - 1, -1, -1):
            nxt = cur.nxt[lvl]
            while nxt is not None and nxt.hkey < hkey:
                comparisons += 1
                cur = nxt
                nxt = cur.nxt[lvl]
            comparisons += 1
        tree.comparisons += comparisons
        cand = cur.nxt[0]
        if cand is not None and cand.hkey == hkey:
            return cand
        return None

    def _random_level(self, rng: random.Random) -> int:
        level = 1
        while level < self.cap and rng.random() < 0.5:
            level += 1
        return level

    def insert_entry(self, hkey: int, rng: random.Random) -> _SkipEntry:
        """Insert under self.lock (caller holds it). Returns the entry."""
        update: list[_SkipEntry] = [self.head] * self.cap
        cur = self.head
        for lvl in range(self.level - 1, -1, -1):
            nxt = cur.nxt[lvl]
            while nxt is not None and nxt.hkey < hkey:
                cur = nxt
                nxt = cur.nxt[lvl]
            update[lvl] = cur
        cand = cur.nxt[0]
        if cand is not None and cand.hkey == hkey:
            return cand
        level = self._random_level(rng)
        if level > self.level:
            self.level = level
        entry = _SkipEntry(hkey, level)
        # Fill the new entry's forward pointers before splicing, and splice
        # bottom-up: readers either miss the entry entirely or reach it
        # through a consistent level-0 chain.
        for lvl in range(level):
            entry.nxt[lvl] = update[lvl].nxt[lvl]
        for lvl in range(level):
            update[lvl].nxt[lvl] = entry
        return entry


class CctNode:
    __slots__ = ("node_id", "key", "depth", "parent", "children",
                 "sample_count", "redundancy_weight")

    def __init__(self, node_id: int, key: Optional[FrameKey], depth: int,
                 parent: Optional["CctNode"]):
        self.node_id = node_id
        self.key = key
        self.depth = depth
        self.parent = parent
        self.children: Optional[_SkipList] = None
        self.sample_count = 0
        self.redundancy_weight = 0

    def __repr__(self):
        return f"CctNode(id={self.node_id}, key={self.key!r}, depth={self.depth})"


PathId = int


class CctTree:
    """Single tree for the whole run; node ids are allocation-ordered."""

    def __init__(self, seed: int = 0):
        self._ids = itertools.count(1)
        self.root = CctNode(0, None, 0, None)
        self._nodes: dict[int, CctNode] = {0: self.root}
        self._rng = random.Random(seed ^ 0x9E3779B97F4A7C15)
        self._stat_lock = threading.Lock()
        self.comparisons = 0  # lookup instrumentation, approximate under threads

    def node_count(self) -> int:
        return len(self._nodes)

    def lookup(self, parent: CctNode, key: FrameKey) -> Optional[CctNode]:
        index = parent.children
        if index is None:
            return None
        entry = index.find(stable_key_hash(key), self)
        if entry is None:
            return None
        for node in entry.nodes:
            if node.key == key:
                return node
        return None

    def child(self, parent: CctNode, key: FrameKey) -> CctNode:
        """Find or create the child of parent for key (insert-on-miss)."""
        node = self.lookup(parent, key)
        if node is not None:
            return node
        index = parent.children
        if index is None:
            with self._stat_lock:
                if parent.children is None:
                    parent.children = _SkipList(level_cap(parent.depth))
            index = parent.children
        with index.lock:
            entry = index.insert_entry(stable_key_hash(key), self._rng)
            for node in entry.nodes:
                if node.key == key:
                    return node
            node = CctNode(next(self._ids), key, parent.depth + 1, parent)
            self._nodes[node.node_id] = node
            entry.nodes.append(node)
            return node

    def extend(self, node: CctNode, keys: Iterable[FrameKey]) -> CctNode:
        for key in keys:
            node = self.child(node, key)
        return node

    def intern_path(self, frame_keys: Sequence[FrameKey], leaf: AccessLeaf) -> PathId:
        """Intern a root-to-leaf path; idempotent, returns the leaf node id.

        An empty frame list hangs the access leaf directly under the root
        (an access observed outside any call).
        """
        node = self.extend(self.root, frame_keys)
        return self.child(node, leaf).node_id

    def node(self, path_id: PathId) -> CctNode:
        n = self._nodes.get(path_id)
        if n is None:
            raise UnknownPathId(f"path id {path_id} was not issued by this tree")
        return n

    def resolve_path(self, path_id: PathId) -> list[FrameKey]:
        """Root-to-leaf key list for a handle issued by this tree."""
        n = self.node(path_id)
        keys: list[FrameKey] = []
        while n.parent is not None:
            keys.append(n.key)
            n = n.parent
        keys.reverse()
        return keys

    def bump_sample(self, node: CctNode) -> None:
        with self._stat_lock:
            node.sample_count += 1

    def add_weight(self, node: CctNode, weight: int) -> None:
        with self._stat_lock:
            node.redundancy_weight += weight

    def walk(self):
        """Yield every node, parents before children, in child-hash order."""
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            index = node.children
            if index is None:
                continue
            children: list[CctNode] = []
            entry = index.head.nxt[0]
            while entry is not None:
                children.extend(entry.nodes)
                entry = entry.nxt[0]
            stack.extend(reversed(children))

    def dump_counters(self) -> dict[tuple, tuple[int, int]]:
        """Canonical (path -> (samples, weight)) map for run comparisons."""
        out = {}
        for node in self.walk():
            if node is self.root:
                continue
            if node.sample_count or node.redundancy_weight:
                path = tuple(self.resolve_path(node.node_id))
                out[path] = (node.sample_count, node.redundancy_weight)
        return out
