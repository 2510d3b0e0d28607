"""Leveled label hierarchies: loading, validation, truncation, and queries.

A hierarchy is a DAG of labels partitioned into levels 1..d from general
to specific. Labels may have multiple parents (poly-hierarchy); every
parent must sit on a strictly shallower level. Levels come from the input
file and are validated rather than recomputed, so a fixed published level
partition stays reproducible even when depth-from-root is ambiguous.

File format (UTF-8, one node per line, tab-separated)::

    #hierarchy-v1	id	name	level	parents
    agri	agri-foodstuffs	1
    fruit	fruit	3	plant

The ``parents`` field is a comma-separated list of ids, empty for roots.
"""

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

HIERARCHY_HEADER = "#hierarchy-v1\tid\tname\tlevel\tparents"


class HierarchyError(ValueError):
    """Structural problem in a hierarchy definition."""


@dataclass(frozen=True)
class LabelNode:
    id: str
    name: str
    parents: frozenset
    level: int


@dataclass(frozen=True)
class LevelWeights:
    """Per-level loss weights |L_n| / |L| as exact fractions."""

    fractions: tuple

    def as_floats(self):
        return [float(f) for f in self.fractions]

    def __len__(self):
        return len(self.fractions)

    def __getitem__(self, n):
        return self.fractions[n]


@dataclass
class Hierarchy:
    """Immutable after construction; all queries are pure."""

    nodes: dict = field(default_factory=dict)  # id -> LabelNode
    depth: int = 0
    levels: list = field(default_factory=list)  # index n-1 -> set of ids

    @property
    def total_count(self):
        return len(self.nodes)

    def __contains__(self, label_id):
        return label_id in self.nodes

    def labels_at_level(self, n):
        """Lexicographically ordered ids at level n (1-based).

        The ordering is the canonical classifier index assignment for the
        level: position k in the returned sequence is output k of the
        level's classifier head.
        """
        if not 1 <= n <= self.depth:
            raise HierarchyError(f"level {n} out of range 1..{self.depth}")
        return sorted(self.levels[n - 1])

    def global_label_order(self):
        """All ids in level-major order, lexicographic within each level."""
        order = []
        for n in range(1, self.depth + 1):
            order.extend(self.labels_at_level(n))
        return order

    def require(self, label_id):
        if label_id not in self.nodes:
            raise HierarchyError(f"unknown label {label_id!r}")
        return self.nodes[label_id]


def _validate(nodes):
    """Check parent resolution, then acyclicity, then level ordering."""
    for node in nodes.values():
        for pid in node.parents:
            if pid not in nodes:
                raise HierarchyError(
                    f"label {node.id!r} references unresolved parent {pid!r}"
                )

    state = {}  # id -> 1 visiting, 2 done

    def visit(start):
        stack = [(start, iter(nodes[start].parents))]
        state[start] = 1
        while stack:
            nid, it = stack[-1]
            advanced = False
            for pid in it:
                if state.get(pid) == 1:
                    raise HierarchyError(f"cycle detected through {pid!r}")
                if pid not in state:
                    state[pid] = 1
                    stack.append((pid, iter(nodes[pid].parents)))
                    advanced = True
                    break
            if not advanced:
                state[nid] = 2
                stack.pop()

    for nid in nodes:
        if nid not in state:
            visit(nid)

    for node in nodes.values():
        for pid in node.parents:
            parent = nodes[pid]
            if parent.level >= node.level:
                raise HierarchyError(
                    f"parent {pid!r} (level {parent.level}) must be strictly "
                    f"above child {node.id!r} (level {node.level})"
                )


def build_hierarchy(records):
    """Assemble and validate a hierarchy from (id, name, level, parents).

    Level numbers are re-based so the shallowest observed level becomes 1.
    """
    nodes = {}
    for label_id, name, level, parents in records:
        if not label_id:
            raise HierarchyError("empty label id")
        if label_id in nodes:
            raise HierarchyError(f"duplicate label id {label_id!r}")
        nodes[label_id] = LabelNode(
            id=label_id, name=name, parents=frozenset(parents), level=int(level)
        )
    if not nodes:
        raise HierarchyError("hierarchy has no labels")
    base = min(node.level for node in nodes.values())
    if base != 1:
        nodes = {
            nid: LabelNode(n.id, n.name, n.parents, n.level - base + 1)
            for nid, n in nodes.items()
        }
    _validate(nodes)
    depth = max(node.level for node in nodes.values())
    levels = [set() for _ in range(depth)]
    for node in nodes.values():
        levels[node.level - 1].add(node.id)
    return Hierarchy(nodes=nodes, depth=depth, levels=levels)


def load_hierarchy(path):
    """Parse and validate a hierarchy file."""
    path = Path(path)
    records = []
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != HIERARCHY_HEADER:
            raise HierarchyError(
                f"{path}: unrecognized header {header!r} "
                f"(expected {HIERARCHY_HEADER!r})"
            )
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise HierarchyError(f"{path}:{lineno}: expected 4 fields")
            label_id, name, level_s, parents_s = fields
            try:
                level = int(level_s)
            except ValueError:
                raise HierarchyError(
                    f"{path}:{lineno}: bad level {level_s!r}"
                ) from None
            parents = [p for p in parents_s.split(",") if p]
            records.append((label_id, name, level, parents))
    return build_hierarchy(records)


def save_hierarchy(h, path):
    """Write a hierarchy to the tabular file format (stable node order)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(HIERARCHY_HEADER + "\n")
        for n in range(1, h.depth + 1):
            for label_id in h.labels_at_level(n):
                node = h.nodes[label_id]
                parents = ",".join(sorted(node.parents))
                fh.write(f"{node.id}\t{node.name}\t{node.level}\t{parents}\n")


def truncate(h, drop_top=0, drop_bottom=0):
    """Drop the top/bottom levels and re-number the survivors 1..d'.

    Surviving nodes whose parents were all dropped become roots; parent
    links into dropped levels are removed.
    """
    if drop_top < 0 or drop_bottom < 0:
        raise HierarchyError("drop counts must be non-negative")
    if drop_top + drop_bottom >= h.depth:
        raise HierarchyError(
            f"cannot drop {drop_top}+{drop_bottom} levels from depth {h.depth}"
        )
    lo, hi = drop_top + 1, h.depth - drop_bottom
    records = []
    for node in h.nodes.values():
        if not lo <= node.level <= hi:
            continue
        kept_parents = [
            pid for pid in node.parents if lo <= h.nodes[pid].level <= hi
        ]
        records.append((node.id, node.name, node.level - drop_top, kept_parents))
    if not records:
        raise HierarchyError("truncation would leave an empty hierarchy")
    return build_hierarchy(records)


def ancestors(h, label_id):
    """Transitive closure over parent edges, excluding the label itself."""
    h.require(label_id)
    seen = set()
    frontier = [label_id]
    while frontier:
        current = frontier.pop()
        for pid in h.nodes[current].parents:
            if pid not in seen:
                seen.add(pid)
                frontier.append(pid)
    return seen


def augment(h, labels):
    """Close a label set under ancestors."""
    closed = set()
    for label_id in labels:
        h.require(label_id)
        closed.add(label_id)
        closed.update(ancestors(h, label_id))
    return closed


def level_weights(h):
    """Loss weights w_n = |L_n| / |L| as exact fractions summing to 1."""
    total = h.total_count
    if total == 0:
        raise HierarchyError("hierarchy has no labels")
    return LevelWeights(
        fractions=tuple(Fraction(len(h.levels[n]), total) for n in range(h.depth))
    )


class LevelIndex:
    """Frozen canonical indexing for a hierarchy's labels.

    Per level: position of each id in the lexicographic level order.
    Globally: level-major concatenation of the level orders. The two views
    are connected by a bijection so per-level classifier outputs and flat
    |L| vectors address the same labels consistently.
    """

    def __init__(self, h):
        self.depth = h.depth
        self.level_orders = [h.labels_at_level(n) for n in range(1, h.depth + 1)]
        self.level_pos = [
            {label: k for k, label in enumerate(order)}
            for order in self.level_orders
        ]
        self.offsets = []
        running = 0
        for order in self.level_orders:
            self.offsets.append(running)
            running += len(order)
        self.total = running
        self.global_order = [label for order in self.level_orders for label in order]
        self.global_pos = {label: g for g, label in enumerate(self.global_order)}

    def size(self, n):
        """Number of labels at level n (1-based)."""
        return len(self.level_orders[n - 1])

    def level_of(self, label_id):
        for n, pos in enumerate(self.level_pos, start=1):
            if label_id in pos:
                return n
        raise HierarchyError(f"unknown label {label_id!r}")

    def to_global(self, n, local):
        """Map (level, local index) to the flat |L|-vector index."""
        if not 0 <= local < self.size(n):
            raise HierarchyError(f"local index {local} out of range at level {n}")
        return self.offsets[n - 1] + local

    def to_local(self, global_index):
        """Map a flat index back to (level, local index)."""
        if not 0 <= global_index < self.total:
            raise HierarchyError(f"global index {global_index} out of range")
        for n in range(self.depth, 0, -1):
            if global_index >= self.offsets[n - 1]:
                return n, global_index - self.offsets[n - 1]
        raise AssertionError("unreachable")
