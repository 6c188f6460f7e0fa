"""Attribute-space combinatorics: the high-probability node set, its class
partition, Hamming metrics, and per-class neighborhoods.

A node is a full attribute tuple. The high-probability set V collects the
nodes whose empirical mass reaches a threshold gamma; it is partitioned by the
empirically most probable class. The minimum inter-class Hamming distance
d_min fixes the intrinsic radius r = floor((d_min - 1) / 2), and the
neighborhood of a class is its piece of V plus every node outside V within
radius r of that piece.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import LengthMismatch
from .schema import VariableSchema

ENUMERATION_LIMIT = 10**6


def hamming(a, b) -> int:
    """Number of positions in which the two tuples differ."""
    a, b = tuple(a), tuple(b)
    if len(a) != len(b):
        raise LengthMismatch(f"length {len(a)} vs {len(b)}")
    return sum(int(x != y) for x, y in zip(a, b))


@dataclass(frozen=True)
class NodeSet:
    """Attribute tuples whose empirical mass reached the threshold gamma."""

    schema: VariableSchema
    nodes: tuple[tuple[int, ...], ...]
    gamma: float

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(sorted(set(map(tuple, self.nodes)))))

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, a):
        return tuple(a) in set(self.nodes)


def build_high_prob_set(attribute_rows: np.ndarray, schema: VariableSchema, gamma: float) -> NodeSet:
    """Nodes whose empirical frequency in the rows is at least gamma."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    rows = np.asarray(attribute_rows, dtype=np.int64)
    uniq, counts = np.unique(rows, axis=0, return_counts=True)
    keep = counts / len(rows) >= gamma if gamma > 0 else counts > 0
    return NodeSet(schema=schema, nodes=tuple(map(tuple, uniq[keep])), gamma=gamma)


@dataclass(frozen=True)
class ClassPartition:
    """Pieces {V_y}, their Hamming geometry, and per-class neighborhoods.

    ``radius`` is the intrinsic radius floor((d_min - 1) / 2);
    ``neighborhood_radius`` is the radius the stored neighborhoods were built
    with (the intrinsic one unless overridden).
    """

    schema: VariableSchema
    gamma: float
    pieces: dict[int, tuple[tuple[int, ...], ...]]
    d_min: int
    radius: int
    neighborhood_radius: int
    neighborhoods: dict[int, tuple[tuple[int, ...], ...]]

    @property
    def all_nodes(self) -> tuple[tuple[int, ...], ...]:
        out = []
        for y in sorted(self.pieces):
            out.extend(self.pieces[y])
        return tuple(sorted(out))

    def piece_sizes(self) -> dict[int, int]:
        return {y: len(p) for y, p in self.pieces.items()}


def min_inter_class_distance(pieces: dict[int, tuple[tuple[int, ...], ...]], k: int) -> int:
    """Minimum pairwise Hamming distance across different nonempty pieces.

    With fewer than two nonempty pieces there is no constraint; k + 1 is
    returned so the radius covers the whole space.
    """
    classes = [y for y, p in pieces.items() if p]
    best = k + 1
    for i, yi in enumerate(classes):
        rows_i = np.asarray(pieces[yi], dtype=np.int64)
        for yj in classes[i + 1 :]:
            rows_j = np.asarray(pieces[yj], dtype=np.int64)
            dists = (rows_i[:, None, :] != rows_j[None, :, :]).sum(axis=2)
            best = min(best, int(dists.min()))
    return best


def _ball_mask(space: np.ndarray, piece: np.ndarray, r: int) -> np.ndarray:
    """Mask over the enumerated space of nodes within distance r of the piece."""
    if len(piece) == 0:
        return np.zeros(len(space), dtype=bool)
    best = np.full(len(space), np.iinfo(np.int64).max)
    for node in piece:
        best = np.minimum(best, (space != node[None, :]).sum(axis=1))
    return best <= r


def _neighborhood_enum(
    schema: VariableSchema, piece, other_v_nodes: set, r: int
) -> tuple[tuple[int, ...], ...]:
    space = schema.enumerate_attribute_space()
    mask = _ball_mask(space, np.asarray(piece, dtype=np.int64), r)
    out = []
    piece_set = set(map(tuple, piece))
    for row in space[mask]:
        node = tuple(int(v) for v in row)
        if node in piece_set or node not in other_v_nodes:
            out.append(node)
    return tuple(sorted(out))


def _neighborhood_bfs(
    schema: VariableSchema, piece, other_v_nodes: set, r: int
) -> tuple[tuple[int, ...], ...]:
    """Layer-by-layer Hamming ball expansion from the piece's nodes."""
    frontier = set(map(tuple, piece))
    seen = set(frontier)
    for _ in range(r):
        next_frontier = set()
        for node in frontier:
            for k, card in enumerate(schema.attribute_cardinalities):
                for v in range(card):
                    if v == node[k]:
                        continue
                    cand = node[:k] + (v,) + node[k + 1 :]
                    if cand not in seen:
                        seen.add(cand)
                        next_frontier.add(cand)
        frontier = next_frontier
    piece_set = set(map(tuple, piece))
    return tuple(sorted(n for n in seen if n in piece_set or n not in other_v_nodes))


def neighborhood(
    partition: ClassPartition,
    y: int,
    r: int,
    schema: VariableSchema | None = None,
    include_other_pieces: bool = False,
) -> tuple[tuple[int, ...], ...]:
    """V_y plus the nodes outside V within Hamming distance r of V_y.

    Uses full-space enumeration when the attribute space fits under the
    enumeration limit, otherwise breadth-first ball expansion; both routes
    produce identical sets.

    ``include_other_pieces`` keeps other classes' high-probability nodes in
    the ball instead of excluding them. Below d_min both variants coincide
    (no foreign node is that close); at radius K the inclusive ball covers
    the whole space, which is what the degenerate-radius ablation relies on.
    """
    schema = schema or partition.schema
    if not 0 <= r <= schema.n_attributes:
        raise ValueError(f"radius {r} outside [0, {schema.n_attributes}]")
    piece = partition.pieces.get(y, ())
    excluded = set() if include_other_pieces else set(partition.all_nodes) - set(piece)
    if schema.attribute_space_size <= ENUMERATION_LIMIT:
        return _neighborhood_enum(schema, piece, excluded, r)
    return _neighborhood_bfs(schema, piece, excluded, r)


def partition_by_class(
    v: NodeSet,
    attribute_rows: np.ndarray,
    class_labels: np.ndarray,
    radius: int | None = None,
) -> ClassPartition:
    """Assign every node of V to its empirical argmax class and build geometry.

    Ties break toward the smallest class index. Classes that receive no node
    trigger a warning, not an error. ``radius`` overrides the intrinsic
    radius used for the stored neighborhoods.
    """
    schema = v.schema
    rows = np.asarray(attribute_rows, dtype=np.int64)
    labels = np.asarray(class_labels, dtype=np.int64)
    if len(rows) != len(labels):
        raise LengthMismatch("attribute rows and class labels differ in length")
    node_ids = schema.node_indices(rows)
    pieces: dict[int, list[tuple[int, ...]]] = {y: [] for y in range(schema.class_cardinality)}
    for node in v.nodes:
        mask = node_ids == schema.node_index(node)
        if not mask.any():
            raise ValueError(f"node {node} from V does not occur in the data")
        counts = np.bincount(labels[mask], minlength=schema.class_cardinality)
        pieces[int(np.argmax(counts))].append(node)
    empty = [y for y, p in pieces.items() if not p]
    if empty:
        warnings.warn(f"classes {empty} received no node", stacklevel=2)
    frozen = {y: tuple(sorted(p)) for y, p in pieces.items()}
    d_min = min_inter_class_distance(frozen, schema.n_attributes)
    intrinsic = (d_min - 1) // 2
    used_r = intrinsic if radius is None else radius
    partial = ClassPartition(
        schema=schema,
        gamma=v.gamma,
        pieces=frozen,
        d_min=d_min,
        radius=intrinsic,
        neighborhood_radius=used_r,
        neighborhoods={},
    )
    hoods = {
        y: neighborhood(partial, y, used_r)
        for y in range(schema.class_cardinality)
    }
    return replace(partial, neighborhoods=hoods)


def with_radius(
    partition: ClassPartition, r: int, include_other_pieces: bool = False
) -> ClassPartition:
    """Same pieces, neighborhoods rebuilt for a caller-chosen radius."""
    base = replace(partition, neighborhood_radius=r, neighborhoods={})
    hoods = {
        y: neighborhood(base, y, r, include_other_pieces=include_other_pieces)
        for y in range(partition.schema.class_cardinality)
    }
    return replace(base, neighborhoods=hoods)


# -- serialization ------------------------------------------------------------

FORMAT_HEADER = "PART v1"


def _node_str(node) -> str:
    return ",".join(str(v) for v in node)


def partition_to_text(partition: ClassPartition) -> str:
    schema = partition.schema
    lines = [FORMAT_HEADER]
    lines.append(
        "schema "
        + str(schema.class_cardinality)
        + " "
        + " ".join(str(c) for c in schema.attribute_cardinalities)
    )
    lines.append(f"gamma {format(partition.gamma, '.17g')}")
    lines.append(f"radius {partition.neighborhood_radius}")
    for y in sorted(partition.pieces):
        lines.append(f"{y}: " + ";".join(_node_str(n) for n in partition.pieces[y]))
    return "\n".join(lines) + "\n"


def partition_from_text(text: str) -> ClassPartition:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != FORMAT_HEADER:
        raise ValueError(f"expected '{FORMAT_HEADER}' header")
    parts = lines[1].split()
    schema = VariableSchema(int(parts[1]), tuple(int(c) for c in parts[2:]))
    gamma = float(lines[2].split()[1])
    used_r = int(lines[3].split()[1])
    pieces: dict[int, tuple[tuple[int, ...], ...]] = {
        y: () for y in range(schema.class_cardinality)
    }
    for ln in lines[4:]:
        label, _, rest = ln.partition(":")
        y = int(label)
        nodes = []
        for chunk in rest.strip().split(";"):
            if chunk:
                nodes.append(tuple(int(v) for v in chunk.split(",")))
        pieces[y] = tuple(sorted(nodes))
    d_min = min_inter_class_distance(pieces, schema.n_attributes)
    intrinsic = (d_min - 1) // 2
    partial = ClassPartition(
        schema=schema,
        gamma=gamma,
        pieces=pieces,
        d_min=d_min,
        radius=intrinsic,
        neighborhood_radius=used_r,
        neighborhoods={},
    )
    hoods = {y: neighborhood(partial, y, used_r) for y in range(schema.class_cardinality)}
    return replace(partial, neighborhoods=hoods)


def save_partition(partition: ClassPartition, path) -> None:
    with open(path, "w") as fh:
        fh.write(partition_to_text(partition))


def load_partition(path) -> ClassPartition:
    with open(path) as fh:
        return partition_from_text(fh.read())
