"""The two inference procedures that combine recognizer and circuit outputs.

Node-wise integration mixes the circuit's class conditional at every attribute
tuple, weighted by the recognizer's product mass on that tuple. Class-wise
integration instead weights each class's summed high-probability conditionals
by the recognizer mass of that class's neighborhood, then normalizes by the
partition function.

Conditional-class vectors are input independent, so they are cached per
circuit; the query counters report logical counts regardless of caching
(the full attribute space for node-wise inference, |V| for class-wise).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import circuit as pc
from .errors import SpaceTooLarge
from .geometry import ClassPartition, with_radius
from .recognizer import AttributeProbs
from .schema import VariableSchema

MODE_NPC = "npc"
MODE_RNPC = "rnpc"

TINY_MASS = 1e-300


@dataclass
class QueryCounter:
    circuit_conditional_queries: int = 0
    recognizer_forwards: int = 0


@dataclass
class ClassScores:
    """Unnormalized scores, partition value, and the normalized distribution."""

    mode: str
    unnormalized: np.ndarray
    partition_value: float
    normalized: np.ndarray
    counter: QueryCounter = field(default_factory=QueryCounter)
    uniform_fallback: bool = False


def _as_prob_list(probs) -> list[np.ndarray]:
    if isinstance(probs, AttributeProbs):
        return [np.asarray(p, dtype=np.float64) for p in probs.probs]
    return [np.asarray(p, dtype=np.float64) for p in probs]


def node_mass_vector(probs, schema: VariableSchema) -> np.ndarray:
    """Product mass of every attribute tuple in lexicographic order."""
    mats = _as_prob_list(probs)
    out = mats[0]
    for m in mats[1:]:
        out = np.multiply.outer(out, m).reshape(-1)
    return out


def mass_of_nodes(probs, nodes: np.ndarray) -> float:
    """Sum of product masses over an explicit (m, K) node array."""
    mats = _as_prob_list(probs)
    nodes = np.asarray(nodes, dtype=np.int64)
    if len(nodes) == 0:
        return 0.0
    acc = mats[0][nodes[:, 0]]
    for k in range(1, len(mats)):
        acc = acc * mats[k][nodes[:, k]]
    return float(acc.sum())


class CircuitCache:
    """Input-independent circuit quantities shared across samples.

    Holds the dense conditional table over the attribute space (built lazily,
    subject to the enumeration cap) and per-partition class contribution
    matrices: row y-tilde holds the sum of P(Y | a) over a in V_{y-tilde}.
    """

    def __init__(self, circuit: pc.Circuit, cap: int = pc.DEFAULT_ENUMERATION_CAP):
        self.circuit = circuit
        self.cap = cap
        self._cond = None
        self._zero_mask = None
        self._contribs: dict[int, np.ndarray] = {}

    def conditional_table(self):
        if self._cond is None:
            self._cond, self._zero_mask = pc.conditional_table(self.circuit, self.cap)
        return self._cond, self._zero_mask

    def class_contribs(self, partition: ClassPartition) -> np.ndarray:
        key = id(partition)
        if key not in self._contribs:
            schema = self.circuit.schema
            out = np.zeros((schema.class_cardinality, schema.class_cardinality))
            for y, piece in partition.pieces.items():
                for node in piece:
                    try:
                        out[y] += pc.conditional_class(self.circuit, node)
                    except pc.ZeroEvidence:
                        out[y] += 1.0 / schema.class_cardinality
            self._contribs[key] = out
        return self._contribs[key]


def npc_infer(
    probs,
    circuit: pc.Circuit,
    cache: CircuitCache | None = None,
    cap: int = pc.DEFAULT_ENUMERATION_CAP,
) -> ClassScores:
    """Node-wise integration over the full attribute space.

    The output is a convex mixture of class conditionals, so it is already
    normalized; tuples on which the circuit has no mass contribute a uniform
    class vector.
    """
    schema = circuit.schema
    if schema.attribute_space_size > cap:
        raise SpaceTooLarge(
            f"{schema.attribute_space_size} attribute tuples exceed the enumeration cap {cap}"
        )
    cache = cache or CircuitCache(circuit, cap)
    cond, _ = cache.conditional_table()
    mass = node_mass_vector(probs, schema)
    scores = mass @ cond
    total = float(scores.sum())
    counter = QueryCounter(
        circuit_conditional_queries=schema.attribute_space_size, recognizer_forwards=1
    )
    return ClassScores(
        mode=MODE_NPC,
        unnormalized=scores,
        partition_value=1.0,
        normalized=scores / total,
        counter=counter,
    )


def neighborhood_masses(probs, partition: ClassPartition) -> np.ndarray:
    """Recognizer mass of every class neighborhood.

    Computed through the complement when that is smaller, which both saves
    work and makes a full-space neighborhood carry mass exactly one.
    """
    schema = partition.schema
    omega = schema.attribute_space_size
    masses = np.empty(schema.class_cardinality)
    space = None
    for y in range(schema.class_cardinality):
        hood = np.asarray(partition.neighborhoods[y], dtype=np.int64).reshape(
            -1, schema.n_attributes
        )
        if len(hood) <= omega - len(hood):
            masses[y] = mass_of_nodes(probs, hood)
        else:
            if space is None:
                space = schema.enumerate_attribute_space()
            in_hood = np.zeros(omega, dtype=bool)
            in_hood[schema.node_indices(hood)] = True
            masses[y] = 1.0 - mass_of_nodes(probs, space[~in_hood])
    return masses


def rnpc_infer(
    probs,
    circuit: pc.Circuit,
    partition: ClassPartition,
    r: int | None = None,
    cache: CircuitCache | None = None,
) -> ClassScores:
    """Class-wise integration over neighborhood masses and piece conditionals.

    With radius r, the score of class y is the sum over classes y-tilde of the
    neighborhood mass of y-tilde times the summed conditional probability of y
    over the high-probability nodes of y-tilde; the partition function is the
    mass-weighted sum of piece sizes. A numerically zero partition function
    falls back to the uniform distribution and is flagged.
    """
    if r is not None and r != partition.neighborhood_radius:
        partition = with_radius(partition, r)
    cache = cache or CircuitCache(circuit)
    contribs = cache.class_contribs(partition)
    masses = neighborhood_masses(probs, partition)
    sizes = np.asarray(
        [len(partition.pieces.get(y, ())) for y in range(partition.schema.class_cardinality)],
        dtype=np.float64,
    )
    unnorm = masses @ contribs
    z = float(masses @ sizes)
    counter = QueryCounter(
        circuit_conditional_queries=len(partition.all_nodes), recognizer_forwards=1
    )
    if z < TINY_MASS:
        n_classes = partition.schema.class_cardinality
        return ClassScores(
            mode=MODE_RNPC,
            unnormalized=unnorm,
            partition_value=z,
            normalized=np.full(n_classes, 1.0 / n_classes),
            counter=counter,
            uniform_fallback=True,
        )
    return ClassScores(
        mode=MODE_RNPC,
        unnormalized=unnorm,
        partition_value=z,
        normalized=unnorm / z,
        counter=counter,
    )


def predict(scores: ClassScores) -> int:
    """Argmax of the normalized distribution; ties break to the smallest index."""
    return int(np.argmax(scores.normalized))


# -- batched variants ----------------------------------------------------------


def npc_infer_batch(
    prob_mats: list[np.ndarray],
    circuit: pc.Circuit,
    cache: CircuitCache | None = None,
    cap: int = pc.DEFAULT_ENUMERATION_CAP,
    chunk: int = 256,
) -> np.ndarray:
    """Normalized node-wise scores for a batch; rows correspond to samples."""
    schema = circuit.schema
    if schema.attribute_space_size > cap:
        raise SpaceTooLarge(
            f"{schema.attribute_space_size} attribute tuples exceed the enumeration cap {cap}"
        )
    cache = cache or CircuitCache(circuit, cap)
    cond, _ = cache.conditional_table()
    n = prob_mats[0].shape[0]
    out = np.empty((n, schema.class_cardinality))
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        mass = prob_mats[0][sl]
        for m in prob_mats[1:]:
            mass = (mass[:, :, None] * m[sl][:, None, :]).reshape(mass.shape[0], -1)
        scores = mass @ cond
        out[sl] = scores / scores.sum(axis=1, keepdims=True)
    return out


def neighborhood_mass_batch(prob_mats: list[np.ndarray], partition: ClassPartition) -> np.ndarray:
    """Per-sample neighborhood masses, shape (n, |classes|)."""
    schema = partition.schema
    omega = schema.attribute_space_size
    n = prob_mats[0].shape[0]
    out = np.empty((n, schema.class_cardinality))
    space = None
    for y in range(schema.class_cardinality):
        hood = np.asarray(partition.neighborhoods[y], dtype=np.int64).reshape(
            -1, schema.n_attributes
        )
        if len(hood) <= omega - len(hood):
            acc = prob_mats[0][:, hood[:, 0]] if len(hood) else np.zeros((n, 0))
            for k in range(1, schema.n_attributes):
                acc = acc * prob_mats[k][:, hood[:, k]]
            out[:, y] = acc.sum(axis=1)
        else:
            if space is None:
                space = schema.enumerate_attribute_space()
            hood_ids = np.zeros(omega, dtype=bool)
            hood_ids[schema.node_indices(hood)] = True
            comp = space[~hood_ids]
            if len(comp) == 0:
                out[:, y] = 1.0
            else:
                acc = prob_mats[0][:, comp[:, 0]]
                for k in range(1, schema.n_attributes):
                    acc = acc * prob_mats[k][:, comp[:, k]]
                out[:, y] = 1.0 - acc.sum(axis=1)
    return out


def rnpc_infer_batch(
    prob_mats: list[np.ndarray],
    circuit: pc.Circuit,
    partition: ClassPartition,
    r: int | None = None,
    cache: CircuitCache | None = None,
):
    """Normalized class-wise scores for a batch plus the fallback mask."""
    if r is not None and r != partition.neighborhood_radius:
        partition = with_radius(partition, r)
    cache = cache or CircuitCache(circuit)
    contribs = cache.class_contribs(partition)
    masses = neighborhood_mass_batch(prob_mats, partition)
    sizes = np.asarray(
        [len(partition.pieces.get(y, ())) for y in range(partition.schema.class_cardinality)],
        dtype=np.float64,
    )
    unnorm = masses @ contribs
    z = masses @ sizes
    fallback = z < TINY_MASS
    out = np.empty_like(unnorm)
    ok = ~fallback
    out[ok] = unnorm[ok] / z[ok, None]
    out[fallback] = 1.0 / partition.schema.class_cardinality
    return out, fallback


def write_scores_csv(path, sample_ids, mode: str, predictions, truths, normalized) -> None:
    """Batch inference CSV: sample_id, mode, predicted, true, then the scores."""
    normalized = np.asarray(normalized)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["sample_id", "mode", "predicted", "true"]
            + [f"score_{i}" for i in range(normalized.shape[1])]
        )
        for sid, pred, true, row in zip(sample_ids, predictions, truths, normalized):
            writer.writerow(
                [sid, mode, int(pred), int(true)] + [format(v, ".17g") for v in row]
            )
